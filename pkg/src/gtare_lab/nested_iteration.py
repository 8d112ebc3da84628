"""Exact nested policy iteration for the game Riccati equation.

The outer loop accumulates ``P(k+1) = P(k) + Z(k)``; the inner loop is a
Kleinman-type policy iteration for player 2 on the system closed by the
current outer gains. This module is the reference every learner is checked
against, and its outer-evolution helpers are shared with the semi-model
learners (they never touch ``A``).
"""

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidL, MaxIterations, NotStable
from .exact_solvers import gtare_residual, solve_generalized_lyapunov, solve_l_model_are
from .game_model import (
    build_decoupled,
    checked_solve,
    is_mean_square_stable,
    r_of_p,
    s_of_p,
    spectral_abscissa,
)

log = logging.getLogger(__name__)

WARM_START_RULES = ("lagged", "anchored")


@dataclass
class OuterState:
    """Outer iterate ``k``; ``Acl`` is ``None`` when the drift matrix is unknown."""

    k: int
    P: np.ndarray
    M: np.ndarray
    Rk: np.ndarray
    K1: np.ndarray
    K2: np.ndarray
    Ccl: tuple
    Acl: np.ndarray = None

    @property
    def m1(self):
        return self.K1.shape[0]

    @property
    def R22(self):
        return self.Rk[self.m1:, self.m1:]


@dataclass
class InnerState:
    j: int
    Z: np.ndarray
    K2j: np.ndarray


@dataclass
class IterateRecord:
    """One policy-evaluation result: ``Z(k, j+1)`` computed with gain ``K2(k, j)``."""

    k: int
    j: int
    K2j: np.ndarray
    Z: np.ndarray
    abscissa: float = float("nan")


@dataclass
class SolverReport:
    algorithm: str
    P_final: np.ndarray
    outer_trace: list = field(default_factory=list)
    inner_traces: list = field(default_factory=list)
    certificate: object = None
    iterations: tuple = (0, 0)
    seed: int = None
    history: list = field(default_factory=list)
    outer_history: list = field(default_factory=list)
    outer_abscissa: list = field(default_factory=list)
    warm_starts: list = field(default_factory=list)
    diagnostics: list = field(default_factory=list)
    elapsed: float = 0.0
    converged: bool = False

    def to_dict(self):
        """JSON-ready summary; wall time is left out so reruns compare byte-for-byte."""
        return {
            "algorithm": self.algorithm,
            "converged": self.converged,
            "P_final": np.asarray(self.P_final).tolist(),
            "certificate": self.certificate.to_dict() if self.certificate else None,
            "iterations": {"outer": self.iterations[0], "inner_total": self.iterations[1]},
            "seed": self.seed,
            "outer_trace": [[k, d] for k, d in self.outer_trace],
            "inner_traces": [list(t) for t in self.inner_traces],
            "warm_starts": list(self.warm_starts),
            "P_history": [np.asarray(P).tolist() for P in self.outer_history],
        }


# -- shared building blocks -------------------------------------------------


def initial_gains(sys):
    """``[K1(0); K2(0)] = -R^{-1} S``; needs only the cost weights."""
    R = np.block([[sys.R11, sys.R12], [sys.R12.T, sys.R22]])
    S = np.vstack([sys.S1, sys.S2])
    K = -checked_solve(R, S, "R(0)")
    M = sys.Q - S.T @ np.linalg.solve(R, S)
    return K, 0.5 * (M + M.T), 0.5 * (R + R.T)


def _closed_loop_noise(sys, K):
    m1 = sys.B1.shape[1]
    return tuple(c + d1 @ K[:m1] + d2 @ K[m1:] for c, d1, d2 in zip(sys.C, sys.D1, sys.D2))


def _closed_loop_drift(sys, K):
    A = getattr(sys, "A", None)
    if A is None:
        return None
    m1 = sys.B1.shape[1]
    return A + sys.B1 @ K[:m1] + sys.B2 @ K[m1:]


def make_outer(sys, k, P, K, M, Rk):
    m1 = sys.B1.shape[1]
    return OuterState(
        k=k, P=P, M=M, Rk=Rk, K1=K[:m1], K2=K[m1:],
        Ccl=_closed_loop_noise(sys, K), Acl=_closed_loop_drift(sys, K),
    )


def init_outer(sys, L=None, validate=True):
    """Outer state at ``k = 0``: ``P = 0``, ``R(0) = R``, ``M = Q - S'R^{-1}S``."""
    n, m2 = sys.B2.shape
    L = np.zeros((m2, n)) if L is None else np.atleast_2d(np.asarray(L, dtype=float))
    if validate:
        result = validate_l(sys, L)
        if result.verdict != "InA":
            raise InvalidL(f"initial gain L is not admissible: {result.reason}")
    K, M, R = initial_gains(sys)
    return make_outer(sys, 0, np.zeros((n, n)), K, M, R)


def improve_gain(sys, outer, Z):
    """Player-2 policy improvement given a policy-evaluation result ``Z``."""
    H = outer.R22.copy()
    G = sys.B2.T @ Z
    for c, d2 in zip(outer.Ccl, sys.D2):
        H = H + d2.T @ Z @ d2
        G = G + d2.T @ Z @ c
    return -checked_solve(0.5 * (H + H.T), G, "R22(k) + sum D2'ZD2")


def inner_weight(outer, K2j):
    W = outer.M + K2j.T @ outer.R22 @ K2j
    return 0.5 * (W + W.T)


def inner_loop(outer, sys, K2j):
    """Closed loop ``(A(k) + B2 K2j, C(k) + D2 K2j)``; drift is ``None`` if unknown."""
    Ccl = tuple(c + d2 @ K2j for c, d2 in zip(outer.Ccl, sys.D2))
    Acl = None if outer.Acl is None else outer.Acl + sys.B2 @ K2j
    return Acl, Ccl


def inner_start(rule, k, L, K2_0, K2_prev, K2_k):
    """Initial inner gain ``K2(k, 0)``.

    ``lagged``: ``L`` at ``k = 0`` and ``K2(0) + L - K2(k-1)`` afterwards.
    ``anchored``: ``L - K2(k) + K2(0)``, which keeps player 2's total gain at
    ``K2(0) + L`` for every ``k``.
    """
    if k == 0:
        return np.array(L, dtype=float)
    if rule == "lagged":
        return K2_0 + L - K2_prev
    if rule == "anchored":
        return L - K2_k + K2_0
    raise ValueError(f"unknown warm-start rule {rule!r}")


def evolve_outer(sys, outer, Zk):
    """Advance the outer state with the converged inner increment ``Zk``.

    Uses only ``B``, ``C``, ``D`` and the cost weights, so it also serves the
    semi-model learners.
    """
    m1 = outer.m1
    P_next = outer.P + Zk
    P_next = 0.5 * (P_next + P_next.T)
    R_next = r_of_p(sys, P_next)
    S_next = s_of_p(sys, P_next)
    B = np.hstack([sys.B1, sys.B2])
    N = B.T @ Zk
    for c, d1, d2 in zip(outer.Ccl, sys.D1, sys.D2):
        N = N + np.hstack([d1, d2]).T @ Zk @ c
    K_next = -checked_solve(R_next, S_next, "R(k+1)")
    M_next = schur_m(R_next, N[:m1], N[m1:])
    return make_outer(sys, outer.k + 1, P_next, K_next, M_next, R_next)


def schur_m(R, N1, N2):
    """``-(N1 - R12 R22^{-1} N2)' Rsharp^{-1} (N1 - R12 R22^{-1} N2)``."""
    m1 = N1.shape[0]
    R11, R12, R22 = R[:m1, :m1], R[:m1, m1:], R[m1:, m1:]
    R22_inv_R21 = checked_solve(R22, R12.T, "R22(k+1)")
    sharp = R11 - R12 @ R22_inv_R21
    G = N1 - R12 @ checked_solve(R22, N2, "R22(k+1)")
    M = -G.T @ checked_solve(sharp, G, "Rsharp(k+1)")
    return 0.5 * (M + M.T)


# -- the exact algorithm ------------------------------------------------


def inner_step(sys, outer, inner):
    """One policy evaluation plus improvement with full model knowledge."""
    Acl, Ccl = inner_loop(outer, sys, inner.K2j)
    Z = solve_generalized_lyapunov(Acl, Ccl, inner_weight(outer, inner.K2j))
    return InnerState(j=inner.j + 1, Z=Z, K2j=improve_gain(sys, outer, Z))


def _choose_start(model, outer, rule, L, K2_0, K2_prev):
    K2j = inner_start(rule, outer.k, L, K2_0, K2_prev, outer.K2)
    if is_mean_square_stable(*inner_loop(outer, model, K2j)):
        return K2j, rule
    if rule == "lagged" and outer.k > 0:
        alt = inner_start("anchored", outer.k, L, K2_0, K2_prev, outer.K2)
        if is_mean_square_stable(*inner_loop(outer, model, alt)):
            log.info("k=%d: lagged warm start not stabilizing, using anchored form", outer.k)
            return alt, "anchored"
    raise NotStable(f"no stabilizing inner warm start at k={outer.k}")


@dataclass
class LValidation:
    verdict: str
    reason: str
    AL_stable: bool
    AL_abscissa: float
    inner_converged: bool = False
    sign_max_eig: float = float("nan")
    P_tilde: np.ndarray = None

    def to_dict(self):
        return {
            "verdict": self.verdict,
            "reason": self.reason,
            "A_L_mean_square_stable": self.AL_stable,
            "A_L_spectral_abscissa": self.AL_abscissa,
            "inner_loop_converged": self.inner_converged,
            "sign_condition_max_eig": self.sign_max_eig,
            "P_tilde": None if self.P_tilde is None else self.P_tilde.tolist(),
        }


def validate_l(model, L, tol=1e-12, max_iter=500):
    """Operational membership test for the admissible set of initial gains."""
    dec = build_decoupled(model, L)
    absc = spectral_abscissa(dec.AL, dec.CL)
    if absc >= 0.0:
        return LValidation("NotInA", "(A_L, C_lL) is not mean-square stable", False, absc)
    try:
        sol = solve_l_model_are(model, L, tol=tol, max_iter=max_iter)
    except (NotStable, Exception) as exc:  # noqa: BLE001 - any solver failure is inconclusive
        return LValidation("Inconclusive", f"player-1 iteration failed: {exc}", True, absc)
    base = dict(AL_stable=True, AL_abscissa=absc, inner_converged=sol.converged,
                sign_max_eig=sol.sign_max_eig, P_tilde=sol.P)
    if not sol.converged or sol.residual > 1e-8 * max(1.0, np.linalg.norm(sol.P)):
        return LValidation("Inconclusive", "player-1 iteration did not converge", **base)
    if not sol.stabilizing:
        return LValidation("Inconclusive", "converged solution is not stabilizing", **base)
    if sol.sign_max_eig >= 0.0:
        return LValidation("NotInA", "sign condition R11 + sum D1'PD1 < 0 fails", **base)
    return LValidation("InA", "all membership conditions hold", **base)


def run_nested_iteration(model, L=None, tol=1e-10, max_outer=200, max_inner=500,
                         warm_start="lagged", validate=True):
    """Exact nested iteration; returns a :class:`SolverReport`."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    if warm_start not in WARM_START_RULES:
        raise ValueError(f"warm_start must be one of {WARM_START_RULES}")
    t0 = time.perf_counter()
    n, m2 = model.n, model.m2
    L = np.zeros((m2, n)) if L is None else np.atleast_2d(np.asarray(L, dtype=float))
    outer = init_outer(model, L, validate=validate)
    report = SolverReport(algorithm="nested", P_final=outer.P.copy())
    report.outer_history.append(outer.P.copy())
    K2_0 = outer.K2.copy()
    K2_prev = K2_0
    total_inner = 0
    for _ in range(max_outer):
        report.outer_abscissa.append(spectral_abscissa(outer.Acl, outer.Ccl))
        K2j, used = _choose_start(model, outer, warm_start, L, K2_0, K2_prev)
        report.warm_starts.append(used)
        inner = InnerState(j=0, Z=None, K2j=K2j)
        trace = []
        Z_prev = None
        for _ in range(max_inner):
            absc = spectral_abscissa(*inner_loop(outer, model, inner.K2j))
            K2_used = inner.K2j
            inner = inner_step(model, outer, inner)
            total_inner += 1
            report.history.append(IterateRecord(outer.k, inner.j - 1, K2_used, inner.Z, absc))
            if Z_prev is not None:
                dz = float(np.linalg.norm(inner.Z - Z_prev, "fro"))
                trace.append(dz)
                if dz < tol:
                    break
            Z_prev = inner.Z
        else:
            report.inner_traces.append(trace)
            report.P_final = outer.P.copy()
            report.iterations = (outer.k, total_inner)
            report.elapsed = time.perf_counter() - t0
            raise MaxIterations(f"inner loop hit max_inner={max_inner} at k={outer.k}", report)
        report.inner_traces.append(trace)
        K2_prev = outer.K2
        outer = evolve_outer(model, outer, inner.Z)
        dP = float(np.linalg.norm(inner.Z, "fro"))
        report.outer_trace.append((outer.k, dP))
        report.outer_history.append(outer.P.copy())
        report.P_final = outer.P.copy()
        if dP < tol:
            break
    else:
        report.iterations = (outer.k, total_inner)
        report.elapsed = time.perf_counter() - t0
        raise MaxIterations(f"outer loop hit max_outer={max_outer}", report)
    report.outer_abscissa.append(spectral_abscissa(outer.Acl, outer.Ccl))
    report.iterations = (outer.k, total_inner)
    report.certificate = gtare_residual(model, report.P_final)
    report.converged = True
    report.elapsed = time.perf_counter() - t0
    return report
