"""Generalized Lyapunov solves and residual certificates."""

from dataclasses import asdict, dataclass

import numpy as np

from .errors import IllConditioned, InvalidInput, NotStable, SingularWeight
from .game_model import (
    build_decoupled,
    checked_solve,
    closed_loop,
    gain_of_p,
    is_mean_square_stable,
    is_stabilizer,
    lyapunov_operator,
    p_blocks,
    spectral_abscissa,
)
from .symtools import DEFAULT_RANK_TOL, duplication_matrix, numeric_rank, smat, svec, symmetrize

LYAP_COND_LIMIT = 1e14


def solve_generalized_lyapunov(Acl, Ccl, W):
    """Solve ``Z Acl + Acl' Z + sum_l Ccl_l' Z Ccl_l + W = 0`` for symmetric ``Z``.

    The Kronecker operator is compressed to svec coordinates, so the linear
    system has ``n(n+1)/2`` unknowns and the result is symmetric by
    construction.
    """
    Acl = np.atleast_2d(np.asarray(Acl, dtype=float))
    n = Acl.shape[0]
    W = symmetrize(W, tol=1e-9, name="W")
    if W.shape != (n, n):
        raise InvalidInput(f"W must be {n}x{n}, got {W.shape}")
    Ccl = [np.atleast_2d(c) for c in Ccl]
    op = lyapunov_operator(Acl, Ccl)
    abscissa = float(np.max(np.linalg.eigvals(op).real))
    if abscissa >= 0.0:
        raise NotStable(f"closed loop is not mean-square stable (abscissa {abscissa:.3e})")
    T = duplication_matrix(n)
    T_pinv = np.linalg.pinv(T)
    compressed = T_pinv @ op @ T
    if np.linalg.cond(compressed) > LYAP_COND_LIMIT:
        raise IllConditioned("Lyapunov operator is numerically singular")
    z = np.linalg.solve(compressed, -svec(W))
    return smat(z, n)


def lyapunov_residual(Acl, Ccl, Z, W):
    R = Z @ Acl + Acl.T @ Z + W
    for c in Ccl:
        R = R + c.T @ Z @ c
    return float(np.linalg.norm(R, "fro"))


@dataclass(frozen=True)
class GtareCertificate:
    residual_norm: float
    r11_max_eig: float
    r22_min_eig: float
    range_ok: bool
    stabilizing: bool
    spectral_abscissa: float
    tol: float = 1e-8

    @property
    def passes(self):
        return (
            self.residual_norm < self.tol
            and self.r11_max_eig <= self.tol
            and self.r22_min_eig >= -self.tol
            and self.range_ok
            and self.stabilizing
        )

    def to_dict(self):
        out = asdict(self)
        out["passes"] = self.passes
        return out


def gtare_residual(model, P, tol=1e-8, rank_tol=DEFAULT_RANK_TOL):
    """Evaluate the three GTARE conditions and the stabilizing property at ``P``."""
    blocks = p_blocks(model, P)
    RP, SP = blocks.RP, blocks.SP
    resid = blocks.QP - SP.T @ checked_solve(RP, SP, "R(P)")
    m1 = model.m1
    r11, _, r22 = blocks.split_r(m1)
    range_ok = numeric_rank(np.hstack([RP, SP]), rank_tol) == numeric_rank(RP, rank_tol)
    K1, K2 = gain_of_p(model, P)
    Acl, Ccl = closed_loop(model, K1, K2)
    return GtareCertificate(
        residual_norm=float(np.linalg.norm(resid, "fro")),
        r11_max_eig=float(np.linalg.eigvalsh(r11).max()),
        r22_min_eig=float(np.linalg.eigvalsh(r22).min()),
        range_ok=bool(range_ok),
        stabilizing=bool(is_stabilizer(model, K1, K2)),
        spectral_abscissa=spectral_abscissa(Acl, Ccl),
        tol=tol,
    )


def _l_model_terms(dec, P):
    PA = P @ dec.AL + dec.AL.T @ P + dec.QL
    G = dec.B1.T @ P + dec.SL
    H = dec.R11.copy()
    for c, d1 in zip(dec.CL, dec.D1):
        PA = PA + c.T @ P @ c
        G = G + d1.T @ P @ c
        H = H + d1.T @ P @ d1
    return PA, G, 0.5 * (H + H.T)


def are_l_residual(model, L, P):
    """Frobenius norm of the decoupled player-1 Riccati expression at ``P``."""
    dec = build_decoupled(model, L)
    P = symmetrize(P, tol=1e-9, name="P")
    if P.shape != dec.AL.shape:
        raise InvalidInput(f"P must be {dec.AL.shape}, got {P.shape}")
    PA, G, H = _l_model_terms(dec, P)
    return float(np.linalg.norm(PA - G.T @ checked_solve(H, G, "R11 + sum D1'PD1"), "fro"))


@dataclass
class LModelSolution:
    P: np.ndarray
    converged: bool
    iterations: int
    residual: float
    sign_max_eig: float
    stabilizing: bool


def solve_l_model_are(model, L, tol=1e-12, max_iter=500):
    """Policy iteration for player 1 on the decoupled model, starting from ``v1 = 0``.

    Requires ``(A_L, C_lL)`` to be mean-square stable; the result is the
    stabilizing solution when the iteration converges with a stable loop.
    """
    dec = build_decoupled(model, L)
    n, m1 = model.n, model.m1
    F = np.zeros((m1, n))
    P_prev = None
    P = np.zeros((n, n))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        Acl = dec.AL + dec.B1 @ F
        Ccl = [c + d1 @ F for c, d1 in zip(dec.CL, dec.D1)]
        W = dec.QL + dec.SL.T @ F + F.T @ dec.SL + F.T @ dec.R11 @ F
        P = solve_generalized_lyapunov(Acl, Ccl, W)
        _, G, H = _l_model_terms(dec, P)
        F = -checked_solve(H, G, "R11 + sum D1'PD1")
        if P_prev is not None and np.linalg.norm(P - P_prev, "fro") < tol * max(1.0, np.linalg.norm(P)):
            converged = True
            break
        P_prev = P
    PA, G, H = _l_model_terms(dec, P)
    try:
        F = -checked_solve(H, G, "R11 + sum D1'PD1")
        residual = float(np.linalg.norm(PA + G.T @ F, "fro"))
        stabilizing = is_mean_square_stable(
            dec.AL + dec.B1 @ F, [c + d1 @ F for c, d1 in zip(dec.CL, dec.D1)])
    except SingularWeight:
        residual, stabilizing = float("inf"), False
    return LModelSolution(
        P=P, converged=converged, iterations=it, residual=residual,
        sign_max_eig=float(np.linalg.eigvalsh(H).max()), stabilizing=stabilizing,
    )
