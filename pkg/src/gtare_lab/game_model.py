"""Problem data for the zero-sum LQ stochastic game and P-dependent blocks.

The controlled state equation is

    dX = (A X + B1 u1 + B2 u2) dt + sum_l (C_l X + D1_l u1 + D2_l u2) dw_l

and the shared quadratic cost has weight
``[[Q, S1', S2'], [S1, R11, R12], [S2, R12', R22]]``. Player 1 maximizes,
player 2 minimizes.
"""

import enum
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import InvalidInput, SingularWeight
from .symtools import symmetrize

COND_LIMIT = 1e12


def _mat(value, rows, cols, name):
    M = np.array(value, dtype=float)
    if M.ndim == 0 or M.ndim == 1:
        M = M.reshape(rows, cols)
    if M.shape != (rows, cols):
        raise InvalidInput(f"{name} must be {rows}x{cols}, got {M.shape}")
    if not np.all(np.isfinite(M)):
        raise InvalidInput(f"{name} has non-finite entries")
    M.setflags(write=False)
    return M


def _mat_list(values, count, rows, cols, name):
    if len(values) != count:
        raise InvalidInput(f"{name} must hold {count} matrices, got {len(values)}")
    return tuple(_mat(v, rows, cols, f"{name}[{l}]") for l, v in enumerate(values))


def checked_solve(M, rhs, name="weight"):
    """Solve ``M X = rhs``; raise :class:`SingularWeight` if ``M`` is near singular."""
    M = np.atleast_2d(M)
    if M.size and np.linalg.cond(M) > COND_LIMIT:
        raise SingularWeight(f"{name} is singular (condition number > {COND_LIMIT:g})")
    return np.linalg.solve(M, rhs)


@dataclass(frozen=True)
class GameModel:
    """Immutable dynamics and cost weights; ``R21`` is always ``R12'``."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C: tuple
    D1: tuple
    D2: tuple
    Q: np.ndarray
    S1: np.ndarray
    S2: np.ndarray
    R11: np.ndarray
    R12: np.ndarray
    R22: np.ndarray

    @classmethod
    def create(cls, A, B1, B2, C, D1, D2, Q, S1, S2, R11, R12, R22,
               require_r22_pd=True):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        n = A.shape[0]
        A = _mat(A, n, n, "A")
        B1 = np.asarray(B1, dtype=float)
        B2 = np.asarray(B2, dtype=float)
        m1 = B1.reshape(n, -1).shape[1]
        m2 = B2.reshape(n, -1).shape[1]
        r = len(C)
        Q = _mat(Q, n, n, "Q")
        R11 = _mat(R11, m1, m1, "R11")
        R22 = _mat(R22, m2, m2, "R22")
        for M, name in ((Q, "Q"), (R11, "R11"), (R22, "R22")):
            symmetrize(M, name=name)
        model = cls(
            A=A,
            B1=_mat(B1, n, m1, "B1"),
            B2=_mat(B2, n, m2, "B2"),
            C=_mat_list(C, r, n, n, "C"),
            D1=_mat_list(D1, r, n, m1, "D1"),
            D2=_mat_list(D2, r, n, m2, "D2"),
            Q=Q,
            S1=_mat(S1, m1, n, "S1"),
            S2=_mat(S2, m2, n, "S2"),
            R11=R11,
            R12=_mat(R12, m1, m2, "R12"),
            R22=R22,
        )
        if require_r22_pd and np.linalg.eigvalsh(R22).min() <= 0.0:
            raise InvalidInput("R22 must be positive definite")
        return model

    @property
    def dims(self):
        return self.n, self.m1, self.m2, self.r

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m1(self):
        return self.B1.shape[1]

    @property
    def m2(self):
        return self.B2.shape[1]

    @property
    def r(self):
        return len(self.C)

    @property
    def B(self):
        return np.hstack([self.B1, self.B2])

    @property
    def D(self):
        return tuple(np.hstack([d1, d2]) for d1, d2 in zip(self.D1, self.D2))

    @property
    def S(self):
        return np.vstack([self.S1, self.S2])

    @property
    def R(self):
        return np.block([[self.R11, self.R12], [self.R12.T, self.R22]])

    @property
    def W(self):
        """Full cost weight on ``(x, u1, u2)``."""
        S = self.S
        return np.block([[self.Q, S.T], [S, self.R]])

    # -- serialization -------------------------------------------------

    def to_dict(self):
        n, m1, m2, r = self.dims
        return {
            "n": n, "m1": m1, "m2": m2, "r": r,
            "A": self.A.tolist(), "B1": self.B1.tolist(), "B2": self.B2.tolist(),
            "C": [c.tolist() for c in self.C],
            "D1": [d.tolist() for d in self.D1],
            "D2": [d.tolist() for d in self.D2],
            "Q": self.Q.tolist(), "S1": self.S1.tolist(), "S2": self.S2.tolist(),
            "R11": self.R11.tolist(), "R12": self.R12.tolist(), "R22": self.R22.tolist(),
        }

    @classmethod
    def from_dict(cls, data):
        required = ("n", "m1", "m2", "r", "A", "B1", "B2", "C", "D1", "D2",
                    "Q", "S1", "S2", "R11", "R12", "R22")
        missing = [key for key in required if key not in data]
        if missing:
            raise InvalidInput(f"model file is missing keys: {', '.join(missing)}")
        n, m1, m2, r = (int(data[key]) for key in ("n", "m1", "m2", "r"))
        model = cls.create(
            A=_mat(data["A"], n, n, "A"),
            B1=_mat(data["B1"], n, m1, "B1"),
            B2=_mat(data["B2"], n, m2, "B2"),
            C=data["C"], D1=data["D1"], D2=data["D2"],
            Q=data["Q"], S1=data["S1"], S2=data["S2"],
            R11=data["R11"], R12=data["R12"], R22=data["R22"],
        )
        if model.r != r:
            raise InvalidInput(f"declared r={r} but {model.r} noise channels given")
        return model

    @classmethod
    def from_json(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n", encoding="utf-8")


BUILTIN_MODELS = {"two_state": "two_state.json", "stm": "stm.json"}


def load_builtin(name):
    """Load one of the models shipped with the package (``two_state``, ``stm``)."""
    fname = BUILTIN_MODELS[name]
    text = resources.files("gtare_lab").joinpath("data", fname).read_text(encoding="utf-8")
    return GameModel.from_dict(json.loads(text))


# -- P-dependent blocks ---------------------------------------------------


@dataclass(frozen=True)
class PBlocks:
    QP: np.ndarray
    SP: np.ndarray
    RP: np.ndarray

    def split_r(self, m1):
        RP = self.RP
        return RP[:m1, :m1], RP[:m1, m1:], RP[m1:, m1:]


def s_of_p(sys, P):
    """``S(P) = B'P + sum D_l' P C_l + S`` for any object carrying B/C/D/S blocks."""
    B = np.hstack([sys.B1, sys.B2])
    S = np.vstack([sys.S1, sys.S2])
    out = B.T @ P + S
    for c, d1, d2 in zip(sys.C, sys.D1, sys.D2):
        out = out + np.hstack([d1, d2]).T @ P @ c
    return out


def r_of_p(sys, P):
    """``R(P) = R + sum D_l' P D_l`` in 2x2 block form."""
    R = np.block([[sys.R11, sys.R12], [sys.R12.T, sys.R22]])
    for d1, d2 in zip(sys.D1, sys.D2):
        d = np.hstack([d1, d2])
        R = R + d.T @ P @ d
    return 0.5 * (R + R.T)


def _check_p(model, P):
    P = symmetrize(P, tol=1e-9, name="P")
    if P.shape != (model.n, model.n):
        raise InvalidInput(f"P must be {model.n}x{model.n}, got {P.shape}")
    return P


def p_blocks(model, P):
    P = _check_p(model, P)
    QP = P @ model.A + model.A.T @ P + model.Q
    for c in model.C:
        QP = QP + c.T @ P @ c
    return PBlocks(QP=0.5 * (QP + QP.T), SP=s_of_p(model, P), RP=r_of_p(model, P))


def gain_of_p(model, P):
    """Return ``(K1, K2)`` with ``[K1; K2] = -R(P)^{-1} S(P)``."""
    P = _check_p(model, P)
    K = -checked_solve(r_of_p(model, P), s_of_p(model, P), "R(P)")
    return K[: model.m1], K[model.m1:]


def _check_gains(model, K1, K2):
    K1 = np.atleast_2d(np.asarray(K1, dtype=float))
    K2 = np.atleast_2d(np.asarray(K2, dtype=float))
    if K1.shape != (model.m1, model.n) or K2.shape != (model.m2, model.n):
        raise InvalidInput(
            f"gains must be {model.m1}x{model.n} and {model.m2}x{model.n}, "
            f"got {K1.shape} and {K2.shape}")
    return K1, K2


def closed_loop(model, K1, K2):
    K1, K2 = _check_gains(model, K1, K2)
    Acl = model.A + model.B1 @ K1 + model.B2 @ K2
    Ccl = tuple(c + d1 @ K1 + d2 @ K2 for c, d1, d2 in zip(model.C, model.D1, model.D2))
    return Acl, Ccl


def lyapunov_operator(Acl, Ccl):
    """Matrix of ``Z -> Z Acl + Acl' Z + sum Ccl' Z Ccl`` acting on ``vec(Z)``."""
    Acl = np.atleast_2d(Acl)
    n = Acl.shape[0]
    eye = np.eye(n)
    L = np.kron(eye, Acl.T) + np.kron(Acl.T, eye)
    for c in Ccl:
        c = np.atleast_2d(c)
        L = L + np.kron(c.T, c.T)
    return L


def spectral_abscissa(Acl, Ccl):
    return float(np.max(np.linalg.eigvals(lyapunov_operator(Acl, Ccl)).real))


def is_mean_square_stable(Acl, Ccl, margin=0.0):
    return spectral_abscissa(Acl, Ccl) < -margin


def is_stabilizer(model, K1, K2, margin=0.0):
    return is_mean_square_stable(*closed_loop(model, K1, K2), margin=margin)


# -- decoupled single-player model ----------------------------------------


@dataclass(frozen=True)
class DecoupledModel:
    """Player-1 problem obtained by fixing ``u2 = (K2(0) + L) x``."""

    AL: np.ndarray
    CL: tuple
    QL: np.ndarray
    SL: np.ndarray
    R11: np.ndarray
    B1: np.ndarray
    D1: tuple


def build_decoupled(model, L):
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if L.shape != (model.m2, model.n):
        raise InvalidInput(f"L must be {model.m2}x{model.n}, got {L.shape}")
    R0, S0 = model.R, model.S
    K0 = -checked_solve(R0, S0, "R(0)")
    K1_0, K2_0 = K0[: model.m1], K0[model.m1:]
    AL, CL = closed_loop(model, K1_0, K2_0 + L)
    QL = model.Q - S0.T @ np.linalg.solve(R0, S0) + L.T @ model.R22 @ L
    return DecoupledModel(
        AL=AL, CL=CL, QL=0.5 * (QL + QL.T), SL=model.R12 @ L,
        R11=model.R11, B1=model.B1, D1=model.D1,
    )


class Detectability(enum.Enum):
    DETECTABLE = "Detectable"
    UNKNOWN = "Unknown"


def detectability_heuristic(M, Acl, Ccl, tol=1e-10):
    """Sufficient check that ``[M^{1/2}, 0, ...; Acl, Ccl]`` is stochastically detectable.

    Never claims non-detectability: a full-rank output can always be fed
    back strongly enough, and a stable loop needs no feedback at all.
    """
    M = symmetrize(M, tol=1e-9, name="M")
    eigs = np.linalg.eigvalsh(M)
    if eigs.min() < -tol:
        raise InvalidInput("M must be positive semidefinite")
    if eigs.min() > tol * max(1.0, eigs.max()):
        return Detectability.DETECTABLE
    if is_mean_square_stable(Acl, Ccl):
        return Detectability.DETECTABLE
    return Detectability.UNKNOWN
