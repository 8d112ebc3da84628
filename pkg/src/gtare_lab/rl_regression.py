"""Least-squares policy evaluation from sampling matrices.

All three systems share ``Phi @ theta = Theta`` with
``Theta = -I_xx vec(M + K2j' R22 K2j)``; they differ in which unknown
segments ``theta`` carries. Unknown definitions, with ``C(k)`` the noise
matrices closed by the current outer gains:

* ``Z``   policy-evaluation increment
* ``S_i = B_i' Z + sum D_i' Z C(k)``
* ``D11 = sum D1' Z D1``, ``D22 = sum D2' Z D2``, ``D12 = sum D1' Z D2``
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import InvalidBatch, InvalidConfig, RankDeficient
from .sde_lab import MODELFREE_FIELDS, OFFPOLICY_FIELDS, ONPOLICY_FIELDS
from .symtools import (
    DEFAULT_RANK_TOL,
    bar_map,
    commutation_matrix,
    duplication_matrix,
    numeric_rank,
    sdim,
    singular_values,
    smat,
    unvec,
    vec,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("onpolicy", "offpolicy", "modelfree")


@dataclass(frozen=True)
class Segment:
    name: str
    width: int
    shape: tuple
    symmetric: bool


@dataclass
class RegressionSystem:
    phi: np.ndarray
    theta: np.ndarray
    layout: tuple

    def __post_init__(self):
        if self.phi.shape[1] != sum(seg.width for seg in self.layout):
            raise InvalidConfig("layout widths do not add up to the column count")
        if self.phi.shape[0] != self.theta.shape[0]:
            raise InvalidConfig("phi and theta have different row counts")

    @property
    def d(self):
        return self.phi.shape[1]

    def pack(self, values):
        """Stack named matrices into the unknown vector (inverse of unpacking)."""
        parts = []
        for seg in self.layout:
            M = np.atleast_2d(values[seg.name])
            parts.append(smat_inverse(M) if seg.symmetric else vec(M))
        return np.concatenate(parts)

    def unpack(self, x):
        out, pos = {}, 0
        for seg in self.layout:
            chunk = x[pos:pos + seg.width]
            pos += seg.width
            if seg.symmetric:
                M = smat(chunk, seg.shape[0])
                out[seg.name] = 0.5 * (M + M.T)
            else:
                out[seg.name] = unvec(chunk, *seg.shape)
        return out

    def relative_residual(self, values):
        x = self.pack(values)
        scale = max(np.linalg.norm(self.theta), 1e-300)
        return float(np.linalg.norm(self.phi @ x - self.theta) / scale)


def smat_inverse(M):
    """svec without the symmetry check (inputs here are symmetric by construction)."""
    n = M.shape[0]
    rows, cols = np.triu_indices(n)
    S = 0.5 * (M + M.T)
    v = S[rows, cols].copy()
    v[rows != cols] *= 2.0
    return v


@dataclass
class RankReport:
    required: int
    achieved: int
    singular_values: np.ndarray
    satisfied: bool

    @classmethod
    def of(cls, matrix, required, rel_tol=DEFAULT_RANK_TOL):
        achieved = numeric_rank(matrix, rel_tol)
        return cls(required=required, achieved=achieved,
                   singular_values=singular_values(matrix), satisfied=achieved >= required)

    @property
    def condition(self):
        sv = self.singular_values
        if sv.size == 0 or sv[-1] == 0.0:
            return float("inf")
        return float(sv[0] / sv[-1])

    def to_dict(self):
        return {"required": self.required, "achieved": self.achieved,
                "satisfied": self.satisfied, "condition": self.condition}


def _layout(n, m1, m2, names):
    table = {
        "Z": Segment("Z", sdim(n), (n, n), True),
        "S1": Segment("S1", m1 * n, (m1, n), False),
        "S2": Segment("S2", m2 * n, (m2, n), False),
        "D11": Segment("D11", sdim(m1), (m1, m1), True),
        "D22": Segment("D22", sdim(m2), (m2, m2), True),
        "D12": Segment("D12", m1 * m2, (m1, m2), False),
    }
    return tuple(table[nm] for nm in names)


def _dims(batch):
    return batch.dims


def _theta(batch, M_k, R22_k, K2j):
    W = M_k + K2j.T @ R22_k @ K2j
    return -batch.get("I_xx") @ vec(0.5 * (W + W.T))


def _ensure(batch, fields):
    batch.require(*fields)
    for nm in fields:
        if not np.all(np.isfinite(batch.get(nm))):
            raise InvalidBatch(f"field {nm} has non-finite entries")


def build_onpolicy_system(batch, M_k, R22_k, K2j):
    _ensure(batch, ONPOLICY_FIELDS)
    n, m1, m2 = _dims(batch)
    return RegressionSystem(batch.get("delta_xx").copy(), _theta(batch, M_k, R22_k, K2j),
                            _layout(n, m1, m2, ("Z",)))


def solve_onpolicy_pe(batch, M_k, R22_k, K2j, rank_tol=DEFAULT_RANK_TOL):
    """Policy evaluation from an on-policy batch; returns symmetric ``Z``."""
    system = build_onpolicy_system(batch, M_k, R22_k, K2j)
    return solve_regression(system, rank_tol)["Z"]


def build_offpolicy_system(batch, K2j, M_k, R22_k):
    """Columns ``[delta_xx, 2 I_xx (I (x) K2j') - 2 I_xv2, I_xx K2j_bar - delta_v2v2]``."""
    _ensure(batch, OFFPOLICY_FIELDS)
    n, m1, m2 = _dims(batch)
    K2j = np.atleast_2d(K2j)
    Ixx = batch.get("I_xx")
    blocks = [
        batch.get("delta_xx"),
        2.0 * Ixx @ np.kron(np.eye(n), K2j.T) - 2.0 * batch.get("I_xv2"),
        Ixx @ bar_map(K2j) - batch.get("delta_v2v2"),
    ]
    return RegressionSystem(np.hstack(blocks), _theta(batch, M_k, R22_k, K2j),
                            _layout(n, m1, m2, ("Z", "S2", "D22")))


def build_modelfree_system(batch, K1_0, K2_0, K2j, M_k, R22_k):
    """Model-free regression rows.

    ``K1_0`` and ``K2_0`` are the current outer gains measured relative to
    the batch's reference gain (zero at the first outer step); ``K2j`` is the
    inner gain on top of them.
    """
    _ensure(batch, MODELFREE_FIELDS)
    n, m1, m2 = _dims(batch)
    K1 = np.atleast_2d(K1_0)
    K2 = np.atleast_2d(K2_0)
    Kj = np.atleast_2d(K2j)
    I_n = np.eye(n)
    Ixx = batch.get("I_xx")
    Ixv1, Ixv2 = batch.get("I_xv1"), batch.get("I_xv2")
    H1 = 2.0 * Ixx @ np.kron(I_n, K1.T) - 2.0 * Ixv1
    H2 = 2.0 * Ixx @ np.kron(I_n, (K2 + Kj).T) - 2.0 * Ixv2
    H3 = (2.0 * Ixv1 @ np.kron(K1.T, np.eye(m1)) @ duplication_matrix(m1)
          - batch.get("delta_v1v1") - Ixx @ bar_map(K1))
    H4 = (2.0 * Ixv2 @ np.kron(K2.T, np.eye(m2)) @ duplication_matrix(m2)
          - batch.get("delta_v2v2") - Ixx @ bar_map(K2) + Ixx @ bar_map(Kj))
    # vec(D12') = Comm vec(D12); the identity when m1 or m2 is 1
    H5 = (2.0 * Ixv1 @ np.kron(K2.T, np.eye(m1))
          + 2.0 * Ixv2 @ np.kron(K1.T, np.eye(m2)) @ commutation_matrix(m1, m2)
          - 2.0 * batch.get("I_v2v1") - 2.0 * Ixx @ np.kron(K2.T, K1.T))
    phi = np.hstack([batch.get("delta_xx"), H1, H2, H3, H4, H5])
    return RegressionSystem(phi, _theta(batch, M_k, R22_k, Kj),
                            _layout(n, m1, m2, ("Z", "S1", "S2", "D11", "D22", "D12")))


def solve_regression(system, rank_tol=DEFAULT_RANK_TOL):
    """Least squares by Householder QR; returns the unpacked unknowns.

    The result also carries ``"rank_report"`` and ``"condition"``.
    """
    report = RankReport.of(system.phi, system.d, rank_tol)
    if not report.satisfied:
        raise RankDeficient(
            f"regression matrix has rank {report.achieved} < {report.required}", rank_report=report)
    q, r = np.linalg.qr(system.phi, mode="reduced")
    x = solve_triangular(r, q.T @ system.theta)
    log.debug("regression solve: %d rows, d=%d, cond=%.3e", system.phi.shape[0], system.d,
              report.condition)
    out = system.unpack(x)
    out["rank_report"] = report
    out["condition"] = report.condition
    return out


def rank_matrix(batch, algorithm):
    """Data matrix whose column rank the named algorithm requires, with that requirement."""
    n, m1, m2 = _dims(batch)
    if algorithm == "onpolicy":
        _ensure(batch, ONPOLICY_FIELDS)
        return batch.get("delta_xx"), sdim(n)
    if algorithm == "offpolicy":
        _ensure(batch, OFFPOLICY_FIELDS)
        mat = np.hstack([batch.get("I_xx") @ duplication_matrix(n), batch.get("I_xv2"),
                         batch.get("delta_v2v2")])
        return mat, sdim(n) + m2 * n + sdim(m2)
    if algorithm == "modelfree":
        _ensure(batch, MODELFREE_FIELDS)
        mat = np.hstack([batch.get(nm) for nm in
                         ("delta_xx", "I_xv1", "I_xv2", "delta_v1v1", "delta_v2v2", "I_v2v1")])
        return mat, sdim(n) + m1 * n + m2 * n + sdim(m1) + sdim(m2) + m1 * m2
    raise InvalidConfig(f"algorithm must be one of {ALGORITHMS}")


def required_rank(algorithm, n, m1, m2):
    return {
        "onpolicy": sdim(n),
        "offpolicy": sdim(n) + m2 * n + sdim(m2),
        "modelfree": sdim(n) + m1 * n + m2 * n + sdim(m1) + sdim(m2) + m1 * m2,
    }[algorithm]


def check_rank_condition(batch, algorithm, rank_tol=DEFAULT_RANK_TOL):
    mat, required = rank_matrix(batch, algorithm)
    return RankReport.of(mat, required, rank_tol)
