"""Symmetric-matrix vectorization and numeric rank helpers.

Conventions used throughout the package:

* ``vec`` stacks columns (Fortran order), so ``vec(M)[i + j*rows] == M[i, j]``.
* ``svec`` walks the upper triangle row by row and doubles off-diagonal
  entries: ``[m11, 2 m12, ..., 2 m1n, m22, ..., mnn]``.
* Row data such as ``x' (x) x'`` are built with :func:`numpy.kron`, which
  pairs with column-major ``vec`` so that ``kron(x, y) @ vec(S) == y' S x``.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import InvalidInput

SYM_TOL = 1e-12
DEFAULT_RANK_TOL = 1e-10


def sdim(n):
    """Length of ``svec`` for an ``n x n`` symmetric matrix."""
    return n * (n + 1) // 2


def _triu(n):
    return np.triu_indices(n)


def symmetrize(M, tol=SYM_TOL, name="matrix"):
    """Return ``(M + M')/2`` after checking ``M`` is square and symmetric."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise InvalidInput(f"{name} must be square, got shape {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M)))) if M.size else 1.0
    if M.size and np.max(np.abs(M - M.T)) > tol * scale:
        raise InvalidInput(f"{name} is not symmetric (tolerance {tol:g})")
    return 0.5 * (M + M.T)


def svec(M, tol=SYM_TOL):
    """Minimal vectorization of a symmetric matrix.

    >>> svec(np.array([[1.0, 2.0], [2.0, 3.0]]))
    array([1., 4., 3.])
    """
    M = symmetrize(M, tol)
    n = M.shape[0]
    rows, cols = _triu(n)
    v = M[rows, cols].copy()
    v[rows != cols] *= 2.0
    return v


def smat(v, n):
    """Inverse of :func:`svec`."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size != sdim(n):
        raise InvalidInput(f"svec of a {n}x{n} matrix has length {sdim(n)}, got {v.size}")
    rows, cols = _triu(n)
    vals = np.where(rows == cols, v, 0.5 * v)
    M = np.zeros((n, n))
    M[rows, cols] = vals
    M[cols, rows] = vals
    return M


def vec(M):
    """Column-stacking vectorization."""
    return np.asarray(M, dtype=float).reshape(-1, order="F")


def unvec(v, rows, cols):
    """Inverse of :func:`vec`."""
    return np.asarray(v, dtype=float).reshape((rows, cols), order="F")


@dataclass(frozen=True)
class DuplicationMap:
    """The ``n^2 x n(n+1)/2`` matrix with ``vec(P) = matrix @ svec(P)``."""

    matrix: np.ndarray
    dim: int


@lru_cache(maxsize=32)
def _duplication(n):
    T = np.zeros((n * n, sdim(n)))
    for col, (i, j) in enumerate(zip(*_triu(n))):
        if i == j:
            T[i + j * n, col] = 1.0
        else:
            T[i + j * n, col] = 0.5
            T[j + i * n, col] = 0.5
    T.setflags(write=False)
    return T


def duplication_map(n):
    if n < 1:
        raise InvalidInput("dimension must be at least 1")
    return DuplicationMap(matrix=_duplication(n), dim=n)


def duplication_matrix(n):
    """Plain-array shortcut for ``duplication_map(n).matrix``."""
    return _duplication(n)


def bar_map(W):
    """Return ``(W' (x) W') T_m`` for ``W`` of shape ``(m, n)``.

    For symmetric ``U`` of size ``m`` this maps ``svec(U)`` to
    ``vec(W' U W)``. A 1-D input ``x`` is read as the column ``(n, 1)``,
    giving the row vector ``x_bar`` with ``x_bar @ svec(U) == x' U x``.
    """
    W = np.asarray(W, dtype=float)
    if W.ndim == 1:
        W = W.reshape(-1, 1)
    m = W.shape[0]
    return np.kron(W.T, W.T) @ _duplication(m)


@lru_cache(maxsize=32)
def commutation_matrix(rows, cols):
    """Permutation ``K`` with ``vec(M') = K @ vec(M)`` for ``M`` of shape (rows, cols)."""
    K = np.zeros((rows * cols, rows * cols))
    for i in range(rows):
        for j in range(cols):
            K[j + i * cols, i + j * rows] = 1.0
    K.setflags(write=False)
    return K


def numeric_rank(M, rel_tol=DEFAULT_RANK_TOL):
    """Number of singular values above ``rel_tol * max(shape) * sigma_max``."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return 0
    sv = np.linalg.svd(M, compute_uv=False)
    if sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rel_tol * max(M.shape) * sv[0]))


def singular_values(M):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.size == 0:
        return np.zeros(0)
    return np.linalg.svd(M, compute_uv=False)
