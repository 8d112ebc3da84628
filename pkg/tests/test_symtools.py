import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from gtare_lab.errors import InvalidInput
from gtare_lab.symtools import (
    bar_map,
    commutation_matrix,
    duplication_map,
    duplication_matrix,
    numeric_rank,
    sdim,
    smat,
    svec,
    symmetrize,
    unvec,
    vec,
)

floats = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def sym_matrices(max_n=5):
    return st.integers(1, max_n).flatmap(
        lambda n: arrays(np.float64, (n, n), elements=floats).map(lambda a: a + a.T))


def test_svec_examples():
    np.testing.assert_array_equal(svec(np.array([[1.0, 2.0], [2.0, 3.0]])), [1, 4, 3])
    np.testing.assert_array_equal(svec(np.array([[5.0]])), [5])
    np.testing.assert_array_equal(svec(np.eye(3)), [1, 0, 0, 1, 0, 1])


def test_svec_rejects_asymmetric():
    with pytest.raises(InvalidInput):
        svec(np.array([[1.0, 2.0], [0.0, 1.0]]))


def test_smat_examples():
    np.testing.assert_array_equal(smat([1, 4, 3], 2), [[1, 2], [2, 3]])
    np.testing.assert_array_equal(smat(np.zeros(6), 3), np.zeros((3, 3)))
    np.testing.assert_array_equal(smat([1, 0, 1], 2), np.eye(2))
    with pytest.raises(InvalidInput):
        smat([1, 2], 2)


def test_duplication_examples():
    np.testing.assert_array_equal(duplication_map(1).matrix, [[1.0]])
    T = duplication_matrix(2)
    assert T.shape == (4, 3)
    np.testing.assert_allclose(T @ np.array([1.0, 4.0, 3.0]), [1, 2, 2, 3])
    assert numeric_rank(duplication_matrix(3)) == 6
    with pytest.raises(InvalidInput):
        duplication_map(0)


def test_bar_map_examples():
    U = np.array([[1.0, 2.0], [2.0, 3.0]])
    assert bar_map(np.array([1.0, 2.0])) @ svec(U) == pytest.approx(21.0)
    np.testing.assert_array_equal(bar_map(np.zeros((2, 3))), np.zeros((9, 3)))
    np.testing.assert_array_equal(bar_map(np.eye(2)), duplication_matrix(2))


def test_numeric_rank_examples():
    assert numeric_rank(np.eye(3)) == 3
    assert numeric_rank(np.array([[1.0, 2.0], [2.0, 4.0]])) == 1
    assert numeric_rank(np.zeros((3, 3))) == 0
    assert numeric_rank(np.zeros((0, 3))) == 0


def test_sdim():
    assert [sdim(n) for n in (1, 2, 3, 4)] == [1, 3, 6, 10]


def test_symmetrize_requires_square():
    with pytest.raises(InvalidInput):
        symmetrize(np.zeros((2, 3)))


@settings(max_examples=60, deadline=None)
@given(sym_matrices())
def test_svec_smat_round_trip(M):
    n = M.shape[0]
    np.testing.assert_allclose(smat(svec(M), n), M, rtol=0, atol=1e-12)
    np.testing.assert_allclose(duplication_matrix(n) @ svec(M), vec(M), atol=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_bar_map_quadratic_form(m, n, data):
    W = data.draw(arrays(np.float64, (m, n), elements=st.floats(-10, 10)))
    U = data.draw(arrays(np.float64, (m, m), elements=st.floats(-10, 10)))
    U = U + U.T
    np.testing.assert_allclose(bar_map(W) @ svec(U), vec(W.T @ U @ W), atol=1e-8)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.data())
def test_commutation_and_vec(rows, cols, data):
    M = data.draw(arrays(np.float64, (rows, cols), elements=floats))
    np.testing.assert_array_equal(commutation_matrix(rows, cols) @ vec(M), vec(M.T))
    np.testing.assert_array_equal(unvec(vec(M), rows, cols), M)


def test_kron_pairs_with_vec():
    rng = np.random.default_rng(0)
    x, y, S = rng.normal(size=3), rng.normal(size=2), rng.normal(size=(2, 3))
    assert np.kron(x, y) @ vec(S) == pytest.approx(y @ S @ x)
