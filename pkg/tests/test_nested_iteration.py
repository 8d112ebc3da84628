import numpy as np
import pytest

from gtare_lab.errors import InvalidL, MaxIterations, NotStable, SingularWeight
from gtare_lab.game_model import GameModel, gain_of_p, is_mean_square_stable, is_stabilizer
from gtare_lab.nested_iteration import (
    InnerState,
    evolve_outer,
    init_outer,
    inner_loop,
    inner_start,
    inner_step,
    run_nested_iteration,
    validate_l,
)

from .conftest import TWO_STATE_REFERENCE, SQRT2_M1


def test_init_outer_scalar(stm):
    outer = init_outer(stm, np.zeros((1, 1)))
    assert outer.P[0, 0] == 0.0 and outer.M[0, 0] == 1.0
    assert outer.K1[0, 0] == 0.0 and outer.K2[0, 0] == 0.0 and outer.Acl[0, 0] == -1.0


def test_init_outer_two_state(two_state):
    outer = init_outer(two_state, np.zeros((1, 2)))
    np.testing.assert_allclose(outer.K1, [[0.024, 0.064]], atol=1e-12)
    np.testing.assert_allclose(outer.K2, [[-0.104, -0.144]], atol=1e-12)
    assert np.linalg.eigvalsh(outer.M).min() >= -1e-10


def test_init_outer_singular_r(stm):
    data = stm.to_dict()
    data["R11"] = [[0.0]]
    model = GameModel.from_dict(data)
    with pytest.raises(SingularWeight):
        init_outer(model, np.zeros((1, 1)), validate=False)


def test_init_outer_rejects_bad_l(stm):
    with pytest.raises(InvalidL):
        init_outer(stm, np.array([[10.0]]))


def test_inner_steps_scalar(stm):
    outer = init_outer(stm, np.zeros((1, 1)))
    first = inner_step(stm, outer, InnerState(0, None, np.zeros((1, 1))))
    assert first.Z[0, 0] == pytest.approx(0.5) and first.K2j[0, 0] == pytest.approx(-0.5)
    second = inner_step(stm, outer, first)
    assert second.Z[0, 0] == pytest.approx(1.25 / 3.0)
    assert second.K2j[0, 0] == pytest.approx(-1.25 / 3.0)
    assert second.j == 2


def test_inner_step_needs_stable_loop(stm):
    outer = init_outer(stm, np.zeros((1, 1)))
    with pytest.raises(NotStable):
        inner_step(stm, outer, InnerState(0, None, np.array([[5.0]])))


def test_evolve_with_zero_increment(two_state):
    outer = init_outer(two_state, np.zeros((1, 2)))
    nxt = evolve_outer(two_state, outer, np.zeros((2, 2)))
    np.testing.assert_array_equal(nxt.P, outer.P)
    np.testing.assert_allclose(nxt.K1, outer.K1)
    np.testing.assert_allclose(nxt.K2, outer.K2)
    np.testing.assert_array_equal(nxt.M, np.zeros((2, 2)))
    assert nxt.k == 1


def test_evolve_scalar_after_inner_convergence(stm):
    outer = init_outer(stm, np.zeros((1, 1)))
    nxt = evolve_outer(stm, outer, np.array([[SQRT2_M1]]))
    assert nxt.P[0, 0] == pytest.approx(SQRT2_M1)
    assert nxt.K2[0, 0] == pytest.approx(-SQRT2_M1)
    assert nxt.M[0, 0] == pytest.approx(0.0, abs=1e-15)


def test_scalar_run(stm_nested):
    assert stm_nested.P_final[0, 0] == pytest.approx(SQRT2_M1, abs=1e-10)
    assert stm_nested.iterations[0] <= 3
    assert stm_nested.converged and stm_nested.certificate.passes


def test_two_state_run(two_state, two_state_nested):
    np.testing.assert_allclose(two_state_nested.P_final, TWO_STATE_REFERENCE, atol=5e-4)
    report = run_nested_iteration(two_state, tol=1e-9)
    np.testing.assert_allclose(report.P_final, TWO_STATE_REFERENCE, atol=5e-4)
    cert = two_state_nested.certificate
    assert cert.passes and cert.residual_norm < 1e-8


def test_max_outer_zero(stm):
    with pytest.raises(MaxIterations) as info:
        run_nested_iteration(stm, max_outer=0)
    assert info.value.report.P_final[0, 0] == 0.0
    assert info.value.report.outer_trace == []


def test_max_inner_cap(two_state):
    with pytest.raises(MaxIterations) as info:
        run_nested_iteration(two_state, max_inner=2)
    assert info.value.report.inner_traces[0]


def test_bad_tol(stm):
    with pytest.raises(ValueError):
        run_nested_iteration(stm, tol=0.0)


def test_huge_tol_stops_after_one_outer_step(two_state):
    report = run_nested_iteration(two_state, tol=1e3)
    assert report.iterations == (1, 2)


def test_traces_are_ordered(two_state_nested):
    assert [k for k, _ in two_state_nested.outer_trace] == list(range(1, len(two_state_nested.outer_trace) + 1))
    norms = [d for _, d in two_state_nested.outer_trace]
    assert norms == sorted(norms, reverse=True)
    assert len(two_state_nested.inner_traces) == two_state_nested.iterations[0]


@pytest.mark.parametrize("name", ["two_state_nested", "stm_nested"])
def test_inner_monotone_and_psd(request, name):
    report = request.getfixturevalue(name)
    by_k = {}
    for rec in report.history:
        by_k.setdefault(rec.k, []).append(rec.Z)
    for Zs in by_k.values():
        for Z in Zs:
            assert np.linalg.eigvalsh(Z).min() >= -1e-10
        for a, b in zip(Zs, Zs[1:]):
            assert np.linalg.eigvalsh(a - b).min() >= -1e-9


@pytest.mark.parametrize("name,model", [("two_state_nested", "two_state"), ("stm_nested", "stm")])
def test_all_gains_stabilize(request, name, model):
    report = request.getfixturevalue(name)
    model = request.getfixturevalue(model)
    assert all(a < 0 for a in report.outer_abscissa)
    assert all(rec.abscissa < 0 for rec in report.history)
    for P in report.outer_history:
        assert is_stabilizer(model, *gain_of_p(model, P))


def test_m_stays_psd(two_state):
    outer = init_outer(two_state, np.zeros((1, 2)))
    report = run_nested_iteration(two_state)
    for P_prev, P in zip(report.outer_history, report.outer_history[1:]):
        outer = evolve_outer(two_state, outer, P - P_prev)
        assert np.linalg.eigvalsh(outer.M).min() >= -1e-10


def test_warm_start_rules(two_state):
    L = np.array([[0.1, -0.2]])
    K2_0 = np.array([[1.0, 2.0]])
    np.testing.assert_array_equal(inner_start("lagged", 0, L, K2_0, K2_0, K2_0), L)
    np.testing.assert_allclose(inner_start("lagged", 3, L, K2_0, K2_0 + 1, K2_0 + 2), L - 1)
    np.testing.assert_allclose(inner_start("anchored", 3, L, K2_0, K2_0 + 1, K2_0 + 2), L - 2)
    with pytest.raises(ValueError):
        inner_start("other", 1, L, K2_0, K2_0, K2_0)
    for rule in ("lagged", "anchored"):
        report = run_nested_iteration(two_state, warm_start=rule)
        np.testing.assert_allclose(report.P_final, TWO_STATE_REFERENCE, atol=5e-4)
        assert set(report.warm_starts) == {rule}


def test_anchored_start_keeps_total_gain(two_state):
    L = np.array([[0.03, -0.01]])
    outer = init_outer(two_state, L)
    K2_0 = outer.K2.copy()
    report = run_nested_iteration(two_state, L, warm_start="anchored")
    for P_prev, P in zip(report.outer_history, report.outer_history[1:]):
        K2j = inner_start("anchored", outer.k, L, K2_0, None, outer.K2)
        np.testing.assert_allclose(outer.K2 + K2j, K2_0 + L, atol=1e-14)
        assert is_mean_square_stable(*inner_loop(outer, two_state, K2j))
        outer = evolve_outer(two_state, outer, P - P_prev)


def test_validate_l_verdicts(two_state, stm):
    assert validate_l(two_state, np.zeros((1, 2))).verdict == "InA"
    assert validate_l(stm, np.zeros((1, 1))).verdict == "InA"
    bad = validate_l(stm, np.array([[10.0]]))
    assert bad.verdict == "NotInA" and not bad.AL_stable
    assert bad.AL_abscissa == pytest.approx(18.0)


def test_nonzero_l(two_state):
    L = np.array([[-0.05, 0.02]])
    assert validate_l(two_state, L).verdict == "InA"
    report = run_nested_iteration(two_state, L)
    np.testing.assert_allclose(report.P_final, TWO_STATE_REFERENCE, atol=5e-4)


def test_report_serializes_without_wall_time(two_state_nested):
    data = two_state_nested.to_dict()
    assert "elapsed" not in data and data["converged"]
    assert data["iterations"] == {"outer": 4, "inner_total": 17}
