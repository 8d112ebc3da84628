"""Learning loops that replace exact policy evaluation with regressions on sampled data.

The learners see the plant only through :class:`~gtare_lab.sde_lab.Environment`
and a :class:`PriorKnowledge` object. Matrices outside the prior's level are
not stored at all; touching one raises :class:`InvalidPrior`.
"""

import enum
import logging
import time

import numpy as np

from .errors import InvalidPrior, MaxIterations, RankDeficient
from .game_model import checked_solve
from .nested_iteration import (
    WARM_START_RULES,
    IterateRecord,
    SolverReport,
    evolve_outer,
    improve_gain,
    init_outer,
    initial_gains,
    inner_start,
    schur_m,
)
from .rl_regression import (
    build_modelfree_system,
    build_offpolicy_system,
    check_rank_condition,
    solve_onpolicy_pe,
    solve_regression,
)
from .sde_lab import MODELFREE_FIELDS, OFFPOLICY_FIELDS, ONPOLICY_FIELDS, BatchRequest

log = logging.getLogger(__name__)

EXACT_TOL = 1e-10
MC_TOL = 1e-4
PATIENCE = 3
PSD_TOL = 1e-8

_WEIGHTS = ("Q", "S1", "S2", "R11", "R12", "R22")
_INPUT_AND_NOISE = ("B1", "B2", "C", "D1", "D2")


class PriorLevel(str, enum.Enum):
    SEMI_MODEL = "semi_model"
    WEIGHTS_ONLY = "weights_only"


class PriorKnowledge:
    """What a learner is told about the plant besides the sampled data."""

    __slots__ = ("level", "n", "m1", "m2", "r", "_matrices")

    def __init__(self, level, dims, matrices):
        level = PriorLevel(level)
        allowed = set(_WEIGHTS) | (set(_INPUT_AND_NOISE) if level is PriorLevel.SEMI_MODEL else set())
        extra = set(matrices) - allowed
        if extra:
            raise InvalidPrior(f"{level.value} prior may not contain {sorted(extra)}")
        missing = allowed - set(matrices)
        if missing:
            raise InvalidPrior(f"{level.value} prior is missing {sorted(missing)}")
        object.__setattr__(self, "level", level)
        n, m1, m2, r = dims
        for name, value in zip(("n", "m1", "m2", "r"), (n, m1, m2, r)):
            object.__setattr__(self, name, int(value))
        frozen = {}
        for k, v in matrices.items():
            if isinstance(v, (tuple, list)):
                frozen[k] = tuple(np.array(a, dtype=float) for a in v)
                for a in frozen[k]:
                    a.setflags(write=False)
            else:
                frozen[k] = np.array(v, dtype=float)
                frozen[k].setflags(write=False)
        object.__setattr__(self, "_matrices", frozen)

    def __setattr__(self, name, value):
        raise AttributeError("PriorKnowledge is immutable")

    def __getattr__(self, name):
        if name.startswith("__"):
            raise AttributeError(name)
        try:
            return object.__getattribute__(self, "_matrices")[name]
        except KeyError:
            level = object.__getattribute__(self, "level").value
            raise InvalidPrior(f"{name} is not available to a {level} learner") from None

    @property
    def dims(self):
        return (self.n, self.m1, self.m2, self.r)

    @property
    def available(self):
        return frozenset(self._matrices)

    @classmethod
    def semi_model(cls, model):
        names = _WEIGHTS + _INPUT_AND_NOISE
        return cls(PriorLevel.SEMI_MODEL, model.dims, {k: getattr(model, k) for k in names})

    @classmethod
    def weights_only(cls, model):
        return cls(PriorLevel.WEIGHTS_ONLY, model.dims, {k: getattr(model, k) for k in _WEIGHTS})


def _require(prior, level):
    if not isinstance(prior, PriorKnowledge) or prior.level is not PriorLevel(level):
        got = getattr(getattr(prior, "level", None), "value", type(prior).__name__)
        raise InvalidPrior(f"this learner needs a {PriorLevel(level).value} prior, got {got}")


class _Stopper:
    """``norm < tol`` or, on noisy data, no new best for ``patience`` updates."""

    def __init__(self, tol, noisy, patience=PATIENCE):
        self.tol, self.noisy, self.patience = tol, noisy, patience
        self.best = np.inf
        self.stale = 0
        self.reason = None

    def update(self, norm):
        if norm < self.tol:
            self.reason = "tol"
            return True
        if norm < self.best:
            self.best, self.stale = norm, 0
        else:
            self.stale += 1
        if self.noisy and self.stale >= self.patience:
            self.reason = "patience"
            return True
        return False


def _is_psd(Z):
    scale = max(1.0, float(np.max(np.abs(Z))))
    return float(np.linalg.eigvalsh(Z).min()) >= -PSD_TOL * scale


class _Run:
    """Shared bookkeeping for a learner run."""

    def __init__(self, name, env, tol, max_outer, max_inner, warm_start, L):
        if warm_start not in WARM_START_RULES:
            raise ValueError(f"warm_start must be one of {WARM_START_RULES}")
        n, m1, m2, _ = env.dims
        self.env = env
        self.noisy = env.stochastic
        self.tol = (MC_TOL if self.noisy else EXACT_TOL) if tol is None else float(tol)
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        self.max_outer, self.max_inner = max_outer, max_inner
        self.rule = warm_start
        self.L = np.zeros((m2, n)) if L is None else np.atleast_2d(np.asarray(L, dtype=float))
        self.t0 = time.perf_counter()
        self.report = SolverReport(algorithm=name, P_final=np.zeros((n, n)),
                                   seed=env.cfg.seed if self.noisy else None)
        self.report.outer_history.append(np.zeros((n, n)))
        self.total_inner = 0
        self.k = 0

    def diag(self, **info):
        self.report.diagnostics.append(info)

    def finish(self, P):
        self.report.P_final = P.copy()
        self.report.iterations = (self.k, self.total_inner)
        self.report.elapsed = time.perf_counter() - self.t0
        return self.report

    def fail_outer(self, P):
        self.finish(P)
        raise MaxIterations(f"outer loop hit max_outer={self.max_outer}", self.report)

    def fail_inner(self, P, trace):
        self.report.inner_traces.append(trace)
        self.finish(P)
        raise MaxIterations(f"inner loop hit max_inner={self.max_inner} at k={self.k}", self.report)

    def rank_fail(self, exc, P):
        self.finish(P)
        exc.report = self.report
        raise exc

    def record_outer(self, P, dP, stopper):
        self.report.outer_trace.append((self.k, dP))
        self.report.outer_history.append(P.copy())
        return stopper.update(dP)


def _inner_iterations(run, evaluate, K2j, P):
    """Run policy evaluation/improvement until the Z increments settle.

    ``evaluate(K2j, j)`` returns ``(Z, K2_next, extras)``; the function returns
    the last evaluation and the inner trace.
    """
    stopper = _Stopper(run.tol, run.noisy)
    trace, Z_prev, last = [], None, None
    for j in range(run.max_inner):
        Z, K2_next, extras = evaluate(K2j, j)
        run.total_inner += 1
        run.report.history.append(IterateRecord(run.k, j, K2j, Z))
        last = (Z, K2_next, extras)
        if Z_prev is not None:
            dz = float(np.linalg.norm(Z - Z_prev, "fro"))
            trace.append(dz)
            if stopper.update(dz):
                break
        Z_prev = Z
        K2j = K2_next
    else:
        run.fail_inner(P, trace)
    run.report.inner_traces.append(trace)
    return last


def _with_fallback(run, start_fn, body):
    """Run ``body(K2_start)``; retry with the anchored start if the first Z is indefinite."""
    rule = run.rule
    mark = len(run.report.history)
    result = body(start_fn(rule))
    first_Z = run.report.history[mark].Z
    if rule == "lagged" and run.k > 0 and not _is_psd(first_Z):
        log.info("k=%d: lagged warm start gave an indefinite Z, retrying with anchored form", run.k)
        del run.report.history[mark:]
        run.report.inner_traces.pop()
        rule = "anchored"
        result = body(start_fn(rule))
    run.report.warm_starts.append(rule)
    return result


def _exploring(m1, m2):
    return (False,) * m1 + (True,) * m2


def run_onpolicy(env, prior, cfg=None, tol=None, max_outer=200, max_inner=500, L=None,
                 warm_start="lagged", reuse_batch=False):
    """Semi-model learner with a fresh on-policy batch for every policy evaluation.

    ``reuse_batch=True`` reuses one batch per outer step with the behaviour
    gain fixed at the inner warm start; the regression is then no longer
    on-policy after the first inner step, so this is only a cost-saving
    approximation.
    """
    _require(prior, PriorLevel.SEMI_MODEL)
    if cfg is not None:
        env.cfg = cfg
    run = _Run("onpolicy", env, tol, max_outer, max_inner, warm_start, L)
    _, m1, m2, _ = env.dims
    outer = init_outer(prior, run.L, validate=False)
    K2_0, K2_prev = outer.K2.copy(), outer.K2.copy()
    outer_stop = _Stopper(run.tol, run.noisy)
    cached = {}

    def sample(K2j):
        if reuse_batch and "batch" in cached:
            return cached["batch"]
        K = np.vstack([outer.K1, outer.K2 + K2j])
        batch = env.collect(BatchRequest(K, K, (False,) * (m1 + m2), ONPOLICY_FIELDS))
        rep = check_rank_condition(batch, "onpolicy")
        run.diag(k=run.k, kind="rank", achieved=rep.achieved, required=rep.required,
                 condition=rep.condition)
        if not rep.satisfied:
            run.rank_fail(RankDeficient(
                f"on-policy batch has rank {rep.achieved} < {rep.required}", rank_report=rep), outer.P)
        cached["batch"] = batch
        return batch

    def evaluate(K2j, j):
        batch = sample(K2j)
        Z = solve_onpolicy_pe(batch, outer.M, outer.R22, K2j)
        return Z, improve_gain(prior, outer, Z), None

    for _ in range(max_outer):
        cached.clear()

        def body(K2j):
            cached.clear()
            return _inner_iterations(run, evaluate, K2j, outer.P)

        start = lambda rule: inner_start(rule, run.k, run.L, K2_0, K2_prev, outer.K2)  # noqa: E731
        Z, _, _ = _with_fallback(run, start, body)
        K2_prev = outer.K2
        outer = evolve_outer(prior, outer, Z)
        run.k = outer.k
        if run.record_outer(outer.P, float(np.linalg.norm(Z, "fro")), outer_stop):
            break
    else:
        run.fail_outer(outer.P)
    run.report.converged = True
    return run.finish(outer.P)


def run_offpolicy(env, prior, cfg=None, tol=None, max_outer=200, max_inner=500, L=None,
                  warm_start="lagged"):
    """Semi-model learner: one exploring batch per outer step, reused by every inner step."""
    _require(prior, PriorLevel.SEMI_MODEL)
    if cfg is not None:
        env.cfg = cfg
    run = _Run("offpolicy", env, tol, max_outer, max_inner, warm_start, L)
    _, m1, m2, _ = env.dims
    outer = init_outer(prior, run.L, validate=False)
    K2_0, K2_prev = outer.K2.copy(), outer.K2.copy()
    outer_stop = _Stopper(run.tol, run.noisy)

    for _ in range(max_outer):
        K_ref = np.vstack([outer.K1, outer.K2])

        def body(K2_start):
            behavior = np.vstack([outer.K1, outer.K2 + K2_start])
            batch = env.collect(BatchRequest(behavior, K_ref, _exploring(m1, m2), OFFPOLICY_FIELDS))
            rep = check_rank_condition(batch, "offpolicy")
            run.diag(k=run.k, kind="rank", achieved=rep.achieved, required=rep.required,
                     condition=rep.condition)
            if not rep.satisfied:
                run.rank_fail(RankDeficient(
                    f"off-policy batch has rank {rep.achieved} < {rep.required}", rank_report=rep),
                    outer.P)

            def evaluate(K2j, j):
                sol = solve_regression(build_offpolicy_system(batch, K2j, outer.M, outer.R22))
                H = outer.R22 + sol["D22"]
                K2_next = -checked_solve(0.5 * (H + H.T), sol["S2"], "R22(k) + D22")
                run.diag(k=run.k, j=j, kind="solve", condition=sol["condition"])
                return sol["Z"], K2_next, sol

            return _inner_iterations(run, evaluate, K2_start, outer.P)

        start = lambda rule: inner_start(rule, run.k, run.L, K2_0, K2_prev, outer.K2)  # noqa: E731
        Z, _, _ = _with_fallback(run, start, body)
        K2_prev = outer.K2
        outer = evolve_outer(prior, outer, Z)
        run.k = outer.k
        if run.record_outer(outer.P, float(np.linalg.norm(Z, "fro")), outer_stop):
            break
    else:
        run.fail_outer(outer.P)
    run.report.converged = True
    return run.finish(outer.P)


def run_modelfree(env, prior, cfg=None, tol=None, max_outer=200, max_inner=500, L=None,
                  warm_start="lagged"):
    """Learner that knows only the cost weights; all iterations reuse one batch.

    The batch is recorded under ``u = K(0) x + [0; L x] + e`` with ``v = u - K(0) x``,
    so the regressions use the current gains measured from ``K(0)``.
    """
    _require(prior, PriorLevel.WEIGHTS_ONLY)
    if cfg is not None:
        env.cfg = cfg
    run = _Run("modelfree", env, tol, max_outer, max_inner, warm_start, L)
    n, m1, m2, _ = env.dims
    K0, M, Rk = initial_gains(prior)
    K = K0.copy()
    P = np.zeros((n, n))
    behavior = K0 + np.vstack([np.zeros((m1, n)), run.L])
    batch = env.collect(BatchRequest(behavior, K0, (True,) * (m1 + m2), MODELFREE_FIELDS))
    rep = check_rank_condition(batch, "modelfree")
    run.diag(k=0, kind="rank", achieved=rep.achieved, required=rep.required, condition=rep.condition)
    if not rep.satisfied:
        run.rank_fail(RankDeficient(
            f"model-free batch has rank {rep.achieved} < {rep.required}", rank_report=rep), P)
    K2_0 = K0[m1:].copy()
    K2_prev = K2_0.copy()
    outer_stop = _Stopper(run.tol, run.noisy)

    for _ in range(max_outer):
        R22 = Rk[m1:, m1:]
        rel = K - K0

        def evaluate(K2j, j, rel=rel, M=M, R22=R22):
            system = build_modelfree_system(batch, rel[:m1], rel[m1:], K2j, M, R22)
            sol = solve_regression(system)
            H = R22 + sol["D22"]
            K2_next = -checked_solve(0.5 * (H + H.T), sol["S2"], "R22(k) + D22")
            run.diag(k=run.k, j=j, kind="solve", condition=sol["condition"])
            return sol["Z"], K2_next, sol

        body = lambda K2j: _inner_iterations(run, evaluate, K2j, P)  # noqa: E731
        start = lambda rule: inner_start(rule, run.k, run.L, K2_0, K2_prev, K[m1:])  # noqa: E731
        Z, _, sol = _with_fallback(run, start, body)
        S = np.vstack([sol["S1"], sol["S2"]])
        Dblk = np.block([[sol["D11"], sol["D12"]], [sol["D12"].T, sol["D22"]]])
        P = P + Z
        P = 0.5 * (P + P.T)
        Rk = Rk + Dblk
        Rk = 0.5 * (Rk + Rk.T)
        K2_prev = K[m1:].copy()
        K = K - checked_solve(Rk, S, "R(k+1)")
        M = schur_m(Rk, sol["S1"], sol["S2"])
        run.k += 1
        if run.record_outer(P, float(np.linalg.norm(Z, "fro")), outer_stop):
            break
    else:
        run.fail_outer(P)
    run.report.converged = True
    return run.finish(P)


LEARNERS = {"onpolicy": run_onpolicy, "offpolicy": run_offpolicy, "modelfree": run_modelfree}
PRIOR_FOR = {"onpolicy": PriorKnowledge.semi_model, "offpolicy": PriorKnowledge.semi_model,
             "modelfree": PriorKnowledge.weights_only}
