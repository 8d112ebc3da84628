"""Simulation environment: Euler-Maruyama paths, exploration signals and sampling matrices.

Two batch builders share one layout. ``collect_batch_mc`` averages rollouts
that start from a common anchor state; ``collect_batch_exact`` integrates the
conditional moment equations instead, so its rows carry no sampling noise.

Row layout per window (``N`` rows per field):

* ``delta_xx``   ``(E[x x'](t+) - x x'(t)) T_n``, width ``n(n+1)/2``
* ``I_xx``       ``vec(E int x x')``, width ``n^2``
* ``I_xv1/2``    ``E int kron(x, v_i)``, width ``n m_i``
* ``I_v1v1/2``   ``E int kron(v_i, v_i)``; ``delta_v#v#`` is the same times ``T_m``
* ``I_v2v1``     ``E int kron(v2, v1)``, width ``m2 m1``

Here ``v`` is the recorded input ``u - K_ref x`` for the reference gain the
requesting learner works relative to.
"""

import csv
import enum
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import Diverged, InvalidBatch, InvalidConfig
from .symtools import duplication_matrix, sdim, smat, svec

log = logging.getLogger(__name__)

OVERFLOW_GUARD = 1e8
ROLLOUT_CHUNK = 128
DEFAULT_FREQUENCIES = (7.0, 13.0, 19.0, 29.0, 37.0, 43.0)
CHANNEL_FREQ_SHIFT = 3.1
THREADS_ENV = "GTARE_LAB_THREADS"

FIELD_NAMES = (
    "delta_xx", "I_xx", "I_xv1", "I_xv2", "delta_v1v1", "delta_v2v2",
    "I_v1v1", "I_v2v2", "I_v2v1",
)
ONPOLICY_FIELDS = ("delta_xx", "I_xx")
OFFPOLICY_FIELDS = ("delta_xx", "I_xx", "I_xv2", "delta_v2v2")
MODELFREE_FIELDS = FIELD_NAMES


def field_width(name, n, m1, m2):
    return {
        "delta_xx": sdim(n), "I_xx": n * n, "I_xv1": n * m1, "I_xv2": n * m2,
        "delta_v1v1": sdim(m1), "delta_v2v2": sdim(m2),
        "I_v1v1": m1 * m1, "I_v2v2": m2 * m2, "I_v2v1": m2 * m1,
    }[name]


# -- configuration ------------------------------------------------------


class ExplorationKind(str, enum.Enum):
    NONE = "none"
    SINUSOID_SUM = "sinusoid_sum"
    GAUSSIAN_DITHER = "gaussian_dither"
    MIXED = "mixed"


@dataclass(frozen=True)
class ExplorationSpec:
    """Additive probing input. Channel ``c`` shifts every frequency by ``c * 3.1`` rad/s."""

    kind: ExplorationKind = ExplorationKind.SINUSOID_SUM
    amplitudes: tuple = (0.1,) * 6
    frequencies: tuple = DEFAULT_FREQUENCIES
    phases_seed: int = 0
    dither_std: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "kind", ExplorationKind(self.kind))
        amps = tuple(float(a) for a in np.atleast_1d(self.amplitudes))
        freqs = tuple(float(f) for f in np.atleast_1d(self.frequencies))
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "frequencies", freqs)
        if not np.all(np.isfinite(amps)) or not np.all(np.isfinite(freqs)):
            raise InvalidConfig("exploration amplitudes and frequencies must be finite")
        if self.has_sinusoids:
            if len(amps) != len(freqs):
                raise InvalidConfig("need one amplitude per frequency")
            if len(set(freqs)) != len(freqs):
                raise InvalidConfig("sinusoid frequencies must be distinct")
        if not np.isfinite(self.dither_std) or self.dither_std < 0:
            raise InvalidConfig("dither_std must be a finite non-negative number")

    @classmethod
    def none(cls):
        return cls(kind=ExplorationKind.NONE)

    @classmethod
    def sinusoids(cls, amplitude=0.1, phases_seed=0):
        return cls(amplitudes=(amplitude,) * len(DEFAULT_FREQUENCIES), phases_seed=phases_seed)

    @property
    def has_sinusoids(self):
        return self.kind in (ExplorationKind.SINUSOID_SUM, ExplorationKind.MIXED)

    @property
    def has_dither(self):
        return self.kind in (ExplorationKind.GAUSSIAN_DITHER, ExplorationKind.MIXED) and self.dither_std > 0

    @property
    def deterministic(self):
        return not self.has_dither

    def channel_frequencies(self, channel):
        return np.asarray(self.frequencies) + CHANNEL_FREQ_SHIFT * channel

    def phases(self, m):
        rng = np.random.default_rng(np.random.SeedSequence(self.phases_seed))
        return rng.uniform(0.0, 2.0 * np.pi, size=(m, len(self.frequencies)))

    def to_dict(self):
        return {
            "kind": self.kind.value, "amplitudes": list(self.amplitudes),
            "frequencies": list(self.frequencies), "phases_seed": self.phases_seed,
            "dither_std": self.dither_std,
        }


@dataclass(frozen=True)
class SimConfig:
    x0: tuple = None
    dt_window: float = 0.05
    substeps: int = 100
    n_windows: int = 60
    rollouts: int = 512
    seed: int = 0
    exploration: ExplorationSpec = field(default_factory=ExplorationSpec)

    def __post_init__(self):
        if not (np.isfinite(self.dt_window) and self.dt_window > 0):
            raise InvalidConfig("dt_window must be positive")
        for name in ("substeps", "n_windows", "rollouts"):
            if int(getattr(self, name)) < 1:
                raise InvalidConfig(f"{name} must be at least 1")
        if self.seed is None or int(self.seed) < 0 or int(self.seed) >= 2**64:
            raise InvalidConfig("seed must be an unsigned 64-bit integer")
        if self.x0 is not None:
            object.__setattr__(self, "x0", tuple(float(v) for v in np.ravel(self.x0)))

    @property
    def h(self):
        return self.dt_window / self.substeps

    def initial_state(self, n):
        if self.x0 is None:
            return np.ones(n)
        x0 = np.asarray(self.x0, dtype=float)
        if x0.shape != (n,):
            raise InvalidConfig(f"x0 must have length {n}")
        return x0

    def to_dict(self):
        return {
            "x0": None if self.x0 is None else list(self.x0), "dt_window": self.dt_window,
            "substeps": self.substeps, "n_windows": self.n_windows, "rollouts": self.rollouts,
            "seed": self.seed, "exploration": self.exploration.to_dict(),
        }


@dataclass(frozen=True)
class BatchRequest:
    """Applied input ``u = behavior x + e(t)``; recorded ``v = u - reference x``.

    ``explore`` flags which of the ``m1 + m2`` input channels receive the
    exploration signal ``e``.
    """

    behavior: np.ndarray
    reference: np.ndarray
    explore: tuple
    fields: tuple


# -- batches -------------------------------------------------------------


@dataclass
class SampleBatch:
    data: dict
    anchors: np.ndarray
    times: np.ndarray
    dims: tuple
    mode: str
    stderr: dict = None

    @property
    def present(self):
        return frozenset(self.data)

    @property
    def rows(self):
        return len(self.times)

    def get(self, name):
        if name not in self.data:
            raise InvalidBatch(f"batch has no field {name!r}; present: {sorted(self.data)}")
        return self.data[name]

    def require(self, *names):
        missing = [nm for nm in names if nm not in self.data]
        if missing:
            raise InvalidBatch(f"batch is missing fields {missing}")

    def __getattr__(self, name):
        if name in FIELD_NAMES:
            return self.get(name)
        raise AttributeError(name)

    def subset(self, index):
        index = np.asarray(index)
        err = None if self.stderr is None else {k: v[index] for k, v in self.stderr.items()}
        return SampleBatch(
            data={k: v[index] for k, v in self.data.items()}, anchors=self.anchors[index],
            times=self.times[index], dims=self.dims, mode=self.mode, stderr=err,
        )

    def repeat(self, count):
        return self.subset(np.tile(np.arange(self.rows), count))


def _assemble_rows(x, x_end_outer, ixx, ixv, ivv, m1, fields):
    """Rows for one window. Arrays may carry a leading rollout axis."""
    n = x.shape[-1]
    out = {}
    T = duplication_matrix(n)
    lead = ixx.shape[:-2]
    flat = lambda a: a.reshape(lead + (-1,))  # noqa: E731
    for name in fields:
        if name == "delta_xx":
            diff = x_end_outer - np.multiply.outer(x, x)
            out[name] = flat(diff) @ T
        elif name == "I_xx":
            out[name] = flat(ixx)
        elif name == "I_xv1":
            out[name] = flat(ixv[..., :, :m1])
        elif name == "I_xv2":
            out[name] = flat(ixv[..., :, m1:])
        elif name == "I_v1v1":
            out[name] = flat(ivv[..., :m1, :m1])
        elif name == "I_v2v2":
            out[name] = flat(ivv[..., m1:, m1:])
        elif name == "delta_v1v1":
            out[name] = flat(ivv[..., :m1, :m1]) @ duplication_matrix(m1)
        elif name == "delta_v2v2":
            m2 = ivv.shape[-1] - m1
            out[name] = flat(ivv[..., m1:, m1:]) @ duplication_matrix(m2)
        elif name == "I_v2v1":
            out[name] = flat(ivv[..., m1:, :m1])
        else:
            raise InvalidConfig(f"unknown field {name!r}")
    return out


def _check_request(model, req):
    m = model.m1 + model.m2
    F = np.atleast_2d(np.asarray(req.behavior, dtype=float))
    Kref = np.atleast_2d(np.asarray(req.reference, dtype=float))
    if F.shape != (m, model.n) or Kref.shape != (m, model.n):
        raise InvalidConfig(f"behavior and reference gains must be {m}x{model.n}")
    explore = tuple(bool(e) for e in req.explore)
    if len(explore) != m:
        raise InvalidConfig(f"explore mask must have {m} entries")
    fields = tuple(req.fields)
    for name in fields:
        if name not in FIELD_NAMES:
            raise InvalidConfig(f"unknown field {name!r}")
    return F, Kref, explore, fields


class _Sinusoids:
    """Deterministic part of the exploration input for each channel."""

    def __init__(self, spec, explore):
        m = len(explore)
        self.m = m
        self.active = spec.has_sinusoids and any(explore)
        phases = spec.phases(m)
        self.terms = []  # (channel, amplitude, omega, phase)
        if self.active:
            amps = np.asarray(spec.amplitudes)
            for c in range(m):
                if not explore[c]:
                    continue
                for a, w, p in zip(amps, spec.channel_frequencies(c), phases[c]):
                    self.terms.append((c, a, w, p))

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        g = np.zeros(t.shape + (self.m,))
        for c, a, w, p in self.terms:
            g[..., c] += a * np.sin(w * t + p)
        return g

    def oscillator(self):
        """Linear generator ``s' = W s`` with ``g = E s``; ``s = [sin, cos]`` per term."""
        q = len(self.terms)
        W = np.zeros((2 * q, 2 * q))
        E = np.zeros((self.m, 2 * q))
        for idx, (c, a, w, _) in enumerate(self.terms):
            W[2 * idx, 2 * idx + 1] = w
            W[2 * idx + 1, 2 * idx] = -w
            E[c, 2 * idx] = a
        return W, E

    def state(self, t):
        s = np.zeros(2 * len(self.terms))
        for idx, (_, _, w, p) in enumerate(self.terms):
            s[2 * idx] = np.sin(w * t + p)
            s[2 * idx + 1] = np.cos(w * t + p)
        return s


# -- Euler-Maruyama ------------------------------------------------------


@dataclass
class WindowPath:
    times: np.ndarray
    states: np.ndarray
    u1: np.ndarray
    u2: np.ndarray


def _guard(X):
    if not np.all(np.isfinite(X)) or np.max(np.abs(X)) > OVERFLOW_GUARD:
        raise Diverged("state left the overflow guard")


def simulate_window(model, x_start, u1_policy, u2_policy, t_start, cfg, stream):
    """One Euler-Maruyama path over ``[t_start, t_start + dt_window]``.

    Policies map ``(x, t)`` to a control vector. ``stream`` is a
    :class:`numpy.random.Generator` supplying the Brownian increments.
    """
    n, S, h = model.n, cfg.substeps, cfg.h
    x = np.asarray(x_start, dtype=float).copy()
    if x.shape != (n,):
        raise InvalidConfig(f"x_start must have length {n}")
    times = t_start + h * np.arange(S + 1)
    states = np.empty((S + 1, n))
    u1s = np.empty((S + 1, model.m1))
    u2s = np.empty((S + 1, model.m2))
    dW = stream.standard_normal((S, model.r)) * np.sqrt(h)
    for s in range(S + 1):
        u1 = np.atleast_1d(np.asarray(u1_policy(x, times[s]), dtype=float))
        u2 = np.atleast_1d(np.asarray(u2_policy(x, times[s]), dtype=float))
        states[s], u1s[s], u2s[s] = x, u1, u2
        if s == S:
            break
        dx = (model.A @ x + model.B1 @ u1 + model.B2 @ u2) * h
        for l in range(model.r):
            dx = dx + (model.C[l] @ x + model.D1[l] @ u1 + model.D2[l] @ u2) * dW[s, l]
        x = x + dx
        _guard(x)
    return WindowPath(times=times, states=states, u1=u1s, u2=u2s)


def _trapezoid_weights(S, h):
    w = np.full(S + 1, h)
    w[0] = w[-1] = 0.5 * h
    return w


def _mc_chunk(model, F, G, sinus, x_anchor, t0, cfg, dither_std, seed_key, count, fields):
    """Simulate ``count`` rollouts from ``x_anchor``; return per-rollout rows and end states."""
    n, m, S, h = model.n, model.m1 + model.m2, cfg.substeps, cfg.h
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed_key)))
    dW = rng.standard_normal((S, count, model.r)) * np.sqrt(h)
    dither = rng.standard_normal((S, count, m)) * dither_std if np.any(dither_std > 0) else None
    g = sinus(t0 + h * np.arange(S + 1))
    B, D, A, C = model.B, model.D, model.A, model.C
    wts = _trapezoid_weights(S, h)
    X = np.tile(x_anchor, (count, 1))
    ixx = np.zeros((count, n, n))
    ixv = np.zeros((count, n, m))
    ivv = np.zeros((count, m, m))
    for s in range(S + 1):
        e = g[s] if dither is None else g[s] + dither[min(s, S - 1)]
        U = X @ F.T + e
        V = X @ G.T + e
        wt = wts[s]
        ixx += wt * (X[:, :, None] * X[:, None, :])
        ixv += wt * (X[:, :, None] * V[:, None, :])
        ivv += wt * (V[:, :, None] * V[:, None, :])
        if s == S:
            break
        Xn = X + (X @ A.T + U @ B.T) * h
        for l in range(model.r):
            Xn += (X @ C[l].T + U @ D[l].T) * dW[s, :, l:l + 1]
        X = Xn
        _guard(X)
    x_end_outer = X[:, :, None] * X[:, None, :]
    rows = _assemble_rows(x_anchor, x_end_outer, ixx, ixv, ivv, model.m1, fields)
    return rows, X[0]


def _thread_count():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        raise InvalidConfig(f"{THREADS_ENV} must be an integer, got {raw!r}") from None


def collect_batch_mc(model, request, cfg, batch_index=0, anchors=None, threads=None):
    """Monte Carlo sampling matrices.

    Each window restarts ``cfg.rollouts`` paths from its anchor; the anchor of
    the next window is the end state of rollout 0. Rollouts run in fixed
    chunks of ``ROLLOUT_CHUNK`` seeded by ``(seed, batch_index, window,
    chunk)`` and are reduced in chunk order, so results do not depend on the
    thread count. Passing ``anchors`` pins the window start states instead.
    """
    F, Kref, explore, fields = _check_request(model, request)
    G = F - Kref
    spec = cfg.exploration
    sinus = _Sinusoids(spec, explore)
    dither_std = spec.dither_std if (spec.has_dither and any(explore)) else 0.0
    mask = np.asarray(explore, dtype=float)
    N, M = cfg.n_windows, cfg.rollouts
    if anchors is not None:
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        N = anchors.shape[0]
    chunks = [(start, min(ROLLOUT_CHUNK, M - start)) for start in range(0, M, ROLLOUT_CHUNK)]
    threads = _thread_count() if threads is None else max(1, int(threads))
    x = cfg.initial_state(model.n)
    rows_out = {nm: [] for nm in fields}
    err_out = {nm: [] for nm in fields}
    anchor_list, times = [], []
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for i in range(N):
            if anchors is not None:
                x = anchors[i]
            t0 = i * cfg.dt_window
            anchor_list.append(x.copy())
            times.append(t0)

            def run(chunk, x=x, t0=t0, i=i):
                idx, (_, count) = chunk
                key = [int(cfg.seed), int(batch_index), i, idx]
                return _mc_chunk(model, F, G, sinus, x, t0, cfg, dither_std * mask, key, count, fields)

            run_args = list(enumerate(chunks))
            results = list(pool.map(run, run_args)) if pool else [run(c) for c in run_args]
            for nm in fields:
                total = np.zeros(results[0][0][nm].shape[1])
                total_sq = np.zeros_like(total)
                for rows, _ in results:
                    total += rows[nm].sum(axis=0)
                    total_sq += (rows[nm] ** 2).sum(axis=0)
                mean = total / M
                var = np.maximum(total_sq / M - mean ** 2, 0.0) * (M / max(M - 1, 1))
                rows_out[nm].append(mean)
                err_out[nm].append(np.sqrt(var / M))
            x = results[0][1]
    finally:
        if pool:
            pool.shutdown()
    return SampleBatch(
        data={nm: np.array(v) for nm, v in rows_out.items()},
        anchors=np.array(anchor_list), times=np.array(times),
        dims=(model.n, model.m1, model.m2), mode="mc",
        stderr={nm: np.array(v) for nm, v in err_out.items()},
    )


# -- exact conditional moments -------------------------------------------


def _rk4_propagator(G, h, steps):
    """Map produced by ``steps`` classical RK4 steps of ``y' = G y``."""
    hG = h * G
    step = np.eye(G.shape[0])
    term = np.eye(G.shape[0])
    for k in range(1, 5):
        term = term @ hG / k
        step = step + term
    return np.linalg.matrix_power(step, steps)


def _second_moment_generator(Aa, Ca):
    """Generator of ``svec(E[z z'])`` for ``dz = Aa z dt + sum Ca_l z dW_l``."""
    nu = Aa.shape[0]
    eye = np.eye(nu)
    op = np.kron(eye, Aa) + np.kron(Aa, eye)
    for c in Ca:
        op = op + np.kron(c, c)
    T = duplication_matrix(nu)
    return np.linalg.pinv(T) @ op @ T


def collect_batch_exact(model, request, cfg, anchors=None):
    """Noise-free sampling matrices from the conditional moment equations.

    The sinusoidal excitation is produced by an autonomous oscillator, so the
    joint state ``z = [x; s]`` is a linear SDE and ``E[z z']`` together with
    its running integral obeys a linear ODE. That ODE is integrated with
    classical RK4 at step ``h/4`` per window. Window start states follow the
    conditional mean unless ``anchors`` is given.
    """
    F, Kref, explore, fields = _check_request(model, request)
    spec = cfg.exploration
    if spec.has_dither and any(explore):
        raise InvalidConfig("exact batches need deterministic exploration (no dither)")
    n, m1 = model.n, model.m1
    G = F - Kref
    sinus = _Sinusoids(spec, explore)
    W, E = sinus.oscillator()
    q2 = W.shape[0]
    nu = n + q2
    Ab = model.A + model.B @ F
    Aa = np.zeros((nu, nu))
    Aa[:n, :n] = Ab
    Aa[:n, n:] = model.B @ E
    Aa[n:, n:] = W
    Ca = []
    for c, d in zip(model.C, model.D):
        blk = np.zeros((nu, nu))
        blk[:n, :n] = c + d @ F
        blk[:n, n:] = d @ E
        Ca.append(blk)
    L = _second_moment_generator(Aa, Ca)
    ds = L.shape[0]
    aug = np.zeros((2 * ds, 2 * ds))
    aug[:ds, :ds] = L
    aug[ds:, :ds] = np.eye(ds)
    steps = 4 * cfg.substeps
    hq = cfg.h / 4.0
    second = _rk4_propagator(aug, hq, steps)
    first = _rk4_propagator(Aa, hq, steps)

    N = cfg.n_windows
    if anchors is not None:
        anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
        N = anchors.shape[0]
    x = cfg.initial_state(n)
    rows_out = {nm: [] for nm in fields}
    anchor_list, times = [], []
    for i in range(N):
        if anchors is not None:
            x = anchors[i]
        t0 = i * cfg.dt_window
        z = np.concatenate([x, sinus.state(t0)])
        y = second @ np.concatenate([svec(np.outer(z, z)), np.zeros(ds)])
        Y_end, IY = smat(y[:ds], nu), smat(y[ds:], nu)
        ixx = IY[:n, :n]
        img = IY[:n, n:] @ E.T
        igg = E @ IY[n:, n:] @ E.T
        ixv = ixx @ G.T + img
        ivv = G @ ixx @ G.T + G @ img + img.T @ G.T + igg
        ivv = 0.5 * (ivv + ivv.T)
        rows = _assemble_rows(x, Y_end[:n, :n], ixx, ixv, ivv, m1, fields)
        for nm in fields:
            rows_out[nm].append(rows[nm])
        anchor_list.append(x.copy())
        times.append(t0)
        x = (first @ z)[:n]
        if not np.all(np.isfinite(x)) or np.max(np.abs(x)) > OVERFLOW_GUARD:
            raise Diverged("mean state left the overflow guard")
    return SampleBatch(
        data={nm: np.array(v) for nm, v in rows_out.items()},
        anchors=np.array(anchor_list), times=np.array(times),
        dims=(n, model.m1, model.m2), mode="exact",
    )


# -- cost estimation ------------------------------------------------------


@dataclass(frozen=True)
class CostEstimate:
    """Step-doubling extrapolated Monte Carlo cost.

    ``value`` combines paths at steps ``h`` and ``h/2`` driven by the same
    Brownian motion (``2 J_{h/2} - J_h``); ``bias`` is ``|J_{h/2} - J_h|``, an
    estimate of the discretization error left in the coarse run.
    """

    value: float
    stderr: float
    bias: float
    fine: float
    coarse: float
    rollouts: int

    def __float__(self):
        return self.value


def _cost_weight(model, K):
    S = model.S
    Wt = model.Q + S.T @ K + K.T @ S + K.T @ model.R @ K
    return 0.5 * (Wt + Wt.T)


def estimate_cost(model, K1, K2, cfg, horizon_T, stream_id=0):
    """Monte Carlo estimate of the cost of ``u = [K1; K2] x`` from ``cfg.x0`` over ``[0, T]``."""
    if not (np.isfinite(horizon_T) and horizon_T > 0):
        raise InvalidConfig("horizon_T must be positive")
    K = np.vstack([np.atleast_2d(K1), np.atleast_2d(K2)])
    Acl = model.A + model.B @ K
    Ccl = [c + d @ K for c, d in zip(model.C, model.D)]
    Wt = _cost_weight(model, K)
    h = cfg.h
    steps = int(round(horizon_T / h))
    x0 = cfg.initial_state(model.n)
    M = cfg.rollouts
    fine_vals, coarse_vals = [], []
    for idx, start in enumerate(range(0, M, ROLLOUT_CHUNK)):
        count = min(ROLLOUT_CHUNK, M - start)
        rng = np.random.Generator(np.random.PCG64(
            np.random.SeedSequence([int(cfg.seed), int(stream_id), 2**31 - 1, idx])))
        Xf = np.tile(x0, (count, 1))
        Xc = Xf.copy()
        jf = 0.5 * (h / 2) * np.einsum("ri,ij,rj->r", Xf, Wt, Xf)
        jc = 0.5 * h * np.einsum("ri,ij,rj->r", Xc, Wt, Xc)
        sq = np.sqrt(h / 2)
        for s in range(steps):
            dW_a = rng.standard_normal((count, model.r)) * sq
            dW_b = rng.standard_normal((count, model.r)) * sq
            for dW in (dW_a, dW_b):
                Xn = Xf + (Xf @ Acl.T) * (h / 2)
                for l in range(model.r):
                    Xn += (Xf @ Ccl[l].T) * dW[:, l:l + 1]
                Xf = Xn
                q = np.einsum("ri,ij,rj->r", Xf, Wt, Xf)
                jf += (h / 2) * q
            dW = dW_a + dW_b
            Xn = Xc + (Xc @ Acl.T) * h
            for l in range(model.r):
                Xn += (Xc @ Ccl[l].T) * dW[:, l:l + 1]
            Xc = Xn
            jc += h * np.einsum("ri,ij,rj->r", Xc, Wt, Xc)
            if s % 64 == 0 or s == steps - 1:
                _guard(Xf)
                _guard(Xc)
        # trapezoid: remove half of the last sample
        jf -= 0.5 * (h / 2) * np.einsum("ri,ij,rj->r", Xf, Wt, Xf)
        jc -= 0.5 * h * np.einsum("ri,ij,rj->r", Xc, Wt, Xc)
        fine_vals.append(jf)
        coarse_vals.append(jc)
    fine = np.concatenate(fine_vals)
    coarse = np.concatenate(coarse_vals)
    extrap = 2.0 * fine - coarse
    stderr = float(np.std(extrap, ddof=1) / np.sqrt(M)) if M > 1 else float("inf")
    return CostEstimate(
        value=float(extrap.mean()), stderr=stderr,
        bias=float(abs(fine.mean() - coarse.mean())),
        fine=float(fine.mean()), coarse=float(coarse.mean()), rollouts=M,
    )


# -- environment handle ----------------------------------------------------


class Environment:
    """Sampling access to a plant whose matrices the learners never see.

    ``mode`` is ``"mc"`` (seeded Monte Carlo) or ``"exact"`` (moment oracle).
    Each :meth:`collect` call gets the next batch index, which keys the noise
    streams.
    """

    def __init__(self, model, cfg, mode="mc", threads=None):
        if mode not in ("mc", "exact"):
            raise InvalidConfig(f"mode must be 'mc' or 'exact', got {mode!r}")
        self._model = model
        self.cfg = cfg
        self.mode = mode
        self.threads = threads
        self.batches_collected = 0

    @property
    def dims(self):
        return self._model.dims

    @property
    def stochastic(self):
        return self.mode == "mc"

    def collect(self, request):
        idx = self.batches_collected
        self.batches_collected += 1
        if self.mode == "exact":
            batch = collect_batch_exact(self._model, request, self.cfg)
        else:
            batch = collect_batch_mc(self._model, request, self.cfg, batch_index=idx,
                                     threads=self.threads)
        log.debug("batch %d (%s): %d windows, fields %s", idx, self.mode, batch.rows,
                  sorted(batch.present))
        return batch


# -- CSV dump / load -------------------------------------------------------


def dump_batch(batch, directory):
    """Write one CSV per field (``window`` column plus one column per entry)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = dict(batch.data)
    tables["anchors"] = batch.anchors
    for name, arr in tables.items():
        with open(directory / f"{name}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["window", "t"] + [f"{name}_{j}" for j in range(arr.shape[1])])
            for i, row in enumerate(arr):
                writer.writerow([i, repr(float(batch.times[i]))] + [repr(float(v)) for v in row])
    with open(directory / "meta.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n", "m1", "m2", "mode"])
        writer.writerow(list(batch.dims) + [batch.mode])


def load_batch(directory):
    directory = Path(directory)
    with open(directory / "meta.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    n, m1, m2 = (int(v) for v in rows[1][:3])
    mode = rows[1][3]

    def read(name):
        with open(directory / f"{name}.csv", newline="") as fh:
            body = list(csv.reader(fh))[1:]
        times = np.array([float(r[1]) for r in body])
        return times, np.array([[float(v) for v in r[2:]] for r in body]).reshape(len(body), -1)

    times, anchors = read("anchors")
    data = {nm: read(nm)[1] for nm in FIELD_NAMES if (directory / f"{nm}.csv").exists()}
    return SampleBatch(data=data, anchors=anchors, times=times, dims=(n, m1, m2), mode=mode)
