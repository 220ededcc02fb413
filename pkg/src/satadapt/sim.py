"""Plant, saturated certainty-equivalence policy and reproducible noise.

The plant is ``X_{t+1} = a X_t + b U_t + W_t`` with ``W_t ~ N(0, sigma_w^2)``.
The policy applies ``U_t = sat_D(G_t X_t) + V_t`` with ``V_t ~ U[-C, C]`` and
``D = U_max - C``, so ``|U_t| <= U_max`` always. The gain is ``-a_init/b_init``
for t <= 1 and ``-a_hat_{t-1}/b_hat_{t-1}`` afterwards, where ``theta_hat_t``
is the least-squares fit to the pairs (Z_s, X_{s+1}), s = 1..t, computed right
after X_{t+1} is measured.

All trajectories are produced by one vectorised loop (``run_batch``) so a
single run and a row of a 1000-run ensemble are bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from satadapt.estimator import DEFAULT_LOG_CAP, RANK_TOL, ParameterEstimate, RegressorDataset, solve_batch

# |b_hat| below this keeps the previous gain instead of dividing
B_HAT_EPS = 1e-12

STREAM_TAGS = {"disturbance": 1, "excitation": 2, "branch": 3}


@dataclass(frozen=True)
class SystemParams:
    a: float
    b: float
    sigma_w: float
    x0: float = 0.0

    def __post_init__(self):
        for name in ("a", "b", "sigma_w", "x0"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if abs(self.a) > 1:
            raise ValueError("A2 violated: |a| <= 1 is required")
        if self.b == 0:
            raise ValueError("A2 violated: b != 0 is required")
        if not self.sigma_w > 0:
            raise ValueError("A1 violated: sigma_w > 0 is required")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.a, self.b])


@dataclass(frozen=True)
class ControllerConfig:
    u_max: float
    c_excite: float
    a_init: float
    b_init: float

    def __post_init__(self):
        if not (math.isfinite(self.u_max) and self.u_max > 0):
            raise ValueError("U_max must satisfy U_max > 0")
        if not (0 < self.c_excite < self.u_max):
            raise ValueError("C must satisfy 0 < C < U_max")
        if not math.isfinite(self.a_init):
            raise ValueError("a_init must be finite")
        if self.b_init == 0 or not math.isfinite(self.b_init):
            raise ValueError("b_init must be finite and nonzero")

    @property
    def d_sat(self) -> float:
        return self.u_max - self.c_excite

    @property
    def initial_gain(self) -> float:
        return -self.a_init / self.b_init


@dataclass(frozen=True)
class RandomStreams:
    """Seed bundle for one run.

    Each (master_seed, run_index, tag) pair owns an independent PCG64 stream;
    the draw at step t is the t-th value of that stream, so asking for a
    longer horizon never changes earlier draws. Tags listed in ``muted``
    return zeros, which is only meant for deterministic tests.
    """

    master_seed: int
    run_index: int = 0
    muted: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        if not (0 <= self.master_seed < 2**64):
            raise ValueError("master_seed must be a 64-bit unsigned integer")
        if self.run_index < 0:
            raise ValueError("run_index must be non-negative")
        unknown = set(self.muted) - set(STREAM_TAGS)
        if unknown:
            raise ValueError(f"unknown stream tags: {sorted(unknown)}")

    def generator(self, tag: str, *extra: int) -> np.random.Generator:
        seq = np.random.SeedSequence(
            self.master_seed, spawn_key=(self.run_index, STREAM_TAGS[tag], *extra)
        )
        return np.random.Generator(np.random.PCG64(seq))

    def disturbance(self, n: int, sigma_w: float) -> np.ndarray:
        if "disturbance" in self.muted:
            return np.zeros(n)
        return sigma_w * self.generator("disturbance").standard_normal(n)

    def excitation(self, n: int, c_excite: float) -> np.ndarray:
        if "excitation" in self.muted:
            return np.zeros(n)
        return self.generator("excitation").uniform(-c_excite, c_excite, n)


@dataclass(frozen=True)
class StepRecord:
    t: int
    x: float
    u: float
    v: float
    w: float
    gain: float
    a_hat: float
    b_hat: float


@dataclass(frozen=True, eq=False)
class Trajectory:
    """One simulated run.

    ``x`` has horizon + 1 entries (X_0..X_H); the per-step arrays have
    horizon entries (t = 0..H-1). ``est_a``/``est_b``/``est_rank`` hold the
    least-squares estimate computed at step t (NaN / -1 at t = 0), so the
    estimates available are theta_hat_1 .. theta_hat_{H-1}.
    """

    params: SystemParams
    config: ControllerConfig | None
    kind: str
    x: np.ndarray
    u: np.ndarray
    v: np.ndarray
    w: np.ndarray
    gain: np.ndarray
    a_used: np.ndarray
    b_used: np.ndarray
    est_a: np.ndarray
    est_b: np.ndarray
    est_rank: np.ndarray
    streams: RandomStreams | None = None

    @property
    def horizon(self) -> int:
        return len(self.u)

    @property
    def records(self) -> list[StepRecord]:
        return list(self.iter_records())

    def iter_records(self) -> Iterator[StepRecord]:
        for t in range(self.horizon):
            yield StepRecord(
                t,
                float(self.x[t]),
                float(self.u[t]),
                float(self.v[t]),
                float(self.w[t]),
                float(self.gain[t]),
                float(self.a_used[t]),
                float(self.b_used[t]),
            )

    def estimate(self, t: int) -> ParameterEstimate:
        if not 1 <= t < self.horizon:
            raise IndexError(f"no estimate at t={t}")
        return ParameterEstimate(
            float(self.est_a[t]), float(self.est_b[t]), t, int(self.est_rank[t])
        )

    def dataset(self, upto: int, log_cap: int | None = DEFAULT_LOG_CAP) -> RegressorDataset:
        """Regressor sums over s = 1..upto, accumulated in simulation order."""
        if not 0 <= upto < self.horizon:
            raise IndexError(f"dataset through s={upto} not available")
        data = RegressorDataset(log_cap=log_cap)
        for s in range(1, upto + 1):
            data.ingest((self.x[s], self.u[s]), self.x[s + 1])
        return data

    def equals(self, other: "Trajectory") -> bool:
        """Bit-level equality of all recorded arrays."""
        names = ("x", "u", "v", "w", "gain", "a_used", "b_used", "est_a", "est_b", "est_rank")
        return all(
            np.array_equal(getattr(self, n), getattr(other, n), equal_nan=n != "est_rank")
            for n in names
        )


def saturate(x, r):
    """Clamp ``x`` to [-r, r] keeping its sign; works elementwise on arrays."""
    if not r > 0:
        raise ValueError("saturation level must be positive")
    if np.ndim(x) == 0:
        return float(min(max(x, -r), r))
    return np.clip(x, -r, r)


def compute_gain(
    config: ControllerConfig,
    latest_estimate: ParameterEstimate | None,
    t: int,
    previous_gain: float | None = None,
) -> float:
    """Gain G_t of the certainty-equivalence policy.

    ``latest_estimate`` must be theta_hat_{t-1} when t >= 2. A near-zero
    b_hat falls back to ``previous_gain`` (the initial gain if none is given).
    """
    if t <= 1:
        return config.initial_gain
    if latest_estimate is None:
        raise ValueError("an estimate is required for t >= 2")
    if abs(latest_estimate.b_hat) < B_HAT_EPS:
        return config.initial_gain if previous_gain is None else previous_gain
    return -latest_estimate.a_hat / latest_estimate.b_hat


def control_input(gain: float, x: float, v: float, config: ControllerConfig) -> float:
    if abs(v) > config.c_excite:
        raise ValueError("excitation must satisfy |v| <= C")
    return saturate(gain * x, config.d_sat) + v


def run_batch(
    params: SystemParams,
    config: ControllerConfig | None,
    w: np.ndarray,
    v: np.ndarray,
    kind: str = "adaptive",
    pin: tuple[float, float] | None = None,
):
    """Simulate n runs in lockstep from noise arrays of shape (n, horizon).

    ``kind`` is "adaptive" (the closed loop), "reference" (fixed gain -a/b)
    or "uncontrolled" (U = 0). ``pin`` replaces the adaptive gain by -pa/pb
    at every step while the estimator still runs. Returns a dict of arrays.
    """
    w = np.atleast_2d(np.asarray(w, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    if w.shape != v.shape:
        raise ValueError("noise arrays must have the same shape")
    n, horizon = w.shape
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    if kind not in ("adaptive", "reference", "uncontrolled"):
        raise ValueError(f"unknown trajectory kind {kind!r}")
    if kind != "uncontrolled" and config is None:
        raise ValueError("a controller config is required")

    a, b = params.a, params.b
    x = np.empty((n, horizon + 1))
    x[:, 0] = params.x0
    u = np.zeros((n, horizon))
    gain = np.zeros((n, horizon))
    a_used = np.full((n, horizon), np.nan)
    b_used = np.full((n, horizon), np.nan)
    est_a = np.full((n, horizon), np.nan)
    est_b = np.full((n, horizon), np.nan)
    est_rank = np.full((n, horizon), -1, dtype=np.int64)
    gxx = np.zeros(n)
    gxu = np.zeros(n)
    guu = np.zeros(n)
    cx = np.zeros(n)
    cu = np.zeros(n)

    if kind == "uncontrolled":
        v = np.zeros_like(v)
        for t in range(horizon):
            x[:, t + 1] = a * x[:, t] + w[:, t]
        return dict(x=x, u=u, v=v, w=w, gain=gain, a_used=a_used, b_used=b_used,
                    est_a=est_a, est_b=est_b, est_rank=est_rank)

    d_sat = config.d_sat
    g_prev = np.full(n, config.initial_gain)
    for t in range(horizon):
        if kind == "reference":
            g = np.full(n, -a / b)
            a_used[:, t], b_used[:, t] = a, b
        elif pin is not None:
            g = np.full(n, -pin[0] / pin[1])
            a_used[:, t], b_used[:, t] = pin
        elif t <= 1:
            g = np.full(n, config.initial_gain)
            a_used[:, t], b_used[:, t] = config.a_init, config.b_init
        else:
            ah, bh = est_a[:, t - 1], est_b[:, t - 1]
            ok = np.abs(bh) >= B_HAT_EPS
            g = np.where(ok, -ah / np.where(ok, bh, 1.0), g_prev)
            a_used[:, t], b_used[:, t] = ah, bh
        gain[:, t] = g
        g_prev = g
        xt = x[:, t]
        ut = np.clip(g * xt, -d_sat, d_sat) + v[:, t]
        u[:, t] = ut
        xn = a * xt + b * ut + w[:, t]
        x[:, t + 1] = xn
        if kind == "adaptive" and t >= 1:
            gxx = gxx + xt * xt
            gxu = gxu + xt * ut
            guu = guu + ut * ut
            cx = cx + xt * xn
            cu = cu + ut * xn
            ah, bh, rk = solve_batch(gxx, gxu, guu, cx, cu, RANK_TOL)
            est_a[:, t], est_b[:, t], est_rank[:, t] = ah, bh, rk
    return dict(x=x, u=u, v=v, w=w, gain=gain, a_used=a_used, b_used=b_used,
                est_a=est_a, est_b=est_b, est_rank=est_rank)


def draw_noise(params: SystemParams, config: ControllerConfig | None, horizon: int,
               streams: RandomStreams):
    w = streams.disturbance(horizon, params.sigma_w)
    if config is None:
        v = np.zeros(horizon)
    else:
        v = streams.excitation(horizon, config.c_excite)
    return w, v


def _single(params, config, horizon, streams, kind, pin=None) -> Trajectory:
    if horizon < 1:
        raise ValueError("horizon must be at least 1")
    w, v = draw_noise(params, config, horizon, streams)
    out = run_batch(params, config, w[None, :], v[None, :], kind=kind, pin=pin)
    return Trajectory(params=params, config=config, kind=kind, streams=streams,
                      **{k: val[0] for k, val in out.items()})


def simulate_closed_loop(
    params: SystemParams,
    config: ControllerConfig,
    horizon: int,
    streams: RandomStreams,
    pin: tuple[float, float] | None = None,
) -> Trajectory:
    return _single(params, config, horizon, streams, "adaptive", pin)


def simulate_reference(
    params: SystemParams, config: ControllerConfig, horizon: int, streams: RandomStreams
) -> Trajectory:
    """Known-parameter counterpart driven by the same (W_t, V_t) draws."""
    return _single(params, config, horizon, streams, "reference")


def simulate_uncontrolled(params: SystemParams, horizon: int, streams: RandomStreams) -> Trajectory:
    return _single(params, None, horizon, streams, "uncontrolled")
