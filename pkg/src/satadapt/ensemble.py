"""Monte Carlo ensembles over independent seeded runs and their statistics.

Runs are simulated in lockstep blocks. Every run owns its noise streams, and
a row of the lockstep loop is bit-identical to a standalone simulation, so the
per-run arrays do not depend on how runs are split across workers. Statistics
are taken over the run-ordered stack, which makes them reproducible bit for bit.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from satadapt.bounds import ExcitationCertificate, StableCaseBound, deviation_bound, estimation_tail_bound
from satadapt.errors import InapplicableError
from satadapt.sim import ControllerConfig, RandomStreams, SystemParams, Trajectory, run_batch

SE_MULT = 3.0


def _se(values: np.ndarray, axis: int = 0) -> np.ndarray:
    n = values.shape[axis]
    if n < 2:
        return np.zeros(np.delete(values.shape, axis))
    return np.std(values, axis=axis, ddof=1) / math.sqrt(n)


@dataclass(frozen=True, eq=False)
class EnsembleStats:
    """Cross-run statistics; per-t arrays are indexed by t (estimates are NaN at t = 0)."""

    params: SystemParams
    config: ControllerConfig | None
    kind: str
    horizon: int
    n_runs: int
    master_seed: int
    mean_x2: np.ndarray
    std_x2: np.ndarray
    se_x2: np.ndarray
    mean_a: np.ndarray
    std_a: np.ndarray
    mean_b: np.ndarray
    std_b: np.ndarray
    mean_err: np.ndarray
    err: np.ndarray | None = None
    est_a: np.ndarray | None = None
    est_b: np.ndarray | None = None
    dev: np.ndarray | None = None
    mean_dev2: np.ndarray | None = None
    se_dev2: np.ndarray | None = None
    u_abs_max: float = 0.0

    def equals(self, other: "EnsembleStats") -> bool:
        names = ("mean_x2", "std_x2", "se_x2", "mean_a", "std_a", "mean_b", "std_b",
                 "mean_err", "err", "est_a", "est_b", "dev", "mean_dev2", "se_dev2")
        for n in names:
            x, y = getattr(self, n), getattr(other, n)
            if (x is None) != (y is None):
                return False
            if x is not None and not np.array_equal(x, y, equal_nan=True):
                return False
        return self.u_abs_max == other.u_abs_max

    def commitment_times(self, d: float):
        if self.err is None:
            raise ValueError("ensemble carries no estimate errors")
        return commitment_times(self.err, d)


def _chunk(params, config, horizon, seed, runs, kind, paired):
    ws, vs = [], []
    for r in runs:
        st = RandomStreams(seed, r)
        ws.append(st.disturbance(horizon, params.sigma_w))
        vs.append(np.zeros(horizon) if kind == "uncontrolled" else st.excitation(horizon, config.c_excite))
    w, v = np.array(ws), np.array(vs)
    out = run_batch(params, config, w, v, kind=kind)
    ref = run_batch(params, config, w, v, kind="reference") if paired else None
    return out, ref


def run_ensemble(
    params: SystemParams,
    config: ControllerConfig,
    horizon: int,
    n_runs: int,
    master_seed: int,
    paired_reference: bool = False,
    uncontrolled: bool = False,
    workers: int = 1,
    block: int = 250,
) -> EnsembleStats:
    """Simulate ``n_runs`` runs (run_index 0..n_runs-1) and aggregate them.

    ``uncontrolled`` replaces the closed loop by U = 0. ``paired_reference``
    also drives the known-parameter loop with the same noise and records
    X_t - X_t* per run. The result does not depend on ``workers`` or ``block``.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be positive")
    if horizon < 2:
        raise ValueError("horizon must be at least 2")
    if workers < 1 or block < 1:
        raise ValueError("workers and block must be positive")
    kind = "uncontrolled" if uncontrolled else "adaptive"
    if paired_reference and uncontrolled:
        raise ValueError("paired reference runs need the closed loop")
    chunks = [range(s, min(s + block, n_runs)) for s in range(0, n_runs, block)]
    args = (params, config, horizon, master_seed)
    if workers == 1:
        parts = [_chunk(*args, c, kind, paired_reference) for c in chunks]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda c: _chunk(*args, c, kind, paired_reference), chunks))

    x = np.concatenate([p[0]["x"] for p in parts])
    u = np.concatenate([p[0]["u"] for p in parts])
    est_a = np.concatenate([p[0]["est_a"] for p in parts])
    est_b = np.concatenate([p[0]["est_b"] for p in parts])
    x2 = x * x
    err = None
    if kind == "adaptive":
        err = np.hypot(est_a - params.a, est_b - params.b)
    dev = mean_dev2 = se_dev2 = None
    if paired_reference:
        x_ref = np.concatenate([p[1]["x"] for p in parts])
        dev = x - x_ref
        dev2 = dev * dev
        mean_dev2 = np.mean(dev2, axis=0)
        se_dev2 = _se(dev2)
    nan_row = np.full(horizon, np.nan)
    return EnsembleStats(
        params=params,
        config=config,
        kind=kind,
        horizon=horizon,
        n_runs=n_runs,
        master_seed=master_seed,
        mean_x2=np.mean(x2, axis=0),
        std_x2=np.std(x2, axis=0),
        se_x2=_se(x2),
        mean_a=np.mean(est_a, axis=0) if err is not None else nan_row,
        std_a=np.std(est_a, axis=0) if err is not None else nan_row,
        mean_b=np.mean(est_b, axis=0) if err is not None else nan_row,
        std_b=np.std(est_b, axis=0) if err is not None else nan_row,
        mean_err=np.mean(err, axis=0) if err is not None else nan_row,
        err=err,
        est_a=est_a if err is not None else None,
        est_b=est_b if err is not None else None,
        dev=dev,
        mean_dev2=mean_dev2,
        se_dev2=se_dev2,
        u_abs_max=float(np.max(np.abs(u))),
    )


@dataclass(frozen=True)
class CommitmentTime:
    """Finite-horizon commitment time.

    ``value`` is the first index k >= 1 after which every recorded estimate
    stays in the d-ball, or None when the final estimate is outside the ball.
    Over a finite horizon this only bounds the true commitment time from below.
    """

    d: float
    value: int | None
    horizon: int

    @property
    def censored(self) -> bool:
        return self.value is None


def commitment_times(err: np.ndarray, d: float) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised commitment times from an (n_runs, horizon) error array.

    Column 0 (no estimate) is ignored. Returns (values, censored) where values
    are -1 for censored runs.
    """
    if not d > 0:
        raise ValueError("d must be positive")
    err = np.atleast_2d(err)
    if err.shape[1] < 2:
        raise ValueError("need at least one estimate")
    tail = err[:, 1:]
    if np.any(np.isnan(tail)):
        raise ValueError("estimate sequence has gaps")
    outside = tail > d
    m = outside.shape[1]
    any_out = outside.any(axis=1)
    last_out = m - 1 - np.argmax(outside[:, ::-1], axis=1)
    values = np.where(any_out, last_out + 2, 1)
    censored = outside[:, -1]
    return np.where(censored, -1, values), censored


def commitment_time(trajectory: Trajectory, d: float, theta_star) -> CommitmentTime:
    if trajectory.kind != "adaptive":
        raise ValueError("trajectory carries no estimates")
    theta_star = np.asarray(theta_star, dtype=float)
    err = np.hypot(trajectory.est_a - theta_star[0], trajectory.est_b - theta_star[1])
    vals, cens = commitment_times(err[None, :], d)
    return CommitmentTime(d, None if cens[0] else int(vals[0]), trajectory.horizon)


@dataclass(frozen=True)
class TailRow:
    i: int
    freq: float
    se: float
    bound: float
    passed: bool


def compare_tail_bound(stats: EnsembleStats, cert: ExcitationCertificate, checkpoints) -> list[TailRow]:
    """Empirical P(|theta_hat_i - theta| > d) against the tail bound.

    Checkpoints past the simulated horizon have no empirical frequency (NaN);
    they pass only when the bound is at least 1, which no probability exceeds.
    """
    if stats.err is None:
        raise ValueError("ensemble carries no estimate errors")
    rows = []
    for i in checkpoints:
        i = int(i)
        bound = estimation_tail_bound(i, cert)
        if 1 <= i < stats.horizon:
            exceed = stats.err[:, i] > cert.d
            freq = float(np.mean(exceed))
            se = math.sqrt(freq * (1 - freq) / stats.n_runs)
            passed = freq <= bound + SE_MULT * se
        else:
            freq = se = math.nan
            passed = bound >= 1.0
        rows.append(TailRow(i, freq, se, bound, bool(passed)))
    return rows


@dataclass(frozen=True)
class StableCheck:
    passed: bool
    max_ratio: float
    worst_t: int
    bound: float


def verify_stable_bound(stats: EnsembleStats, bound: StableCaseBound) -> StableCheck:
    """mean X_t^2 + 3 SE <= bound at every t."""
    if abs(stats.params.a) >= 1:
        raise InapplicableError("stable-case bound needs |a| < 1")
    upper = stats.mean_x2 + SE_MULT * stats.se_x2
    ratio = upper / bound.bound
    worst = int(np.argmax(ratio))
    return StableCheck(bool(np.all(upper <= bound.bound)), float(ratio[worst]), worst, bound.bound)


def late_growth_check(stats: EnsembleStats) -> tuple[bool, float, float]:
    """No late growth: max mean X^2 on the second half <= max on the first half + 3 SE.

    The SE is taken at the first-half maximiser. Returns (passed, late, early + 3 SE).
    """
    h = stats.horizon // 2
    early_i = int(np.argmax(stats.mean_x2[: h + 1]))
    early = stats.mean_x2[early_i] + SE_MULT * stats.se_x2[early_i]
    late = float(np.max(stats.mean_x2[h:]))
    return bool(late <= early), late, float(early)


@dataclass(frozen=True)
class EnvelopeCheck:
    n_committed: int
    n_within: int
    n_sign_ok: int


def check_deviation_envelope(stats: EnsembleStats, d: float) -> EnvelopeCheck:
    """Per-run check of |X_t - X_t*| against the post-commitment envelope.

    Only runs whose finite-horizon commitment time k is observed are checked.
    Also counts runs whose estimate signs agree with (a, b) for t >= k + 1.
    """
    if stats.dev is None or stats.err is None:
        raise ValueError("needs an ensemble with paired reference runs")
    if abs(stats.params.a) != 1:
        raise InapplicableError("the deviation envelope is stated for |a| = 1")
    values, censored = stats.commitment_times(d)
    committed = within = sign_ok = 0
    for r in range(stats.n_runs):
        if censored[r]:
            continue
        k = int(values[r])
        committed += 1
        env = deviation_bound(k, d, stats.params, stats.config)
        if np.max(np.abs(stats.dev[r])) <= env:
            within += 1
        # estimates theta_hat_{t-1} for t >= k + 1
        a_hat, b_hat = stats.est_a[r, k:], stats.est_b[r, k:]
        if np.all(np.sign(a_hat) == np.sign(stats.params.a)) and np.all(
            np.sign(b_hat) == np.sign(stats.params.b)
        ):
            sign_ok += 1
    return EnvelopeCheck(committed, within, sign_ok)
