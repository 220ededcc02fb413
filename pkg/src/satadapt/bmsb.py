"""Branching Monte Carlo check of the small-ball condition.

From a recorded closed-loop run we freeze everything up to time t (X_t, U_t
and the estimator's data through s = t-1), redraw (W_t, V_{t+1}) many times,
replay one estimator update with the branched X_{t+1}, and look at
|zeta^T Z_{t+1}| along a grid of unit directions zeta = (cos phi, sin phi).
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from satadapt.bounds import ExcitationCertificate
from satadapt.estimator import RANK_TOL, solve_batch
from satadapt.sim import B_HAT_EPS, RandomStreams, Trajectory

SE_MULT = 3.0


def _branch_time(prefix: Trajectory, t: int | None) -> int:
    if prefix.config is None or prefix.kind != "adaptive":
        raise ValueError("branching needs an adaptive closed-loop trajectory")
    if t is None:
        t = prefix.horizon - 1
    if not 1 <= t < prefix.horizon:
        raise ValueError(f"prefix time t={t} must satisfy 1 <= t < horizon={prefix.horizon}")
    return t


def _prefix_sums(prefix: Trajectory, t: int):
    # same accumulation order as the simulator so replayed estimates match bitwise
    gxx = gxu = guu = cx = cu = 0.0
    x, u = prefix.x, prefix.u
    for s in range(1, t):
        gxx += x[s] * x[s]
        gxu += x[s] * u[s]
        guu += u[s] * u[s]
        cx += x[s] * x[s + 1]
        cu += u[s] * x[s + 1]
    return gxx, gxu, guu, cx, cu


def _branch_draws(streams: RandomStreams, prefix: Trajectory, t: int, phi_index: int, n: int):
    cfg = prefix.config
    gen_w = streams.generator("branch", t, phi_index, 0)
    gen_v = streams.generator("branch", t, phi_index, 1)
    w = prefix.params.sigma_w * gen_w.standard_normal(n)
    v = gen_v.uniform(-cfg.c_excite, cfg.c_excite, n)
    return w, v


def branch_state(prefix: Trajectory, t: int, w: np.ndarray, v: np.ndarray):
    """Replay one step from time t for arrays of (W_t, V_{t+1}) draws.

    Returns (X_{t+1}, U_{t+1}, a_hat_t, b_hat_t) arrays.
    """
    params, cfg = prefix.params, prefix.config
    xt, ut = float(prefix.x[t]), float(prefix.u[t])
    x_next = params.a * xt + params.b * ut + w
    gxx, gxu, guu, cx, cu = _prefix_sums(prefix, t)
    shape = np.shape(x_next)
    a_hat, b_hat, _ = solve_batch(
        np.full(shape, gxx + xt * xt),
        np.full(shape, gxu + xt * ut),
        np.full(shape, guu + ut * ut),
        cx + xt * x_next,
        cu + ut * x_next,
        RANK_TOL,
    )
    ok = np.abs(b_hat) >= B_HAT_EPS
    gain = np.where(ok, -a_hat / np.where(ok, b_hat, 1.0), float(prefix.gain[t]))
    u_next = np.clip(gain * x_next, -cfg.d_sat, cfg.d_sat) + v
    return x_next, u_next, a_hat, b_hat


def branch_next_step(
    prefix: Trajectory,
    zeta,
    n_branches: int,
    streams: RandomStreams,
    t: int | None = None,
    phi_index: int = 0,
) -> np.ndarray:
    """Samples of |zeta^T Z_{t+1}| given the history up to time t.

    ``t`` defaults to the last step at which the prefix recorded an input.
    ``phi_index`` selects the branch substream so that different directions
    never share draws. The prefix is not modified.
    """
    t = _branch_time(prefix, t)
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (2,) or abs(math.hypot(zeta[0], zeta[1]) - 1) > 1e-12:
        raise ValueError("zeta must be a unit 2-vector")
    if n_branches < 1:
        raise ValueError("n_branches must be positive")
    w, v = _branch_draws(streams, prefix, t, phi_index, n_branches)
    x_next, u_next, _, _ = branch_state(prefix, t, w, v)
    return np.abs(zeta[0] * x_next + zeta[1] * u_next)


def direction_grid(phi_count: int) -> np.ndarray:
    """Uniform angles on [-pi, pi) plus the axis directions, without duplicates."""
    if phi_count < 4:
        raise ValueError("phi_count must be at least 4")
    base = np.linspace(-math.pi, math.pi, phi_count, endpoint=False)
    extra = [a for a in (-math.pi, -math.pi / 2, 0.0, math.pi / 2)
             if not np.any(np.isclose(base, a, rtol=0, atol=1e-12))]
    return np.sort(np.concatenate([base, extra]))


@dataclass(frozen=True)
class BranchReport:
    t: int
    n_branches: int
    phi: np.ndarray
    p_hat: np.ndarray
    p_se: np.ndarray
    mean_abs: np.ndarray
    mean_se: np.ndarray
    threshold: float
    p_level: float
    gamma: float

    @property
    def small_ball_violation(self) -> np.ndarray:
        return self.p_hat + SE_MULT * self.p_se < self.p_level

    @property
    def mean_violation(self) -> np.ndarray:
        return self.mean_abs + SE_MULT * self.mean_se < self.gamma

    @property
    def violation(self) -> np.ndarray:
        return self.small_ball_violation | self.mean_violation

    @property
    def ok(self) -> bool:
        return not bool(np.any(self.violation))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["phi", "p_hat", "p_se", "mean_abs", "mean_se", "violation"])
        for row in zip(self.phi, self.p_hat, self.p_se, self.mean_abs, self.mean_se, self.violation):
            wr.writerow([repr(float(x)) for x in row[:5]] + [int(row[5])])
        return buf.getvalue()


def verify_small_ball(
    prefix: Trajectory,
    cert: ExcitationCertificate,
    phi_count: int,
    n_branches: int,
    streams: RandomStreams,
    t: int | None = None,
) -> BranchReport:
    t = _branch_time(prefix, t)
    if n_branches < 1:
        raise ValueError("n_branches must be positive")
    phi = direction_grid(phi_count)
    threshold = math.sqrt(cert.gamma_sb)
    n = n_branches
    p_hat = np.empty(len(phi))
    mean_abs = np.empty(len(phi))
    mean_se = np.empty(len(phi))
    for j, ang in enumerate(phi):
        zeta = np.array([math.cos(ang), math.sin(ang)])
        samples = branch_next_step(prefix, zeta, n, streams, t=t, phi_index=j)
        p_hat[j] = np.mean(samples >= threshold)
        mean_abs[j] = np.mean(samples)
        mean_se[j] = np.std(samples, ddof=1) / math.sqrt(n) if n > 1 else 0.0
    p_se = np.sqrt(p_hat * (1 - p_hat) / n)
    return BranchReport(t, n, phi, p_hat, p_se, mean_abs, mean_se, threshold, cert.p, cert.gamma)
