"""Ordinary least squares for theta = (a, b) from (X_s, U_s) -> X_{s+1} pairs.

The estimator keeps the 2x2 Gram matrix and the cross vector as running sums
and solves through the Moore-Penrose pseudo-inverse, so rank-deficient data
(for example a single sample) yields the minimum-norm least-squares solution.

The solver works on plain arrays so the closed-loop simulator can update many
runs in lockstep. Only +, -, *, / and sqrt are used: those are correctly
rounded in every numpy code path, which keeps a run bit-identical whether it is
simulated alone or as one row of a batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from satadapt.errors import EmptyDatasetError

RANK_TOL = 1e-12
NORMAL_EQ_TOL = 1e-8
DEFAULT_LOG_CAP = 1_000_000


def _eig_sym2(p, r, s):
    """Eigen-decomposition of [[p, r], [r, s]] (elementwise over arrays).

    Returns (lam1, lam2, v1x, v1y) with lam1 >= lam2 and (v1x, v1y) the unit
    eigenvector of lam1. The second eigenvector is (-v1y, v1x).
    """
    # rescale by an exact power of two so the squares below neither overflow nor underflow
    _, ex = np.frexp(np.maximum(np.maximum(np.abs(p), np.abs(r)), np.abs(s)))
    p, r, s = np.ldexp(p, -ex), np.ldexp(r, -ex), np.ldexp(s, -ex)
    mean = 0.5 * (p + s)
    half = 0.5 * (p - s)
    delta = np.sqrt(half * half + r * r)
    lam1 = mean + delta
    lam2 = mean - delta
    # two candidate eigenvectors for lam1; take the better conditioned one
    ax, ay = r, lam1 - p
    bx, by = lam1 - s, r
    na = ax * ax + ay * ay
    nb = bx * bx + by * by
    use_a = na >= nb
    vx = np.where(use_a, ax, bx)
    vy = np.where(use_a, ay, by)
    norm = np.sqrt(np.where(use_a, na, nb))
    degenerate = norm == 0.0
    # isotropic or zero matrix: any basis works
    safe = np.where(degenerate, 1.0, norm)
    v1x = np.where(degenerate, 1.0, vx / safe)
    v1y = np.where(degenerate, 0.0, vy / safe)
    return np.ldexp(lam1, ex), np.ldexp(lam2, ex), v1x, v1y


def _rank(lam1, lam2, rank_tol):
    rank = np.zeros(np.shape(lam1), dtype=np.int64)
    rank = np.where(lam1 > 0.0, 1, rank)
    rank = np.where((lam1 > 0.0) & (lam2 > rank_tol * lam1), 2, rank)
    return rank


def solve_batch(gxx, gxu, guu, cx, cu, rank_tol=RANK_TOL):
    """Pseudo-inverse solve of gram @ theta = cross for arrays of 2x2 systems.

    Returns (a_hat, b_hat, rank) arrays.
    """
    lam1, lam2, v1x, v1y = _eig_sym2(gxx, gxu, guu)
    rank = _rank(lam1, lam2, rank_tol)
    proj1 = v1x * cx + v1y * cu
    proj2 = -v1y * cx + v1x * cu
    w1 = np.where(rank >= 1, proj1 / np.where(rank >= 1, lam1, 1.0), 0.0)
    w2 = np.where(rank == 2, proj2 / np.where(rank == 2, lam2, 1.0), 0.0)
    a_hat = v1x * w1 - v1y * w2
    b_hat = v1y * w1 + v1x * w2
    return a_hat, b_hat, rank


def pseudo_inverse_2x2(m, rank_tol: float = RANK_TOL):
    """Moore-Penrose inverse of a symmetric positive semi-definite 2x2 matrix.

    Eigenvalues below ``rank_tol`` times the largest one are treated as zero.
    Returns ``(pinv, rank)``.
    """
    m = np.asarray(m, dtype=float)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError("matrix has non-finite entries")
    scale = max(float(np.max(np.abs(m))), np.finfo(float).tiny)
    if abs(m[0, 1] - m[1, 0]) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    p, r, s = float(m[0, 0]), 0.5 * float(m[0, 1] + m[1, 0]), float(m[1, 1])
    lam1, lam2, v1x, v1y = (float(z) for z in _eig_sym2(p, r, s))
    if lam2 < -1e-10 * max(abs(lam1), np.finfo(float).tiny):
        raise ValueError("matrix is indefinite")
    rank = int(_rank(lam1, lam2, rank_tol))
    v1 = np.array([v1x, v1y])
    v2 = np.array([-v1y, v1x])
    pinv = np.zeros((2, 2))
    if rank >= 1:
        pinv += np.outer(v1, v1) / lam1
    if rank == 2:
        pinv += np.outer(v2, v2) / lam2
    return pinv, rank


@dataclass(frozen=True)
class ParameterEstimate:
    a_hat: float
    b_hat: float
    t: int
    rank: int

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.a_hat, self.b_hat])


class RegressorDataset:
    """Running sums of Z_s Z_s^T and Z_s X_{s+1} with an optional raw log.

    Samples are ingested from s = 1 onward; the caller never feeds Z_0.
    ``log_cap`` bounds the raw log; ``None`` disables it entirely.
    """

    def __init__(self, log_cap: int | None = DEFAULT_LOG_CAP):
        self.n = 0
        self.gxx = 0.0
        self.gxu = 0.0
        self.guu = 0.0
        self.cx = 0.0
        self.cu = 0.0
        self.log_cap = log_cap
        self.log: list[tuple[float, float, float]] | None = [] if log_cap else None

    def ingest(self, z, x_next: float) -> "RegressorDataset":
        x, u = float(z[0]), float(z[1])
        x_next = float(x_next)
        if not (math.isfinite(x) and math.isfinite(u) and math.isfinite(x_next)):
            raise ValueError("non-finite sample")
        self.n += 1
        self.gxx += x * x
        self.gxu += x * u
        self.guu += u * u
        self.cx += x * x_next
        self.cu += u * x_next
        if self.log is not None and len(self.log) < self.log_cap:
            self.log.append((x, u, x_next))
        return self

    @property
    def gram(self) -> np.ndarray:
        return np.array([[self.gxx, self.gxu], [self.gxu, self.guu]])

    @property
    def cross(self) -> np.ndarray:
        return np.array([self.cx, self.cu])

    def copy(self) -> "RegressorDataset":
        other = RegressorDataset.__new__(RegressorDataset)
        other.__dict__.update(self.__dict__)
        if self.log is not None:
            other.log = list(self.log)
        return other

    def raw(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked regressors (n x 2) and responses (n,) from the raw log."""
        if self.log is None:
            raise ValueError("raw log is disabled for this dataset")
        arr = np.array(self.log, dtype=float).reshape(-1, 3)
        return arr[:, :2], arr[:, 2]


def solve_ols(dataset: RegressorDataset, rank_tol: float = RANK_TOL) -> ParameterEstimate:
    if dataset.n == 0:
        raise EmptyDatasetError("least squares needs at least one sample")
    a_hat, b_hat, rank = solve_batch(
        np.array([dataset.gxx]),
        np.array([dataset.gxu]),
        np.array([dataset.guu]),
        np.array([dataset.cx]),
        np.array([dataset.cu]),
        rank_tol,
    )
    return ParameterEstimate(float(a_hat[0]), float(b_hat[0]), dataset.n, int(rank[0]))
