"""Independent reference computations used by the tests.

Nothing here imports the package's numerical routines; each oracle takes a
different route (SVD, quadrature, brute-force grids, root finding).
"""

from __future__ import annotations

import math

import numpy as np
from scipy import integrate, stats


def batch_ols(z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Minimum-norm least squares through an SVD pseudo-inverse of the data matrix."""
    return np.linalg.pinv(np.atleast_2d(z), rcond=1e-12) @ np.asarray(y, dtype=float)


def truncated_expectation_quad(z1, z2, x_hat, d_sat, sigma_w):
    """Quadrature of the indicator-split expectation whose closed form is h.

    X ~ N(x_hat, sigma_w^2); integrand is
    1{-(z1/z2) X < -D} |z1 X - z2 D| + 1{-(z1/z2) X > D} |z1 X + z2 D|.
    """
    def integrand(x):
        r = -(z1 / z2) * x
        val = 0.0
        if r < -d_sat:
            val += abs(z1 * x - z2 * d_sat)
        if r > d_sat:
            val += abs(z1 * x + z2 * d_sat)
        return val * stats.norm.pdf(x, x_hat, sigma_w)

    cuts = sorted((d_sat * z2 / z1, -d_sat * z2 / z1))
    spans = [(-np.inf, cuts[0]), (cuts[0], cuts[1]), (cuts[1], np.inf)]
    return sum(integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-12, limit=200)[0] for a, b in spans)


def f_loss(phi, d_sat, sigma_w):
    """f on the unit circle via the normal loss function from scipy.stats."""
    c, s = np.abs(np.cos(phi)), np.abs(np.sin(phi))
    scale = sigma_w * c
    with np.errstate(divide="ignore", invalid="ignore"):
        k = d_sat * s / scale
        val = 2 * scale * (stats.norm.pdf(k) - k * stats.norm.sf(k))
    return np.where(c == 0, 0.0, val)


def gamma_grid(d_sat, sigma_w, c_excite, n=1_000_000):
    phi = np.linspace(-math.pi, math.pi, n)
    vals = np.maximum(f_loss(phi, d_sat, sigma_w), np.abs(np.sin(phi)) * c_excite / 2)
    return float(np.min(vals))


def stable_bound(a, b, sigma_w, u_max, x0, lam):
    """Moment bound re-derived as the positive root of (lam - a^2) E^2 - 2|a| D1 E - D2 = 0."""
    s1 = sigma_w * math.sqrt(2 / math.pi)
    d1 = abs(b) * u_max + s1
    d2 = (abs(b) * u_max) ** 2 + 2 * abs(b) * u_max * s1 + sigma_w**2
    roots = np.roots([lam - a * a, -2 * abs(a) * d1, -d2])
    e = float(max(roots.real))
    beta = (abs(a) * e + d1) ** 2 - d1**2 + d2
    return x0**2 + beta / (1 - lam), e


def tail_constants(d, p, q, gsb, sigma_w):
    """Straight transcription, no log-space tricks."""
    c1 = q + gsb
    c2 = 1 + 2 * np.log(10 / p)
    c3 = gsb * d**2 * p**2 / (3 * (90 * sigma_w) ** 2)
    c4 = 3 * c1 ** (2 / 3) * np.exp((c2 + np.log(1 / gsb**2)) / 3)
    return c1, c2, c3, c4


def scan_first_below_one(c3, c4, limit=10**6):
    """Smallest m with h(i) < 1 for all i >= m, by exhaustive scan on a range where h decays."""
    h = [(i ** (4 / 3)) * math.exp(-c3 * i) * c4 / 3 for i in range(1, limit)]
    last_bad = 0
    for i, v in enumerate(h, start=1):
        if v >= 1:
            last_bad = i
    return last_bad + 1
