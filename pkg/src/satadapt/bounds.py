"""Analysis constants: excitation lower bound, small-ball parameters, tail bounds.

Notation follows the controller: D is the saturation level, C the excitation
amplitude, sigma_w the disturbance standard deviation. For a unit direction
zeta = (z1, z2) the excitation lower bound is

    f(z1, z2) = E[(|z1| |W| - |z2| D)^+]  with W ~ N(0, sigma_w^2)
              = 2 s (phi(k) - k Q(k)),    s = sigma_w |z1|, k = |z2| D / s,

which is what the piecewise erf/erfc expressions below evaluate. Formulas
with exp of large arguments are evaluated in log space; the burn-in search
uses mpmath because the crossing sits near 1e17 where doubles cannot resolve
consecutive integers.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import mpmath
import numpy as np
from scipy import optimize, special

from satadapt.errors import DomainError, InapplicableError
from satadapt.sim import ControllerConfig, SystemParams

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
GRID_POINTS = 100_000
GAMMA_TOL = 1e-10
DEFAULT_PSI = 0.5
# switch to the continued fraction for the normal loss above this ratio
CF_SWITCH = 5.0
CF_TERMS = 200
MP_DPS = 60


def folded_normal_mean(mu: float, sigma: float) -> float:
    """E|X| for X ~ N(mu, sigma^2)."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    return sigma * SQRT_2_OVER_PI * math.exp(-mu * mu / (2 * sigma * sigma)) + mu * math.erf(
        mu / (math.sqrt(2.0) * sigma)
    )


def _log_loss_ratio(k):
    """log((phi(k) - k Q(k)) / phi(k)) for k >= CF_SWITCH via Laplace's fraction."""
    k = np.asarray(k, dtype=float)
    t = k.copy()
    for j in range(CF_TERMS, 1, -1):
        t = k + j / t
    r = 1.0 / t
    return np.log(r / (k + r))


def log_excitation_f(zeta1, zeta2, d_sat: float, sigma_w: float):
    """Natural log of f, accurate where f itself underflows (near zeta1 = 0).

    Works elementwise; returns -inf where zeta1 == 0.
    """
    if not (d_sat > 0 and sigma_w > 0):
        raise ValueError("d_sat and sigma_w must be positive")
    z1 = np.abs(np.asarray(zeta1, dtype=float))
    z2 = np.abs(np.asarray(zeta2, dtype=float))
    z1, z2 = np.broadcast_arrays(z1, z2)
    out = np.full(z1.shape, -np.inf)
    live = z1 > 0
    s = sigma_w * z1[live]
    k = d_sat * z2[live] / s
    res = np.empty_like(k)
    small = k < CF_SWITCH
    ks = k[small]
    loss = np.exp(-0.5 * ks * ks) / math.sqrt(2 * math.pi) - ks * 0.5 * special.erfc(ks / math.sqrt(2))
    res[small] = np.log(2 * s[small] * loss)
    kb = k[~small]
    res[~small] = np.log(2 * s[~small]) - 0.5 * kb * kb - LOG_SQRT_2PI + _log_loss_ratio(kb)
    out[live] = res
    return out if out.ndim else float(out)


def excitation_f(zeta1: float, zeta2: float, d_sat: float, sigma_w: float) -> float:
    """Piecewise excitation lower bound f(zeta1, zeta2).

    The two zeta2 != 0 branches are the erf/erfc forms; once the cancellation
    between their two terms gets severe the same quantity is taken from the
    log-space evaluation instead.
    """
    if not (d_sat > 0 and sigma_w > 0):
        raise ValueError("d_sat and sigma_w must be positive")
    if zeta1 == 0:
        return 0.0
    a1 = abs(zeta1)
    if zeta2 == 0:
        return a1 * sigma_w * SQRT_2_OVER_PI
    k = d_sat * abs(zeta2) / (sigma_w * a1)
    if k >= CF_SWITCH:
        return math.exp(log_excitation_f(zeta1, zeta2, d_sat, sigma_w))
    head = math.exp(-0.5 * k * k) * SQRT_2_OVER_PI * sigma_w * a1
    arg = d_sat * zeta2 / (math.sqrt(2.0) * sigma_w * a1)
    if zeta2 < 0:
        return head + d_sat * zeta2 * (1 + math.erf(arg))
    return head - d_sat * zeta2 * math.erfc(arg)


def excitation_f_circle(phi, d_sat: float, sigma_w: float) -> np.ndarray:
    """Vectorised f(cos phi, sin phi)."""
    phi = np.asarray(phi, dtype=float)
    return np.exp(log_excitation_f(np.cos(phi), np.sin(phi), d_sat, sigma_w))


def excitation_g(zeta2: float, c_excite: float) -> float:
    if not c_excite > 0:
        raise ValueError("c_excite must be positive")
    return abs(zeta2) * c_excite / 2


def conditional_abs_expectation_h(
    zeta1: float, zeta2: float, x_hat: float, d_sat: float, sigma_w: float
) -> float:
    """Truncated-Gaussian expectation whose minimum over x_hat is f.

    With X ~ N(x_hat, sigma_w^2) this is the expected |zeta1 X -/+ zeta2 D|
    over the region where the saturated input cancels the state. The
    zeta2 < 0 and zeta2 > 0 cases have separate closed forms.
    """
    if zeta1 == 0 or zeta2 == 0:
        raise ValueError("h needs zeta1 != 0 and zeta2 != 0")
    if not (d_sat > 0 and sigma_w > 0):
        raise ValueError("d_sat and sigma_w must be positive")
    s = sigma_w * abs(zeta1)
    m = zeta1 * x_hat
    k = d_sat * zeta2
    r2 = math.sqrt(2.0) * s
    head = s / math.sqrt(2 * math.pi) * (
        math.exp(-((k - m) ** 2) / (2 * s * s)) + math.exp(-((k + m) ** 2) / (2 * s * s))
    )
    if zeta2 < 0:
        tail = (k + m) * (1 + math.erf((k + m) / r2)) + (k - m) * math.erfc((m - k) / r2)
    else:
        tail = (k - m) * (-2 + math.erfc((m - k) / r2)) - (k + m) * math.erfc((k + m) / r2)
    return head + 0.5 * tail


def _gamma_objective(phi, d_sat, sigma_w, c_excite):
    return np.maximum(excitation_f_circle(phi, d_sat, sigma_w), np.abs(np.sin(phi)) * c_excite / 2)


def compute_gamma(
    config: ControllerConfig,
    sigma_w: float,
    n_grid: int = GRID_POINTS,
    tol: float = GAMMA_TOL,
) -> float:
    """min over phi of max(f(cos phi, sin phi), g(sin phi)).

    Uniform grid on [-pi, pi], then bounded Brent refinement on the bracket
    around the best grid point.
    """
    if not sigma_w > 0:
        raise ValueError("sigma_w must be positive")
    d_sat, c_ex = config.d_sat, config.c_excite
    grid = np.linspace(-math.pi, math.pi, n_grid)
    vals = _gamma_objective(grid, d_sat, sigma_w, c_ex)
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, n_grid - 1)]
    res = optimize.minimize_scalar(
        lambda x: float(_gamma_objective(x, d_sat, sigma_w, c_ex)),
        bounds=(lo, hi),
        method="bounded",
        options={"xatol": tol},
    )
    gamma = min(float(res.fun), float(vals[i]))
    if not gamma > 0:
        raise RuntimeError(f"non-positive excitation level {gamma}")
    return gamma


def small_ball_params(gamma: float, psi: float, sigma_w: float, u_max: float) -> tuple[float, float]:
    """Return (p, gamma_sb) of the small-ball condition; Gamma_sb = gamma_sb * I."""
    if not 0 < psi < 1:
        raise ValueError("psi must lie in (0, 1)")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    p = 1.0 / (1.0 + 2.0 * (sigma_w**2 + u_max**2) / ((1 - psi) ** 2 * gamma**2))
    return p, psi * psi * gamma * gamma


def covariate_growth_q(params: SystemParams, config: ControllerConfig) -> float:
    return (abs(params.b) * config.u_max + params.sigma_w + abs(params.x0)) ** 2 + config.u_max**2


def radius_cap(gamma_sb: float, sigma_w: float) -> float:
    """Upper end of the admissible estimation-ball radius d."""
    return 90 * sigma_w / math.sqrt(10 * gamma_sb)


def tail_bound_constants(d: float, p: float, q: float, gamma_sb: float, sigma_w: float):
    """(c1, c2, c3, c4) of the estimation tail bound."""
    cap = radius_cap(gamma_sb, sigma_w)
    if not 0 < d < cap:
        raise DomainError(f"d must lie in (0, 90*sigma_w/sqrt(10*gamma_sb)) = (0, {cap:.6g})")
    if not 0 < p < 1:
        raise DomainError("p must lie in (0, 1)")
    c1 = q + gamma_sb
    c2 = 1 + 2 * math.log(10 / p)
    c3 = gamma_sb * d * d * p * p / (3 * (90 * sigma_w) ** 2)
    log_c4 = math.log(3) + (2 / 3) * math.log(c1) + (c2 - 2 * math.log(gamma_sb)) / 3
    return c1, c2, c3, math.exp(log_c4)


def _log_h(i, c3, c4):
    # log of (1/3) i^(4/3) e^(-c3 i) c4 at mpmath precision
    i = mpmath.mpf(i)
    return mpmath.log(c4) - mpmath.log(3) + mpmath.mpf(4) / 3 * mpmath.log(i) - mpmath.mpf(c3) * i


def first_index_below_one(c3: float, c4: float) -> int:
    """Smallest m >= 1 with (1/3) i^(4/3) e^(-c3 i) c4 < 1 for every integer i >= m."""
    if not (c3 > 0 and c4 > 0):
        raise ValueError("c3 and c4 must be positive")
    with mpmath.workdps(MP_DPS):
        i_star = mpmath.mpf(4) / (3 * mpmath.mpf(c3))
        top = int(mpmath.floor(i_star))
        peak = max(_log_h(j, c3, c4) for j in (max(top, 1), top + 1))
        if peak < 0:
            return 1
        # h is decreasing past the peak: bisect for the last index with h >= 1
        lo = top + 1
        if _log_h(lo, c3, c4) < 0:
            lo = top
        hi = max(2 * lo, 2)
        while _log_h(hi, c3, c4) >= 0:
            hi *= 2
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if _log_h(mid, c3, c4) >= 0:
                lo = mid
            else:
                hi = mid
        return hi


def below_one_on_window(c3: float, c4: float, start: int, width: int = 10_000) -> bool:
    """True if (1/3) i^(4/3) e^(-c3 i) c4 < 1 for every integer i in [start, start + width]."""
    with mpmath.workdps(MP_DPS):
        return all(_log_h(i, c3, c4) < 0 for i in range(start, start + width + 1))


def burn_in_times(d: float, p: float, q: float, gamma_sb: float, sigma_w: float) -> tuple[int, int]:
    """(M, M') for the tail bound: M' is where the bound's h drops below 1 for good."""
    c1, c2, c3, c4 = tail_bound_constants(d, p, q, gamma_sb, sigma_w)
    m_prime = first_index_below_one(c3, c4)
    with mpmath.workdps(MP_DPS):
        p_, d_, g_, s_ = (mpmath.mpf(z) for z in (p, d, gamma_sb, sigma_w))
        rate = p_**2 / 10 - g_ * d_**2 * p_**2 / (90 * s_) ** 2
        first = int(mpmath.ceil((4 * mpmath.log(10 / p_) - mpmath.mpf(c2)) / rate))
    return max(first, m_prime), m_prime


@dataclass(frozen=True)
class ExcitationCertificate:
    psi: float
    gamma: float
    p: float
    gamma_sb: float
    q: float
    d: float
    c1: float
    c2: float
    c3: float
    c4: float
    m_burn: int
    m_prime: int

    def to_text(self) -> str:
        lines = []
        for k, v in asdict(self).items():
            lines.append(f"{k}={v}" if isinstance(v, int) else f"{k}={v:.17g}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ExcitationCertificate":
        kinds = {f.name: f.type for f in fields(cls)}
        vals = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            if key not in kinds:
                raise ValueError(f"unknown certificate key {key!r}")
            vals[key] = int(raw) if kinds[key] == "int" else float(raw)
        missing = set(kinds) - set(vals)
        if missing:
            raise ValueError(f"missing certificate keys: {sorted(missing)}")
        return cls(**vals)


def default_radius(gamma_sb: float, sigma_w: float, b: float) -> float:
    m = radius_cap(gamma_sb, sigma_w)
    return min(0.9 * m, min(m / 2, 0.5, abs(b) / 2))


def build_certificate(
    params: SystemParams,
    config: ControllerConfig,
    psi: float = DEFAULT_PSI,
    d: float | None = None,
    gamma: float | None = None,
) -> ExcitationCertificate:
    if gamma is None:
        gamma = compute_gamma(config, params.sigma_w)
    p, gamma_sb = small_ball_params(gamma, psi, params.sigma_w, config.u_max)
    q = covariate_growth_q(params, config)
    if d is None:
        d = default_radius(gamma_sb, params.sigma_w, params.b)
    c1, c2, c3, c4 = tail_bound_constants(d, p, q, gamma_sb, params.sigma_w)
    m_burn, m_prime = burn_in_times(d, p, q, gamma_sb, params.sigma_w)
    return ExcitationCertificate(psi, gamma, p, gamma_sb, q, d, c1, c2, c3, c4, m_burn, m_prime)


def log_estimation_tail_bound(i: int, cert: ExcitationCertificate) -> float:
    if i < cert.m_burn:
        raise DomainError(f"tail bound is only valid for i >= M = {cert.m_burn}")
    with mpmath.workdps(MP_DPS):
        val = (
            mpmath.mpf(4) / 3 * mpmath.log(i)
            - mpmath.mpf(cert.c3) * i
            + mpmath.log(cert.c4)
        )
        return float(val)


def estimation_tail_bound(i: int, cert: ExcitationCertificate) -> float:
    """Raw bound on P(|theta_hat_i - theta| > d); may exceed 1."""
    return math.exp(log_estimation_tail_bound(i, cert))


def clamped_tail_bound(i: int, cert: ExcitationCertificate) -> float:
    return min(1.0, estimation_tail_bound(i, cert))


def summability_pieces(m: int, c3: float) -> dict:
    """Closed forms for the three pieces of the k^2-weighted tail double sum.

    ``burn`` counts the pre-burn-in terms bounded by 1; ``head`` and ``tail``
    bound the post-burn-in part with i^2 in place of i^(4/3) (multiply by c4).
    Values are mpmath numbers since M is typically around 1e17.
    """
    if m < 1 or not c3 > 0:
        raise ValueError("need M >= 1 and c3 > 0")
    # the polynomial cancels down to O(c3^6) relative to M^4 terms
    digits = MP_DPS + int(8 * max(0.0, -math.log10(c3)) + 6 * math.log10(m + 1))
    with mpmath.workdps(digits):
        M = mpmath.mpf(m)
        c = mpmath.mpf(c3)
        e = mpmath.exp(c)
        burn = M * (M + 1) ** 2 * (M + 2) / 12
        ksq = M * (M + 1) * (2 * M + 1) / 6
        head = ksq * mpmath.exp(c - c * M) * (
            -2 * e * M**2 + e**2 * M**2 + 2 * e * M + e + M**2 - 2 * M + 1
        ) / mpmath.expm1(c) ** 3
        tail = mpmath.exp(-c * (M - 2)) / mpmath.expm1(c) ** 6 * (
            (M - 2) ** 2 * M**2
            + e**4 * (M + 1) ** 2 * M**2
            - e**3 * (M + 1) ** 2 * (4 * M**2 - 6 * M - 5)
            + e**2 * (6 * M**4 - 6 * M**3 - 25 * M**2 + 8 * M + 26)
            + e * (-4 * M**4 + 10 * M**3 + 7 * M**2 - 24 * M + 9)
        )
        return {"burn": +burn, "head": +head, "tail": +tail}


def summability_total(cert: ExcitationCertificate):
    pieces = summability_pieces(cert.m_burn, cert.c3)
    return pieces["burn"] + cert.c4 * (pieces["head"] + pieces["tail"])


@dataclass(frozen=True)
class StableCaseBound:
    lam: float
    s1: float
    s2: float
    d1: float
    d2: float
    e_lambda: float
    beta: float
    bound: float


def stable_case_bound(params: SystemParams, config: ControllerConfig, lam: float) -> StableCaseBound:
    """Uniform bound on E[X_t^2] for a strictly stable plant (|a| < 1)."""
    a = params.a
    if abs(a) >= 1:
        raise InapplicableError("stable-case bound needs |a| < 1")
    if not a * a < lam < 1:
        raise DomainError(f"lambda must lie in (a^2, 1) = ({a * a}, 1)")
    bu = abs(params.b) * config.u_max
    s1 = params.sigma_w * SQRT_2_OVER_PI
    s2 = params.sigma_w**2
    d1 = bu + s1
    d2 = bu * bu + 2 * bu * s1 + s2
    gap = lam - a * a
    e_lam = (abs(a) * d1 + math.sqrt(a * a * d1 * d1 + gap * d2)) / gap
    beta = a * a * e_lam**2 + 2 * abs(a) * e_lam * d1 + d2
    return StableCaseBound(lam, s1, s2, d1, d2, e_lam, beta, params.x0**2 + beta / (1 - lam))


def deviation_bound(k: int, d: float, params: SystemParams, config: ControllerConfig) -> float:
    """Envelope on |X_t - X_t*| once the estimates have committed to a d-ball at k."""
    b = abs(params.b)
    if k < 1:
        raise ValueError("k must be a positive integer")
    if not 0 < d < min(1.0, b):
        raise DomainError("d must lie in (0, min(1, |b|))")
    big_d = config.d_sat
    return max((k + 1) * b * 2 * big_d, 2 * ((b + d) / (1 - d) + 3 * b) * big_d)
