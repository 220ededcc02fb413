"""Acceptance criteria, one test each; every test prints a CRITERION line."""

import math
import time

import mpmath
import numpy as np
import pytest

import oracles
from satadapt import ControllerConfig, RandomStreams, RegressorDataset, SystemParams, pseudo_inverse_2x2
from satadapt import bmsb, bounds, cli, ensemble, simulate_closed_loop, solve_ols

CFG = ControllerConfig(1.0, 0.1, -1.0, -5.0)
SYSTEMS = {
    "system1": SystemParams(0.7, -1.0, 1.0),
    "system2": SystemParams(-1.0, 2.0, 2.0),
    "system3": SystemParams(1.0, 0.5, 1.5),
}
H, N, SEED = 1000, 1000, 0


def report(capsys, n, ok, detail):
    with capsys.disabled():
        print(f"\nCRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}")
    assert ok, detail


@pytest.fixture(scope="module")
def runs():
    start = time.perf_counter()
    stats = {k: ensemble.run_ensemble(p, CFG, H, N, SEED) for k, p in SYSTEMS.items()}
    elapsed = time.perf_counter() - start
    return stats, elapsed


@pytest.fixture(scope="module")
def certificates():
    return {k: bounds.build_certificate(p, CFG) for k, p in SYSTEMS.items()}


def test_criterion_01_constraint_and_runtime(runs, capsys):
    stats, elapsed = runs
    worst = max(s.u_abs_max for s in stats.values())
    ok = worst <= CFG.u_max and elapsed < 60
    report(capsys, 1, ok, f"max|U|={worst:.6f} time={elapsed:.1f}s for 3x{N}x{H} steps")


def test_criterion_02_no_late_growth_and_random_walk(runs, capsys):
    stats, _ = runs
    parts, ok = [], True
    for name, st in stats.items():
        good, late, early = ensemble.late_growth_check(st)
        ok &= good
        parts.append(f"{name} late={late:.3f} early+3se={early:.3f}")
    unc = ensemble.run_ensemble(SYSTEMS["system3"], CFG, H, N, SEED, uncontrolled=True)
    got = float(unc.mean_x2[H])
    ok &= abs(got - 2250) <= 225
    parts.append(f"uncontrolled system3 mean X^2_{H}={got:.1f}")
    report(capsys, 2, ok, "; ".join(parts))


def test_criterion_03_estimate_means(runs, capsys):
    stats, _ = runs
    t = H - 1  # last estimate the horizon produces
    parts, ok = [], True
    for name, st in stats.items():
        ea, eb = abs(st.mean_a[t] - st.params.a), abs(st.mean_b[t] - st.params.b)
        ok &= ea <= 0.05 and eb <= 0.05
        parts.append(f"{name} |da|={ea:.4f} |db|={eb:.4f}")
    report(capsys, 3, ok, "; ".join(parts))


def test_criterion_04_stable_moment_bound(runs, capsys):
    stats, _ = runs
    p = SYSTEMS["system1"]
    sb = bounds.stable_case_bound(p, CFG, 0.8)
    ref, _ = oracles.stable_bound(p.a, p.b, p.sigma_w, CFG.u_max, p.x0, 0.8)
    res = ensemble.verify_stable_bound(stats["system1"], sb)
    ok = res.passed and abs(sb.bound - ref) <= 1e-9 * ref
    report(capsys, 4, ok, f"bound={sb.bound:.3f} oracle={ref:.3f} max(mean+3se)/bound={res.max_ratio:.4f}")


def _log_h(i, c3, c4):
    i = mpmath.mpf(i)
    return mpmath.log(mpmath.mpf(c4) / 3) + mpmath.mpf(4) / 3 * mpmath.log(i) - mpmath.mpf(c3) * i


def test_criterion_05_certificate(certificates, capsys):
    parts, ok = [], True
    for name, cert in certificates.items():
        p = SYSTEMS[name]
        cap = min(CFG.c_excite / 2, p.sigma_w * math.sqrt(2 / math.pi))
        grid = oracles.gamma_grid(CFG.d_sat, p.sigma_w, CFG.c_excite)
        good = 0 < cert.gamma <= cap and abs(cert.gamma - grid) <= 1e-6
        good &= 0 < cert.p < 1 and 0 < cert.c3 < cert.p**2 / 30
        with mpmath.workdps(80):
            window = all(_log_h(i, cert.c3, cert.c4) < 0 for i in range(cert.m_prime, cert.m_prime + 10_001))
        good &= window
        ok &= good
        parts.append(
            f"{name} gamma={cert.gamma:.7f} grid={grid:.7f} p={cert.p:.3e} c3={cert.c3:.3e} M'={cert.m_prime}"
        )
    report(capsys, 5, ok, "; ".join(parts))


def test_criterion_06_small_ball(certificates, capsys):
    p = SYSTEMS["system1"]
    cert = certificates["system1"]
    streams = RandomStreams(SEED, 0)
    prefix = simulate_closed_loop(p, CFG, H, streams)
    parts, ok = [], True
    for t in (5, 50, 500):
        rep = bmsb.verify_small_ball(prefix, cert, 64, 10_000, streams, t=t)
        good = not np.any(rep.small_ball_violation) and not np.any(rep.mean_violation)
        ok &= good and len(rep.phi) >= 64
        parts.append(f"t={t} min p_hat={rep.p_hat.min():.4f} min mean={rep.mean_abs.min():.4f}")
    parts.append(f"p={cert.p:.3e} gamma={cert.gamma:.4f}")
    report(capsys, 6, ok, "; ".join(parts))


def _penrose(m, p):
    return max(
        np.max(np.abs(m @ p @ m - m)),
        np.max(np.abs(p @ m @ p - p)),
        np.max(np.abs(m @ p - (m @ p).T)),
        np.max(np.abs(p @ m - (p @ m).T)),
    )


def test_criterion_07_least_squares_oracle(capsys):
    rng = np.random.default_rng(2024)
    worst_est = worst_pen = 0.0
    ranks = set()
    for k in range(100):
        n = int(rng.integers(1, 501))
        if k % 5 == 0:
            z = np.outer(rng.normal(size=n), rng.normal(size=2))
        else:
            z = rng.normal(size=(n, 2)) * rng.uniform(0.1, 3, size=2)
        y = z @ rng.normal(size=2) + rng.normal(size=n)
        ds = RegressorDataset()
        for zi, yi in zip(z, y):
            ds.ingest(zi, yi)
        est = solve_ols(ds)
        ranks.add(est.rank)
        worst_est = max(worst_est, float(np.max(np.abs(est.theta - oracles.batch_ols(z, y)))))
        pinv, _ = pseudo_inverse_2x2(ds.gram)
        worst_pen = max(worst_pen, _penrose(ds.gram, pinv) / max(1.0, np.max(np.abs(ds.gram))))
    ok = worst_est <= 1e-10 and worst_pen <= 1e-10 and ranks >= {1, 2}
    report(capsys, 7, ok, f"max|theta-oracle|={worst_est:.2e} max penrose residual={worst_pen:.2e} ranks={sorted(ranks)}")


def test_criterion_08_f_and_folded_normal(capsys):
    d, sigma = CFG.d_sat, 1.0
    phi = np.linspace(-math.pi, math.pi, 100, endpoint=False) + 0.013
    worst_f = max(
        abs(bounds.excitation_f(math.cos(a), math.sin(a), d, sigma)
            - oracles.truncated_expectation_quad(math.cos(a), math.sin(a), 0.0, d, sigma))
        for a in phi
    )
    rng = np.random.default_rng(7)
    pairs = [(-3.0, 1.0), (-1.0, 0.5), (-0.2, 2.0), (0.0, 1.0), (0.0, 1.5),
             (0.3, 0.1), (0.7, 1.0), (1.0, 2.0), (2.5, 1.5), (4.0, 3.0)]
    worst_z = 0.0
    for mu, s in pairs:
        draws = np.abs(rng.normal(mu, s, 1_000_000))
        se = draws.std(ddof=1) / 1000.0
        worst_z = max(worst_z, abs(draws.mean() - bounds.folded_normal_mean(mu, s)) / se)
    ok = worst_f <= 1e-6 and worst_z <= 3
    report(capsys, 8, ok, f"max|f-quad|={worst_f:.2e} folded normal max|z|={worst_z:.2f}")


def test_criterion_09_f_monotone(capsys):
    grid = np.linspace(-math.pi, math.pi, 1_000_000)
    ok, parts = True, []
    for sigma in (1.0, 2.0, 1.5):
        logf = bounds.log_excitation_f(np.cos(grid), np.sin(grid), CFG.d_sat, sigma)
        f = bounds.excitation_f_circle(grid, CFG.d_sat, sigma)
        ok &= bool(np.all(f >= 0))
        h = math.pi / 2
        for lo, hi, sign in ((-math.pi, -h, -1), (-h, 0, 1), (0, h, -1), (h, math.pi, 1)):
            seg = logf[(grid >= lo) & (grid <= hi)]
            ok &= bool(np.all(sign * np.diff(seg) > 0))
        parts.append(f"sigma={sigma} min f={f.min():.2e}")
    report(capsys, 9, ok, "strict on 4 quarter-circles; " + "; ".join(parts))


def test_criterion_10_tail_bound(runs, certificates, capsys):
    stats, _ = runs
    parts, ok = [], True
    for name, st in stats.items():
        cert = certificates[name]
        row = ensemble.compare_tail_bound(st, cert, [cert.m_burn])[0]
        ok &= row.passed
        parts.append(f"{name} i=M={row.i} freq={row.freq} bound={row.bound:.4g}")
    report(capsys, 10, ok, "; ".join(parts))


def test_criterion_11_reproducible_outputs(tmp_path, capsys):
    names = ("msq.csv", "theta.csv", "td.csv", "tailcmp.csv")
    outs = {}
    for tag, workers in (("a", 1), ("b", 1), ("c", 16)):
        out = tmp_path / tag
        code = cli.main(["reproduce-fig1", "--out", str(out), "--seed", str(SEED), "--workers", str(workers)])
        assert code in (0, 1)
        outs[tag] = [(out / n).read_bytes() for n in names]
    same = outs["a"] == outs["b"] == outs["c"]
    report(capsys, 11, same, f"{len(names)} CSVs byte-identical across repeat and 1 vs 16 workers")
