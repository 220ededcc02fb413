"""Command line entry point.

Experiments are described by a small INI file::

    [system]
    a = 0.7
    b = -1
    sigma_w = 1
    x0 = 0

    [controller]
    u_max = 1
    c = 0.1
    a_init = -1
    b_init = -5

    [run]
    horizon = 1000
    runs = 1000
    seed = 0

Every subcommand writes its files to --out and a checks.csv; the exit status
is 0 iff every check passed, 1 if a check failed, 2 on errors. Errors print a
single ``error: <category>: <message>`` line on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import math
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from satadapt import bmsb, bounds, ensemble
from satadapt.errors import DomainError, EmptyDatasetError, InapplicableError
from satadapt.sim import ControllerConfig, RandomStreams, SystemParams, simulate_closed_loop

KEYS = {
    "system": {"a", "b", "sigma_w", "x0"},
    "controller": {"u_max", "c", "a_init", "b_init"},
    "run": {"horizon", "runs", "seed", "psi", "d", "lambda", "workers"},
}

DEFAULT_CONTROLLER = ControllerConfig(u_max=1.0, c_excite=0.1, a_init=-1.0, b_init=-5.0)

PRESETS = {
    "system1": SystemParams(a=0.7, b=-1.0, sigma_w=1.0, x0=0.0),
    "system2": SystemParams(a=-1.0, b=2.0, sigma_w=2.0, x0=0.0),
    "system3": SystemParams(a=1.0, b=0.5, sigma_w=1.5, x0=0.0),
}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemParams
    controller: ControllerConfig
    horizon: int = 1000
    n_runs: int = 1000
    master_seed: int = 0
    psi: float = bounds.DEFAULT_PSI
    d: float | None = None
    lam: float | None = None
    workers: int = 1
    name: str = "custom"

    def __post_init__(self):
        if self.horizon < 2:
            raise ValueError("horizon must be at least 2")
        if self.n_runs < 1:
            raise ValueError("runs must be positive")
        if not 0 <= self.master_seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")
        if not 0 < self.psi < 1:
            raise ValueError("psi must lie in (0, 1)")
        if self.workers < 1:
            raise ValueError("workers must be positive")


def _num(sec, key, conv=float, default=None):
    if key not in sec:
        if default is None:
            raise ValueError(f"missing key {key!r}")
        return default
    raw = sec[key].strip()
    try:
        return conv(raw)
    except ValueError:
        raise ValueError(f"key {key!r}: cannot parse {raw!r}") from None


def parse_config(text: str, name: str = "custom") -> ExperimentConfig:
    """Parse and validate an experiment document; raises ValueError naming the problem."""
    cp = configparser.ConfigParser(default_section="__unused__", interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValueError(f"malformed config: {exc}".splitlines()[0]) from None
    for sec in cp.sections():
        if sec not in KEYS:
            raise ValueError(f"unknown section [{sec}]")
        extra = set(cp[sec]) - KEYS[sec]
        if extra:
            raise ValueError(f"unknown key(s) in [{sec}]: {', '.join(sorted(extra))}")
    for sec in ("system", "controller"):
        if sec not in cp:
            raise ValueError(f"missing section [{sec}]")
    s, c = cp["system"], cp["controller"]
    run = cp["run"] if "run" in cp else {}
    system = SystemParams(_num(s, "a"), _num(s, "b"), _num(s, "sigma_w"), _num(s, "x0", default=0.0))
    controller = ControllerConfig(_num(c, "u_max"), _num(c, "c"), _num(c, "a_init"), _num(c, "b_init"))
    opt = {}
    if "d" in run:
        opt["d"] = _num(run, "d")
    if "lambda" in run:
        opt["lam"] = _num(run, "lambda")
    return ExperimentConfig(
        system=system,
        controller=controller,
        horizon=_num(run, "horizon", int, 1000),
        n_runs=_num(run, "runs", int, 1000),
        master_seed=_num(run, "seed", int, 0),
        psi=_num(run, "psi", float, bounds.DEFAULT_PSI),
        workers=_num(run, "workers", int, 1),
        name=name,
        **opt,
    )


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ValueError(f"unknown preset {name!r}")
    lam = 0.8 if name == "system1" else None
    return ExperimentConfig(PRESETS[name], DEFAULT_CONTROLLER, lam=lam, name=name)


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_fmt(v) for v in row])


class Checks:
    def __init__(self):
        self.rows: list[tuple[str, bool, str]] = []

    def add(self, name: str, passed: bool, detail: str = "") -> None:
        self.rows.append((name, bool(passed), detail))

    @property
    def ok(self) -> bool:
        return all(p for _, p, _ in self.rows)

    def write(self, out: Path) -> None:
        write_csv(out / "checks.csv", ["check", "pass", "detail"], self.rows)
        manifest = out / "FAILED.txt"
        failed = [f"{n}: {d}" for n, p, d in self.rows if not p]
        if failed:
            manifest.write_text("\n".join(failed) + "\n")
        elif manifest.exists():
            manifest.unlink()


# row writers shared by ensemble and reproduce-fig1


def msq_rows(label, st):
    return [(label, t, st.mean_x2[t], st.std_x2[t]) for t in range(st.horizon + 1)]


def theta_rows(label, st):
    return [(label, t, st.mean_a[t], st.std_a[t], st.mean_b[t], st.std_b[t]) for t in range(1, st.horizon)]


def td_rows(label, st, d):
    values, censored = st.commitment_times(d)
    return [(label, r, int(values[r]), bool(censored[r])) for r in range(st.n_runs)]


def tail_rows(label, rows):
    return [(label, r.i, r.freq, r.se, r.bound, r.passed) for r in rows]


MSQ_HEADER = ["system", "t", "mean_x2", "std_x2"]
THETA_HEADER = ["system", "t", "mean_a_hat", "std_a_hat", "mean_b_hat", "std_b_hat"]
TD_HEADER = ["system", "run", "T_d", "censored"]
TAIL_HEADER = ["system", "i", "freq", "se", "bound", "pass"]


def certificate_checks(checks: Checks, label: str, cfg: ExperimentConfig, cert) -> None:
    s = cfg.system
    cap = min(cfg.controller.c_excite / 2, s.sigma_w * bounds.SQRT_2_OVER_PI)
    checks.add(f"{label}:gamma_range", 0 < cert.gamma <= cap, f"gamma={cert.gamma!r} cap={cap!r}")
    checks.add(f"{label}:p_range", 0 < cert.p < 1, f"p={cert.p!r}")
    checks.add(f"{label}:c3_range", 0 < cert.c3 < cert.p**2 / 30, f"c3={cert.c3!r}")
    ok = bounds.below_one_on_window(cert.c3, cert.c4, cert.m_prime)
    checks.add(f"{label}:burn_in_window", ok, f"m_prime={cert.m_prime}")
    checks.add(f"{label}:m_order", cert.m_burn >= cert.m_prime, f"m_burn={cert.m_burn}")


def _certificate(cfg: ExperimentConfig):
    return bounds.build_certificate(cfg.system, cfg.controller, psi=cfg.psi, d=cfg.d)


def cmd_simulate(cfg: ExperimentConfig, out: Path) -> Checks:
    tr = simulate_closed_loop(cfg.system, cfg.controller, cfg.horizon, RandomStreams(cfg.master_seed, 0))
    rows = [(r.t, r.x, r.u, r.v, r.w, r.gain, r.a_hat, r.b_hat) for r in tr.iter_records()]
    rows.append((cfg.horizon, tr.x[-1], math.nan, math.nan, math.nan, math.nan, math.nan, math.nan))
    write_csv(out / "trajectory.csv", ["t", "x", "u", "v", "w", "gain", "a_hat", "b_hat"], rows)
    checks = Checks()
    checks.add("constraint", bool(np.all(np.abs(tr.u) <= cfg.controller.u_max)),
               f"max|u|={float(np.max(np.abs(tr.u)))!r}")
    return checks


def _ensemble_outputs(label, cfg, st, cert, checks):
    checks.add(f"{label}:constraint", st.u_abs_max <= cfg.controller.u_max, f"max|u|={st.u_abs_max!r}")
    ok, late, early = ensemble.late_growth_check(st)
    checks.add(f"{label}:no_late_growth", ok, f"late={late!r} early+3se={early!r}")
    tail = ensemble.compare_tail_bound(st, cert, [cert.m_burn])
    checks.add(f"{label}:tail_bound", all(r.passed for r in tail), f"bound={tail[0].bound!r}")
    if cfg.lam is not None:
        sb = bounds.stable_case_bound(cfg.system, cfg.controller, cfg.lam)
        res = ensemble.verify_stable_bound(st, sb)
        checks.add(f"{label}:stable_bound", res.passed, f"bound={sb.bound!r} max_ratio={res.max_ratio!r}")
    return tail


def cmd_ensemble(cfg: ExperimentConfig, out: Path) -> Checks:
    checks = Checks()
    cert = _certificate(cfg)
    st = ensemble.run_ensemble(cfg.system, cfg.controller, cfg.horizon, cfg.n_runs, cfg.master_seed,
                               workers=cfg.workers)
    label = cfg.name
    tail = _ensemble_outputs(label, cfg, st, cert, checks)
    write_csv(out / "msq.csv", MSQ_HEADER, msq_rows(label, st))
    write_csv(out / "theta.csv", THETA_HEADER, theta_rows(label, st))
    write_csv(out / "td.csv", TD_HEADER, td_rows(label, st, cert.d))
    write_csv(out / "tailcmp.csv", TAIL_HEADER, tail_rows(label, tail))
    return checks


def cmd_bounds(cfg: ExperimentConfig, out: Path) -> Checks:
    checks = Checks()
    cert = _certificate(cfg)
    (out / "certificate.txt").write_text(cert.to_text())
    certificate_checks(checks, cfg.name, cfg, cert)
    if abs(cfg.system.a) < 1:
        lam = cfg.lam if cfg.lam is not None else 0.5 * (cfg.system.a**2 + 1)
        sb = bounds.stable_case_bound(cfg.system, cfg.controller, lam)
        (out / "stable_bound.txt").write_text(
            "".join(f"{k}={v:.17g}\n" for k, v in sb.__dict__.items())
        )
    return checks


def cmd_bmsb(cfg: ExperimentConfig, out: Path, t: int, phi_count: int, branches: int) -> Checks:
    checks = Checks()
    cert = _certificate(cfg)
    streams = RandomStreams(cfg.master_seed, 0)
    horizon = max(cfg.horizon, t + 1)
    tr = simulate_closed_loop(cfg.system, cfg.controller, horizon, streams)
    rep = bmsb.verify_small_ball(tr, cert, phi_count, branches, streams, t=t)
    (out / "bmsb.csv").write_text(rep.to_csv())
    checks.add(f"{cfg.name}:small_ball_t{t}", not np.any(rep.small_ball_violation),
               f"min p_hat={float(rep.p_hat.min())!r} p={cert.p!r}")
    checks.add(f"{cfg.name}:mean_abs_t{t}", not np.any(rep.mean_violation),
               f"min mean={float(rep.mean_abs.min())!r} gamma={cert.gamma!r}")
    return checks


def cmd_reproduce_fig1(base: ExperimentConfig, out: Path) -> Checks:
    """Systems 1-3 plus uncontrolled System 3 with the shared run settings of ``base``."""
    checks = Checks()
    msq, theta, td, tailcmp = [], [], [], []
    for name in ("system1", "system2", "system3"):
        cfg = replace(preset(name), horizon=base.horizon, n_runs=base.n_runs,
                      master_seed=base.master_seed, workers=base.workers, psi=base.psi)
        cert = _certificate(cfg)
        (out / f"certificate_{name}.txt").write_text(cert.to_text())
        certificate_checks(checks, name, cfg, cert)
        st = ensemble.run_ensemble(cfg.system, cfg.controller, cfg.horizon, cfg.n_runs, cfg.master_seed,
                                   workers=cfg.workers)
        tail = _ensemble_outputs(name, cfg, st, cert, checks)
        t_end = cfg.horizon - 1
        for sym, est, true in (("a", st.mean_a, cfg.system.a), ("b", st.mean_b, cfg.system.b)):
            checks.add(f"{name}:mean_{sym}_hat_final", abs(est[t_end] - true) <= 0.05,
                       f"t={t_end} mean={float(est[t_end])!r} true={true!r}")
        msq += msq_rows(name, st)
        theta += theta_rows(name, st)
        td += td_rows(name, st, cert.d)
        tailcmp += tail_rows(name, tail)
    cfg = replace(preset("system3"), horizon=base.horizon, n_runs=base.n_runs,
                  master_seed=base.master_seed, workers=base.workers)
    st = ensemble.run_ensemble(cfg.system, cfg.controller, cfg.horizon, cfg.n_runs, cfg.master_seed,
                               uncontrolled=True, workers=cfg.workers)
    expected = cfg.horizon * cfg.system.sigma_w**2
    got = float(st.mean_x2[cfg.horizon])
    checks.add("system3_uncontrolled:random_walk", abs(got - expected) <= 0.1 * expected,
               f"mean_x2={got!r} expected={expected!r}")
    msq += msq_rows("system3_uncontrolled", st)
    write_csv(out / "msq.csv", MSQ_HEADER, msq)
    write_csv(out / "theta.csv", THETA_HEADER, theta)
    write_csv(out / "td.csv", TD_HEADER, td)
    write_csv(out / "tailcmp.csv", TAIL_HEADER, tailcmp)
    return checks


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="satadapt", description="Saturated adaptive control experiments")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in ("simulate", "ensemble", "bounds", "bmsb", "reproduce-fig1"):
        p = sub.add_parser(name)
        if name != "reproduce-fig1":
            src = p.add_mutually_exclusive_group(required=True)
            src.add_argument("--config", type=Path)
            src.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, default=Path("."))
        p.add_argument("--runs", type=int)
        p.add_argument("--horizon", type=int)
        p.add_argument("--workers", type=int)
        if name == "bmsb":
            p.add_argument("--t", type=int, default=50, help="prefix time to branch from")
            p.add_argument("--phi-count", type=int, default=64)
            p.add_argument("--branches", type=int, default=10_000)
    return ap


def _load(args) -> ExperimentConfig:
    if getattr(args, "config", None) is not None:
        try:
            text = args.config.read_text()
        except OSError as exc:
            raise CliError("io", f"cannot read config: {exc.strerror}") from None
        cfg = parse_config(text, name=args.config.stem)
    elif getattr(args, "preset", None) is not None:
        cfg = preset(args.preset)
    else:
        cfg = ExperimentConfig(PRESETS["system1"], DEFAULT_CONTROLLER, name="fig1")
    over = {}
    for flag, fieldname in (("seed", "master_seed"), ("runs", "n_runs"), ("horizon", "horizon"),
                            ("workers", "workers")):
        if getattr(args, flag) is not None:
            over[fieldname] = getattr(args, flag)
    return replace(cfg, **over)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        try:
            cfg = _load(args)
        except ValueError as exc:
            raise CliError("config", str(exc)) from None
        out = args.out
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise CliError("io", f"cannot create output directory: {exc.strerror}") from None
        cmd = args.command
        if cmd == "simulate":
            checks = cmd_simulate(cfg, out)
        elif cmd == "ensemble":
            checks = cmd_ensemble(cfg, out)
        elif cmd == "bounds":
            checks = cmd_bounds(cfg, out)
        elif cmd == "bmsb":
            checks = cmd_bmsb(cfg, out, args.t, args.phi_count, args.branches)
        else:
            checks = cmd_reproduce_fig1(cfg, out)
        checks.write(out)
    except CliError as exc:
        print(f"error: {exc.category}: {exc}", file=sys.stderr)
        return 2
    except (DomainError, InapplicableError) as exc:
        print(f"error: domain: {exc}", file=sys.stderr)
        return 2
    except (EmptyDatasetError, ValueError) as exc:
        print(f"error: invalid-argument: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: io: {exc}", file=sys.stderr)
        return 2
    if not checks.ok:
        failed = ", ".join(n for n, p, _ in checks.rows if not p)
        print(f"error: check: failed {failed}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
