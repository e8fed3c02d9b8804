"""Command-line entry point: ``fragchoice {frag,solve,cell,evolve,verify}``.

Every run writes ``config.echo`` (flat ``key=value``, enough to rerun with
``--config``), its CSV outputs and ``summary.txt``.  Exit codes: 0 on
success, 1 on numerical failure or a failed ``--check``, 2 on bad
arguments.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import acceptance, cell_pdmp, frag_sim, linear_evolution as lin
from .fixed_point import (
    ConvergenceError, DivergedNormalization, as_grid, parse_rate, rate_from_solution,
    residual_fixed_point, solve_FPsi, stationary_law, write_rate_table,
)
from .measures import candy_norm, dist_L1loc, parse_grid, write_cdf_csv
from .rules import RuleError, parse_rule

NUMERICAL_ERRORS = (ArithmeticError, ConvergenceError)
BOOL_KEYS = ("check",)


class UsageError(Exception):
    pass


def _floats(text):
    text = "" if text is None else str(text).strip()
    return [float(s) for s in text.split(",")] if text else []


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--out", default="out", help="output directory (solve also accepts a .csv path)")
    common.add_argument("--config", default=None, help="flat key=value file; flags override it")
    common.add_argument("--check", action="store_true", help="compare key metrics to acceptance thresholds")

    parser = argparse.ArgumentParser(prog="fragchoice", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("frag", parents=[common], help="simulate the interval process")
    p.add_argument("--rule")
    p.add_argument("--steps", type=int, default=1_000_000)
    p.add_argument("--alphas", default="0.1,0.25,0.5,0.75,0.9")
    p.add_argument("--cuts", default="", help="initial cut points, comma separated")
    p.add_argument("--snapshots", type=int, default=32)
    p.add_argument("--mode", choices=("discrete", "poissonized"), default="discrete")
    p.add_argument("--grid", default="1e-4:50:4096", help="x grid for the size-biased CSVs")

    p = sub.add_parser("solve", parents=[common], help="fixed point F^Psi or stationary law F^R")
    p.add_argument("--rule")
    p.add_argument("--rate")
    p.add_argument("--grid", default=None)
    p.add_argument("--tol", type=float, default=1e-10)

    p = sub.add_parser("cell", parents=[common], help="simulate the cell process")
    p.add_argument("--rate", default="const:1")
    p.add_argument("--x0", type=float, default=1.0)
    p.add_argument("--tmax", type=float, default=10.0)
    p.add_argument("--paths", type=int, default=100_000)
    p.add_argument("--times", default="1,2,5,10", help="ergodicity trace times (<= tmax)")
    p.add_argument("--max-jumps", type=int, default=cell_pdmp.MAX_JUMPS)
    p.add_argument("--x-floor", type=float, default=cell_pdmp.X_FLOOR)

    p = sub.add_parser("evolve", parents=[common], help="deterministic linear evolution")
    p.add_argument("--rate", default="const:1")
    p.add_argument("--init", default="gamma:2:2")
    p.add_argument("--tmax", type=float, default=12.0)
    p.add_argument("--dt", default="auto")
    p.add_argument("--grid", default="1e-4:50:4096")
    p.add_argument("--record", type=float, default=1.0, help="time between recorded states")

    p = sub.add_parser("verify", parents=[common], help="run the acceptance suite")
    p.add_argument("suite", choices=acceptance.SUITES)
    return parser


def read_config(path):
    cfg = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, eq, value = line.partition("=")
            if not eq:
                raise UsageError(f"{path}:{n}: expected key=value")
            cfg[key.strip().replace("-", "_")] = value.strip() or None
    return cfg


def _config_path(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def parse_args(argv):
    parser = build_parser()
    path = _config_path(argv)
    cfg = read_config(path) if path else {}
    command = cfg.pop("command", None)
    if command and not any(a in parser._subparsers._group_actions[0].choices for a in argv):
        argv = [command] + argv
    pre = parser.parse_args(argv)
    if pre.command is None:
        parser.print_usage(sys.stderr)
        raise SystemExit(2)
    if cfg:
        subparser = parser._subparsers._group_actions[0].choices[pre.command]
        known = {a.dest for a in subparser._actions}
        unknown = set(cfg) - known
        if unknown:
            raise UsageError(f"unknown config keys for {pre.command}: {sorted(unknown)}")
        for key in BOOL_KEYS:
            if key in cfg:
                cfg[key] = str(cfg[key]).lower() in ("1", "true", "yes")
        subparser.set_defaults(**{k: v for k, v in cfg.items() if k != "config"})
        pre = parser.parse_args(argv)
    return parser, pre


def _echo(args):
    items = {"command": args.command}
    items.update({k: v for k, v in vars(args).items() if k not in ("command", "config")})
    return "".join(f"{k}={'' if v is None else v}\n" for k, v in sorted(items.items()))


class Run:
    """Output directory bookkeeping shared by the subcommands."""

    def __init__(self, args, out_dir):
        self.args = args
        self.dir = out_dir
        os.makedirs(out_dir, exist_ok=True)
        self.summary = []
        self.checks = []
        with open(self.path("config.echo"), "w") as fh:
            fh.write(_echo(args))

    def path(self, name):
        return os.path.join(self.dir, name)

    def note(self, key, value):
        self.summary.append((key, value))

    def check(self, name, value, ok, threshold):
        self.checks.append((name, value, bool(ok), threshold))

    def finish(self, elapsed):
        lines = [f"{k}={v}" for k, v in self.summary]
        for name, value, ok, threshold in self.checks:
            lines.append(f"check.{name}={'PASS' if ok else 'FAIL'} value={value} threshold={threshold}")
        lines.append(f"runtime_s={elapsed:.3f}")
        with open(self.path("summary.txt"), "w") as fh:
            fh.write("\n".join(lines) + "\n")
        for line in lines:
            print(line)
        return 0 if all(c[2] for c in self.checks) else 1


# ---------------------------------------------------------------------------
# subcommands


def cmd_frag(args, run):
    if not args.rule:
        raise UsageError("frag needs --rule")
    if args.steps < 1 or args.snapshots < 1:
        raise UsageError("--steps and --snapshots must be >= 1")
    rule = parse_rule(args.rule)
    alphas = _floats(args.alphas)
    grid = parse_grid(args.grid)
    cfg = frag_sim.init_config(_floats(args.cuts), alphas, mode=args.mode)
    marks = frag_sim.snapshot_schedule(args.steps, args.snapshots)
    stats = frag_sim.run(cfg, rule, args.steps, frag_sim.substream(args.seed, 0), marks)
    with open(run.path("equidistribution.csv"), "w") as fh:
        fh.write("step,alpha,frac\n")
        for snap in stats.snapshots:
            for a, f in zip(alphas, snap.fractions):
                fh.write(f"{snap.step},{a!r},{float(f)!r}\n")
    for snap in stats.snapshots:
        write_cdf_csv(run.path(f"sizebiased_{snap.step}.csv"), grid, snap.cdf(grid))
    dev = float(np.max(np.abs(stats.final_fractions - np.asarray(alphas)))) if alphas else 0.0
    run.note("rule", rule)
    run.note("n_points", cfg.n_points)
    run.note("total_length", repr(cfg.total_length()))
    run.note("max_equidistribution_error", repr(dev))
    if args.check:
        d = dist_L1loc(stats.snapshots[-1].cdf, solve_FPsi(rule))
        run.note("d_L1loc_to_FPsi", repr(d))
        run.check("equidistribution", f"{dev:.4g}", dev <= 0.01, 0.01)
        run.check("size_biased_L1loc", f"{d:.4g}", d <= 0.02, 0.02)


def _solve_out(args):
    if args.out.endswith(".csv"):
        return os.path.dirname(args.out) or ".", args.out
    return args.out, os.path.join(args.out, "F.csv")


def cmd_solve(args, run, F_path):
    if bool(args.rule) == bool(args.rate):
        raise UsageError("solve needs exactly one of --rule or --rate")
    if args.rule:
        rule = parse_rule(args.rule)
        F = solve_FPsi(rule, as_grid(args.grid, rule), args.tol)
        write_cdf_csv(F_path, F.grid, F.values)
        write_rate_table(run.path("R.csv"), rate_from_solution(rule, F))
        candy = candy_norm(F)
        res = residual_fixed_point(F, rule)
        run.note("rule", rule)
        run.note("candy_norm", repr(candy))
        run.note("residual", repr(res))
        run.note("tail_mass", repr(F.tail_mass))
        if args.check:
            if rule.kind == "uniform":
                err = float(np.max(np.abs(F.values - acceptance.uniform_closed_form(F.grid))))
                run.note("sup_error_closed_form", repr(err))
                run.check("closed_form", f"{err:.3g}", err <= 1e-5, 1e-5)
            run.check("candy_norm", f"{abs(candy - 1):.3g}", abs(candy - 1) <= 1e-4, 1e-4)
            run.check("residual", f"{res:.3g}", res <= 5e-3, 5e-3)
    else:
        R = parse_rate(args.rate, None, args.tol)
        pi = stationary_law(R, None if args.grid is None else as_grid(args.grid))
        write_cdf_csv(F_path, pi.grid, pi.cdf.values)
        ident = pi.expect(pi.grid * R(pi.grid))
        run.note("rate", R)
        run.note("Z", repr(pi.Z))
        run.note("int_xR_dpi", repr(ident))
        if args.check:
            run.check("stationary_identity", f"{abs(ident - 2):.3g}", abs(ident - 2) <= 1e-3, 1e-3)


def cmd_cell(args, run):
    if args.x0 <= 0 or args.tmax < 0 or args.paths < 1:
        raise UsageError("need --x0 > 0, --tmax >= 0 and --paths >= 1")
    R = parse_rate(args.rate)
    kw = dict(max_jumps=args.max_jumps, x_floor=args.x_floor, threads=args.threads)
    ens = cell_pdmp.marginal_ensemble(R, args.x0, args.tmax, args.paths, args.seed, **kw)
    with open(run.path("marginal_T.csv"), "w") as fh:
        fh.write("x\n")
        fh.writelines(f"{float(v)!r}\n" for v in ens.samples)
    with open(run.path("paths_meta.csv"), "w") as fh:
        fh.write("path,jumps,absorbed,exploded\n")
        for i, (j, a, e) in enumerate(zip(ens.jumps, ens.absorbed, ens.exploded)):
            fh.write(f"{i},{int(j)},{int(a)},{int(e)}\n")
    run.note("absorbed", ens.n_absorbed)
    run.note("exploded", ens.n_exploded)
    run.note("mean_jumps", repr(float(ens.jumps.mean())))
    try:
        pi = stationary_law(R)
    except DivergedNormalization as exc:
        pi = None
        run.note("stationary_law", f"undefined ({exc})")
    times = sorted({t for t in _floats(args.times) if 0 < t < args.tmax} | {args.tmax})
    trace = []
    if pi is not None and args.tmax > 0:
        trace = acceptance.ergodicity_trace(R, pi, args.x0, times, args.paths, args.seed)
    with open(run.path("ergodicity.csv"), "w") as fh:
        fh.write("t,tv_estimate,tv_sigma\n")
        for t, (tv, sd) in zip(times, trace):
            fh.write(f"{t!r},{tv!r},{sd!r}\n")
    if trace:
        run.note("tv_at_tmax", repr(trace[-1][0]))
    if args.check:
        tv = trace[-1][0] if trace else math.nan
        run.check("tv_at_tmax", f"{tv:.4g}", tv <= 0.05, 0.05)
        run.check("tv_monotone_2sigma", "trace", bool(trace) and acceptance.monotone_within(trace), "2 sigma")


def cmd_evolve(args, run):
    R = parse_rate(args.rate)
    grid = parse_grid(args.grid)
    F0 = lin.parse_init(args.init, grid)
    if args.dt == "auto":
        dt = lin.auto_dt(grid)
        tmax = round(args.tmax / dt) * dt
    else:
        dt = float(args.dt)
        tmax = args.tmax
    every = max(1, int(round(args.record / dt)))
    traj = lin.evolve_R(R, F0, tmax, dt, record_every=every)
    try:
        pi = stationary_law(R, grid)
    except DivergedNormalization:
        pi = None
    with open(run.path("trajectory.csv"), "w") as fh:
        fh.write("t,x,F\n")
        for s in traj.states:
            fh.writelines(f"{s.t!r},{x!r},{v!r}\n" for x, v in zip(grid.tolist(), s.F.values.tolist()))
    with open(run.path("diagnostics.csv"), "w") as fh:
        fh.write("t,tv_to_pi,mass_drift\n")
        for s in traj.states:
            tv = lin.tv_to(s, pi) if pi is not None else math.nan
            fh.write(f"{s.t!r},{tv!r},{s.mass_drift!r}\n")
    tv = lin.tv_to(traj.final, pi) if pi is not None else math.nan
    run.note("dt", repr(dt))
    run.note("t_final", repr(traj.final.t))
    run.note("exact_shift", traj.exact_shift)
    run.note("tv_to_pi", repr(tv))
    run.note("mass_drift", repr(traj.final.mass_drift))
    run.note("projected_mass", repr(traj.projected))
    if args.check:
        run.check("tv_to_pi", f"{tv:.4g}", tv <= 0.01, 0.01)


def cmd_verify(args, run):
    for c in acceptance.select(args.suite):
        out, seconds = c.run()
        line = acceptance.format_line(c, out, seconds)
        print(line, flush=True)
        run.check(f"criterion_{c.number}", out.summary.replace("\n", " "), out.passed, "see criterion")


def main(argv=None):
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser, args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (UsageError, OSError) as exc:
        print(f"fragchoice: error: {exc}", file=sys.stderr)
        return 2
    t0 = time.perf_counter()
    try:
        if args.command == "solve":
            out_dir, F_path = _solve_out(args)
            run = Run(args, out_dir)
            cmd_solve(args, run, F_path)
        else:
            run = Run(args, args.out)
            {"frag": cmd_frag, "cell": cmd_cell, "evolve": cmd_evolve, "verify": cmd_verify}[args.command](args, run)
    except NUMERICAL_ERRORS as exc:
        print(f"fragchoice: numerical failure: {exc}", file=sys.stderr)
        return 1
    except (UsageError, RuleError, ValueError, OSError) as exc:
        parser.print_usage(sys.stderr)
        print(f"fragchoice: error: {exc}", file=sys.stderr)
        return 2
    return run.finish(time.perf_counter() - t0)


if __name__ == "__main__":
    sys.exit(main())
