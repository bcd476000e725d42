"""Command-line front end.  Exit codes: 0 success, 2 verification failure, 1 error."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import HYPER_SECTIONS, load_config
from .harness import (ALGORITHMS, PRESETS, SWEEP_PARAMS, VERIFY_COLUMNS, Scenario, SweepSpec,
                      _verify_row, export_policy_heatmap, monotonicity_flags, run_preset,
                      run_scenario, run_sweep, solve_planner, write_scenario, write_sweep_csv)
from .model import EnvConfig
from .planner import read_policy_csv, rvi_solve, write_solution_csv

log = logging.getLogger("aoi_eh")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="key/value configuration file (default: built-in defaults)")
    p.add_argument("--seed", type=int, default=0, help="seed base; run i uses seed + i")
    p.add_argument("--runs", type=int, default=100)
    p.add_argument("--horizon", type=int, default=20_000,
                   help="environment steps per run (training budget for learners)")
    p.add_argument("--eval-horizon", type=int, default=100_000,
                   help="evaluation rollout length for FDPG/DQN policies")
    p.add_argument("--trace-every", type=int, default=100,
                   help="write every k-th trace row (the last row is always written)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--workers", type=int, default=1)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    ap = argparse.ArgumentParser(prog="aoi-eh", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve", parents=[common], help="solve the MDP and write the policy CSV")
    p.add_argument("--method", choices=("rvi", "pi"), default="rvi")

    sub.add_parser("verify", parents=[common],
                   help="check the threshold structure and submodularity of the RVI solution")

    p = sub.add_parser("simulate", parents=[common], help="simulate a named policy")
    p.add_argument("policy", help="greedy, rvi, pi, or a policy CSV written by `solve`")

    p = sub.add_parser("learn", parents=[common], help="run a learner")
    p.add_argument("learner", choices=("gr", "fdpg", "dqn"))
    p.add_argument("--variant", choices=("single", "double"), default="double",
                   help="FDPG threshold variant")

    p = sub.add_parser("sweep", parents=[common], help="sweep one parameter")
    p.add_argument("parameter", choices=SWEEP_PARAMS)
    p.add_argument("values", help="comma-separated values")
    p.add_argument("--algorithm", choices=ALGORITHMS, default="rvi")

    p = sub.add_parser("preset", parents=[common], help="reproduce one figure")
    p.add_argument("name", choices=PRESETS)
    p.add_argument("--algorithms", help="comma-separated subset of algorithms")

    p = sub.add_parser("heatmap", parents=[common], help="policy CSV -> per-slice action grids")
    p.add_argument("policy_csv")
    return ap


def _load(args):
    if args.config:
        return load_config(args.config)
    return EnvConfig(), {name: cls() for name, cls in HYPER_SECTIONS.items()}


def _scenario(args, cfg, hypers, algorithm, name) -> Scenario:
    return Scenario(name, cfg, algorithm, runs=args.runs, horizon=args.horizon,
                    seed_base=args.seed, eval_horizon=args.eval_horizon, hypers=hypers)


def run(args) -> int:
    out = Path(args.out)
    if args.command == "preset":
        algs = tuple(args.algorithms.split(",")) if args.algorithms else None
        return run_preset(args.name, out, args.config, args.seed, args.runs, args.horizon,
                          args.eval_horizon, args.workers, args.trace_every, algs)
    cfg, hypers = _load(args)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "solve":
        gain, _, sol = solve_planner(cfg, args.method)
        write_solution_csv(out / "policy.csv", sol)
        iters = sol.iterations
        with open(out / "solve.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("method", "gain", "iterations"))
            w.writerow((args.method, repr(float(gain)), iters))
        print(f"{args.method}: gain {gain:.6f}")
        return 0
    if args.command == "verify":
        sol = rvi_solve(cfg)
        row = _verify_row("verify", cfg, sol)
        with open(out / "verify.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(VERIFY_COLUMNS)
            w.writerow(row)
        thr_ok, sub_ok = row[4], row[8]
        print(f"threshold structure: {'pass' if thr_ok else 'FAIL'} ({row[2]} violations); "
              f"submodularity: {'pass' if sub_ok else 'FAIL'} ({row[5]} violations)")
        return 0 if thr_ok and sub_ok else 2
    if args.command == "simulate":
        if args.policy in ("greedy", "rvi", "pi"):
            sc = _scenario(args, cfg, hypers, args.policy, f"simulate-{args.policy}")
            res = run_scenario(sc, args.workers)
        else:
            from .trace import simulate_policy
            from .harness import RunResult, ScenarioResult
            pol = read_policy_csv(args.policy, cfg)
            sc = _scenario(args, cfg, hypers, "rvi", "simulate-csv")
            runs = [RunResult(s, simulate_policy(cfg, pol, args.horizon, s, algorithm="csv",
                                                 scenario=sc.name))
                    for s in range(args.seed, args.seed + args.runs)]
            res = ScenarioResult(sc, runs)
        d = write_scenario(res, out, args.trace_every)
        print(f"{res.scenario.name}: mean {res.mean:.4f} +- {res.stderr:.4f} -> {d}")
        return 1 if res.partial else 0
    if args.command == "learn":
        alg = f"fdpg-{args.variant}" if args.learner == "fdpg" else args.learner
        res = run_scenario(_scenario(args, cfg, hypers, alg, f"learn-{alg}"), args.workers)
        d = write_scenario(res, out, args.trace_every)
        print(f"{alg}: mean {res.mean:.4f} +- {res.stderr:.4f} -> {d}")
        return 1 if res.partial else 0
    if args.command == "sweep":
        vals = [float(v) for v in args.values.split(",")]
        if args.parameter in ("b_max", "e_s"):
            vals = [int(v) for v in vals]
        base = _scenario(args, cfg, hypers, args.algorithm, f"sweep-{args.algorithm}")
        rows = run_sweep(SweepSpec(args.parameter, vals, base), args.workers)
        write_sweep_csv(out / "sweep.csv", args.parameter, args.algorithm, rows)
        flags = monotonicity_flags(args.parameter, rows)
        for r in rows:
            print(f"{args.parameter}={r.value}: {r.mean:.4f} +- {r.stderr:.4f}")
        print(f"monotone: {flags['monotone']}, strict: {flags['strict']}")
        return 0
    if args.command == "heatmap":
        grids = export_policy_heatmap(args.policy_csv, cfg, out / "heatmaps")
        print(f"wrote {len(grids)} slices to {out / 'heatmaps'}")
        return 0
    raise AssertionError(args.command)


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
