"""Experiment orchestration: seeded multi-run scenarios, parameter sweeps and figure presets.

Run ``i`` of a scenario uses seed ``seed_base + i``.  Inside a run the seed is
split with ``SeedSequence(seed).spawn(4)``: children 0/1 drive the environment
and the learner during training, children 2/3 drive the environment and the
policy during evaluation.
"""
from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from .config import ConfigError, HYPER_SECTIONS, parse_config
from .learners.dqn import dqn_learn
from .learners.fdpg import fdpg_learn
from .learners.gr import gr_learn
from .model import Action, EhChain, EnvConfig, ModelError
from .planner import (POLICY_COLUMNS, Solution, StateSpace, TabularPolicy, build_kernel,
                      enumerate_states, evaluate_policy_exact, policy_iteration_solve, q_values,
                      rvi_solve, verify_submodularity, verify_threshold_structure,
                      write_solution_csv)
from .policies import GreedyPolicy, ThresholdPolicy, tabulate
from .trace import RunTrace, simulate_policy, spawn_rngs, write_traces_csv

log = logging.getLogger(__name__)

ALGORITHMS = ("rvi", "pi", "greedy", "gr", "fdpg-single", "fdpg-double", "dqn")
PLANNERS = ("rvi", "pi")
SWEEP_PARAMS = ("pe", "b_max", "e_s", "rho")


@dataclass
class Scenario:
    """One algorithm on one configuration, repeated over ``runs`` seeds.

    ``horizon`` is the number of environment steps per run: the simulation
    length for planners and greedy, the training budget for learners.
    ``eval_horizon`` is the length of the evaluation rollout of the final
    FDPG/DQN policy; GR is scored on its online trace.
    """

    name: str
    cfg: EnvConfig
    algorithm: str
    runs: int = 100
    horizon: int = 20_000
    seed_base: int = 0
    eval_horizon: int = 100_000
    hypers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; choose from {ALGORITHMS}")
        if self.horizon < 1 or self.runs < 1 or self.eval_horizon < 1:
            raise ConfigError("horizon, runs and eval_horizon must be >= 1")

    def hyper(self, name):
        return self.hypers.get(name) or HYPER_SECTIONS[name]()


@dataclass
class RunResult:
    seed: int
    trace: RunTrace
    learn_trace: Optional[RunTrace] = None
    artifact: object = None

    @property
    def value(self) -> float:
        return self.trace.final_average


@dataclass
class ScenarioResult:
    scenario: Scenario
    runs: list
    exact_gain: Optional[float] = None
    partial: bool = False
    error: str = ""

    @property
    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.runs])

    @property
    def mean(self) -> float:
        return float(self.values.mean()) if self.runs else math.nan

    @property
    def stderr(self) -> float:
        v = self.values
        return float(v.std(ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0

    def summary_row(self) -> tuple:
        sc = self.scenario
        return (sc.name, sc.algorithm, len(self.runs), _fmt(self.mean), _fmt(self.stderr),
                "" if self.exact_gain is None else _fmt(self.exact_gain), int(self.partial))


SUMMARY_COLUMNS = ("scenario", "algorithm", "runs", "mean", "stderr", "exact_gain", "partial")


def _fmt(x: float) -> str:
    return repr(float(x))


# ------------------------------------------------------------------ runs

def _table_to_tabular(policy, space: StateSpace) -> TabularPolicy:
    return TabularPolicy(space, tabulate(policy, space))


def _evaluate(cfg, policy, sc: Scenario, seed: int) -> RunTrace:
    rngs = spawn_rngs(seed, 4)[2:]
    return simulate_policy(cfg, policy, sc.eval_horizon, seed, rngs=rngs,
                           algorithm=sc.algorithm, scenario=sc.name)


def run_one(sc: Scenario, seed: int, planned: Optional[TabularPolicy] = None) -> RunResult:
    cfg = sc.cfg
    alg = sc.algorithm
    if alg in PLANNERS or alg == "greedy":
        policy = planned if alg in PLANNERS else GreedyPolicy(cfg)
        tr = simulate_policy(cfg, policy, sc.horizon, seed, algorithm=alg, scenario=sc.name)
        return RunResult(seed, tr)
    if alg == "gr":
        res = gr_learn(cfg, sc.horizon, seed, sc.hyper("gr"), scenario=sc.name)
        return RunResult(seed, res.trace, res.trace, res.policy)
    space = enumerate_states(cfg)
    if alg.startswith("fdpg"):
        res = fdpg_learn(cfg, seed=seed, hyper=sc.hyper("fdpg"), variant=alg.split("-")[1],
                         budget=sc.horizon, scenario=sc.name)
        tab = _table_to_tabular(ThresholdPolicy(res.policy), space)
        artifact = res.policy
    else:
        hy = sc.hyper("dqn")
        episodes = max(sc.horizon // hy.episode_len, 1)
        res = dqn_learn(cfg, episodes, seed, hy, scenario=sc.name)
        states = np.stack([space.e, space.b, space.delta_rx, space.delta_tx, space.r], axis=1)
        tab = TabularPolicy(space, res.policy.actions(states, space.feasible).astype(np.int8))
        artifact = tab
    res.trace.algorithm = f"{alg}:learn"
    ev = _evaluate(cfg, tab, sc, seed)
    ev.flags.update(res.trace.flags)
    return RunResult(seed, ev, res.trace, artifact)


def _run_task(args):
    return run_one(*args)


def solve_planner(cfg: EnvConfig, method: str = "rvi"):
    """``(gain, TabularPolicy, Solution)`` from RVI or policy iteration."""
    if method == "rvi":
        sol = rvi_solve(cfg)
        return sol.gain, sol.policy, sol
    kernel = build_kernel(enumerate_states(cfg))
    gain, pol, ev = policy_iteration_solve(cfg, kernel=kernel)
    sol = Solution(gain=gain, h=ev.h, Q=q_values(kernel, ev.h), policy=pol)
    return gain, pol, sol


def run_scenario(sc: Scenario, workers: int = 1) -> ScenarioResult:
    """Execute all runs (in seed order regardless of scheduling) and aggregate."""
    planned, exact = None, None
    if sc.algorithm in PLANNERS:
        exact, planned, _ = solve_planner(sc.cfg, sc.algorithm)
    elif sc.algorithm == "greedy":
        space = enumerate_states(sc.cfg)
        exact = evaluate_policy_exact(_table_to_tabular(GreedyPolicy(sc.cfg), space), sc.cfg).gain
    tasks = [(sc, sc.seed_base + i, planned) for i in range(sc.runs)]
    runs, partial, error = [], False, ""
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                for r in ex.map(_run_task, tasks):
                    runs.append(r)
        else:
            for t in tasks:
                runs.append(_run_task(t))
    except Exception as exc:  # keep what finished, mark the scenario partial
        log.error("scenario %s aborted after %d runs: %s", sc.name, len(runs), exc)
        partial, error = True, f"{type(exc).__name__}: {exc}"
    return ScenarioResult(sc, runs, exact, partial, error)


def write_scenario(result: ScenarioResult, out_dir, every: int = 100) -> Path:
    """``traces.csv``, optional ``learning.csv`` and ``summary.csv`` under ``out_dir/<name>``."""
    d = Path(out_dir) / result.scenario.name
    d.mkdir(parents=True, exist_ok=True)
    write_traces_csv(d / "traces.csv", [r.trace for r in result.runs], every=every)
    learn = [r.learn_trace for r in result.runs
             if r.learn_trace is not None and r.learn_trace is not r.trace]
    if learn:
        write_traces_csv(d / "learning.csv", learn, every=every)
    write_summary_csv(d / "summary.csv", [result])
    return d


def write_summary_csv(path, results) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for r in results:
            w.writerow(r.summary_row())


# ---------------------------------------------------------------- sweeps

@dataclass
class SweepSpec:
    parameter: str
    values: list
    base: Scenario

    def __post_init__(self):
        if self.parameter not in SWEEP_PARAMS:
            raise ConfigError(f"unknown sweep parameter {self.parameter!r}; choose from {SWEEP_PARAMS}")
        for v in self.values:
            sweep_config(self.base.cfg, self.parameter, v)


def sweep_config(cfg: EnvConfig, parameter: str, value) -> EnvConfig:
    """Copy of ``cfg`` with one parameter changed; ``rho`` sets the symmetric two-state chain."""
    if parameter == "pe":
        if not 0 <= value <= 1:
            raise ConfigError(f"pe must lie in [0, 1], got {value}")
        return replace(cfg, eh=EhChain.iid(value))
    if parameter == "rho":
        if not -1 <= value <= 1:
            raise ConfigError(f"rho must lie in [-1, 1], got {value}")
        return replace(cfg, eh=EhChain.from_rho(value))
    if int(value) != value:
        raise ConfigError(f"{parameter} must be an integer, got {value}")
    return replace(cfg, **{parameter: int(value)})


@dataclass
class SweepRow:
    value: float
    mean: float
    stderr: float
    result: Optional[ScenarioResult] = None


SWEEP_DIRECTION = {"pe": -1, "b_max": -1, "e_s": 1, "rho": 1}


def run_sweep(sw: SweepSpec, workers: int = 1) -> list:
    """One row per value.  Planners report their exact gain (stderr 0); others aggregate runs."""
    rows = []
    for v in sw.values:
        cfg = sweep_config(sw.base.cfg, sw.parameter, v)
        if sw.base.algorithm in PLANNERS:
            gain, _, _ = solve_planner(cfg, sw.base.algorithm)
            rows.append(SweepRow(v, gain, 0.0))
        else:
            sc = replace(sw.base, cfg=cfg, name=f"{sw.base.name}-{sw.parameter}={v}")
            res = run_scenario(sc, workers)
            rows.append(SweepRow(v, res.mean, res.stderr, res))
    return rows


def monotonicity_flags(parameter: str, rows) -> dict:
    """Trend flags: expected direction, strict and non-strict."""
    m = np.array([r.mean for r in rows])
    d = np.diff(m) * SWEEP_DIRECTION[parameter]
    return {"monotone": bool(np.all(d >= 0)), "strict": bool(np.all(d > 0))}


def write_sweep_csv(path, parameter: str, algorithm: str, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("parameter", "value", "algorithm", "mean", "stderr"))
        for r in rows:
            w.writerow((parameter, repr(r.value), algorithm, _fmt(r.mean), _fmt(r.stderr)))


# -------------------------------------------------------------- heatmaps

def read_policy_actions(path) -> dict:
    """``{(e, b, delta_rx, delta_tx, r): action code 0/1/2}`` from a planner policy CSV."""
    out = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or tuple(header[:6]) != POLICY_COLUMNS[:6]:
            raise ConfigError(f"{path}:1: expected header starting {','.join(POLICY_COLUMNS[:6])}")
        for row in reader:
            line = reader.line_num
            try:
                key = tuple(int(x) for x in row[:5])
                code = int(Action.from_code(row[5]))
            except (ValueError, IndexError, KeyError, ModelError):
                raise ConfigError(f"{path}:{line}: malformed policy row {row!r}") from None
            out[key] = code
    return out


def export_policy_heatmap(policy_csv, cfg: EnvConfig, out_dir=None) -> dict:
    """Per-slice grids ``[b, delta_rx - delta_tx]`` of action codes, keyed ``(e, delta_tx, r)``.

    Each grid has shape ``(b_max + 1, delta_max - delta_tx + 1)``.  With
    ``out_dir`` every slice is also written to ``heatmap_e{e}_dtx{d}_r{r}.csv``.
    """
    acts = read_policy_actions(policy_csv)
    grids = {}
    for e in range(cfg.n_eh):
        for dtx in range(1, cfg.delta_max + 1):
            for r in range(cfg.r_max + 1):
                g = np.zeros((cfg.b_max + 1, cfg.delta_max - dtx + 1), dtype=np.int8)
                for b in range(cfg.b_max + 1):
                    for j, drx in enumerate(range(dtx, cfg.delta_max + 1)):
                        try:
                            g[b, j] = acts[(e, b, drx, dtx, r)]
                        except KeyError:
                            raise ConfigError(
                                f"{policy_csv}: no row for state {(e, b, drx, dtx, r)}") from None
                grids[(e, dtx, r)] = g
    if out_dir is not None:
        d = Path(out_dir)
        d.mkdir(parents=True, exist_ok=True)
        for (e, dtx, r), g in grids.items():
            with open(d / f"heatmap_e{e}_dtx{dtx}_r{r}.csv", "w", newline="") as f:
                w = csv.writer(f, lineterminator="\n")
                w.writerow(["b"] + [f"drx{x}" for x in range(dtx, cfg.delta_max + 1)])
                for b, row in enumerate(g):
                    w.writerow([b, *row.tolist()])
    return grids


# --------------------------------------------------------------- presets

PRESETS = ("fig2", "fig3", "fig4", "fig5", "fig6", "fig7", "fig8")
LEARNING_SUITE = ("greedy", "gr", "fdpg-single", "fdpg-double", "dqn", "rvi")


def preset_config_text(name: str) -> str:
    return resources.files("aoi_eh.presets").joinpath(f"{name}.ini").read_text()


def _verify_row(name, cfg, sol) -> tuple:
    thr = verify_threshold_structure(sol.policy)
    sub = verify_submodularity(sol, cfg)
    return (name, _fmt(sol.gain), len(thr.violations), thr.slices_checked, int(thr.passed),
            len(sub.violations), sub.pairs_checked, _fmt(sub.max_excess), int(sub.passed))


VERIFY_COLUMNS = ("scenario", "gain", "threshold_violations", "slices_checked", "threshold_passed",
                  "submodularity_violations", "pairs_checked", "max_excess", "submodularity_passed")


def _policy_figure(name, cfg, out: Path) -> int:
    sol = rvi_solve(cfg)
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    write_solution_csv(d / "policy.csv", sol)
    export_policy_heatmap(d / "policy.csv", cfg, d / "heatmaps")
    row = _verify_row(name, cfg, sol)
    with open(d / "verify.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(VERIFY_COLUMNS)
        w.writerow(row)
    return 0


def _suite(name, cfg, hypers, algorithms, out: Path, seed, runs, horizon, eval_horizon, workers,
           every):
    results = []
    for alg in algorithms:
        sc = Scenario(f"{name}-{alg}", cfg, alg, runs=runs, horizon=horizon, seed_base=seed,
                      eval_horizon=eval_horizon, hypers=hypers)
        res = run_scenario(sc, workers)
        write_scenario(res, out / name, every)
        results.append(res)
    write_summary_csv(out / name / "summary.csv", results)
    return results


LARGE_BATTERY = (30, 60)


def large_battery_config(cfg: EnvConfig, b_max: int) -> EnvConfig:
    """Scarce harvesting (pe=0.2), free sensing: a big battery mimics an unlimited one."""
    return replace(cfg, eh=EhChain.iid(0.2), e_s=0, b_max=b_max)


def run_preset(name: str, out, config=None, seed: int = 0, runs: int = 100,
               horizon: int = 20_000, eval_horizon: int = 100_000, workers: int = 1,
               every: int = 100, algorithms=None) -> int:
    """Run a figure preset; returns a process exit code."""
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    text = Path(config).read_text() if config else preset_config_text(name)
    cfg, hypers = parse_config(text, str(config or f"{name}.ini"))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if name in ("fig2", "fig5"):
        return _policy_figure(name, cfg, out)
    if name == "fig3":
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        base = Scenario(name, cfg, "rvi", runs=1, horizon=1)
        with open(d / "sweep.csv", "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("parameter", "value", "algorithm", "mean", "stderr"))
            for param, vals in (("pe", [0.2, 0.4, 0.6, 0.8]), ("b_max", [2, 5, 10, 30]),
                                ("e_s", [0, 1, 2])):
                for r in run_sweep(SweepSpec(param, vals, base)):
                    w.writerow((param, repr(r.value), "rvi", _fmt(r.mean), _fmt(r.stderr)))
            # large battery vs a larger one: both should approximate the unlimited case
            for bm in LARGE_BATTERY:
                gain, _, _ = solve_planner(large_battery_config(cfg, bm), "rvi")
                w.writerow(("b_max_unlimited", repr(bm), "rvi", _fmt(gain), _fmt(0.0)))
        return 0
    if name in ("fig4", "fig7"):
        _suite(name, cfg, hypers, algorithms or LEARNING_SUITE, out, seed, runs, horizon,
               eval_horizon, workers, every)
        return 0
    if name == "fig6":
        _suite(name, cfg, hypers, algorithms or ("greedy", "fdpg-single", "fdpg-double", "rvi"),
               out, seed, runs, horizon, eval_horizon, workers, every)
        return 0
    # fig8: rho sweep
    d = out / name
    d.mkdir(parents=True, exist_ok=True)
    algs = algorithms or ("rvi", "greedy", "gr", "fdpg-single", "fdpg-double")
    with open(d / "sweep.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(("parameter", "value", "algorithm", "mean", "stderr"))
        for alg in algs:
            base = Scenario(f"{name}-{alg}", cfg, alg, runs=runs, horizon=horizon,
                            seed_base=seed, eval_horizon=eval_horizon, hypers=hypers)
            for r in run_sweep(SweepSpec("rho", [0.0, 0.2, 0.4, 0.6, 0.8], base), workers):
                w.writerow(("rho", repr(r.value), alg, _fmt(r.mean), _fmt(r.stderr)))
    return 0
