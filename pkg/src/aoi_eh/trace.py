"""Run traces and plain policy simulation."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from typing import Any, Optional

import numpy as np

from .model import EnvConfig, initial_state, step

TRACE_COLUMNS = ("step", "inst_aoi", "running_avg", "seed", "algorithm", "scenario")


def spawn_rngs(seed: int, n: int = 2) -> list:
    """Independent generators derived from one seed (environment first, learner second)."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class RunTrace:
    inst_aoi: np.ndarray
    seed: int
    algorithm: str = ""
    scenario: str = ""
    wall_clock: float = 0.0
    policy: Any = None
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.inst_aoi = np.asarray(self.inst_aoi, dtype=np.int64)

    @property
    def running_avg(self) -> np.ndarray:
        return np.cumsum(self.inst_aoi) / np.arange(1, self.inst_aoi.size + 1)

    @property
    def final_average(self) -> float:
        return float(self.inst_aoi.mean()) if self.inst_aoi.size else float("nan")

    def __len__(self):
        return self.inst_aoi.size

    def rows(self, every: int = 1):
        """CSV rows for every ``every``-th slot; the last slot is always included."""
        avg = self.running_avg
        n = len(self)
        steps = list(range(every - 1, n, every))
        if n and (not steps or steps[-1] != n - 1):
            steps.append(n - 1)
        for t in steps:
            yield (t + 1, int(self.inst_aoi[t]), repr(float(avg[t])), self.seed,
                   self.algorithm, self.scenario)


def write_traces_csv(path, traces, every: int = 1) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for tr in traces:
            w.writerows(tr.rows(every))


def read_traces_csv(path) -> dict:
    """``{(algorithm, scenario, seed): inst_aoi array}`` from a trace CSV."""
    out: dict = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            key = (row["algorithm"], row["scenario"], int(row["seed"]))
            out.setdefault(key, []).append(int(row["inst_aoi"]))
    return {k: np.asarray(v) for k, v in out.items()}


def simulate_policy(cfg: EnvConfig, policy, horizon: int, seed: int,
                    start=None, rngs: Optional[list] = None, algorithm: str = "",
                    scenario: str = "") -> RunTrace:
    """Run ``policy`` for ``horizon`` slots and record the receiver AoI of each slot."""
    t0 = time.perf_counter()
    env_rng, pol_rng = rngs if rngs is not None else spawn_rngs(seed)
    s = initial_state(cfg, env_rng) if start is None else start
    costs = np.empty(horizon, dtype=np.int64)
    for t in range(horizon):
        a = policy(s, pol_rng)
        s, costs[t], _ = step(s, a, cfg, env_rng)
    return RunTrace(costs, seed, algorithm, scenario, time.perf_counter() - t0, policy)


def batch_means_ci(x: np.ndarray, n_batches: int = 100, z: float = 1.96):
    """Mean and half-width of a normal CI from non-overlapping batch means."""
    x = np.asarray(x, dtype=float)
    k = x.size // n_batches
    means = x[: k * n_batches].reshape(n_batches, k).mean(axis=1)
    return float(x.mean()), float(z * means.std(ddof=1) / np.sqrt(n_batches))
