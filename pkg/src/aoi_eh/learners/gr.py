"""GR-learning with Boltzmann exploration (average-cost tabular Q-learning)."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..model import EnvConfig, Environment, feasibility_mask
from ..policies import argmin_feasible, softmax_sample
from ..trace import RunTrace, spawn_rngs


@dataclass
class GrHyper:
    """Step sizes ``alpha(m) = m**-alpha_power``, ``beta(n) = n**-beta_power``."""

    tau0: float = 1.0
    tau_decay: float = 0.95
    tau_min: float = 1e-3
    alpha_power: float = 0.5
    beta_power: float = 1.0

    def alpha(self, m: int) -> float:
        return m ** -self.alpha_power

    def beta(self, n: int) -> float:
        return n ** -self.beta_power


@dataclass
class GrState:
    hyper: GrHyper = field(default_factory=GrHyper)
    Q: dict = field(default_factory=dict)
    visits: dict = field(default_factory=dict)
    J: float = 0.0
    tau: float = 1.0
    n: int = 1

    def q(self, s) -> list:
        row = self.Q.get(s)
        if row is None:
            row = self.Q[s] = [0.0, 0.0, 0.0]
        return row


def gr_q_update(grs: GrState, s, a: int, s_next, cost: float, next_mask) -> GrState:
    """One GR-learning update after executing ``a`` in ``s`` and observing ``s_next``.

    ``next_mask`` is the feasibility mask of ``s_next``; the bootstrap minimum
    ranges over feasible actions only.  Mutates and returns ``grs``.
    """
    hy = grs.hyper
    key = (s, a)
    m = grs.visits.get(key, 0) + 1
    grs.visits[key] = m
    row = grs.q(s)
    nxt = grs.q(s_next)
    best_next = min(nxt[b] for b in range(3) if next_mask[b])
    row[a] += hy.alpha(m) * (cost - grs.J + best_next - row[a])
    n = grs.n
    grs.J += hy.beta(n) * ((n * grs.J + cost) / (n + 1) - grs.J)
    grs.n = n + 1
    grs.tau = max(grs.tau * hy.tau_decay, hy.tau_min)
    return grs


class QGreedyPolicy:
    """Feasibility-masked argmin of a learned Q table; unseen states act as all-zero rows."""

    def __init__(self, Q: dict, cfg: EnvConfig):
        self.Q = Q
        self.cfg = cfg
        self._zero = (0.0, 0.0, 0.0)

    def __call__(self, s, rng=None) -> int:
        return argmin_feasible(self.Q.get(s, self._zero), feasibility_mask(s, self.cfg))


@dataclass
class LearnResult:
    policy: object
    trace: RunTrace
    state: object = None


def gr_learn(cfg: EnvConfig, steps: int, seed: int, hyper: GrHyper | None = None,
             scenario: str = "") -> LearnResult:
    """Learn from a single trajectory of ``steps`` slots; the trace is the online AoI."""
    hyper = hyper or GrHyper()
    t0 = time.perf_counter()
    env_rng, rng = spawn_rngs(seed)
    env = Environment(cfg, env_rng)
    grs = GrState(hyper=hyper, tau=hyper.tau0)
    costs = np.empty(steps, dtype=np.int64)
    s = env.state
    mask = feasibility_mask(s, cfg)
    for t in range(steps):
        a = softmax_sample(grs.q(s), grs.tau, mask, rng.random())
        s2, cost, _ = env.step(a)
        mask2 = feasibility_mask(s2, cfg)
        gr_q_update(grs, s, a, s2, cost, mask2)
        costs[t] = cost
        s, mask = s2, mask2
    policy = QGreedyPolicy(grs.Q, cfg)
    trace = RunTrace(costs, seed, "gr", scenario, time.perf_counter() - t0, policy)
    return LearnResult(policy, trace, grs)


def schedules_satisfy_conditions(hyper: GrHyper) -> dict:
    """Check the stochastic-approximation conditions on the power-law schedules.

    sum alpha = inf needs alpha_power <= 1; sum alpha^2 < inf needs alpha_power > 1/2;
    likewise for beta; beta/alpha -> 0 needs beta_power > alpha_power.
    """
    pa, pb = hyper.alpha_power, hyper.beta_power
    return {
        "sum_alpha_diverges": pa <= 1,
        "sum_alpha_sq_converges": 2 * pa > 1,
        "sum_beta_diverges": pb <= 1,
        "sum_beta_sq_converges": 2 * pb > 1,
        "beta_over_alpha_vanishes": pb > pa,
    }

