"""Finite-difference policy gradient over smoothed AoI thresholds.

Each iteration perturbs a random subset of the threshold parameters by
``+-sigma``, rolls out both perturbed sigmoid policies for ``horizon`` slots
under common random numbers, and moves the parameters against the
least-squares directional estimate of the gradient of the average AoI.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import EnvConfig, initial_state, step
from ..policies import ThresholdTable, pinned_mask
from ..trace import RunTrace, spawn_rngs
from .gr import LearnResult


@dataclass
class FdpgHyper:
    """Step size ``gamma(n) = y / (n + 1)**z``; all other knobs as in the rollout loop."""

    y: float = 1e4
    z: float = 0.51
    sigma: float = 2.0
    q: float = 0.5
    horizon: int = 50
    tau0: float = 0.3
    zeta: float = 0.99
    theta0: float = 1.0

    def __post_init__(self):
        if not (0.5 < self.z <= 1 and self.y > 0):
            raise ValueError("need 0.5 < z <= 1 and y > 0")
        if self.sigma < 0 or not 0 < self.q < 1 or self.horizon < 1 or self.tau0 <= 0:
            raise ValueError("invalid FDPG hyperparameters")

    def step_size(self, n: int) -> float:
        return self.y / (n + 1) ** self.z


class ThresholdParams:
    """Full threshold grids plus the mapping to the learnable vector ``theta_bar``.

    Single variant: ``theta_n`` is the only grid (``theta_x`` mirrors it).
    Double variant: ``theta_n`` is learnable where a new update is affordable,
    ``theta_x`` where a retransmission is possible; ``theta_n`` is tied to
    ``theta_x`` where only a retransmission is affordable and ``theta_x`` is
    pinned at ``r = 0``.
    """

    def __init__(self, cfg: EnvConfig, double: bool, theta0: float):
        self.cfg = cfg
        self.double = double
        self.never = float(cfg.delta_max + 1)
        shape = (cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1)
        pin = pinned_mask(cfg)
        b = np.arange(cfg.b_max + 1)[None, :, None, None]
        r = np.arange(cfg.r_max + 1)[None, None, None, :]
        if double:
            self.learn_n = np.broadcast_to(b >= cfg.e_s + cfg.e_tx, shape).copy()
            self.learn_x = np.broadcast_to((r >= 1) & (b >= cfg.e_tx), shape).copy()
            self.tied = self.learn_x & ~self.learn_n
        else:
            self.learn_n = ~pin
            self.learn_x = np.zeros(shape, dtype=bool)
            self.tied = np.zeros(shape, dtype=bool)
        self.theta_n = np.full(shape, self.never)
        self.theta_x = np.full(shape, self.never)
        self.theta_n[self.learn_n] = theta0
        self.theta_x[self.learn_x] = theta0
        self.sync()

    @property
    def dim(self) -> int:
        return int(self.learn_n.sum() + self.learn_x.sum())

    def vector(self) -> np.ndarray:
        return np.concatenate([self.theta_n[self.learn_n], self.theta_x[self.learn_x]])

    def grids(self, vec: np.ndarray):
        """Threshold grids for an arbitrary learnable vector (no projection)."""
        tn, tx = self.theta_n.copy(), self.theta_x.copy()
        k = int(self.learn_n.sum())
        tn[self.learn_n] = vec[:k]
        tx[self.learn_x] = vec[k:]
        if self.double:
            tn[self.tied] = tx[self.tied]
        else:
            tx = tn
        return tn, tx

    def set_vector(self, vec: np.ndarray) -> None:
        self.theta_n, self.theta_x = (g.copy() for g in self.grids(vec))
        self.sync()

    def sync(self):
        if self.double:
            self.theta_n[self.tied] = self.theta_x[self.tied]
        else:
            self.theta_x = self.theta_n

    def project(self, vec: np.ndarray) -> np.ndarray:
        """Clip to ``[1, delta_max + 1]`` and enforce ``theta_n <= theta_x``."""
        vec = np.clip(vec, 1.0, self.never)
        if self.double:
            tn, tx = self.grids(vec)
            both = self.learn_n & self.learn_x
            tn[both] = np.minimum(tn[both], tx[both])
            vec = np.concatenate([tn[self.learn_n], tx[self.learn_x]])
        return vec

    def table(self) -> ThresholdTable:
        """Deterministic limit ``tau -> 0``: transmit iff ``delta_rx > theta``."""
        def limit(t):
            return np.clip(np.floor(t) + 1, 1, self.never)
        tn, tx = limit(self.theta_n), limit(self.theta_x)
        if self.double:
            return ThresholdTable(self.cfg, np.minimum(tn, tx), tx, double=True)
        return ThresholdTable(self.cfg, tn, tn.copy(), double=False)


def fdpg_gradient_estimate(D: np.ndarray, j_plus: float, j_minus: float, sigma: float) -> np.ndarray:
    """``(D^T D)^-1 D (J+ - J-) / (2 sigma)``; ``D`` is a 0/1 vector with at least one 1."""
    D = np.asarray(D, dtype=float)
    count = float(D @ D)
    if count == 0:
        raise ValueError("perturbation vector is all zero; resample it")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return D * (j_plus - j_minus) / (2.0 * sigma * count)


def _rollout(cfg, tn, tx, double, tau, start, horizon, seed):
    """Average AoI of the sigmoid policy with grids ``tn``/``tx`` over ``horizon`` slots."""
    env_rng, pol_rng = spawn_rngs(seed)
    B1, D, R1 = cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1
    tn = tn.ravel().tolist()
    tx = tx.ravel().tolist()
    e_new = cfg.e_s + cfg.e_tx
    e_tx = cfg.e_tx
    exp = math.exp
    costs = np.empty(horizon, dtype=np.int64)
    s = start
    for t in range(horizon):
        e, b, drx, dtx, r = s
        k = ((e * B1 + b) * D + dtx - 1) * R1 + r
        u = pol_rng.random()
        a = 0
        zn = (drx - tn[k]) / tau
        pn = 1.0 / (1.0 + exp(-zn)) if zn > -700 else 0.0
        if double:
            zx = (drx - tx[k]) / tau
            px = 1.0 / (1.0 + exp(-zx)) if zx > -700 else 0.0
            if u < px:
                a = 2
            elif u < max(pn, px):
                a = 1
        elif u < pn:
            a = 1 if r == 0 else 2
        if a == 2 and not (r >= 1 and b >= e_tx):
            a = 1
        if a == 1 and b < e_new:
            a = 0
        s, costs[t], _ = step(s, a, cfg, env_rng)
    return costs, s


@dataclass
class FdpgState:
    params: ThresholdParams
    hyper: FdpgHyper
    tau: float
    n: int = 1
    history: list = field(default_factory=list)


def fdpg_learn(cfg: EnvConfig, iterations: Optional[int] = None, seed: int = 0,
               hyper: Optional[FdpgHyper] = None, variant: str = "single",
               budget: Optional[int] = None, scenario: str = "") -> LearnResult:
    """Run FDPG for ``iterations`` updates (or as many as fit in ``budget`` env steps).

    The trace holds the AoI of every rollout slot in order (``+`` then ``-``).
    """
    if variant not in ("single", "double"):
        raise ValueError("variant must be 'single' or 'double'")
    hyper = hyper or FdpgHyper()
    if iterations is None:
        if budget is None:
            raise ValueError("give iterations or budget")
        iterations = max(budget // (2 * hyper.horizon), 1)
    t0 = time.perf_counter()
    env_rng, rng = spawn_rngs(seed)
    params = ThresholdParams(cfg, variant == "double", hyper.theta0)
    st = FdpgState(params, hyper, hyper.tau0)
    start = initial_state(cfg, env_rng)
    theta = params.vector()
    d = theta.size
    chunks = []
    flags = {"diverged": False}
    for n in range(1, iterations + 1):
        it_seed = int(rng.integers(2 ** 63))
        if d:
            D = (rng.random(d) < hyper.q).astype(float)
            while not D.any():
                D = (rng.random(d) < hyper.q).astype(float)
        else:
            D = np.zeros(0)
        plus, minus = theta + hyper.sigma * D, theta - hyper.sigma * D
        c_plus, end = _rollout(cfg, *params.grids(plus), params.double, st.tau, start,
                               hyper.horizon, it_seed)
        c_minus, _ = _rollout(cfg, *params.grids(minus), params.double, st.tau, start,
                              hyper.horizon, it_seed)
        chunks += [c_plus, c_minus]
        j_plus, j_minus = c_plus.mean(), c_minus.mean()
        if d:
            grad = fdpg_gradient_estimate(D, j_plus, j_minus, hyper.sigma) if hyper.sigma > 0 \
                else np.zeros(d)
            theta = theta - hyper.step_size(n) * grad
            if np.any(np.abs(theta) > 10 * cfg.delta_max):
                flags["diverged"] = True
            theta = params.project(theta)
        st.tau *= hyper.zeta
        st.n = n + 1
        st.history.append((float(j_plus), float(j_minus)))
        start = end
    params.set_vector(theta)
    table = params.table()
    costs = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
    trace = RunTrace(costs, seed, f"fdpg-{variant}", scenario, time.perf_counter() - t0, table,
                     flags=flags)
    return LearnResult(table, trace, st)
