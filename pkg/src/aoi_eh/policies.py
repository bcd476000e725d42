"""Decision rules: greedy baseline, single/double thresholds, softmax and sigmoid.

Every policy is a callable ``policy(state, rng) -> int`` returning a feasible
action value.  Randomized policies consume exactly one uniform draw from
``rng`` per decision; deterministic ones ignore it.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .model import Action, EnvConfig, ModelError, TIE_ORDER

IDLE, NEW, RETX = int(Action.IDLE), int(Action.NEW), int(Action.RETX)


def _can_new(b, cfg):
    return b >= cfg.e_s + cfg.e_tx


def _can_retx(b, r, cfg):
    return r >= 1 and b >= cfg.e_tx


def coerce(a: int, s, cfg: EnvConfig) -> int:
    """Degrade an infeasible choice along x -> n -> i."""
    b, r = s[1], s[4]
    if a == RETX and not _can_retx(b, r, cfg):
        a = NEW
    if a == NEW and not _can_new(b, cfg):
        a = IDLE
    return a


def greedy_action(s, cfg: EnvConfig) -> int:
    """Transmit whenever the battery allows; retransmit if it only covers E^tx."""
    b, r = s[1], s[4]
    if b < cfg.e_tx:
        return IDLE
    if b >= cfg.e_tx + cfg.e_s:
        return NEW
    return RETX if r >= 1 else IDLE


class GreedyPolicy:
    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg

    def __call__(self, s, rng=None) -> int:
        return greedy_action(s, self.cfg)


# ----------------------------------------------------------------- thresholds

def pinned_mask(cfg: EnvConfig) -> np.ndarray:
    """Boolean ``(n_eh, b_max+1, delta_max, r_max+1)``: slices where nothing can be sent."""
    b = np.arange(cfg.b_max + 1)[None, :, None, None]
    r = np.arange(cfg.r_max + 1)[None, None, None, :]
    shape = (cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1)
    return np.broadcast_to(np.where(r == 0, b < cfg.e_s + cfg.e_tx, b < cfg.e_tx), shape).copy()


@dataclass
class ThresholdTable:
    """Thresholds indexed ``[e, b, delta_tx - 1, r]``; ``delta_max + 1`` means never transmit.

    The single variant keeps ``t_n`` and ``t_x`` identical.
    """

    cfg: EnvConfig
    t_n: np.ndarray
    t_x: np.ndarray
    double: bool = False

    def __post_init__(self):
        shape = (self.cfg.n_eh, self.cfg.b_max + 1, self.cfg.delta_max, self.cfg.r_max + 1)
        self.t_n = np.array(self.t_n, dtype=float).reshape(shape)
        self.t_x = np.array(self.t_x, dtype=float).reshape(shape)
        never = self.cfg.delta_max + 1
        pin = pinned_mask(self.cfg)
        self.t_n[pin] = never
        self.t_x[pin] = never
        if not self.double and not np.array_equal(self.t_n, self.t_x):
            raise ModelError("single-threshold table needs T_n == T_x")
        if np.any(self.t_n > self.t_x):
            raise ModelError("double-threshold table needs T_n <= T_x")

    @classmethod
    def single(cls, cfg: EnvConfig, t) -> "ThresholdTable":
        t = np.broadcast_to(np.asarray(t, dtype=float),
                            (cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1))
        return cls(cfg, t.copy(), t.copy(), double=False)

    @classmethod
    def pair(cls, cfg: EnvConfig, t_n, t_x) -> "ThresholdTable":
        shape = (cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1)
        return cls(cfg, np.broadcast_to(np.asarray(t_n, float), shape).copy(),
                   np.broadcast_to(np.asarray(t_x, float), shape).copy(), double=True)

    def lookup(self, s):
        k = (s[0], s[1], s[3] - 1, s[4])
        return self.t_n[k], self.t_x[k]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(("e", "b", "delta_tx", "r", "T_n", "T_x"))
            for idx in np.ndindex(self.t_n.shape):
                e, b, d, r = idx
                w.writerow((e, b, d + 1, r, repr(float(self.t_n[idx])), repr(float(self.t_x[idx]))))

    @classmethod
    def from_csv(cls, path, cfg: EnvConfig) -> "ThresholdTable":
        shape = (cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1)
        t_n = np.full(shape, np.nan)
        t_x = np.full(shape, np.nan)
        with open(path, newline="") as f:
            for row in csv.DictReader(f):
                k = (int(row["e"]), int(row["b"]), int(row["delta_tx"]) - 1, int(row["r"]))
                t_n[k], t_x[k] = float(row["T_n"]), float(row["T_x"])
        if np.isnan(t_n).any():
            raise ModelError(f"{path}: threshold CSV incomplete for this configuration")
        return cls(cfg, t_n, t_x, double=not np.array_equal(t_n, t_x))


def double_threshold_action(s, table: ThresholdTable) -> int:
    t_n, t_x = table.lookup(s)
    drx = s[2]
    if drx < t_n:
        a = IDLE
    elif drx < t_x:
        a = NEW
    else:
        a = RETX
    return coerce(a, s, table.cfg)


def single_threshold_action(s, table: ThresholdTable) -> int:
    t, _ = table.lookup(s)
    if s[2] < t:
        return IDLE
    return coerce(NEW if s[4] == 0 else RETX, s, table.cfg)


class ThresholdPolicy:
    def __init__(self, table: ThresholdTable):
        self.table = table
        self._rule = double_threshold_action if table.double else single_threshold_action

    def __call__(self, s, rng=None) -> int:
        return self._rule(s, self.table)


# ----------------------------------------------------------- randomized rules

def sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    ez = math.exp(z)
    return ez / (1.0 + ez)


def sigmoid_transmit_probability(theta: float, delta_rx: float, tau: float) -> float:
    """``1 / (1 + exp(-(delta_rx - theta) / tau))``."""
    if tau <= 0:
        raise ValueError("temperature must be positive")
    return sigmoid((delta_rx - theta) / tau)


@dataclass
class SigmoidThresholdParams:
    """Smoothed thresholds; ``theta_x`` is only consulted by the double variant."""

    theta_n: np.ndarray
    theta_x: np.ndarray
    tau: float
    double: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("temperature must be positive")


class SigmoidPolicy:
    """Stochastic threshold policy.

    Single variant: transmit (n at r=0, x otherwise) with probability
    ``sigmoid((delta_rx - theta)/tau)``.  Double variant: two nested gates,
    ``P(x) = s_x`` and ``P(n) = max(s_n - s_x, 0)``, which reduce to the
    i / n / x bands of the double-threshold rule as ``tau -> 0``.
    """

    def __init__(self, params: SigmoidThresholdParams, cfg: EnvConfig):
        self.params = params
        self.cfg = cfg

    def probabilities(self, s):
        p = self.params
        k = (s[0], s[1], s[3] - 1, s[4])
        drx = s[2]
        if not p.double:
            pt = sigmoid((drx - p.theta_n[k]) / p.tau)
            a = NEW if s[4] == 0 else RETX
            return {IDLE: 1.0 - pt, a: pt}
        sn = sigmoid((drx - p.theta_n[k]) / p.tau)
        sx = sigmoid((drx - p.theta_x[k]) / p.tau)
        return {IDLE: 1.0 - max(sn, sx), NEW: max(sn - sx, 0.0), RETX: sx}

    def __call__(self, s, rng) -> int:
        u = rng.random()
        p = self.params
        k = (s[0], s[1], s[3] - 1, s[4])
        drx = s[2]
        if not p.double:
            if u < sigmoid((drx - p.theta_n[k]) / p.tau):
                return coerce(NEW if s[4] == 0 else RETX, s, self.cfg)
            return IDLE
        sx = sigmoid((drx - p.theta_x[k]) / p.tau)
        if u < sx:
            return coerce(RETX, s, self.cfg)
        if u < max(sigmoid((drx - p.theta_n[k]) / p.tau), sx):
            return coerce(NEW, s, self.cfg)
        return IDLE


GREEDY_LIMIT_TAU = 1e-9


def softmax_distribution(q_row, tau: float, feasible) -> np.ndarray:
    """Boltzmann distribution ``p(a) ~ exp(-Q(a)/tau)`` over feasible actions.

    ``feasible`` is a boolean mask indexed by action value or a set of actions.
    Below ``GREEDY_LIMIT_TAU`` the deterministic limit is returned: a point
    mass on the argmin, ties broken i, x, n.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    q = np.asarray(q_row, dtype=float)
    if isinstance(feasible, (set, frozenset)):
        mask = np.zeros(q.size, dtype=bool)
        mask[[int(a) for a in feasible]] = True
    else:
        mask = np.asarray(feasible, dtype=bool)
    if not mask.any():
        raise ValueError("no feasible action")
    if tau < GREEDY_LIMIT_TAU:
        out = np.zeros(q.size)
        out[argmin_feasible(q, mask)] = 1.0
        return out
    z = np.where(mask, -(q - q[mask].min()) / tau, -np.inf)
    w = np.exp(z)
    return w / w.sum()


def softmax_sample(q_row, tau: float, mask, u: float) -> int:
    """Draw from :func:`softmax_distribution` with a single uniform ``u``.

    Hot-path version over a 3-entry row; ties in the cumulative walk follow i, x, n.
    """
    qmin = min(q_row[a] for a in TIE_ORDER if mask[a])
    w = [math.exp(-(q_row[a] - qmin) / tau) if mask[a] else 0.0 for a in TIE_ORDER]
    total = w[0] + w[1] + w[2]
    acc = 0.0
    for a, wa in zip(TIE_ORDER, w):
        acc += wa
        if u * total < acc:
            return int(a)
    return int(next(a for a in reversed(TIE_ORDER) if mask[a]))


def argmin_feasible(q_row, mask) -> int:
    """Greedy action with ties broken i, x, n."""
    best, best_a = math.inf, IDLE
    for a in TIE_ORDER:
        if mask[a] and q_row[a] < best:
            best, best_a = q_row[a], int(a)
    return best_a


def tabulate(policy, space) -> np.ndarray:
    """Evaluate a deterministic policy on every state of ``space``."""
    return np.array([policy(s, None) for s in space], dtype=np.int8)
