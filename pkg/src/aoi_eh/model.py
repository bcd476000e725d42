"""Energy-harvesting status-update link with HARQ retransmissions.

The environment state is ``(e, b, delta_rx, delta_tx, r)``: the current
energy-harvesting (EH) state, the battery level, the age of information at
the receiver and at the transmitter, and the retransmission count of the
packet held at the transmitter.  The per-slot cost is ``delta_rx``.

Two views of the same dynamics are provided: :func:`transition_distribution`
enumerates ``P(s'|s,a)`` exactly (used by the planner) and :func:`step`
samples one transition (used by simulations and learners).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from functools import cached_property
from enum import IntEnum
from typing import NamedTuple, Optional

import numpy as np

log = logging.getLogger(__name__)


class ModelError(ValueError):
    """Invalid configuration, state or action."""


class InfeasibleAction(ModelError):
    """An action violates energy causality or has nothing to retransmit."""


class Action(IntEnum):
    IDLE = 0
    NEW = 1
    RETX = 2

    @property
    def code(self) -> str:
        return "inx"[self.value]

    @classmethod
    def from_code(cls, code: str) -> "Action":
        try:
            return cls("inx".index(code))
        except ValueError:
            raise ModelError(f"unknown action code {code!r}") from None


# argmin tie-break order: prefer the cheaper action on exact ties
TIE_ORDER = (Action.IDLE, Action.RETX, Action.NEW)


class _StateTuple(NamedTuple):
    e: int
    b: int
    delta_rx: int
    delta_tx: int
    r: int


class SystemState(_StateTuple):
    """Immutable 5-tuple ``(e, b, delta_rx, delta_tx, r)``.

    Construction rejects negative components and ``delta_rx < delta_tx``;
    bounds that depend on a configuration are checked by
    :meth:`EnvConfig.check_state`.
    """

    __slots__ = ()

    def __new__(cls, e, b, delta_rx, delta_tx, r):
        if delta_tx < 1 or delta_rx < delta_tx:
            raise ModelError(
                f"need 1 <= delta_tx <= delta_rx, got delta_rx={delta_rx}, delta_tx={delta_tx}")
        if e < 0 or b < 0 or r < 0:
            raise ModelError(f"negative state component in {(e, b, delta_rx, delta_tx, r)}")
        return _StateTuple.__new__(cls, e, b, delta_rx, delta_tx, r)


@dataclass(frozen=True)
class HarqModel:
    """Decoding-error probability ``g(r)`` after ``r`` prior attempts.

    By default ``g(r) = p0 * lam**r``; an explicit ``table`` of length
    ``r_max + 1`` overrides the geometric form.
    """

    p0: float = 0.5
    lam: float = 0.5
    r_max: int = 3
    table: Optional[tuple] = None

    def __post_init__(self):
        if self.r_max < 0:
            raise ModelError("r_max must be >= 0")
        if self.table is not None:
            table = tuple(float(x) for x in self.table)
            if len(table) != self.r_max + 1:
                raise ModelError(f"g table needs {self.r_max + 1} entries, got {len(table)}")
            object.__setattr__(self, "table", table)
        elif not 0.0 < self.lam <= 1.0:
            raise ModelError("lambda must lie in (0, 1]")
        g = self.probabilities
        if any(not 0.0 < x < 1.0 for x in g):
            raise ModelError(f"g(r) must lie in (0, 1), got {g}")
        if any(a < b for a, b in zip(g, g[1:])):
            raise ModelError(f"g(r) must be non-increasing, got {g}")

    @cached_property
    def probabilities(self) -> tuple:
        if self.table is not None:
            return self.table
        return tuple(self.p0 * self.lam ** r for r in range(self.r_max + 1))

    @classmethod
    def arq(cls, p: float = 0.5, r_max: int = 3) -> "HarqModel":
        """Plain ARQ: no combining gain, ``g(r) = p`` for every ``r``."""
        return cls(p0=p, lam=1.0, r_max=r_max)


def error_probability(harq: HarqModel, r: int) -> float:
    """``g(r)``, the probability that an attempt with ``r`` prior attempts fails."""
    if r < 0 or r > harq.r_max:
        raise ModelError(f"retransmission count {r} outside [0, {harq.r_max}]")
    return harq.probabilities[min(r, harq.r_max)]


@dataclass(frozen=True, eq=False)
class EhChain:
    """Markov chain of harvested energy units; ``matrix[e, e2] = Pr(E'=e2 | E=e)``."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] == 0:
            raise ModelError("EH transition matrix must be square and non-empty")
        if np.any(m < 0) or np.any(np.abs(m.sum(axis=1) - 1.0) > 1e-12):
            raise ModelError("EH transition rows must be probability vectors")
        if np.any(m[:, 0] <= 0):
            raise ModelError("p_E(0|e) must be positive for every e")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    def __eq__(self, other):
        return isinstance(other, EhChain) and np.array_equal(self.matrix, other.matrix)

    def __hash__(self):
        return hash(self.matrix.tobytes())

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0]

    @cached_property
    def cumulative(self) -> tuple:
        return tuple(tuple(np.cumsum(row).tolist()) for row in self.matrix)

    @classmethod
    def iid(cls, pe: float) -> "EhChain":
        """Memoryless Bernoulli harvesting with ``Pr(E=1) = pe``."""
        return cls(np.array([[1 - pe, pe], [1 - pe, pe]]))

    @classmethod
    def symmetric(cls, p_stay: float) -> "EhChain":
        """Two-state chain with ``p_E(0|0) = p_E(1|1) = p_stay``."""
        return cls(np.array([[p_stay, 1 - p_stay], [1 - p_stay, p_stay]]))

    @classmethod
    def from_rho(cls, rho: float) -> "EhChain":
        """Symmetric two-state chain with lag-one correlation ``rho = 2 p_stay - 1``."""
        return cls.symmetric((1 + rho) / 2)

    def stationary(self) -> Optional[np.ndarray]:
        """Stationary distribution, or ``None`` if it is not unique."""
        m = self.matrix
        n = m.shape[0]
        vals, vecs = np.linalg.eig(m.T)
        ones = np.isclose(vals, 1.0, atol=1e-10)
        if ones.sum() != 1:
            return None
        pi = np.real(vecs[:, np.argmax(ones)])
        pi = pi / pi.sum()
        if np.any(pi < -1e-12):
            return None
        pi = np.clip(pi, 0.0, None)
        return pi / pi.sum() if n > 1 else np.ones(1)


@dataclass(frozen=True)
class EnvConfig:
    harq: HarqModel = field(default_factory=HarqModel)
    eh: EhChain = field(default_factory=lambda: EhChain.iid(0.5))
    b_max: int = 5
    e_s: int = 1
    e_tx: int = 1
    delta_max: int = 40

    def __post_init__(self):
        for name in ("b_max", "e_s", "e_tx", "delta_max"):
            if int(getattr(self, name)) != getattr(self, name):
                raise ModelError(f"{name} must be an integer")
        if self.e_s < 0 or self.e_tx < 1:
            raise ModelError("need e_s >= 0 and e_tx >= 1")
        if self.b_max < self.e_tx:
            raise ModelError("battery capacity must cover one transmission")
        if self.delta_max < 2:
            raise ModelError("delta_max must be at least 2")

    @property
    def r_max(self) -> int:
        return self.harq.r_max

    @property
    def n_eh(self) -> int:
        return self.eh.n_states

    def check_state(self, s: SystemState) -> None:
        if not (s.e < self.n_eh and s.b <= self.b_max and s.delta_rx <= self.delta_max
                and s.r <= self.r_max):
            raise ModelError(f"state {tuple(s)} outside configured bounds")


def feasible_actions(s: SystemState, cfg: EnvConfig) -> frozenset:
    acts = {Action.IDLE}
    if s.b >= cfg.e_s + cfg.e_tx:
        acts.add(Action.NEW)
    if s.b >= cfg.e_tx and s.r >= 1:
        acts.add(Action.RETX)
    return frozenset(acts)


def is_feasible(s: SystemState, a: Action, cfg: EnvConfig) -> bool:
    if a == Action.IDLE:
        return True
    if a == Action.NEW:
        return s.b >= cfg.e_s + cfg.e_tx
    return s.b >= cfg.e_tx and s.r >= 1


def _require_feasible(s, a, cfg):
    if not is_feasible(s, a, cfg):
        raise InfeasibleAction(f"action {Action(a).code} infeasible in state {tuple(s)}")


def next_battery(b: int, e: int, a: Action, cfg: EnvConfig) -> int:
    spent = (cfg.e_s + cfg.e_tx) * (a == Action.NEW) + cfg.e_tx * (a == Action.RETX)
    if spent > b:
        raise InfeasibleAction(f"action {Action(a).code} needs {spent} units, battery holds {b}")
    return min(b + e - spent, cfg.b_max)


def _successor(s, a, ack, e_next, cfg):
    """Apply the AoI / retransmission-count recursions for one channel outcome.

    ``a`` is a plain int here (0=i, 1=n, 2=x); this sits on the simulation hot path.
    """
    e, b, drx, dtx, r = s
    dmax = cfg.delta_max
    if a == 1:
        b = b - cfg.e_s - cfg.e_tx
        dtx2 = 1
        if ack:
            drx2, r2 = 1, 0
        else:
            drx2 = drx + 1 if drx < dmax else dmax
            r2 = 0 if dtx2 == dmax else 1
    else:
        dtx2 = dtx + 1 if dtx < dmax else dmax
        if a == 2:
            b -= cfg.e_tx
            if ack:
                drx2, r2 = dtx2, 0
            else:
                drx2 = drx + 1 if drx < dmax else dmax
                r2 = 0 if dtx2 == dmax else min(r + 1, cfg.harq.r_max)
        else:
            drx2 = drx + 1 if drx < dmax else dmax
            r2 = 0 if dtx2 == dmax else r
    b += e
    if b > cfg.b_max:
        b = cfg.b_max
    return _StateTuple.__new__(SystemState, e_next, b, drx2, dtx2, r2)


class TransitionOutcome(NamedTuple):
    next: SystemState
    prob: float
    ack: Optional[bool]


def transition_distribution(s: SystemState, a: Action, cfg: EnvConfig) -> list:
    """All successors of ``(s, a)`` with positive probability."""
    _require_feasible(s, a, cfg)
    a = Action(a)
    if a == Action.IDLE:
        channel = [(None, 1.0)]
    else:
        g = error_probability(cfg.harq, 0 if a == Action.NEW else s.r)
        channel = [(True, 1.0 - g), (False, g)]
    row = cfg.eh.matrix[s.e]
    out = []
    for ack, pk in channel:
        for e_next, pe in enumerate(row):
            if pe > 0:
                out.append(TransitionOutcome(_successor(s, int(a), ack, e_next, cfg),
                                             float(pk * pe), ack))
    return out


def step(s: SystemState, a: Action, cfg: EnvConfig, rng: np.random.Generator):
    """Sample one slot: returns ``(next_state, cost, ack)``; ``ack`` is None when idle.

    Uses one uniform draw for the channel (transmissions only) and one for the
    next EH state.
    """
    a = int(a)
    b, r = s[1], s[4]
    if a == 0:
        ack = None
    elif a == 1 and b >= cfg.e_s + cfg.e_tx:
        ack = rng.random() >= cfg.harq.probabilities[0]
    elif a == 2 and b >= cfg.e_tx and r >= 1:
        ack = rng.random() >= cfg.harq.probabilities[r]
    else:
        raise InfeasibleAction(f"action {Action(a).code} infeasible in state {tuple(s)}")
    u = rng.random()
    e_next = 0
    for c in cfg.eh.cumulative[s[0]]:
        if u < c:
            break
        e_next += 1
    else:
        e_next -= 1
    return _successor(s, a, ack, e_next, cfg), s[2], ack


def initial_state(cfg: EnvConfig, rng: np.random.Generator) -> SystemState:
    """Empty battery, nothing to retransmit, fresh AoI; EH state drawn from stationarity."""
    pi = cfg.eh.stationary()
    if pi is None:
        log.warning("EH chain has no unique stationary distribution; using uniform initial state")
        pi = np.full(cfg.n_eh, 1.0 / cfg.n_eh)
    cum = np.cumsum(pi)
    e = int(min(np.searchsorted(cum, rng.random(), side="right"), cfg.n_eh - 1))
    return SystemState(e, 0, 1, 1, 0)


class Environment:
    """Sampled simulator bound to one configuration.

    This is the only handle learners get: they see states, costs, acks and
    the feasibility mask, never ``g`` or ``p_E``.
    """

    def __init__(self, cfg: EnvConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng
        self.state = initial_state(cfg, rng)

    def reset(self) -> SystemState:
        self.state = initial_state(self.cfg, self.rng)
        return self.state

    def feasible(self, s: Optional[SystemState] = None) -> frozenset:
        return feasible_actions(self.state if s is None else s, self.cfg)

    def step(self, a: Action):
        s2, cost, ack = step(self.state, a, self.cfg, self.rng)
        self.state = s2
        return s2, cost, ack


def feasibility_mask(s: SystemState, cfg: EnvConfig) -> tuple:
    """Booleans indexed by action value."""
    return (True, s.b >= cfg.e_s + cfg.e_tx, s.b >= cfg.e_tx and s.r >= 1)


def no_energy_config(**kw) -> EnvConfig:
    """Degenerate setting in which no energy is ever harvested."""
    return EnvConfig(eh=EhChain(np.array([[1.0, 0.0], [1.0, 0.0]])), **kw)


def default_config(**kw) -> EnvConfig:
    """Memoryless EH with pe=0.5, B_max=5, R_max=3, g(r)=2^-(r+1), E^s=E^tx=1, Delta_max=40."""
    return EnvConfig(**kw)


def correlated_config(p_stay: float = 0.7, **kw) -> EnvConfig:
    return EnvConfig(eh=EhChain.symmetric(p_stay), **kw)

