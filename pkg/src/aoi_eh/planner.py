"""Exact average-cost planning on the enumerated state space.

Relative value iteration is the main solver; Howard policy iteration over
exact policy evaluation is kept as an independent cross-check.  The two
structural verifiers test the threshold shape of a policy and the
diminishing-differences (submodularity) property of a solved Q table.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import Action, EnvConfig, ModelError, SystemState, TIE_ORDER

log = logging.getLogger(__name__)

N_ACTIONS = 3
DIRECT_SOLVE_LIMIT = 5000


class StateSpace:
    """All valid states in lexicographic ``(e, b, delta_rx, delta_tx, r)`` order."""

    def __init__(self, cfg: EnvConfig):
        self.cfg = cfg
        n_e, nb, dm, nr = cfg.n_eh, cfg.b_max + 1, cfg.delta_max, cfg.r_max + 1
        drx, dtx = np.tril_indices(dm)
        drx, dtx = drx + 1, dtx + 1
        self.n_pairs = len(drx)
        e, b, pair, r = np.meshgrid(np.arange(n_e), np.arange(nb), np.arange(self.n_pairs),
                                    np.arange(nr), indexing="ij")
        self.e = e.ravel()
        self.b = b.ravel()
        self.delta_rx = drx[pair.ravel()]
        self.delta_tx = dtx[pair.ravel()]
        self.r = r.ravel()
        self.size = self.e.size
        self.ref_index = self.index(SystemState(0, 0, 1, 1, 0))

    def __len__(self):
        return self.size

    def index(self, s) -> int:
        return int(self.index_arrays(s[0], s[1], s[2], s[3], s[4]))

    def index_arrays(self, e, b, drx, dtx, r):
        cfg = self.cfg
        pair = (drx - 1) * drx // 2 + (dtx - 1)
        return ((e * (cfg.b_max + 1) + b) * self.n_pairs + pair) * (cfg.r_max + 1) + r

    def state(self, i: int) -> SystemState:
        return SystemState(int(self.e[i]), int(self.b[i]), int(self.delta_rx[i]),
                           int(self.delta_tx[i]), int(self.r[i]))

    def __iter__(self):
        for i in range(self.size):
            yield self.state(i)

    @cached_property
    def feasible(self) -> np.ndarray:
        """``(|S|, 3)`` feasibility mask indexed by action value."""
        cfg = self.cfg
        mask = np.ones((self.size, N_ACTIONS), dtype=bool)
        mask[:, Action.NEW] = self.b >= cfg.e_s + cfg.e_tx
        mask[:, Action.RETX] = (self.b >= cfg.e_tx) & (self.r >= 1)
        return mask


def enumerate_states(cfg: EnvConfig) -> StateSpace:
    return StateSpace(cfg)


@dataclass
class Kernel:
    """Per-action sparse transition matrices; rows of infeasible actions are empty."""

    space: StateSpace
    P: list
    cost: np.ndarray

    @property
    def feasible(self) -> np.ndarray:
        return self.space.feasible


def build_kernel(space: StateSpace) -> Kernel:
    cfg = space.cfg
    dmax, rmax = cfg.delta_max, cfg.r_max
    g = np.asarray(cfg.harq.probabilities)
    pe = cfg.eh.matrix
    e, b, drx, dtx, r = space.e, space.b, space.delta_rx, space.delta_tx, space.r
    drx_up = np.minimum(drx + 1, dmax)
    dtx_up = np.minimum(dtx + 1, dmax)
    feas = space.feasible
    ones = np.ones_like(e)
    mats = []
    for a in Action:
        rows = np.flatnonzero(feas[:, a])
        # branches: (prob of channel outcome, next b, drx, dtx, r)
        if a == Action.IDLE:
            branches = [(ones[rows].astype(float), b + e, drx_up, dtx_up,
                         np.where(dtx_up == dmax, 0, r))]
        elif a == Action.NEW:
            b2 = b + e - cfg.e_s - cfg.e_tx
            branches = [
                (1 - g[0] * ones[rows], b2, ones, ones, 0 * ones),
                (g[0] * ones[rows], b2, drx_up, ones, np.where(ones == dmax, 0, 1)),
            ]
        else:
            b2 = b + e - cfg.e_tx
            rc = np.minimum(r, rmax)
            branches = [
                (1 - g[rc[rows]], b2, dtx_up, dtx_up, 0 * ones),
                (g[rc[rows]], b2, drx_up, dtx_up, np.where(dtx_up == dmax, 0, np.minimum(r + 1, rmax))),
            ]
        data, ri, ci = [], [], []
        for prob, nb, nrx, ntx, nr in branches:
            nb = np.minimum(nb, cfg.b_max)[rows]
            nrx, ntx, nr = nrx[rows], ntx[rows], nr[rows]
            for e2 in range(cfg.n_eh):
                p = prob * pe[e[rows], e2]
                keep = p > 0
                cols = space.index_arrays(np.full(keep.sum(), e2), nb[keep], nrx[keep],
                                          ntx[keep], nr[keep])
                data.append(p[keep])
                ri.append(rows[keep])
                ci.append(cols)
        mats.append(sp.csr_matrix((np.concatenate(data), (np.concatenate(ri), np.concatenate(ci))),
                                  shape=(space.size, space.size)))
    return Kernel(space=space, P=mats, cost=space.delta_rx.astype(float))


@dataclass
class Solution:
    """Gain, differential values, action values and the greedy policy of a solve."""

    gain: float
    h: np.ndarray
    Q: np.ndarray
    policy: "TabularPolicy"
    iterations: int = 0
    span: float = 0.0
    converged: bool = True


@dataclass
class TabularPolicy:
    space: StateSpace
    actions: np.ndarray

    def __post_init__(self):
        self.actions = np.asarray(self.actions, dtype=np.int8)
        if self.actions.shape != (self.space.size,):
            raise ModelError("policy must assign one action per state")
        bad = ~self.space.feasible[np.arange(self.space.size), self.actions]
        if bad.any():
            raise ModelError(f"policy infeasible at state {tuple(self.space.state(int(np.argmax(bad))))}")
        self._lookup = self.actions.tolist()

    def act(self, s, rng=None) -> int:
        e, b, drx, dtx, r = s
        return self._lookup[self.space.index_arrays(e, b, drx, dtx, r)]

    __call__ = act


def q_values(kernel: Kernel, h: np.ndarray) -> np.ndarray:
    Q = np.full((kernel.space.size, N_ACTIONS), np.inf)
    feas = kernel.feasible
    for a in Action:
        Q[feas[:, a], a] = kernel.cost[feas[:, a]] + (kernel.P[a] @ h)[feas[:, a]]
    return Q


def greedy_actions(Q: np.ndarray, tie_tol: float = 1e-9, incumbent: Optional[np.ndarray] = None):
    """Argmin over actions, breaking near-ties in the order i, x, n.

    With ``incumbent`` given, the incumbent action is kept whenever it is within
    ``tie_tol`` of the minimum (avoids cycling in policy iteration).
    """
    best = Q.min(axis=1)
    near = Q <= best[:, None] + tie_tol
    out = np.empty(Q.shape[0], dtype=np.int8)
    out.fill(-1)
    for a in reversed(TIE_ORDER):
        out[near[:, a]] = a
    if incumbent is not None:
        keep = near[np.arange(Q.shape[0]), incumbent]
        out[keep] = incumbent[keep]
    return out


def rvi_solve(cfg: EnvConfig, tol: float = 1e-9, max_iter: int = 100_000,
              s_ref: Optional[SystemState] = None, h0: Optional[np.ndarray] = None,
              kernel: Optional[Kernel] = None) -> Solution:
    """Relative value iteration with span-seminorm stopping."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    kernel = kernel or build_kernel(enumerate_states(cfg))
    space = kernel.space
    ref = space.ref_index if s_ref is None else space.index(s_ref)
    h = np.zeros(space.size) if h0 is None else np.array(h0, dtype=float)
    h = h - h[ref]
    # infeasible actions carry infinite cost so they never win the minimum
    costs = [np.where(kernel.feasible[:, a], kernel.cost, np.inf) for a in Action]
    span = np.inf
    V = np.empty(space.size)
    for it in range(1, max_iter + 1):
        np.add(kernel.P[0] @ h, costs[0], out=V)
        for a in (1, 2):
            np.minimum(V, kernel.P[a] @ h + costs[a], out=V)
        diff = V - h
        span = diff.max() - diff.min()
        h = V - V[ref]
        if span < tol:
            break
    converged = span < tol
    if not converged:
        log.warning("RVI stopped after %d iterations with span %.3g >= tol %.3g", it, span, tol)
    gain = float(V[ref])
    Q = q_values(kernel, h)
    policy = TabularPolicy(space, greedy_actions(Q))
    return Solution(gain=gain, h=h, Q=Q, policy=policy, iterations=it, span=float(span),
                    converged=converged)


@dataclass
class PolicyEvaluation:
    gain: float
    h: np.ndarray
    residual: float
    method: str


def policy_matrix(kernel: Kernel, actions: np.ndarray):
    rows = []
    for a in Action:
        sel = sp.diags((actions == a).astype(float))
        rows.append(sel @ kernel.P[a])
    return (rows[0] + rows[1] + rows[2]).tocsr()


def evaluate_policy_exact(policy: TabularPolicy, cfg: Optional[EnvConfig] = None,
                          kernel: Optional[Kernel] = None, s_ref: Optional[SystemState] = None,
                          direct_limit: int = DIRECT_SOLVE_LIMIT, tol: float = 1e-10,
                          max_iter: int = 200_000) -> PolicyEvaluation:
    """Gain and bias of a stationary deterministic policy.

    Solves ``h + J = c + P_pi h`` with ``h(s_ref) = 0``: a sparse direct solve
    up to ``direct_limit`` states, relative value evaluation on the
    aperiodicity-transformed chain beyond that (or when the direct system is
    singular).
    """
    space = policy.space
    kernel = kernel or build_kernel(space)
    ref = space.ref_index if s_ref is None else space.index(s_ref)
    Pp = policy_matrix(kernel, policy.actions)
    c = kernel.cost
    n = space.size

    def residual(J, h):
        return float(np.abs(h + J - c - Pp @ h).max())

    if n <= direct_limit:
        A = (sp.identity(n, format="lil") - Pp).tolil()
        A[:, ref] = np.ones((n, 1))
        try:
            with np.errstate(all="raise"):
                x = spla.spsolve(A.tocsc(), c)
            if np.all(np.isfinite(x)):
                J = float(x[ref])
                h = x.copy()
                h[ref] = 0.0
                res = residual(J, h)
                if res < 1e-6:
                    return PolicyEvaluation(J, h, res, "direct")
        except (FloatingPointError, RuntimeError, spla.MatrixRankWarning):
            pass
        log.warning("direct policy evaluation failed; falling back to iterative evaluation")

    kappa = 0.9  # aperiodicity transform: same bias, gain scaled by kappa
    Pt = (kappa * Pp + (1 - kappa) * sp.identity(n)).tocsr()
    ct = kappa * c
    h = np.zeros(n)
    for _ in range(max_iter):
        v = ct + Pt @ h
        diff = v - h
        h = v - v[ref]
        if diff.max() - diff.min() < tol:
            break
    J = float(v[ref]) / kappa
    return PolicyEvaluation(J, h, residual(J, h), "iterative")


def policy_iteration_solve(cfg: EnvConfig, kernel: Optional[Kernel] = None,
                           max_iter: int = 200, tie_tol: float = 1e-9):
    """Howard policy iteration starting from always-idle; returns ``(gain, policy, evaluation)``."""
    kernel = kernel or build_kernel(enumerate_states(cfg))
    space = kernel.space
    actions = np.zeros(space.size, dtype=np.int8)
    seen = set()
    best = None
    for _ in range(max_iter):
        ev = evaluate_policy_exact(TabularPolicy(space, actions), kernel=kernel)
        if best is None or ev.gain < best[0].gain:
            best = (ev, actions)
        Q = q_values(kernel, ev.h)
        new = greedy_actions(Q, tie_tol=tie_tol, incumbent=actions)
        if np.array_equal(new, actions):
            return ev.gain, TabularPolicy(space, actions), ev
        key = new.tobytes()
        if key in seen:
            log.warning("policy iteration revisited a policy; returning best policy found")
            return best[0].gain, TabularPolicy(space, best[1]), best[0]
        seen.add(key)
        actions = new
    log.warning("policy iteration hit max_iter=%d", max_iter)
    return best[0].gain, TabularPolicy(space, best[1]), best[0]


def bellman_residual(kernel: Kernel, gain: float, h: np.ndarray) -> float:
    """``max_s |min_a Q(s,a) - h(s) - J|``."""
    return float(np.abs(q_values(kernel, h).min(axis=1) - h - gain).max())


# ---------------------------------------------------------------- verifiers

@dataclass
class ThresholdReport:
    violations: list = field(default_factory=list)
    slices_checked: int = 0

    @property
    def passed(self) -> bool:
        return not self.violations


def verify_threshold_structure(policy: TabularPolicy, space: Optional[StateSpace] = None) -> ThresholdReport:
    """Check that along every ``(e, b, delta_tx, r)`` slice, once the policy
    transmits at some ``delta_rx`` it keeps transmitting at all larger ones.

    Each violation is ``(e, b, delta_tx, r, delta_rx_transmit, delta_rx_idle)``.
    """
    space = space or policy.space
    cfg = space.cfg
    acts = policy.actions
    report = ThresholdReport()
    for e in range(cfg.n_eh):
        for b in range(cfg.b_max + 1):
            for r in range(cfg.r_max + 1):
                if b < cfg.e_tx or (r == 0 and b < cfg.e_s + cfg.e_tx):
                    continue
                for dtx in range(1, cfg.delta_max + 1):
                    drx = np.arange(dtx, cfg.delta_max + 1)
                    idx = space.index_arrays(e, b, drx, dtx, r)
                    tx = acts[idx] != Action.IDLE
                    report.slices_checked += 1
                    if tx.any():
                        first = int(np.argmax(tx))
                        idle_after = np.flatnonzero(~tx[first:])
                        if idle_after.size:
                            report.violations.append(
                                (e, b, dtx, r, int(drx[first]), int(drx[first + idle_after[0]])))
    return report


@dataclass
class SubmodularityReport:
    violations: list = field(default_factory=list)
    pairs_checked: int = 0
    max_excess: float = -np.inf

    @property
    def passed(self) -> bool:
        return not self.violations


ACTION_PAIRS = ((Action.IDLE, Action.NEW), (Action.IDLE, Action.RETX), (Action.NEW, Action.RETX))


def submodularity_gaps(Q: np.ndarray, space: StateSpace):
    """Yield ``(a1, a2, lower_idx, excess)`` for every checkable pair.

    ``excess`` is ``[Q(d+1,a2) - Q(d+1,a1)] - [Q(d,a2) - Q(d,a1)]``; it must be <= 0.
    """
    lo = np.flatnonzero(space.delta_rx < space.cfg.delta_max)
    hi = space.index_arrays(space.e[lo], space.b[lo], space.delta_rx[lo] + 1,
                            space.delta_tx[lo], space.r[lo])
    feas = space.feasible
    for a1, a2 in ACTION_PAIRS:
        ok = feas[lo, a1] & feas[lo, a2]
        l, u = lo[ok], hi[ok]
        excess = (Q[u, a2] - Q[u, a1]) - (Q[l, a2] - Q[l, a1])
        yield a1, a2, l, excess


def verify_submodularity(values: Solution, cfg: Optional[EnvConfig] = None, tol: float = 1e-9,
                         Q: Optional[np.ndarray] = None) -> SubmodularityReport:
    """Check diminishing Q differences in ``delta_rx`` for the pairs (i,n), (i,x), (n,x).

    Each violation is ``(state, a1, a2, excess)`` with ``state`` the lower-AoI state.
    """
    space = values.policy.space
    Q = values.Q if Q is None else Q
    report = SubmodularityReport()
    for a1, a2, idx, excess in submodularity_gaps(Q, space):
        report.pairs_checked += idx.size
        if excess.size:
            report.max_excess = max(report.max_excess, float(excess.max()))
        for k in np.flatnonzero(excess > tol):
            report.violations.append((space.state(int(idx[k])), a1.code, a2.code, float(excess[k])))
    return report


# -------------------------------------------------------------- serialization

POLICY_COLUMNS = ("e", "b", "delta_rx", "delta_tx", "r", "action", "h", "Q_i", "Q_n", "Q_x")


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def write_solution_csv(path, sol: Solution) -> None:
    space = sol.policy.space
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(POLICY_COLUMNS)
        for i in range(space.size):
            w.writerow([space.e[i], space.b[i], space.delta_rx[i], space.delta_tx[i], space.r[i],
                        Action(sol.policy.actions[i]).code, _fmt(sol.h[i]),
                        *(_fmt(q) for q in sol.Q[i])])


def read_policy_csv(path, cfg: EnvConfig) -> TabularPolicy:
    """Rebuild a tabular policy from a solution CSV (only the action column is used)."""
    space = enumerate_states(cfg)
    actions = np.full(space.size, -1, dtype=np.int8)
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        for row in reader:
            s = tuple(int(row[k]) for k in POLICY_COLUMNS[:5])
            actions[space.index(s)] = Action.from_code(row["action"])
    if (actions < 0).any():
        raise ModelError(f"{path}: policy CSV does not cover the configured state space")
    return TabularPolicy(space, actions)
