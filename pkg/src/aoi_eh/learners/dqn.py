"""Small DQN: one hidden ReLU layer in plain numpy, experience replay, fixed target net."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..model import EnvConfig, Environment, feasibility_mask
from ..trace import RunTrace, spawn_rngs
from .gr import LearnResult


def huber_loss(eps, d: float = 1.0):
    """``0.5 eps^2`` inside ``|eps| <= d``, ``d (|eps| - d/2)`` outside."""
    if d <= 0:
        raise ValueError("d must be positive")
    a = np.abs(eps)
    out = np.where(a <= d, 0.5 * a * a, d * (a - 0.5 * d))
    return out.item() if np.ndim(out) == 0 else out


def huber_grad(eps, d: float = 1.0):
    return np.clip(eps, -d, d)


def state_features(cfg: EnvConfig, states) -> np.ndarray:
    """One-hot EH state followed by b, delta_rx, delta_tx, r scaled to [0, 1]."""
    S = np.atleast_2d(np.asarray(states, dtype=float))
    n = S.shape[0]
    X = np.zeros((n, cfg.n_eh + 4))
    X[np.arange(n), S[:, 0].astype(int)] = 1.0
    X[:, cfg.n_eh] = S[:, 1] / max(cfg.b_max, 1)
    X[:, cfg.n_eh + 1] = S[:, 2] / cfg.delta_max
    X[:, cfg.n_eh + 2] = S[:, 3] / cfg.delta_max
    X[:, cfg.n_eh + 3] = S[:, 4] / max(cfg.r_max, 1)
    return X


def _encode(s, cfg: EnvConfig) -> np.ndarray:
    x = [0.0] * (cfg.n_eh + 4)
    x[s[0]] = 1.0
    x[cfg.n_eh:] = (s[1] / max(cfg.b_max, 1), s[2] / cfg.delta_max, s[3] / cfg.delta_max,
                    s[4] / max(cfg.r_max, 1))
    return np.array(x)


class MLP:
    """``x -> relu(x W1 + b1) W2 + b2``; all parameters are views into one flat vector."""

    def __init__(self, n_in: int, n_hidden: int, n_out: int, rng: np.random.Generator = None,
                 theta: np.ndarray = None):
        self.shape = (n_in, n_hidden, n_out)
        size = n_in * n_hidden + n_hidden + n_hidden * n_out + n_out
        if theta is None:
            theta = np.zeros(size)
            self.theta = theta
            self._bind()
            self.W1[...] = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_hidden))
            self.W2[...] = rng.normal(0.0, np.sqrt(1.0 / n_hidden), (n_hidden, n_out))
        else:
            if theta.size != size:
                raise ValueError(f"expected {size} parameters, got {theta.size}")
            self.theta = theta
            self._bind()

    def _bind(self):
        n_in, n_h, n_out = self.shape
        views, k = [], 0
        for shp in ((n_in, n_h), (n_h,), (n_h, n_out), (n_out,)):
            n = int(np.prod(shp))
            views.append(self.theta[k:k + n].reshape(shp))
            k += n
        self.W1, self.b1, self.W2, self.b2 = views

    @property
    def params(self) -> list:
        return [self.W1, self.b1, self.W2, self.b2]

    def copy(self) -> "MLP":
        return MLP(*self.shape, theta=self.theta.copy())

    def load(self, other: "MLP") -> None:
        self.theta[...] = other.theta

    def forward(self, X):
        z = X @ self.W1 + self.b1
        h = np.maximum(z, 0.0)
        return h @ self.W2 + self.b2, (X, z, h)

    def __call__(self, X):
        return np.maximum(X @ self.W1 + self.b1, 0.0) @ self.W2 + self.b2

    def backward(self, cache, dQ) -> np.ndarray:
        """Flat gradient of ``sum(dQ * Q)`` with respect to ``theta``."""
        X, z, h = cache
        dz = (dQ @ self.W2.T) * (z > 0)
        return np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0), (h.T @ dQ).ravel(),
                               dQ.sum(axis=0)])


class Adam:
    def __init__(self, theta: np.ndarray, lr: float = 1e-4, b1: float = 0.9, b2: float = 0.999,
                 eps: float = 1e-8):
        self.theta = theta
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros_like(theta)
        self.v = np.zeros_like(theta)
        self.t = 0

    def step(self, g: np.ndarray) -> None:
        self.t += 1
        self.m *= self.b1
        self.m += (1 - self.b1) * g
        self.v *= self.b2
        self.v += (1 - self.b2) * g * g
        step = self.lr * np.sqrt(1 - self.b2 ** self.t) / (1 - self.b1 ** self.t)
        self.theta -= step * self.m / (np.sqrt(self.v) + self.eps * np.sqrt(1 - self.b2 ** self.t))


class ReplayBuffer:
    """Ring buffer of encoded transitions ``(x, a, x', cost, feasible mask of s')``.

    Rows are stored flat so that a minibatch is a single gather.
    """

    def __init__(self, capacity: int, n_in: int):
        self.capacity = capacity
        self.n_in = n_in
        self.data = np.zeros((capacity, 2 * n_in + 5))
        self.size = 0
        self._next = 0

    def __len__(self):
        return self.size

    def add(self, x, a, x2, cost, mask2) -> None:
        n = self.n_in
        row = self.data[self._next]
        row[:n] = x
        row[n] = a
        row[n + 1:2 * n + 1] = x2
        row[2 * n + 1] = cost
        row[2 * n + 2:] = mask2
        self._next = (self._next + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, rng: np.random.Generator, n: int):
        d = self.data[rng.integers(0, self.size, n)]
        k = self.n_in
        return (d[:, :k], d[:, k].astype(np.int64), d[:, k + 1:2 * k + 1], d[:, 2 * k + 1],
                d[:, 2 * k + 2:] > 0.5)


def _td(online, target, x, a, x2, cost, gamma, mask2):
    x = np.atleast_2d(x)
    x2 = np.atleast_2d(x2)
    a = np.atleast_1d(np.asarray(a, dtype=np.int64))
    cost = np.atleast_1d(np.asarray(cost, dtype=float))
    n = x.shape[0]
    rows = np.arange(n)
    qq, (X, z, h) = online.forward(np.vstack([x, x2]))
    q, q2, cache = qq[:n], qq[n:], (X[:n], z[:n], h[:n])
    if mask2 is not None:
        q2 = np.where(np.atleast_2d(mask2), q2, -np.inf)
    boot = target(x2)[rows, q2.argmax(axis=1)]
    return q[rows, a] - (-cost + gamma * boot), cache, rows, a, q.shape


def dqn_td_error(online: MLP, target: MLP, x, a, x2, cost, gamma: float, mask2=None,
                 with_grad: bool = False):
    """``Q(s,a) - (-cost + gamma * Q_target(s', argmax_feasible Q(s')))`` per row.

    With ``with_grad`` also returns the gradient of ``sum(eps)`` with respect to
    the online parameters (the bootstrap term is treated as a constant).
    """
    eps, cache, rows, a, shape = _td(online, target, x, a, x2, cost, gamma, mask2)
    if not with_grad:
        return eps
    dQ = np.zeros(shape)
    dQ[rows, a] = 1.0
    return eps, online.backward(cache, dQ)


def dqn_loss_grad(online: MLP, target: MLP, batch, gamma: float, d: float = 1.0):
    """TD errors of ``batch`` and the online-parameter gradient of their mean Huber loss."""
    x, a, x2, cost, mask2 = batch
    eps, cache, rows, a, shape = _td(online, target, x, a, x2, cost, gamma, mask2)
    dQ = np.zeros(shape)
    dQ[rows, a] = huber_grad(eps, d) / rows.size
    return eps, online.backward(cache, dQ)


@dataclass
class DqnHyper:
    gamma: float = 0.99
    batch: int = 32
    replay: int = 2000
    lr: float = 1e-4
    eps0: float = 1.0
    eps_decay: float = 0.9
    eps_min: float = 0.01
    episode_len: int = 1000
    hidden: int = 24
    huber_d: float = 1.0
    cost_scale: Optional[float] = None

    def scale(self, cfg: EnvConfig) -> float:
        """Multiplier applied to stored costs; ``None`` means ``1 / delta_max``."""
        return 1.0 / cfg.delta_max if self.cost_scale is None else self.cost_scale

    def epsilon(self, k: int) -> float:
        """Exploration rate after ``k`` completed episodes."""
        return max(self.eps_min, self.eps0 * self.eps_decay ** k)


@dataclass
class DqnState:
    online: MLP
    target: MLP
    buffer: ReplayBuffer
    opt: Adam
    hyper: DqnHyper
    episode: int = 0
    steps: int = 0
    target_updates: list = field(default_factory=list)


class NetworkPolicy:
    """Greedy feasible action of a Q network (reward convention: larger is better)."""

    def __init__(self, net: MLP, cfg: EnvConfig):
        self.net = net
        self.cfg = cfg

    def q_values(self, states) -> np.ndarray:
        return self.net(state_features(self.cfg, states))

    def actions(self, states, masks) -> np.ndarray:
        q = np.where(masks, self.q_values(states), -np.inf)
        return q.argmax(axis=1)

    def __call__(self, s, rng=None) -> int:
        q = self.q_values([s])[0]
        m = feasibility_mask(s, self.cfg)
        return int(max((a for a in range(3) if m[a]), key=lambda a: q[a]))


def dqn_learn(cfg: EnvConfig, episodes: int, seed: int, hyper: Optional[DqnHyper] = None,
              scenario: str = "") -> LearnResult:
    """Train for ``episodes`` episodes of ``episode_len`` slots on one continuing trajectory.

    The trace holds the AoI seen while training.  The target network is
    refreshed and the exploration rate decayed at every episode boundary.
    """
    hyper = hyper or DqnHyper()
    t0 = time.perf_counter()
    env_rng, rng = spawn_rngs(seed)
    env = Environment(cfg, env_rng)
    n_in = cfg.n_eh + 4
    online = MLP(n_in, hyper.hidden, 3, rng)
    st = DqnState(online, online.copy(), ReplayBuffer(hyper.replay, n_in),
                  Adam(online.theta, lr=hyper.lr), hyper)
    costs = np.empty(episodes * hyper.episode_len, dtype=np.int64)
    scale = hyper.scale(cfg)
    s = env.state
    x = _encode(s, cfg)
    mask = feasibility_mask(s, cfg)
    t = 0
    for k in range(episodes):
        eps = hyper.epsilon(k)
        for _ in range(hyper.episode_len):
            feas = [a for a in range(3) if mask[a]]
            if rng.random() < eps:
                a = feas[int(rng.integers(len(feas)))]
            else:
                q = online(x).tolist()
                a = max(feas, key=q.__getitem__)
            s2, cost, _ = env.step(a)
            x2 = _encode(s2, cfg)
            mask2 = feasibility_mask(s2, cfg)
            st.buffer.add(x, a, x2, cost * scale, mask2)
            costs[t] = cost
            t += 1
            st.steps += 1
            if len(st.buffer) >= hyper.batch:
                batch = st.buffer.sample(rng, hyper.batch)
                _, grads = dqn_loss_grad(online, st.target, batch, hyper.gamma, hyper.huber_d)
                st.opt.step(grads)
            x, mask = x2, mask2
        st.target.load(online)
        st.target_updates.append(st.steps)
        st.episode = k + 1
    policy = NetworkPolicy(online, cfg)
    trace = RunTrace(costs, seed, "dqn", scenario, time.perf_counter() - t0, policy)
    return LearnResult(policy, trace, st)
