import math

import numpy as np
import pytest

from aoi_eh.learners import (Adam, DqnHyper, FdpgHyper, GrHyper, GrState, MLP, ReplayBuffer,
                             ThresholdParams, dqn_learn, dqn_loss_grad, dqn_td_error,
                             fdpg_gradient_estimate, fdpg_learn, gr_learn, gr_q_update,
                             huber_loss, schedules_satisfy_conditions)
from aoi_eh.learners.dqn import huber_grad, state_features, _encode
from aoi_eh.model import SystemState, default_config, feasible_actions, no_energy_config
from aoi_eh.planner import enumerate_states
from aoi_eh.policies import pinned_mask

CFG = default_config()
ALL = (True, True, True)


# ------------------------------------------------------------------ GR

def test_gr_update_examples():
    grs = GrState(hyper=GrHyper(beta_power=0.0))
    s, s2 = SystemState(0, 2, 3, 1, 0), SystemState(1, 0, 4, 2, 0)
    gr_q_update(grs, s, 1, s2, 3.0, (True, False, False))
    assert grs.Q[s][1] == 3.0
    assert grs.J == 1.5
    # second visit: alpha = 1/sqrt(2) times the TD error
    before = grs.Q[s][1]
    td = 3.0 - grs.J + 0.0 - before
    gr_q_update(grs, s, 1, s2, 3.0, (True, False, False))
    assert grs.Q[s][1] == pytest.approx(before + td / math.sqrt(2))
    assert grs.visits[(s, 1)] == 2


def test_gr_gain_recursions():
    rng = np.random.default_rng(0)
    costs = rng.integers(1, 41, 1000).astype(float)
    s = SystemState(0, 0, 1, 1, 0)
    # beta = 1: the gain estimate is the running average with the zero prior as first sample
    grs = GrState(hyper=GrHyper(beta_power=0.0))
    for k, c in enumerate(costs, start=1):
        gr_q_update(grs, s, 0, s, c, ALL)
        assert abs(grs.J - costs[:k].sum() / (k + 1)) < 1e-9
    # beta = 1/n: compare with the recursion unrolled by hand
    grs = GrState(hyper=GrHyper())
    J = 0.0
    for n, c in enumerate(costs, start=1):
        J = J + ((n * J + c) / (n + 1) - J) / n
        gr_q_update(grs, s, 0, s, c, ALL)
    assert abs(grs.J - J) < 1e-9


def test_gr_schedules_and_temperature():
    assert all(schedules_satisfy_conditions(GrHyper(alpha_power=0.6, beta_power=0.9)).values())
    bad = schedules_satisfy_conditions(GrHyper(alpha_power=0.5, beta_power=1.0))
    assert not bad["sum_alpha_sq_converges"]
    grs = GrState(hyper=GrHyper(tau_min=0.5), tau=1.0)
    s = SystemState(0, 0, 1, 1, 0)
    taus = []
    for _ in range(30):
        gr_q_update(grs, s, 0, s, 1.0, ALL)
        taus.append(grs.tau)
    assert all(a >= b for a, b in zip(taus, taus[1:])) and taus[-1] == 0.5


def test_gr_no_energy_and_feasibility():
    res = gr_learn(no_energy_config(), 100_000, seed=0)
    assert abs(res.trace.running_avg[-1] - 40) < 0.4
    res = gr_learn(CFG, 3000, seed=1)
    for s in enumerate_states(CFG):
        assert res.policy(s) in feasible_actions(s, CFG)


def test_gr_deterministic():
    a = gr_learn(CFG, 2000, seed=4).trace.inst_aoi
    b = gr_learn(CFG, 2000, seed=4).trace.inst_aoi
    assert np.array_equal(a, b)


# ----------------------------------------------------------------- FDPG

def test_fdpg_gradient_examples():
    assert np.allclose(fdpg_gradient_estimate([1, 0], 10, 8, 0.5), [2.0, 0.0])
    assert np.allclose(fdpg_gradient_estimate([1, 1], 7, 7, 0.5), [0.0, 0.0])
    assert np.allclose(fdpg_gradient_estimate([1, 1], 6, 2, 1.0), [1.0, 1.0])
    with pytest.raises(ValueError):
        fdpg_gradient_estimate([0, 0], 1, 2, 1.0)


def test_fdpg_hyper_validation():
    for bad in (dict(z=0.5), dict(z=1.1), dict(y=0), dict(q=1.0), dict(sigma=-1)):
        with pytest.raises(ValueError):
            FdpgHyper(**bad)


def test_fdpg_sigma_zero_common_random_numbers():
    res = fdpg_learn(CFG, iterations=20, seed=3, hyper=FdpgHyper(sigma=0.0), variant="double")
    assert all(jp == jm for jp, jm in res.state.history)


def test_fdpg_pinned_coordinates_untouched():
    for variant in ("single", "double"):
        res = fdpg_learn(CFG, iterations=40, seed=5, variant=variant)
        p = res.state.params
        pin = pinned_mask(CFG)
        never = CFG.delta_max + 1
        assert np.all(p.theta_n[pin] == never) and np.all(p.theta_x[pin] == never)
        # learnable coordinates actually moved
        assert not np.all(p.vector() == FdpgHyper().theta0)


def test_fdpg_projection():
    p = ThresholdParams(CFG, True, 1.0)
    vec = np.random.default_rng(0).normal(20, 40, p.dim)
    proj = p.project(vec)
    assert proj.min() >= 1 and proj.max() <= CFG.delta_max + 1
    tn, tx = p.grids(proj)
    both = p.learn_n & p.learn_x
    assert np.all(tn[both] <= tx[both])
    assert np.all(tn[p.tied] == tx[p.tied])


def test_fdpg_no_energy_unchanged():
    cfg = no_energy_config()
    res = fdpg_learn(cfg, iterations=10, seed=0, variant="double")
    assert np.all(res.state.params.vector() == FdpgHyper().theta0)
    assert all(jp == jm for jp, jm in res.state.history)


def test_fdpg_budget_and_determinism():
    hy = FdpgHyper(horizon=50)
    a = fdpg_learn(CFG, budget=2000, seed=9, hyper=hy, variant="single")
    b = fdpg_learn(CFG, budget=2000, seed=9, hyper=hy, variant="single")
    assert len(a.trace) == 2000 and len(a.state.history) == 20
    assert np.array_equal(a.trace.inst_aoi, b.trace.inst_aoi)
    assert np.array_equal(a.policy.t_n, b.policy.t_n)


# ------------------------------------------------------------------ DQN

def test_huber_examples():
    assert huber_loss(0.5, 1) == 0.125
    assert huber_loss(2, 1) == 1.5
    d = 1.7
    assert huber_loss(d, d) == pytest.approx(0.5 * d * d)
    assert huber_loss(d + 1e-12, d) == pytest.approx(0.5 * d * d)
    assert np.allclose(huber_grad(np.array([-3.0, 0.2, 5.0]), 1.0), [-1.0, 0.2, 1.0])
    with pytest.raises(ValueError):
        huber_loss(1.0, 0.0)


def test_td_error_examples():
    rng = np.random.default_rng(0)
    net = MLP(6, 4, 3, rng)
    net.theta[:] = 0.0
    x = rng.random(6)
    assert dqn_td_error(net, net, x, 1, x, 5.0, 0.0)[0] == 5.0
    net.b2[:] = 2.5  # Q constant everywhere
    assert dqn_td_error(net, net.copy(), x, 2, rng.random(6), 0.0, 1.0)[0] == 0.0


def test_td_target_respects_feasibility():
    rng = np.random.default_rng(1)
    net = MLP(3, 2, 3, rng)
    net.theta[:] = 0.0
    net.b2[:] = [0.0, 1.0, 9.0]
    tgt = net.copy()
    tgt.b2[:] = [4.0, 5.0, 6.0]
    x = np.ones(3)
    eps = dqn_td_error(net, tgt, x, 0, x, 0.0, 1.0, mask2=[True, True, False])
    assert eps[0] == pytest.approx(0.0 - 5.0)  # argmax over {i, n} picks n, valued by target


def _fd_check(net, target, x, a, x2, cost, gamma, h=1e-6):
    _, g = dqn_td_error(net, target, x, a, x2, cost, gamma, with_grad=True)
    fd = np.empty_like(g)
    for k in range(net.theta.size):
        keep = net.theta[k]
        net.theta[k] = keep + h
        up = dqn_td_error(net, target, x, a, x2, cost, gamma).sum()
        net.theta[k] = keep - h
        down = dqn_td_error(net, target, x, a, x2, cost, gamma).sum()
        net.theta[k] = keep
        fd[k] = (up - down) / (2 * h)
    return np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-8)


def test_gradient_check_toy_and_full_size():
    rng = np.random.default_rng(2)
    toy = MLP(2, 1, 1, rng)
    assert toy.theta.size == 5
    toy.b1[:] = 0.5  # keep the single unit active, away from the kink
    toy.W1[:] = np.abs(toy.W1)
    x, x2 = rng.random((4, 2)), rng.random((4, 2))
    assert _fd_check(toy, toy.copy(), x, np.zeros(4, int), x2, rng.random(4), 0.9).max() < 1e-4
    net = MLP(6, 24, 3, rng)
    x, x2 = rng.random((8, 6)), rng.random((8, 6))
    rel = _fd_check(net, MLP(6, 24, 3, rng), x, rng.integers(0, 3, 8), x2, rng.random(8), 0.99)
    assert np.median(rel) < 1e-6 and rel.max() < 1e-3  # a ReLU kink can spoil isolated entries


def test_loss_grad_is_scaled_huber_chain():
    rng = np.random.default_rng(3)
    net = MLP(6, 24, 3, rng)
    tgt = net.copy()
    buf = ReplayBuffer(50, 6)
    for _ in range(50):
        buf.add(rng.random(6), int(rng.integers(3)), rng.random(6), rng.random() * 40,
                (True, True, bool(rng.integers(2))))
    batch = buf.sample(rng, 16)
    eps, g = dqn_loss_grad(net, tgt, batch, 0.99, 1.0)
    h = 1e-6
    k = 7
    keep = net.theta[k]
    vals = []
    for d in (h, -h):
        net.theta[k] = keep + d
        e = dqn_td_error(net, tgt, *batch[:4], 0.99, mask2=batch[4])
        vals.append(np.mean(huber_loss(e, 1.0)))
    net.theta[k] = keep
    assert g[k] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-4, abs=1e-8)


def test_adam_minimizes_quadratic():
    theta = np.array([3.0, -2.0])
    opt = Adam(theta, lr=0.05)
    for _ in range(2000):
        opt.step(2 * theta)
    assert np.abs(theta).max() < 1e-2


def test_replay_buffer_capacity():
    buf = ReplayBuffer(2000, 2)
    for i in range(2500):
        buf.add([i, i], 0, [i, i], 1.0, ALL)
        assert len(buf) <= 2000
    x, a, x2, c, m = buf.sample(np.random.default_rng(0), 500)
    assert x[:, 0].min() >= 500  # the oldest entries were overwritten
    assert m.dtype == bool and m.shape == (500, 3)


def test_epsilon_schedule():
    hy = DqnHyper()
    for k in range(100):
        assert hy.epsilon(k) == max(0.01, 0.9 ** k)
    assert hy.epsilon(1000) == 0.01


def test_dqn_target_refresh_and_determinism():
    hy = DqnHyper(episode_len=200)
    a = dqn_learn(CFG, 4, seed=1, hyper=hy)
    assert a.state.target_updates == [200, 400, 600, 800]
    assert len(a.state.buffer) <= hy.replay
    assert np.array_equal(a.state.target.theta, a.state.online.theta)
    b = dqn_learn(CFG, 4, seed=1, hyper=hy)
    assert np.array_equal(a.trace.inst_aoi, b.trace.inst_aoi)
    assert np.array_equal(a.state.online.theta, b.state.online.theta)


def test_dqn_default_refresh_every_1000_steps():
    res = dqn_learn(CFG, 2, seed=0)
    assert res.state.target_updates == [1000, 2000]


def test_state_encoding():
    s = SystemState(1, 5, 40, 20, 3)
    x = state_features(CFG, [s])[0]
    assert np.allclose(x, [0, 1, 1, 1, 0.5, 1])
    assert np.array_equal(_encode(s, CFG), x)


def test_dqn_policy_feasible():
    res = dqn_learn(CFG, 1, seed=2, hyper=DqnHyper(episode_len=300))
    for s in list(enumerate_states(CFG))[::37]:
        assert res.policy(s) in feasible_actions(s, CFG)
