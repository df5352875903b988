import math

import numpy as np
import pytest
from scipy import stats

from kddg_lab import _rlkernels as kern
from kddg_lab import rl
from kddg_lab.distill import DistillConfig, FilterSpec
from kddg_lab.errors import RejectedInputError, RejectedParameterError

ENV = rl.EnvConfig()


# environment -----------------------------------------------------------------

def test_reward_branches():
    assert rl.reward(0.5) == 100.0 and rl.reward(0.6) == 100.0
    assert rl.reward(-0.5) == -0.1 and rl.reward(-0.4) == -0.1
    assert rl.reward(0.0) == pytest.approx(0.64, abs=1e-15)


def test_reward_grid_exact():
    for p in np.linspace(-1.2, 0.6, 1000):
        if p >= 0.5:
            want = 100.0
        elif p > -0.4:
            want = 10.0 * (0.4 + p) ** 3
        else:
            want = -0.1
        assert abs(rl.reward(p) - want) <= 1e-12
        assert abs(kern.reward(p) - want) <= 1e-12


def test_reward_jump_at_minus_point_four_is_kept():
    assert rl.reward(-0.4) == -0.1
    assert rl.reward(np.nextafter(-0.4, 1.0)) == pytest.approx(0.0, abs=1e-12)


def test_dynamics_hand_example():
    s, r, done = rl.env_step(rl.CarState(-0.5, 0.0), rl.NO_PUSH, ENV)
    v = -0.0025 * math.cos(-1.5)
    assert s.velocity == pytest.approx(v, abs=1e-18)
    assert s.velocity == pytest.approx(-1.7685e-4, abs=1e-8)
    assert s.position == pytest.approx(-0.5 + v, abs=1e-18)
    assert r == -0.1 and not done


def test_goal_gives_100_and_done():
    s, r, done = rl.env_step(rl.CarState(0.49, 0.03), rl.PUSH_RIGHT, ENV)
    assert s.position >= 0.5 and r == 100.0 and done


def test_left_wall_zeroes_velocity():
    s, _, _ = rl.env_step(rl.CarState(-1.19, -0.05), rl.PUSH_LEFT, ENV)
    assert s.position == -1.2 and s.velocity == 0.0


def test_env_rejects_bad_inputs():
    with pytest.raises(RejectedInputError):
        rl.env_step(rl.CarState(0.7, 0.0), 1, ENV)
    with pytest.raises(RejectedInputError):
        rl.env_step(rl.CarState(0.0, 0.0), 3, ENV)
    with pytest.raises(RejectedParameterError):
        rl.EnvConfig(gravity=0.0)


def test_kernel_step_matches_python_step():
    rng = np.random.default_rng(0)
    for _ in range(500):
        p, v = rng.uniform(-1.2, 0.6), rng.uniform(-0.07, 0.07)
        a = int(rng.integers(0, 3))
        g = rng.uniform(0.0019, 0.0031)
        assert kern.step(p, v, a, g, 0.001) == rl._step(p, v, a, g, 0.001)


def test_state_bounds_over_a_million_random_steps():
    rng = np.random.default_rng(1)
    n = 1_000_000
    actions = rng.integers(0, 3, size=n)
    gravities = rng.choice(rl.PAPER_GRAVITIES, size=n)
    p, v = -0.5, 0.0
    lo_p = hi_p = p
    lo_v = hi_v = v
    for i in range(n):
        p, v = kern.step(p, v, actions[i], gravities[i], 0.001)
        lo_p, hi_p = min(lo_p, p), max(hi_p, p)
        lo_v, hi_v = min(lo_v, v), max(hi_v, v)
        if p >= 0.5:
            p, v = rng.uniform(-0.6, -0.4), 0.0
    assert -1.2 <= lo_p and hi_p <= 0.6
    assert -0.07 <= lo_v and hi_v <= 0.07


# replay buffer ----------------------------------------------------------------

def test_replay_capacity_and_fifo():
    buf = rl.ReplayBuffer(500)
    for i in range(501):
        buf.push((i * 1e-3 - 1.0, 0.0), 1, 0.0, (0.0, 0.0), False)
        assert len(buf) <= 500
    assert len(buf) == 500
    # the first pushed state (-1.0) is gone, the oldest is now the second one
    assert buf.oldest()[0] == pytest.approx(1e-3 - 1.0)
    assert -1.0 not in buf.states[:, 0]


def test_replay_sample_without_replacement():
    buf = rl.ReplayBuffer(20)
    for i in range(15):
        buf.push((float(i), 0.0), i % 3, float(i), (0.0, 0.0), False)
    s, a, r, _, _ = buf.sample(10, np.random.default_rng(0))
    assert len(set(r.tolist())) == 10
    with pytest.raises(RejectedInputError):
        buf.sample(16, np.random.default_rng(0))


# Q-network --------------------------------------------------------------------

def loop_q(q, p, v):
    x = [(p + 0.3) / 0.9, v / 0.07]
    h = [max(0.0, x[0] * q.w1[0, j] + x[1] * q.w1[1, j] + q.b1[j]) for j in range(q.hidden)]
    mean = q.bm[0] + sum(h[j] * q.wm[j, 0] for j in range(q.hidden))
    c = [q.bc[a] + sum(h[j] * q.wc[j, a] for j in range(q.hidden)) for a in range(3)]
    cm = sum(c) / 3
    return [mean + ci - cm for ci in c]


def test_q_forward_matches_loop_oracle_and_kernel():
    q = rl.QNetwork.init(seed=3)
    rng = np.random.default_rng(2)
    h = np.empty(64)
    z = np.empty(64)
    out = np.empty(3)
    for _ in range(20):
        s = rl.CarState(rng.uniform(-1.2, 0.6), rng.uniform(-0.07, 0.07))
        want = loop_q(q, s.position, s.velocity)
        np.testing.assert_allclose(rl.q_forward(q, s), want, rtol=1e-12, atol=1e-13)
        kern.q_values(q.params, 64, s.position, s.velocity, h, z, out)
        np.testing.assert_allclose(out, want, rtol=1e-12, atol=1e-13)


def test_zero_weights_and_centring():
    q = rl.QNetwork(np.zeros(rl.QNetwork.count(2, 64, 3)))
    assert np.array_equal(rl.q_forward(q, rl.CarState(-0.3, 0.01)), np.zeros(3))
    q = rl.QNetwork.init(seed=4)
    x = np.random.default_rng(0).normal(size=(100, 2))
    assert np.abs(q.centred(x).sum(axis=1)).max() <= 1e-10


def test_bellman_target_examples():
    s = rl.CarState(-0.5, 0.0)
    q = rl.QNetwork.init(seed=0)
    done = rl.Transition(s, 1, 100.0, rl.CarState(0.5, 0.01), True)
    assert rl.bellman_target(done, q, 0.9) == 100.0
    tr = rl.Transition(s, 1, 0.64, rl.CarState(0.0, 0.0), False)
    assert rl.bellman_target(tr, q, 0.0) == 0.64
    # r=0.64, gamma=0.9 with a target net whose max Q is exactly 2.0
    flat = np.zeros(rl.QNetwork.count(2, 64, 3))
    const = rl.QNetwork(flat)
    const.bm[0] = 2.0
    assert rl.bellman_target(tr, const, 0.9) == pytest.approx(2.44, abs=1e-15)


def test_qnetwork_checkpoint_round_trip(tmp_path):
    q = rl.QNetwork.init(seed=9)
    rl.save_qnetwork(tmp_path / "q.ckpt", q)
    back = rl.load_qnetwork(tmp_path / "q.ckpt")
    assert np.array_equal(back.params, q.params)


# losses -----------------------------------------------------------------------

def _batch(seed, n=10):
    rng = np.random.default_rng(seed)
    s = np.column_stack([rng.uniform(-1.2, 0.6, n), rng.uniform(-0.07, 0.07, n)])
    s2 = np.column_stack([rng.uniform(-1.2, 0.6, n), rng.uniform(-0.07, 0.07, n)])
    return s, rng.integers(0, 3, n), rng.normal(size=n), s2, rng.random(n) < 0.2


def _fd(fn, params, h=1e-5):
    out = np.zeros_like(params)
    for i in range(params.shape[0]):
        up, dn = params.copy(), params.copy()
        up[i] += h
        dn[i] -= h
        out[i] = (fn(up) - fn(dn)) / (2 * h)
    return out


def test_bellman_gradient_matches_finite_differences():
    from conftest import assert_grad_close
    for k in range(20):
        online = rl.QNetwork.init(seed=[k, 0], hidden=8)
        target = rl.QNetwork.init(seed=[k, 1], hidden=8)
        batch = _batch(k)
        _, _, _, g = rl.dqn_loss(online, target, batch, 0.9)
        num = _fd(lambda p: rl.dqn_loss(rl.QNetwork(p, 2, 8), target, batch, 0.9)[0], online.params)
        assert_grad_close(g, num)


def test_distill_gradient_matches_finite_differences():
    from conftest import assert_grad_close
    for k in range(20):
        online = rl.QNetwork.init(seed=[k, 0], hidden=8)
        target = rl.QNetwork.init(seed=[k, 1], hidden=8)
        teacher = rl.QNetwork.init(seed=[k, 2], hidden=8)
        batch = _batch(k)
        cfg = DistillConfig(2.0, 0.5, 0.5, FilterSpec("smooth", 0.4))
        _, _, _, g = rl.dqn_loss(online, target, batch, 0.9, teacher, cfg)
        xs = np.column_stack([(batch[0][:, 0] + 0.3) / 0.9, batch[0][:, 1] / 0.07])
        from kddg_lab import distill, nn
        w = distill.grad_filter_weight(nn.softmax_temp(online.forward(xs)).max(axis=1), cfg.filter)

        def frozen(p):
            net = rl.QNetwork(p, 2, 8)
            bell = rl.dqn_loss(net, target, batch, 0.9)[1]
            q = net.forward(xs)
            kd = distill.kd_loss_per_sample(teacher.forward(xs), q, 2.0)
            return bell + 0.5 * float((w * kd).mean())

        assert_grad_close(g, _fd(frozen, online.params))


@pytest.mark.parametrize("with_teacher", [False, True])
def test_kernel_loss_matches_numpy_reference(with_teacher):
    for k in range(10):
        online = rl.QNetwork.init(seed=[k, 0], hidden=16)
        target = rl.QNetwork.init(seed=[k, 1], hidden=16)
        teacher = rl.QNetwork.init(seed=[k, 2], hidden=16)
        s, a, r, s2, d = _batch(k)
        cfg = DistillConfig(2.0, 0.5, 0.5, FilterSpec("smooth", 0.45))
        ref = rl.dqn_loss(online, target, (s, a, r, s2, d), 0.9, teacher if with_teacher else None, cfg)
        grad = np.empty_like(online.params)
        loss, bell, kd = kern.loss_grad(online.params, target.params, teacher.params, with_teacher, 16, 0.9,
                                        s[:, 0].copy(), s[:, 1].copy(), a, r, s2[:, 0].copy(), s2[:, 1].copy(), d,
                                        2.0, 0.5 if with_teacher else 0.0, kern.FILTER_SMOOTH, 0.45, grad)
        assert loss == pytest.approx(ref[0], rel=1e-12)
        assert bell == pytest.approx(ref[1], rel=1e-12)
        assert kd == pytest.approx(ref[2], rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(grad, ref[3], rtol=1e-10, atol=1e-14)


def test_distill_golden_single_step():
    # one transition, hidden width 1, hand-set weights
    q = rl.QNetwork(np.zeros(rl.QNetwork.count(2, 1, 3)), 2, 1)
    q.w1[:] = [[1.0], [0.0]]          # h = relu((p + 0.3) / 0.9)
    q.wc[:] = [[0.0, 0.5, 1.5]]       # centred = h * [-2/3, -1/6, 5/6]
    teacher = rl.QNetwork(np.zeros(rl.QNetwork.count(2, 1, 3)), 2, 1)
    teacher.bc[:] = [1.0, 0.0, -1.0]  # constant logits [1, 0, -1]
    target = rl.QNetwork(np.zeros(rl.QNetwork.count(2, 1, 3)), 2, 1)
    target.bm[:] = 2.0                # max Q' = 2
    s = np.array([[0.6, 0.0]])
    batch = (s, np.array([2]), np.array([0.64]), np.array([[0.0, 0.0]]), np.array([False]))
    h = (0.6 + 0.3) / 0.9
    qv = np.array([-2 / 3, -1 / 6, 5 / 6]) * h
    bell = (qv[2] - (0.64 + 0.9 * 2.0)) ** 2
    p1 = np.exp(qv - qv.max()) / np.exp(qv - qv.max()).sum()
    eta = 0.4
    top = p1.max()
    w = 1.0 if top <= eta else (((eta + 1 - 2 * top) / (1 - eta)) ** 2 if top <= (1 + eta) / 2 else 0.0)
    ps = np.exp(qv / 2) / np.exp(qv / 2).sum()
    pt = np.exp(np.array([1.0, 0.0, -1.0]) / 2) / np.exp(np.array([1.0, 0.0, -1.0]) / 2).sum()
    kd = -4 * (pt * np.log(ps)).sum()
    want = bell + 0.5 * w * kd
    cfg = DistillConfig(2.0, 0.5, 0.5, FilterSpec("smooth", eta))
    loss, b, k, _ = rl.dqn_loss(q, target, batch, 0.9, teacher, cfg)
    assert b == pytest.approx(bell, rel=1e-14)
    assert k == pytest.approx(w * kd, rel=1e-14)
    assert loss == pytest.approx(want, rel=1e-14)
    assert 0 < w < 1


def test_matching_teacher_gives_no_kd_gradient():
    online = rl.QNetwork.init(seed=1, hidden=8)
    target = rl.QNetwork.init(seed=2, hidden=8)
    batch = _batch(0)
    cfg = DistillConfig(2.0, 0.5, 0.5, FilterSpec("none"))
    g_plain = rl.dqn_loss(online, target, batch, 0.9)[3]
    g_self = rl.dqn_loss(online, target, batch, 0.9, online.copy(), cfg)[3]
    np.testing.assert_allclose(g_self, g_plain, rtol=1e-12, atol=1e-15)


# training ---------------------------------------------------------------------

SHORT = rl.DQNHyper(episodes=3, train_max_steps=200)


def test_dqn_is_reproducible():
    a, la = rl.dqn_train(ENV, SHORT, seed=4)
    b, lb = rl.dqn_train(ENV, SHORT, seed=4)
    assert np.array_equal(a.params, b.params)
    assert la.episodes == lb.episodes
    c, _ = rl.dqn_train(ENV, SHORT, seed=5)
    assert not np.array_equal(a.params, c.params)


def test_pure_exploration_is_uniform():
    hyper = rl.DQNHyper(episodes=12, epsilon=1.0, train_max_steps=1000)
    _, log = rl.dqn_train(ENV, hyper, seed=0)
    counts = np.array(log.action_counts)
    assert counts.sum() >= 10_000
    assert stats.chisquare(counts).pvalue > 0.01


def test_sync_every_episode_makes_target_equal_online():
    hyper = rl.DQNHyper(episodes=1, sync_every=1, train_max_steps=100)
    online, log = rl.dqn_train(ENV, hyper, seed=0)
    assert np.array_equal(log.target.params, online.params)
    hyper = rl.DQNHyper(episodes=1, sync_every=2, train_max_steps=100)
    online, log = rl.dqn_train(ENV, hyper, seed=0)
    assert not np.array_equal(log.target.params, online.params)


def test_no_updates_before_buffer_holds_a_batch():
    hyper = rl.DQNHyper(episodes=1, train_max_steps=9, batch=10)
    online, log = rl.dqn_train(ENV, hyper, seed=0)
    assert log.iterations == 0
    assert np.array_equal(online.params, rl.QNetwork.init(seed=[0, 1]).params)
    hyper = rl.DQNHyper(episodes=1, train_max_steps=12, batch=10)
    _, log = rl.dqn_train(ENV, hyper, seed=0)
    assert log.iterations == 3


def test_zero_kd_weight_reproduces_dqn():
    teacher, _ = rl.dqn_train(ENV, SHORT, seed=1)
    a, _ = rl.dqn_train(ENV, SHORT, seed=7)
    b, _ = rl.policy_distill_train(teacher, ENV, SHORT, DistillConfig(lambda_kd=0.0, lambda_ce=1.0), seed=7)
    assert np.array_equal(a.params, b.params)
    c, _ = rl.policy_distill_train(teacher, ENV, SHORT, DistillConfig(), seed=7)
    assert not np.array_equal(a.params, c.params)


def test_teacher_width_must_match():
    with pytest.raises(RejectedInputError):
        rl.policy_distill_train(rl.QNetwork.init(seed=0, hidden=8), ENV, SHORT, DistillConfig(), seed=0)


def test_hyper_validation():
    with pytest.raises(RejectedParameterError):
        rl.DQNHyper(batch=600)
    with pytest.raises(RejectedParameterError):
        rl.DQNHyper(epsilon=1.5)


# evaluation -------------------------------------------------------------------

def test_fuel_definition():
    q = rl.QNetwork.init(seed=0)
    idle = rl.run_episode(q, ENV, rl.CarState(-0.5, 0.0), policy=lambda s: rl.NO_PUSH)
    assert idle == (1000, 0, pytest.approx(idle[2]), False)
    steps, fuel, _, reached = rl.run_episode(q, ENV, rl.CarState(-0.5, 0.0), policy=lambda s: rl.PUSH_RIGHT)
    assert fuel == steps
    mean, std = rl.evaluate_fuel(q, ENV, 5, seed=0, policy=lambda s: rl.NO_PUSH)
    assert mean == 0.0 and std == 0.0


def test_greedy_kernel_rollout_matches_python_policy():
    q = rl.QNetwork.init(seed=6)
    start = rl.CarState(-0.45, 0.0)
    fast = rl.run_episode(q, ENV, start)
    slow = rl.run_episode(q, ENV, start, policy=lambda s: int(np.argmax(rl.q_forward(q, s))))
    assert fast[:2] == slow[:2] and fast[3] == slow[3]
    assert fast[2] == pytest.approx(slow[2], rel=1e-12)


def test_episode_log_csv(tmp_path):
    _, log = rl.dqn_train(ENV, SHORT, seed=0)
    rl.write_episode_log(tmp_path / "ep.csv", log.episodes)
    lines = (tmp_path / "ep.csv").read_text().splitlines()
    assert lines[0] == "episode,steps,fuel,return,reached_goal"
    assert len(lines) == 4
