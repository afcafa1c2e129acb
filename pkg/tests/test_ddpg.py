import numpy as np
import pytest

from dynmatch.ddpg import (
    Batch,
    DeepConfig,
    ReplayBuffer,
    SinglePeriodPrior,
    actor_gradient,
    actor_update,
    compute_dk_target,
    critic_update,
    kappa_search,
    make_agent,
    row_fractions,
    select_action,
    soft_update,
    train_agent,
    transform_action,
)
from dynmatch.env import ProblemInstance
from dynmatch.nn import Mlp, finite_difference_grad, forward, init_network, mse_loss_grad, relative_error
from dynmatch.schedules import HUGE_BETA, BetaSchedule, ConstantEpsilon, ExplorationSchedule
from dynmatch.tabular import DivergenceSpec

L2 = DivergenceSpec("l2")


@pytest.fixture(scope="module")
def small():
    return ProblemInstance(
        capacities=[2, 1], demand_pmfs=([0.5, 0.5], [0.3, 0.3, 0.4]), reward=[[4.0, 2.0], [1.0, 3.0]], gamma=0.9
    )


def batch_of(inst, rng, size=5):
    s = rng.integers(0, inst.N_d + 1, size=(size, inst.m))
    a = rng.dirichlet(np.ones(inst.m * inst.n), size=size)
    return Batch(s, a, rng.normal(size=size), rng.integers(0, inst.N_d + 1, size=(size, inst.m)))


def test_transform_examples():
    np.testing.assert_array_equal(transform_action([0.10, 0.30, 0.25, 0.35], [12, 8]), [[3, 9], [3, 5]])
    np.testing.assert_array_equal(transform_action([0.25] * 4, [12, 8]), [[6, 6], [4, 4]])
    np.testing.assert_array_equal(transform_action([0.5, 0.5, 0, 0], [12, 8]), [[6, 6], [0, 0]])
    # three halves round up to 2+2+2 = 6 > 5; the repair trims the first column
    np.testing.assert_array_equal(transform_action([1, 1, 1], [5]), [[1, 2, 2]])
    with pytest.raises(ValueError):
        transform_action([-0.1, 1.1], [1])


def test_transform_row_feasibility():
    rng = np.random.default_rng(0)
    for _ in range(2000):
        m, n = rng.integers(1, 4, size=2)
        p = rng.dirichlet(np.ones(m * n)) * rng.integers(0, 2, size=m * n)
        x = rng.integers(0, 30, size=m)
        Q = transform_action(p, x)
        assert Q.min() >= 0 and np.all(Q.sum(axis=1) <= x)


def test_row_fractions_and_prior(worked):
    np.testing.assert_allclose(row_fractions([0.1, 0.3, 0.25, 0.35], [12, 0]), [0.25, 0.75, 0, 0])
    prior = SinglePeriodPrior(worked)
    np.testing.assert_allclose(prior([8, 7]), [6 / 8, 0, 0, 5 / 7])
    np.testing.assert_array_equal(prior.batch(np.array([[8, 7], [0, 0]])), [prior([8, 7]), np.zeros(4)])


def test_select_action(small):
    rng = np.random.default_rng(1)
    agent = make_agent(small, rng)
    x = np.array([1, 2])
    p, Q = select_action(agent, x, ConstantEpsilon(0.0), 0, rng)
    np.testing.assert_array_equal(p, agent.policy(x))
    np.testing.assert_array_equal(Q, transform_action(p, x))
    p, _ = select_action(agent, x, ConstantEpsilon(1.0, sigma=0.0), 0, rng)
    np.testing.assert_allclose(p, agent.policy(x), atol=1e-15)
    p, Q = select_action(agent, x, ConstantEpsilon(1.0, sigma=0.5), 0, rng)
    assert abs(p.sum() - 1) < 1e-12 and np.all(p >= 0) and np.all(Q.sum(axis=1) <= x)
    assert ExplorationSchedule(0.1, 300)(150) == pytest.approx(0.316, abs=1e-3)


class ConstPrior:
    def __init__(self, mu):
        self.mu = np.asarray(mu, dtype=float)

    def __call__(self, x):
        return self.mu


def test_dk_target_examples(small):
    rng = np.random.default_rng(2)
    agent = make_agent(small, rng)
    b = batch_of(small, rng, 1)
    b.next_states[:] = [1, 1]
    # a+ is the target actor's output; pick a prior whose L2 gap to it is 0.25
    a_plus = forward(agent.target_actor, agent.encode(b.next_states))[0]
    frac = row_fractions(a_plus, [1, 1])
    mu = frac.copy()
    mu[0] += 0.5
    q_next = agent.q_value(b.next_states, a_plus[None, :], target=True)[0]
    # shift the critic head bias so that Q' = 10 exactly
    agent.target_critic.b[-1][0] += 10.0 - q_next
    b.rewards[:] = 2.0
    y = compute_dk_target(b, agent, 0.9, 1.0, ConstPrior(mu), L2)
    assert y[0] == pytest.approx(2 + 0.9 * (-0.25 + 10), abs=1e-9) == pytest.approx(10.775)
    prior = SinglePeriodPrior(small)
    b = batch_of(small, rng, 8)
    y = compute_dk_target(b, agent, 0.9, HUGE_BETA, prior, L2)
    s = agent.encode(b.next_states)
    plain = b.rewards + 0.9 * agent.q_value(b.next_states, forward(agent.target_actor, s), target=True)
    np.testing.assert_allclose(y, plain, atol=1e-6)
    np.testing.assert_array_equal(compute_dk_target(b, agent, 0.0, 1.0, prior, L2), b.rewards)
    with pytest.raises(ValueError):
        compute_dk_target(b, agent, 0.9, 0.0, prior, L2)


def test_critic_update(small):
    rng = np.random.default_rng(3)
    agent = make_agent(small, rng)
    b = batch_of(small, rng, 1)
    q = agent.q_value(b.states, b.actions)
    assert critic_update(agent, b, q + 2.0) == pytest.approx(4.0)
    b = batch_of(small, rng, 6)
    before = agent.critic.params.copy()
    agent.critic_opt.lr = 0.0
    assert critic_update(agent, b, agent.q_value(b.states, b.actions)) == 0.0
    np.testing.assert_array_equal(agent.critic.params, before)
    with pytest.raises(ValueError):
        critic_update(agent, Batch(b.states[:0], b.actions[:0], b.rewards[:0], b.next_states[:0]), [])


def test_critic_loss_gradient_fd(small):
    rng = np.random.default_rng(4)
    for _ in range(3):
        critic = init_network([small.m + 4, 5, 4, 1], ["relu", "relu", "linear"], rng, 0.5)
        x = rng.normal(size=(6, small.m + 4))
        y = rng.normal(size=(6, 1))
        g = mse_loss_grad(critic, x, y)
        theta = critic.params.copy()

        def loss(th):
            critic.params[...] = th
            return float(np.mean((forward(critic, x) - y) ** 2))

        fd = finite_difference_grad(loss, theta.copy())
        critic.params[...] = theta
        assert relative_error(g.params, fd) < 1e-4


def test_actor_gradient_on_linear_critic(small):
    rng = np.random.default_rng(5)
    agent = make_agent(small, rng, actor_hidden=(6, 5, 4))
    agent.actor.params += rng.normal(0, 0.3, size=agent.actor.n_params)
    w = rng.normal(size=4)
    critic = Mlp([small.m + 4, 1], ["linear"])
    critic.W[0][small.m :, 0] = w
    agent.critic = critic
    b = batch_of(small, rng, 1)
    _, grad = actor_gradient(agent, b)
    s = agent.encode(b.states)
    theta = agent.actor.params.copy()

    def obj(th):
        agent.actor.params[...] = th
        return float(forward(agent.actor, s)[0] @ w)

    fd = finite_difference_grad(obj, theta.copy())
    agent.actor.params[...] = theta
    np.testing.assert_allclose(grad, fd, atol=1e-6)

    critic.W[0][small.m :, 0] = 0.0
    _, grad = actor_gradient(agent, b)
    assert not grad.any()


def test_actor_update_ascends():
    inst = ProblemInstance(capacities=[2, 1], demand_pmfs=([0.5, 0.5], [0.5, 0.5]), reward=[[4.0, 2.0], [1.0, 3.0]])
    wins = 0
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        agent = make_agent(inst, rng, actor_lr=1e-4, final_layer_bound=0.5)
        agent.critic = init_network([inst.m + 4, 8, 1], ["relu", "linear"], rng, 1.0)
        b = batch_of(inst, rng, 16)
        before = actor_update(agent, b)
        after, _ = actor_gradient(agent, b)
        wins += after >= before
    assert wins >= 9


def test_soft_update(small):
    rng = np.random.default_rng(6)
    agent = make_agent(small, rng, tau=0.5)
    agent.actor.params[...] = 2.0
    agent.target_actor.params[...] = 0.0
    tc = agent.target_critic.params.copy()
    soft_update(agent, 0.0)
    assert not agent.target_actor.params.any()
    np.testing.assert_array_equal(agent.target_critic.params, tc)
    soft_update(agent)
    assert np.all(agent.target_actor.params == 1.0)
    soft_update(agent, 1.0)
    np.testing.assert_array_equal(agent.target_critic.params, agent.critic.params)
    with pytest.raises(ValueError):
        soft_update(agent, 1.5)


def test_targets_start_equal(small):
    agent = make_agent(small, np.random.default_rng(7))
    assert np.array_equal(agent.actor.params, agent.target_actor.params)
    assert np.array_equal(agent.critic.params, agent.target_critic.params)
    assert agent.actor.sizes == [2, 50, 200, 100, 4] and agent.critic.sizes == [6, 50, 100, 200, 1]


def test_replay_buffer_fifo():
    buf = ReplayBuffer(3, 1, 2)
    for k in range(5):
        buf.add([k], [k, k], float(k), [k + 1])
    assert len(buf) == 3
    np.testing.assert_array_equal(buf.ordered().rewards, [2.0, 3.0, 4.0])
    s = buf.sample(np.random.default_rng(0), 50)
    assert set(s.rewards.tolist()) <= {2.0, 3.0, 4.0}
    with pytest.raises(ValueError):
        ReplayBuffer(0, 1, 1)


def test_frozen_learning_is_bit_identical(small):
    cfg = DeepConfig(episodes=2, steps_per_episode=40, batch_size=8, actor_lr=0.0, critic_lr=0.0, tau=0.0)
    rng = np.random.default_rng(8)
    agent = make_agent(small, rng, 0.0, 0.0, 0.0)
    snap = [n.params.copy() for n in (agent.actor, agent.critic, agent.target_actor, agent.target_critic)]
    train_agent(small, cfg, "DDPG", None, rng=rng, agent=agent)
    after = [n.params for n in (agent.actor, agent.critic, agent.target_actor, agent.target_critic)]
    assert all(np.array_equal(a, b) for a, b in zip(snap, after))


def test_ddpg_equals_huge_beta_dkddpg(small):
    cfg = DeepConfig(episodes=3, steps_per_episode=30, batch_size=8, tau=0.01)
    a1, r1 = train_agent(small, cfg, "DDPG", None, rng=np.random.default_rng(9))
    a2, r2 = train_agent(small, cfg, "DKDDPG", BetaSchedule.fixed(HUGE_BETA), rng=np.random.default_rng(9))
    assert [r[1:] for r in r1.deterministic_rows()] == [r[1:] for r in r2.deterministic_rows()]
    assert np.array_equal(a1.actor.params, a2.actor.params)
    assert np.array_equal(a1.critic.params, a2.critic.params)


def test_train_agent_records(small):
    cfg = DeepConfig(episodes=3, steps_per_episode=20, batch_size=8)
    _, rec = train_agent(small, cfg, "DKDDPG", BetaSchedule.linear(0.1), rng=np.random.default_rng(10))
    assert [r.episode for r in rec.rows] == [1, 2, 3]
    assert rec.rows[-1].beta == pytest.approx(0.1 * 60)
    assert all(r.infeasible_action_count >= 0 for r in rec.rows)
    with pytest.raises(ValueError):
        train_agent(small, cfg, "DKDDPG", None)
    with pytest.raises(ValueError):
        train_agent(small, cfg, "PPO", None)


def test_kappa_search(small):
    cfg = DeepConfig(steps_per_episode=20, batch_size=8)
    assert kappa_search(small, cfg, [0.3], 1, np.random.default_rng(0)) == 0.3
    a = kappa_search(small, cfg, None, 1, np.random.default_rng(11))
    b = kappa_search(small, cfg, None, 1, np.random.default_rng(11))
    assert a == b and 1e-4 <= a <= 10
    with pytest.raises(ValueError):
        kappa_search(small, cfg, [0.1, -1.0], 1, np.random.default_rng(0))


def test_targets_stay_in_learned_envelope(small):
    cfg = DeepConfig(episodes=2, steps_per_episode=40, batch_size=8, tau=0.05)
    rng = np.random.default_rng(12)
    agent = make_agent(small, rng, tau=0.05)
    lo = [agent.actor.params.copy(), agent.critic.params.copy()]
    hi = [p.copy() for p in lo]
    inside = []

    def track(a):
        for k, net in enumerate((a.actor, a.critic)):
            np.minimum(lo[k], net.params, out=lo[k])
            np.maximum(hi[k], net.params, out=hi[k])
        for k, tgt in enumerate((a.target_actor, a.target_critic)):
            inside.append(bool(np.all((tgt.params >= lo[k] - 1e-12) & (tgt.params <= hi[k] + 1e-12))))

    train_agent(small, cfg, "DKDDPG", BetaSchedule.linear(0.1), rng=rng, agent=agent, on_update=track)
    assert inside and all(inside)
