import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from pmpfold.agent import (
    LOG_COLUMNS,
    RAMACHANDRAN_BASINS,
    Agent,
    Batch,
    ReplayBuffer,
    SacConfig,
    Transition,
    TwinCritics,
    critic_loss,
    env_reset,
    env_step,
    episode_seeds,
    evaluate,
    policy_objective,
    polyak_update,
    q_target,
    sample_reset_torsions,
    train,
    update_alpha,
    update_critics,
    update_policy,
)
from pmpfold.dynamics import running_reward
from pmpfold.energy import total_energy
from pmpfold.errors import PmpFoldError
from pmpfold.kinematics import Conformation
from pmpfold.learn import AdamState, GaussianPolicy, MlpParams, deterministic_action, torsion_features

HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


class BanditCritics:
    """Stand-in critics with the closed form Q(a) = -(a - 0.5)^2."""

    def q_values(self, feats, actions, graph, which=("q1", "q2"), register=False):
        if not hasattr(actions, "graph"):
            actions = graph.constant(actions)
        q = graph.sum(graph.neg(graph.square(graph.add(actions, graph.constant(-0.5)))), axis=1)
        return [q for _ in which]


def batch_of(s, a, r, s_next, terminal):
    s, a, s_next = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (s, a, s_next))
    return Batch(s, a, np.asarray(r, dtype=float), s_next, np.asarray(terminal, dtype=bool),
                 np.zeros(len(s), dtype=np.int64))


def linear_critic(state_dim, w_action, bias, w_state=None):
    w = np.zeros((state_dim + len(w_action), 1))
    if w_state is not None:
        w[:state_dim, 0] = w_state
    w[state_dim:, 0] = w_action
    return MlpParams([w], [np.array([bias], dtype=float)])


def fixed_policy(mu, log_std, state_dim=2):
    m = len(mu)
    return GaussianPolicy(MlpParams([np.zeros((state_dim, 2 * m))], [np.concatenate([mu, log_std])]), m)


def random_batch(rng, n=16, m=2):
    return batch_of(rng.uniform(-3, 3, (n, m)), rng.uniform(-1, 1, (n, m)), rng.normal(size=n),
                    rng.uniform(-3, 3, (n, m)), rng.random(n) < 0.2)


# -- config ---------------------------------------------------------------------


def test_defaults_follow_the_reference_table():
    c = SacConfig()
    assert (c.alpha, c.step_size, c.lr, c.max_episode_steps, c.max_total_steps) == (0.2, 0.5, 3e-4, 300, 100_000)
    assert (c.discount, c.discount_threshold) == (1.0, 100.0)
    assert c.horizon == 300.0
    assert c.t_cap is None
    assert SacConfig(use_discount_threshold=True).t_cap == 100.0


def test_config_validation_and_round_trip():
    for bad in ({"tau": 0.0}, {"tau": 1.5}, {"alpha": -0.1}, {"lr": 0.0}, {"reward_mode": "linear"},
                {"discount": 1.1}, {"batch_size": 0}):
        with pytest.raises(ValueError):
            SacConfig(**bad)
    c = SacConfig(hidden=(8, 4), reward_mode="cubic", auto_alpha=True)
    assert SacConfig.from_dict(c.to_dict()) == c
    with pytest.raises(ValueError):
        SacConfig.from_dict({"nonsense": 1})


# -- replay ---------------------------------------------------------------------


def test_replay_ring_and_sampling(rng):
    buf = ReplayBuffer(4, 1)
    with pytest.raises(ValueError):
        buf.sample(2, rng)
    for k in range(3):
        buf.add(Transition([k], [0.1 * k], float(k), [k + 1], False, k))
    b = buf.sample(50, rng)
    assert len(b) == 50
    assert set(b.r.tolist()) <= {0.0, 1.0, 2.0}
    for k in range(3, 7):
        buf.add(Transition([k], [0.0], float(k), [k + 1], k == 6, k))
    assert len(buf) == 4
    assert sorted(t.r for t in buf.transitions()) == [3.0, 4.0, 5.0, 6.0]
    with pytest.raises(ValueError):
        buf.add(Transition([0, 0], [0], 0.0, [0], False, 0))


# -- targets and critic updates -------------------------------------------------


def test_terminal_target_is_reward(rng):
    agent = Agent.init(2, SacConfig(hidden=(8,)), rng)
    batch = random_batch(rng)
    batch.terminal[:] = True
    assert np.array_equal(q_target(batch, agent.critics, agent.policy, SacConfig(), rng), batch.r)


def test_target_without_entropy_uses_target_critic(rng):
    agent = Agent.init(2, SacConfig(hidden=(8,)), rng)
    critics = agent.critics
    critics.q2_target = critics.q1_target.copy()
    batch = random_batch(rng)
    batch.terminal[:] = False
    noise = rng.normal(size=(len(batch), 2))
    cfg = SacConfig(alpha=0.0, discount=0.9)
    y = q_target(batch, critics, agent.policy, cfg, noise=noise)
    from pmpfold.learn import Graph, policy_sample

    g = Graph()
    a_next, _ = policy_sample(agent.policy, torsion_features(batch.s_next), noise, g)
    q = critics.q_values(torsion_features(batch.s_next), a_next.value, g, which=("q1_target",))[0]
    assert_allclose(y, batch.r + 0.9 * q.value, rtol=1e-12)


def test_target_hand_computation():
    mu, log_std, eps = 0.3, -0.2, 0.7
    policy = fixed_policy(np.array([mu]), np.array([log_std]))
    c1 = linear_critic(2, [2.0], 0.5)
    c2 = linear_critic(2, [-1.0], 0.25)
    critics = TwinCritics(c1.copy(), c2.copy(), c1, c2)
    batch = batch_of([[0.4]], [[0.0]], [1.5], [[-0.8]], [False])
    cfg = SacConfig(alpha=0.2, discount=0.9)
    y = q_target(batch, critics, policy, cfg, noise=np.array([[eps]]))

    u = mu + math.exp(log_std) * eps
    a = math.tanh(u)
    logp = -0.5 * eps**2 - log_std - HALF_LOG_2PI - math.log(1 - a * a)
    soft_v = min(2.0 * a + 0.5, -a + 0.25) - 0.2 * logp
    assert y[0] == pytest.approx(1.5 + 0.9 * soft_v, rel=1e-12)


def test_critics_at_target_do_not_move(rng):
    critic = linear_critic(4, [0.0, 0.0], 0.7)
    critics = TwinCritics(critic.copy(), critic.copy(), critic.copy(), critic.copy())
    batch = random_batch(rng)
    before = [w.copy() for w in critics.q1.weights + critics.q1.biases]
    loss = update_critics(batch, critics, np.full(len(batch), 0.7), AdamState())
    assert loss == 0.0
    for a, b in zip(before, critics.q1.weights + critics.q1.biases):
        assert np.array_equal(a, b)


def test_critic_loss_descends_on_fixed_batch(rng):
    agent = Agent.init(2, SacConfig(hidden=(32, 32)), rng)
    batch = random_batch(rng, n=32)
    y = rng.normal(size=32)
    opt = AdamState()
    losses = [update_critics(batch, agent.critics, y, opt, lr=3e-4) for _ in range(100)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_critic_gradient_matches_finite_differences(rng):
    critics = TwinCritics(linear_critic(2, [0.4], -0.1), linear_critic(2, [1.0], 0.3),
                          linear_critic(2, [0.0], 0.0), linear_critic(2, [0.0], 0.0))
    batch = batch_of(rng.uniform(-3, 3, (5, 1)), rng.uniform(-1, 1, (5, 1)), np.zeros(5),
                     np.zeros((5, 1)), np.zeros(5))
    y = rng.normal(size=5)
    g, loss = critic_loss(batch, critics, y)
    grads = g.backward(loss)
    h = 1e-5
    for name, net in (("q1", critics.q1), ("q2", critics.q2)):
        b = net.biases[0]
        b[0] += h
        up = float(critic_loss(batch, critics, y)[1].value)
        b[0] -= 2 * h
        down = float(critic_loss(batch, critics, y)[1].value)
        b[0] += h
        assert grads[f"{name}/b0"][0] == pytest.approx((up - down) / (2 * h), rel=1e-6)


def test_identical_critics_stay_identical(rng):
    net = MlpParams.init([6, 16, 1], rng)
    critics = TwinCritics(net.copy(), net.copy(), net.copy(), net.copy())
    opt = AdamState()
    for _ in range(20):
        update_critics(random_batch(rng), critics, rng.normal(size=16), opt)
    for a, b in zip(critics.q1.weights, critics.q2.weights):
        assert np.array_equal(a, b)


# -- policy updates -------------------------------------------------------------


def test_policy_gradient_vanishes_for_flat_q(rng):
    policy = GaussianPolicy.init(4, 2, (8,), rng)
    flat = linear_critic(4, [0.0, 0.0], 1.0, w_state=rng.normal(size=4))
    critics = TwinCritics(flat, flat.copy(), flat.copy(), flat.copy())
    before = [w.copy() for w in policy.trunk.weights]
    update_policy(random_batch(rng), critics, policy, SacConfig(alpha=0.0), AdamState(), rng)
    for a, b in zip(before, policy.trunk.weights):
        assert np.array_equal(a, b)


def test_policy_objective_hand_computation():
    mu, log_std, eps, alpha = -0.4, 0.1, -1.3, 0.2
    policy = fixed_policy(np.array([mu]), np.array([log_std]))
    critics = TwinCritics(linear_critic(2, [1.5], 0.2), linear_critic(2, [0.5], 0.1), None, None)
    batch = batch_of([[0.9]], [[0.0]], [0.0], [[0.0]], [False])
    _, loss, _ = policy_objective(batch, critics, policy, alpha, np.array([[eps]]))
    a = math.tanh(mu + math.exp(log_std) * eps)
    logp = -0.5 * eps**2 - log_std - HALF_LOG_2PI - math.log(1 - a * a)
    assert float(loss.value) == pytest.approx(alpha * logp - min(1.5 * a + 0.2, 0.5 * a + 0.1), rel=1e-12)


def test_bandit_policy_mean_converges():
    rng = np.random.default_rng(0)
    policy = GaussianPolicy.init(2, 1, (32, 32), rng)
    batch = batch_of(np.zeros((64, 1)), np.zeros((64, 1)), np.zeros(64), np.zeros((64, 1)), np.zeros(64))
    opt = AdamState()
    cfg = SacConfig(alpha=0.0)
    for _ in range(10_000):
        update_policy(batch, BanditCritics(), policy, cfg, opt, rng)
    assert abs(deterministic_action(policy, np.zeros(2))[0, 0] - 0.5) < 0.05


def test_update_alpha_direction(rng):
    agent = Agent.init(1, SacConfig(hidden=(4,)), rng)
    start = agent.alpha
    # log-probs well above -target_entropy: entropy too low, so alpha must grow
    for _ in range(10):
        update_alpha(agent, np.full(8, 3.0), target_entropy=-1.0, lr=1e-2)
    assert agent.alpha > start


# -- polyak ---------------------------------------------------------------------


def test_polyak_examples():
    online = MlpParams([np.ones((1, 1))], [np.ones(1)])
    for tau, expected in ((1.0, 1.0), (0.0, 0.0), (0.005, 0.005)):
        target = MlpParams([np.zeros((1, 1))], [np.zeros(1)])
        polyak_update(online, target, tau)
        assert target.weights[0][0, 0] == pytest.approx(expected, abs=1e-15)
    with pytest.raises(ValueError):
        polyak_update(online, MlpParams([np.zeros((1, 2))], [np.zeros(2)]), 0.5)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_polyak_contracts_towards_frozen_online(seed, tau):
    rng = np.random.default_rng(seed)
    online = MlpParams.init([3, 4, 1], rng)
    target = MlpParams.init([3, 4, 1], rng)

    def gap():
        return math.sqrt(sum(np.sum((a - b) ** 2) for a, b in
                             zip(online.weights + online.biases, target.weights + target.biases)))

    prev = gap()
    for _ in range(5):
        polyak_update(online, target, tau)
        assert gap() <= prev + 1e-12
        prev = gap()


# -- environment ----------------------------------------------------------------


def test_zero_action_reward_is_negative_energy(butane):
    conf = Conformation.build(butane, [math.pi])
    res = env_step(butane, conf, np.zeros(1), SacConfig(), t=0)
    assert res.reward == pytest.approx(-total_energy(butane, conf).total, rel=1e-12)
    assert not res.terminal


def test_episode_length_terminal(butane):
    conf = Conformation.build(butane)
    assert env_step(butane, conf, [0.0], SacConfig(), t=299).terminal
    assert not env_step(butane, conf, [0.0], SacConfig(), t=298).terminal


def test_step_size_scales_action(dialanine):
    conf = Conformation.build(dialanine, np.array([0.1, -0.2, 0.3, -0.4]))
    res = env_step(dialanine, conf, np.full(4, 0.1), SacConfig(), t=0)
    assert_allclose(res.conf.torsions - conf.torsions, 0.05, atol=1e-12)


def test_reset_without_torsions_is_seed_conformation(minimal):
    conf = env_reset(minimal, 3)
    assert np.array_equal(conf.coords, Conformation.build(minimal).coords)


def test_reset_is_seeded(sidechains):
    a, b = env_reset(sidechains, 11), env_reset(sidechains, 11)
    assert np.array_equal(a.torsions, b.torsions)
    assert not np.array_equal(a.torsions, env_reset(sidechains, 12).torsions)


def local_modes(samples_deg, lo=-180, hi=180, width=5, smooth=5):
    counts, edges = np.histogram(samples_deg, bins=np.arange(lo, hi + width, width))
    kernel = np.ones(smooth) / smooth
    sm = np.convolve(np.concatenate([counts[-smooth:], counts, counts[:smooth]]), kernel, "same")[smooth:-smooth]
    centres = 0.5 * (edges[:-1] + edges[1:])
    peaks = [k for k in range(len(sm)) if sm[k] >= sm[k - 1] and sm[k] >= sm[(k + 1) % len(sm)]]
    peaks.sort(key=lambda k: -sm[k])
    return [centres[k] for k in peaks]


def test_backbone_phi_histogram_has_two_modes(dialanine):
    rng = np.random.default_rng(2024)
    phi = np.degrees([sample_reset_torsions(dialanine, rng)[0] for _ in range(10_000)])
    modes = sorted(local_modes(phi)[:2])
    expected = sorted(c[0] for c in RAMACHANDRAN_BASINS)
    assert abs(modes[0] - expected[0]) <= 10
    assert abs(modes[1] - expected[1]) <= 10


def test_rotamer_samples_cluster_on_staggered_positions(sidechains):
    rng = np.random.default_rng(5)
    j = sidechains.torsion_kinds.index("rotamer")
    d = np.degrees([sample_reset_torsions(sidechains, rng)[j] for _ in range(3000)])
    nearest = np.min(np.abs((d[:, None] - np.array([-60, 60, 180]) + 180) % 360 - 180), axis=1)
    assert np.mean(nearest < 30) > 0.97


# -- training and evaluation ----------------------------------------------------


def test_train_with_zero_steps(butane):
    res = train(butane, SacConfig(max_total_steps=0, hidden=(8,)), seed=0)
    assert res.log == []
    assert set(res.checkpoints) >= {"policy/W0", "q1/W0", "q2_target/b1", "log_alpha"}


def test_train_needs_movable_torsions(minimal):
    with pytest.raises(PmpFoldError, match="no movable torsions"):
        train(minimal, SacConfig(max_total_steps=10), seed=0)


SMALL = SacConfig(max_total_steps=400, warmup_steps=100, batch_size=32, max_episode_steps=50, hidden=(16, 16))


def test_train_is_deterministic(butane):
    a = train(butane, SMALL, seed=7)
    b = train(butane, SMALL, seed=7)
    assert a.log == b.log
    assert len(a.log) == 8
    assert list(a.log[0]) == list(LOG_COLUMNS)
    for k, v in a.checkpoints.items():
        assert np.array_equal(v, b.checkpoints[k])


def test_replay_rewards_recomputable(sidechains):
    res = train(sidechains.freeze_kinds({"backbone_dihedral"}), SMALL, seed=3)
    top = sidechains.freeze_kinds({"backbone_dihedral"})
    for tr in list(res.buffer.transitions())[:60]:
        u = total_energy(top, Conformation.build(top, tr.s_next)).total
        expected = running_reward(u, tr.a * SMALL.max_velocity, tr.t, SMALL.horizon, SMALL.gamma_reward,
                                  SMALL.reward_mode)
        assert tr.r == pytest.approx(expected, rel=1e-10, abs=1e-10)


def test_zero_policy_does_not_move(dialanine):
    agent = Agent.init(4, SacConfig(hidden=(8,)), np.random.default_rng(0))
    for w in agent.policy.trunk.weights + agent.policy.trunk.biases:
        w[...] = 0.0
    episodes = evaluate(dialanine, agent, 3, seed=1, config=SacConfig(max_episode_steps=20))
    assert [e.delta_E for e in episodes] == [0.0, 0.0, 0.0]
    assert all(e.steps == 20 for e in episodes)
    assert evaluate(dialanine, agent, 0) == []


def test_eval_initial_energies_match_resets(dialanine):
    agent = Agent.init(4, SacConfig(hidden=(8,)), np.random.default_rng(0))
    episodes = evaluate(dialanine, agent.checkpoint(), 5, seed=9, config=SacConfig(max_episode_steps=2))
    seeds = episode_seeds(9, 5)
    assert [e.seed for e in episodes] == seeds
    for e, s in zip(episodes, seeds):
        assert e.E_initial == total_energy(dialanine, env_reset(dialanine, s)).total


def test_checkpoint_restores_agent(rng):
    agent = Agent.init(3, SacConfig(hidden=(8, 8)), rng)
    back = Agent.from_checkpoint(agent.checkpoint())
    feats = torsion_features(rng.uniform(-3, 3, 3))
    assert np.array_equal(deterministic_action(agent.policy, feats), deterministic_action(back.policy, feats))
    assert back.log_alpha == agent.log_alpha
