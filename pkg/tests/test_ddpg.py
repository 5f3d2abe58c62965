"""DDPG agent pieces: replay buffer, OU noise, action selection, TD targets, toy-MDP convergence."""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from safecharge import nn_core
from safecharge.ddpg import AgentConfig, Batch, DDPGAgent, OUNoise, ReplayBuffer, Transition, noise_scale, select_action

SMALL = dict(actor_hidden=(32, 32), critic_hidden=(32, 32))


def transition(i: float, done: bool = False) -> Transition:
    s = np.full(3, i)
    return Transition(s, -float(i) % 4.2, -0.1, s + 1, done, False)


def critic_q(agent: DDPGAgent, states: np.ndarray, actions_a: np.ndarray) -> np.ndarray:
    u = actions_a[:, None] / agent.config.max_current_a
    return nn_core.predict(agent.critic, np.hstack([states, u]))[:, 0]


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


def test_defaults_match_table():
    cfg = AgentConfig()
    assert (cfg.gamma, cfg.buffer_capacity, cfg.minibatch) == (0.99, 100_000, 64)
    assert (cfg.actor_lr, cfg.critic_lr, cfg.safety_lr, cfg.tau) == (1e-4, 1e-3, 1e-3, 1e-3)
    assert cfg.actor_hidden == cfg.critic_hidden == (400, 300)


def test_config_roundtrip_and_validation():
    cfg = AgentConfig(**SMALL, warmup=10)
    assert AgentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        AgentConfig.from_dict({"learning_rate": 1.0})
    with pytest.raises(ValueError):
        AgentConfig(tau=0.0)
    with pytest.raises(ValueError):
        AgentConfig(minibatch=10, buffer_capacity=5)


# ---------------------------------------------------------------------------
# Replay buffer
# ---------------------------------------------------------------------------


def test_buffer_ring_overwrites_oldest():
    buf = ReplayBuffer(3, np.random.default_rng(0))
    for i in range(5):
        buf.add(transition(i))
    assert len(buf) == 3
    assert sorted(buf.states[:, 0]) == [2.0, 3.0, 4.0]


def test_buffer_sample_rejects_oversized_batch():
    buf = ReplayBuffer(10, np.random.default_rng(0))
    buf.add(transition(0))
    with pytest.raises(ValueError):
        buf.sample(2)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 50), st.integers(0, 2**32 - 1))
def test_buffer_sample_without_replacement(n, seed):
    buf = ReplayBuffer(64, np.random.default_rng(seed))
    for i in range(n):
        buf.add(transition(i))
    k = max(1, n // 2)
    batch = buf.sample(k)
    assert len(set(batch.states[:, 0])) == k


def test_buffer_sampling_is_uniform():
    # Each of 20 slots should be drawn about 5 * 20000 / 20 = 5000 times.
    buf = ReplayBuffer(20, np.random.default_rng(1))
    for i in range(20):
        buf.add(transition(i))
    counts = np.zeros(20)
    for _ in range(20000):
        np.add.at(counts, buf.sample_indices(5), 1)
    expected = 5 * 20000 / 20
    chi2 = float(np.sum((counts - expected) ** 2 / expected))
    # 99.9th percentile of chi-square with 19 dof is about 43.8.
    assert chi2 < 43.8


# ---------------------------------------------------------------------------
# Noise and action selection
# ---------------------------------------------------------------------------


def test_ou_recurrence():
    rng = np.random.default_rng(0)
    noise = OUNoise(0.15, 0.2, 0.0, np.random.default_rng(0))
    x = 0.0
    for _ in range(10):
        x = x + 0.15 * (0.0 - x) + 0.2 * rng.standard_normal()
        assert noise.sample() == pytest.approx(x, rel=1e-15)
    noise.reset()
    assert noise.x == 0.0


def test_zero_sigma_gives_deterministic_action():
    agent = DDPGAgent(AgentConfig(**SMALL, ou_sigma=0.0), np.random.default_rng(0))
    s = np.array([0.4, 0.6, 0.2])
    assert agent.act(s, explore=True) == agent.act(s, explore=False)


def test_actor_overshoot_is_clamped():
    # Identity-output actor whose raw output maps to -5 A.
    actor = nn_core.MlpParams((3, 1), np.array([0.0, 0.0, 0.0, -5.0 / 4.2]))
    assert select_action(actor, np.zeros(3), None, False, 4.2) == -4.2
    actor.flat[-1] = 0.5
    assert select_action(actor, np.zeros(3), None, False, 4.2) == 0.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=3, max_size=3), st.integers(0, 1000))
def test_actions_always_in_box(state, seed):
    agent = DDPGAgent(AgentConfig(**SMALL, ou_sigma=3.0), np.random.default_rng(seed))
    a = agent.act(np.array(state), explore=True)
    assert -4.2 <= a <= 0.0


def test_action_sequences_reproducible():
    def run() -> list[float]:
        agent = DDPGAgent(AgentConfig(**SMALL), np.random.default_rng(5))
        s = np.array([0.3, 0.5, 0.1])
        return [agent.act(s, explore=True) for _ in range(20)]

    assert run() == run()


def test_noise_schedule():
    cfg = AgentConfig()
    assert noise_scale(cfg, 0, 300) == 1.0
    assert noise_scale(cfg, 150, 300) == pytest.approx(0.1)
    assert noise_scale(cfg, 299, 300) == pytest.approx(0.1)
    assert noise_scale(AgentConfig(noise_decay=False), 299, 300) == 1.0


# ---------------------------------------------------------------------------
# Updates
# ---------------------------------------------------------------------------


def _batch(agent: DDPGAgent, n: int, done: bool, seed: int = 0) -> Batch:
    rng = np.random.default_rng(seed)
    s = rng.uniform(0, 1, (n, 3))
    a = rng.uniform(-4.2, 0, n)
    return Batch(s, a, critic_q(agent, s, a), rng.uniform(0, 1, (n, 3)), np.full(n, done), np.zeros(n, bool))


def test_exact_critic_with_zero_gamma_has_zero_loss():
    agent = DDPGAgent(AgentConfig(**SMALL, gamma=0.0), np.random.default_rng(0))
    loss, _ = agent.update(_batch(agent, 16, done=False))
    assert loss == 0.0


def test_terminal_transitions_do_not_bootstrap():
    agent = DDPGAgent(AgentConfig(**SMALL, gamma=0.99), np.random.default_rng(0))
    # Rewards equal current Q, so any bootstrap term would show up as loss.
    loss, _ = agent.update(_batch(agent, 16, done=True))
    assert loss == 0.0
    agent2 = DDPGAgent(AgentConfig(**SMALL, gamma=0.99), np.random.default_rng(0))
    loss2, _ = agent2.update(_batch(agent2, 16, done=False))
    assert loss2 > 0.0


def test_update_moves_targets_by_tau():
    agent = DDPGAgent(AgentConfig(**SMALL, tau=0.01), np.random.default_rng(0))
    before = agent.critic_target.flat.copy()
    agent.update(_batch(agent, 16, done=False))
    expected = 0.99 * before + 0.01 * agent.critic.flat
    np.testing.assert_allclose(agent.critic_target.flat, expected, rtol=1e-12, atol=1e-15)


def test_non_finite_batch_is_skipped():
    agent = DDPGAgent(AgentConfig(**SMALL), np.random.default_rng(0))
    batch = _batch(agent, 8, done=False)
    batch.rewards[0] = np.nan
    before = agent.actor.flat.copy()
    loss, obj = agent.update(batch)
    assert np.isnan(loss) and np.isnan(obj)
    assert agent.skipped_updates == 1
    np.testing.assert_array_equal(agent.actor.flat, before)


def test_toy_mdp_greedy_action_matches_dynamic_programming():
    """One state that loops onto itself; two actions, 0 A and -4.2 A, with fixed rewards.

    Value iteration gives Q*(a) = r(a) + gamma * max_b Q*(b); the greedy
    action is the one with the larger reward. The critic is trained on both
    actions and must rank them the same way, and the actor must move to it.
    """
    gamma = 0.9
    rewards = {0.0: -1.0, -4.2: -0.2}
    q = {a: 0.0 for a in rewards}
    for _ in range(500):
        v = max(q.values())
        q = {a: r + gamma * v for a, r in rewards.items()}
    best = max(q, key=q.get)

    cfg = AgentConfig(**SMALL, gamma=gamma, tau=0.01, actor_lr=1e-3, critic_lr=1e-3)
    agent = DDPGAgent(cfg, np.random.default_rng(0))
    s = np.array([0.5, 0.7, 0.3])
    actions = np.array(list(rewards))
    r = np.array([rewards[a] for a in actions])
    n = 32
    S = np.tile(s, (n, 1))
    A = np.repeat(actions, n // 2)
    R = np.repeat(r, n // 2)
    for _ in range(2000):
        agent.update(Batch(S, A, R, S, np.zeros(n, bool), np.zeros(n, bool)))
    q_hat = critic_q(agent, np.tile(s, (2, 1)), actions)
    assert actions[int(np.argmax(q_hat))] == best
    assert abs(agent.act(s, explore=False) - best) < abs(agent.act(s, explore=False) - [a for a in actions if a != best][0])
