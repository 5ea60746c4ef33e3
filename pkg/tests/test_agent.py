import numpy as np
import pytest
from scipy import special

from app.logic.agent import DdpgAgent, Mlp, ReplayBuffer
from app.logic.checkpoint import CheckpointError, save_checkpoint
from app.models.configs import AgentConfig
from app.models.search import Transition


def small_config(**overrides) -> AgentConfig:
    values = dict(hidden=32, batch_size=16, buffer_capacity=500, policy_lr=1e-2, value_lr=1e-2, noise_sigma=0.3)
    values.update(overrides)
    return AgentConfig(**values)


def transition(reward: float, state: np.ndarray | None = None, action: float = 0.5) -> Transition:
    state = np.zeros(11, np.float32) if state is None else state
    return Transition(state=state, action=action, reward=reward, next_state=state, terminal=True)


def run_target_bandit(target: float, seed: int, episodes: int = 300) -> DdpgAgent:
    """Single-step episodes under the default agent config, rewarding 1 − |a − target|."""
    config = AgentConfig()
    agent = DdpgAgent(config, np.random.default_rng(seed))
    state = np.full(11, 0.5, np.float32)
    for _ in range(episodes):
        action = agent.act(state)
        agent.remember(transition(1.0 - abs(action - target), state, action))
        agent.update(config.batch_size, gamma=config.gamma, tau=config.tau)
        agent.decay_noise()
    return agent


def run_bandit(seed: int, episodes: int = 300) -> DdpgAgent:
    """Single-step episodes where smaller sparsity earns more."""
    agent = DdpgAgent(small_config(noise_decay=1.0), np.random.default_rng(seed))
    state = np.full(11, 0.5, np.float32)
    for _ in range(episodes):
        action = agent.act(state)
        agent.remember(transition(-10.0 * action, state, action))
        agent.update(16, gamma=1.0, tau=0.05)
    return agent


class TestActing:
    def test_same_seed_same_actions(self):
        state = np.linspace(0, 1, 11)
        a = DdpgAgent(small_config(), np.random.default_rng(5))
        b = DdpgAgent(small_config(), np.random.default_rng(5))
        assert [a.act(state) for _ in range(10)] == [b.act(state) for _ in range(10)]

    def test_actions_stay_in_unit_interval(self):
        agent = DdpgAgent(small_config(noise_sigma=2.0), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        actions = np.array([agent.act(rng.uniform(size=11)) for _ in range(2000)])
        assert actions.min() >= 0.0 and actions.max() <= 1.0

    def test_fresh_policy_starts_near_half(self):
        agent = DdpgAgent(AgentConfig(), np.random.default_rng(0))
        assert abs(agent.act(np.zeros(11), noise_sigma=0.0) - 0.5) < 0.01

    def test_noiseless_action_is_sigmoid_of_logit(self):
        actor = Mlp([11, 8, 1], np.random.default_rng(0), squash=True)
        raw = Mlp([11, 8, 1], np.random.default_rng(0))
        x = np.random.default_rng(1).uniform(size=(4, 11))
        np.testing.assert_allclose(actor.forward(x)[0], special.expit(raw.forward(x)[0]), rtol=1e-6)


class TestReplay:
    def test_oldest_transitions_are_evicted(self):
        buffer = ReplayBuffer(3, np.random.default_rng(0))
        for r in range(5):
            buffer.push(transition(float(r)))
        assert len(buffer) == 3
        assert [t.reward for t in buffer.transitions] == [2.0, 3.0, 4.0]

    def test_sampling_without_replacement(self):
        buffer = ReplayBuffer(10, np.random.default_rng(0))
        for r in range(10):
            buffer.push(transition(float(r)))
        rewards = [t.reward for t in buffer.sample(10)]
        assert sorted(rewards) == [float(r) for r in range(10)]

    def test_update_waits_for_enough_transitions(self):
        agent = DdpgAgent(small_config(), np.random.default_rng(0))
        for _ in range(15):
            agent.remember(transition(1.0))
        assert agent.update(16, gamma=1.0, tau=0.01) is None
        agent.remember(transition(1.0))
        assert agent.update(16, gamma=1.0, tau=0.01) is not None


class TestTargets:
    def test_full_soft_update_copies(self):
        target = Mlp([3, 4, 1], np.random.default_rng(0))
        source = Mlp([3, 4, 1], np.random.default_rng(1))
        target.soft_update(source, 1.0)
        for w_t, w_s in zip(target.weights, source.weights):
            np.testing.assert_array_equal(w_t, w_s)

    def test_zero_soft_update_keeps_target(self):
        target = Mlp([3, 4, 1], np.random.default_rng(0))
        before = [w.copy() for w in target.weights]
        target.soft_update(Mlp([3, 4, 1], np.random.default_rng(1)), 0.0)
        for w_t, w_b in zip(target.weights, before):
            np.testing.assert_array_equal(w_t, w_b)

    def test_noise_decay(self):
        agent = DdpgAgent(AgentConfig(noise_sigma=0.5, noise_decay=0.99), np.random.default_rng(0))
        for _ in range(100):
            agent.decay_noise()
        assert agent.sigma == pytest.approx(0.183, abs=1e-3)

    def test_baseline_starts_at_first_reward(self):
        agent = DdpgAgent(AgentConfig(baseline_decay=0.9), np.random.default_rng(0))
        assert agent.update_baseline(2.0) == 2.0
        assert agent.update_baseline(0.0) == pytest.approx(1.8)


class TestLearning:
    def test_policy_moves_toward_higher_reward(self):
        state = np.full(11, 0.5, np.float32)
        before = DdpgAgent(small_config(), np.random.default_rng(3)).act(state, noise_sigma=0.0)
        after = run_bandit(3).act(state, noise_sigma=0.0)
        assert after < before

    def test_default_config_settles_on_centred_target(self):
        agent = run_target_bandit(0.5, seed=0)
        assert abs(agent.act(np.full(11, 0.5), noise_sigma=0.0) - 0.5) < 0.05

    @pytest.mark.parametrize("target", [0.2, 0.8])
    def test_default_config_moves_toward_off_centre_target(self, target):
        state = np.full(11, 0.5, np.float32)
        before = DdpgAgent(AgentConfig(), np.random.default_rng(1)).act(state, noise_sigma=0.0)
        after = run_target_bandit(target, seed=1).act(state, noise_sigma=0.0)
        assert abs(after - target) < abs(before - target) - 0.02

    def test_adam_step_size_is_independent_of_gradient_scale(self):
        small = Mlp([3, 4, 1], np.random.default_rng(0))
        large = Mlp([3, 4, 1], np.random.default_rng(0))
        grads = [{"weight": np.ones_like(w), "bias": np.ones_like(b)} for w, b in zip(small.weights, small.biases)]
        before = small.weights[0].copy()
        small.adam_step(grads, 1e-3)
        large.adam_step([{k: 1e4 * g for k, g in grad.items()} for grad in grads], 1e-3)
        np.testing.assert_allclose(before - small.weights[0], 1e-3, rtol=1e-3)
        np.testing.assert_allclose(small.weights[0], large.weights[0], rtol=1e-6)

    def test_training_is_reproducible(self):
        a, b = run_bandit(9, episodes=60), run_bandit(9, episodes=60)
        for w_a, w_b in zip(a.actor.weights + a.critic.weights, b.actor.weights + b.critic.weights):
            np.testing.assert_array_equal(w_a, w_b)


class TestPersistence:
    def test_save_and_load(self, tmp_path):
        agent = run_bandit(4, episodes=40)
        agent.update_baseline(0.3)
        agent.save(tmp_path / "agent.ckpt")
        loaded = DdpgAgent.load(tmp_path / "agent.ckpt", np.random.default_rng(0))
        state = np.linspace(0, 1, 11)
        assert loaded.act(state, noise_sigma=0.0) == agent.act(state, noise_sigma=0.0)
        assert loaded.sigma == agent.sigma
        assert loaded.baseline == agent.baseline
        assert loaded.config == agent.config

    def test_graph_checkpoint_is_not_an_agent(self, tmp_path, graph):
        save_checkpoint(graph, tmp_path / "graph.ckpt")
        with pytest.raises(CheckpointError):
            DdpgAgent.load(tmp_path / "graph.ckpt", np.random.default_rng(0))
