"""
Deterministic-policy actor-critic agent for per-layer sparsity decisions.

Both networks are small ReLU MLPs evaluated with the same layer primitives
as the CNNs and trained with Adam. Targets are soft-updated copies. Rewards are centered by an
exponential moving-average baseline before entering the critic target.
"""

import copy
import logging
from collections import deque
from pathlib import Path
from typing import Optional

import numpy as np
from pydantic import BaseModel
from scipy import special, stats

from app.logic.checkpoint import CheckpointError, read_container, write_container
from app.logic.numerics import layer_backward, layer_forward
from app.models.configs import AgentConfig
from app.models.search import Transition
from app.models.tensors import LayerParams
from app.schemas import LayerKind

logger = logging.getLogger(__name__)

FINAL_LAYER_INIT = 3e-3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
# truncation of exploration noise, in standard deviations
NOISE_CLIP = 2.0


class UpdateStats(BaseModel):
    critic_loss: float
    actor_objective: float


# ============== NETWORKS ==============

class Mlp:
    """Fully connected ReLU network with an optional sigmoid on the output."""

    def __init__(self, sizes: list[int], rng: np.random.Generator, squash: bool = False):
        self.sizes = sizes
        self.squash = squash
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            bound = FINAL_LAYER_INIT if last else 1.0 / np.sqrt(fan_in)
            self.weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(np.float32))
            self.biases.append(rng.uniform(-bound, bound, size=fan_out).astype(np.float32))
        self.steps = 0
        self.moments = [
            {name: (np.zeros_like(p), np.zeros_like(p)) for name, p in (("weight", w), ("bias", b))}
            for w, b in zip(self.weights, self.biases)
        ]

    def _params(self, i: int) -> LayerParams:
        return LayerParams(weight=self.weights[i], bias=self.biases[i])

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Output and the per-step inputs needed by `backward`."""
        cache: list[np.ndarray] = []
        x = x.astype(np.float32)
        for i in range(len(self.weights)):
            cache.append(x)
            x = layer_forward(LayerKind.LINEAR, x, self._params(i))
            if i < len(self.weights) - 1:
                cache.append(x)
                x = layer_forward(LayerKind.RELU, x, LayerParams())
        if self.squash:
            x = special.expit(x).astype(np.float32)
        cache.append(x)
        return x, cache

    def backward(self, cache: list[np.ndarray], dout: np.ndarray) -> tuple[np.ndarray, list[dict[str, np.ndarray]]]:
        out = cache[-1]
        if self.squash:
            dout = dout * out * (1.0 - out)
        grads: list[dict[str, np.ndarray]] = [{} for _ in self.weights]
        pos = len(cache) - 2
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                dout, _ = layer_backward(LayerKind.RELU, cache[pos], dout, LayerParams())
                pos -= 1
            dout, grads[i] = layer_backward(LayerKind.LINEAR, cache[pos], dout, self._params(i))
            pos -= 1
        return dout, grads

    def adam_step(self, grads: list[dict[str, np.ndarray]], lr: float) -> None:
        """Bias-corrected Adam update; each parameter moves by about lr per step."""
        beta1, beta2 = ADAM_BETAS
        self.steps += 1
        for i, grad in enumerate(grads):
            for name, params in (("weight", self.weights), ("bias", self.biases)):
                m, v = self.moments[i][name]
                m = beta1 * m + (1.0 - beta1) * grad[name]
                v = beta2 * v + (1.0 - beta2) * np.square(grad[name])
                self.moments[i][name] = (m, v)
                m_hat = m / (1.0 - beta1 ** self.steps)
                v_hat = v / (1.0 - beta2 ** self.steps)
                params[i] = (params[i] - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)).astype(np.float32)

    def soft_update(self, source: "Mlp", tau: float) -> None:
        """self ← τ·source + (1 − τ)·self."""
        for i in range(len(self.weights)):
            self.weights[i] = (tau * source.weights[i] + (1.0 - tau) * self.weights[i]).astype(np.float32)
            self.biases[i] = (tau * source.biases[i] + (1.0 - tau) * self.biases[i]).astype(np.float32)

    def state_dict(self, prefix: str) -> dict[str, np.ndarray]:
        state = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            state[f"{prefix}.{i}.weight"] = w
            state[f"{prefix}.{i}.bias"] = b
        return state

    def load_state_dict(self, prefix: str, state: dict[str, np.ndarray]) -> None:
        for i in range(len(self.weights)):
            for name, target in (("weight", self.weights), ("bias", self.biases)):
                key = f"{prefix}.{i}.{name}"
                if key not in state or state[key].shape != target[i].shape:
                    raise CheckpointError(f"agent state is missing {key} or has the wrong shape")
                target[i] = state[key].astype(np.float32)


# ============== REPLAY ==============

class ReplayBuffer:
    def __init__(self, capacity: int, rng: np.random.Generator):
        self.transitions: deque[Transition] = deque(maxlen=capacity)
        self.rng = rng

    def __len__(self) -> int:
        return len(self.transitions)

    def push(self, transition: Transition) -> None:
        self.transitions.append(transition)

    def sample(self, batch_size: int) -> list[Transition]:
        idx = self.rng.choice(len(self.transitions), size=batch_size, replace=False)
        return [self.transitions[i] for i in idx]


# ============== AGENT ==============

class DdpgAgent:
    def __init__(self, config: AgentConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        hidden = [config.hidden, config.hidden]
        self.actor = Mlp([config.state_dim, *hidden, 1], rng, squash=True)
        self.critic = Mlp([config.state_dim + 1, *hidden, 1], rng)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)
        self.buffer = ReplayBuffer(config.buffer_capacity, rng)
        self.sigma = config.noise_sigma
        self.baseline: Optional[float] = None

    def act(self, state: np.ndarray, noise_sigma: Optional[float] = None) -> float:
        """Policy output plus truncated Gaussian noise, clamped to [0, 1]."""
        sigma = self.sigma if noise_sigma is None else noise_sigma
        mu, _ = self.actor.forward(np.asarray(state)[None, :])
        action = float(mu[0, 0])
        if sigma > 0.0:
            action += float(stats.truncnorm.rvs(-NOISE_CLIP, NOISE_CLIP, scale=sigma, random_state=self.rng))
        return float(np.clip(action, 0.0, 1.0))

    def remember(self, transition: Transition) -> None:
        self.buffer.push(transition)

    def update_baseline(self, reward: float) -> float:
        if self.baseline is None:
            self.baseline = reward
        else:
            decay = self.config.baseline_decay
            self.baseline = decay * self.baseline + (1.0 - decay) * reward
        return self.baseline

    def decay_noise(self, factor: Optional[float] = None) -> float:
        self.sigma *= self.config.noise_decay if factor is None else factor
        return self.sigma

    def update(self, batch_size: int, gamma: float, tau: float, baseline: float = 0.0) -> Optional[UpdateStats]:
        """One critic and one actor step on a replay batch; None while the buffer is too small."""
        if len(self.buffer) < batch_size:
            logger.debug(f"Skipping update: {len(self.buffer)} transitions, need {batch_size}")
            return None
        batch = self.buffer.sample(batch_size)
        states = np.stack([t.state for t in batch]).astype(np.float32)
        actions = np.array([[t.action] for t in batch], dtype=np.float32)
        rewards = np.array([[t.reward] for t in batch], dtype=np.float64)
        next_states = np.stack([t.next_state for t in batch]).astype(np.float32)
        terminal = np.array([[t.terminal] for t in batch], dtype=np.float64)

        next_actions, _ = self.actor_target.forward(next_states)
        next_q, _ = self.critic_target.forward(np.hstack([next_states, next_actions]))
        targets = (rewards - baseline) + gamma * next_q * (1.0 - terminal)

        q, critic_cache = self.critic.forward(np.hstack([states, actions]))
        diff = q - targets
        critic_loss = float(np.mean(np.square(diff)))
        _, critic_grads = self.critic.backward(critic_cache, (2.0 * diff / batch_size).astype(np.float32))
        self.critic.adam_step(critic_grads, self.config.value_lr)

        mu, actor_cache = self.actor.forward(states)
        q_mu, q_cache = self.critic.forward(np.hstack([states, mu]))
        dinput, _ = self.critic.backward(q_cache, np.full_like(q_mu, -1.0 / batch_size))
        _, actor_grads = self.actor.backward(actor_cache, dinput[:, -1:])
        self.actor.adam_step(actor_grads, self.config.policy_lr)

        self.actor_target.soft_update(self.actor, tau)
        self.critic_target.soft_update(self.critic, tau)
        return UpdateStats(critic_loss=critic_loss, actor_objective=float(np.mean(q_mu)))

    def save(self, path: Path) -> None:
        arrays = {
            **self.actor.state_dict("actor"),
            **self.critic.state_dict("critic"),
            **self.actor_target.state_dict("actor_target"),
            **self.critic_target.state_dict("critic_target"),
        }
        metadata = {
            "kind": "agent",
            "config": self.config.model_dump(),
            "sigma": self.sigma,
            "baseline": self.baseline,
        }
        write_container(path, metadata, arrays)
        logger.info(f"Saved agent to {path}")

    @classmethod
    def load(cls, path: Path, rng: np.random.Generator) -> "DdpgAgent":
        metadata, arrays = read_container(path)
        if metadata.get("kind") != "agent":
            raise CheckpointError(f"{path}: holds a {metadata.get('kind')!r} checkpoint, not an agent")
        agent = cls(AgentConfig.model_validate(metadata["config"]), rng)
        for prefix, net in (
            ("actor", agent.actor),
            ("critic", agent.critic),
            ("actor_target", agent.actor_target),
            ("critic_target", agent.critic_target),
        ):
            net.load_state_dict(prefix, arrays)
        agent.sigma = float(metadata["sigma"])
        agent.baseline = metadata["baseline"]
        return agent
