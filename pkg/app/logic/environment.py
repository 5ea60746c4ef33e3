"""
Layer-by-layer pruning episodes.

An episode walks the prunable convolutions in order. At each layer the agent
sees an 11-feature state, proposes a sparsity, and the proposal is clipped so
that the FLOPS budget stays reachable. After the last layer the plan is applied
with reconstruction and scored; every step is stored with the terminal reward.
"""

import logging
from functools import lru_cache
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy import stats

from app.logic.agent import DdpgAgent
from app.logic.entropy import network_entropy_reward
from app.logic.graph import (
    VGG16_WIDTHS,
    GraphError,
    ModelGraph,
    count_flops,
    flops_with_widths,
    preserved_ratio,
    preset_blueprint,
    remove_output_channels,
    resolve_layers,
)
from app.logic.pruner import CalibrationCache, kept_count, prune_network, select_kept
from app.models.configs import AgentConfig, EntropyConfig, SearchConfig
from app.models.search import EpisodeResult, LayerState, SearchResult, SparsityPlan, Transition
from app.schemas import RewardKind
from app.utilities.rng import SEARCH_STREAMS, spawn_generators
from app.utilities.tables import CsvLog, format_ratios

logger = logging.getLogger(__name__)

STATE_DIM = 11
EPISODE_LOG_HEADER = ["episode", "reward", "preserved_ratio", "sigma", "plan"]


@lru_cache(maxsize=1)
def reference_flops() -> int:
    """FLOPS of the unpruned vgg16 preset on 3×32×32; model size is read on a log scale against it."""
    return sum(count_flops(spec) for spec in resolve_layers(preset_blueprint(VGG16_WIDTHS), (3, 32, 32)))


# ============== EXCEPTIONS ==============

class InfeasibleBudgetError(RuntimeError):
    """Raised when no sparsity at the current layer can still reach the FLOPS target."""
    pass


class SearchError(RuntimeError):
    pass


# ============== ENVIRONMENT ==============

class EvalData(BaseModel):
    """Inputs the reward variants are scored on."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    calibration: np.ndarray
    mini_images: Optional[np.ndarray] = None
    mini_labels: Optional[np.ndarray] = None

    @property
    def has_mini(self) -> bool:
        return self.mini_images is not None and len(self.mini_images) > 0


class PruningEnvironment:
    def __init__(
        self,
        original: ModelGraph,
        cache: CalibrationCache,
        data: EvalData,
        config: SearchConfig,
        entropy_config: EntropyConfig,
        reward_rng: Optional[np.random.Generator] = None,
    ):
        if not original.prunable_ids:
            raise GraphError(f"{original.arch} has no prunable layers")
        self.original = original
        self.cache = cache
        self.data = data
        self.config = config
        self.entropy_config = entropy_config
        self.reward_rng = reward_rng or np.random.default_rng(config.seed)
        self.layer_ids = original.prunable_ids
        self.original_flops = flops_with_widths(original, {})
        self.model_size = float(np.clip(np.log(self.original_flops) / np.log(reference_flops()), 0.0, 1.0))
        self._bounds = self._static_bounds()

    def _static_features(self, graph: ModelGraph, t: int) -> np.ndarray:
        spec = graph.layer(self.layer_ids[t])
        return np.array([
            t,
            spec.c_in,
            spec.c_out,
            spec.kernel[0],
            spec.stride,
            spec.out_hw[0] * spec.out_hw[1],
            count_flops(spec),
        ], dtype=np.float64)

    def _static_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        table = np.stack([self._static_features(self.original, t) for t in range(len(self.layer_ids))])
        return table.min(axis=0), table.max(axis=0)

    def layer_state(self, t: int, graph: ModelGraph, prev_action: float) -> LayerState:
        """
        Features of prunable layer t in the partially pruned `graph`.

        Structural features are min-max scaled against the unpruned layers; the
        FLOPS bookkeeping features are fractions of the original total. The
        model-size feature is log FLOPS of the unpruned graph over log FLOPS of
        the vgg16 reference, so it separates architectures rather than layers.
        """
        if not 0 <= t < len(self.layer_ids):
            raise GraphError(f"layer index {t} is not a prunable layer (0..{len(self.layer_ids) - 1})")
        lo, hi = self._bounds
        span = np.where(hi > lo, hi - lo, 1.0)
        static = np.clip((self._static_features(graph, t) - lo) / span, 0.0, 1.0)

        current = flops_with_widths(graph, {})
        later = {
            layer_id: kept_count(graph.layer(layer_id).c_out, self.config.a_max)
            for layer_id in self.layer_ids[t + 1:]
        }
        reducible = current - flops_with_widths(graph, later)
        reduced = self.original_flops - current
        dynamic = np.array([
            reduced / self.original_flops,
            reducible / self.original_flops,
            self.model_size,
            prev_action,
        ])
        features = np.clip(np.concatenate([static, dynamic]), 0.0, 1.0).astype(np.float32)
        return LayerState(layer_id=self.layer_ids[t], features=features)

    def clip_action(self, action: float, t: int, graph: ModelGraph) -> float:
        return clip_action(action, self.layer_ids[t], graph, self.original_flops, self.config.flops_target, self.config.a_max)

    def rollout(self, policy: Callable[[np.ndarray], float]) -> tuple[SparsityPlan, list[LayerState], list[float], list[bool]]:
        """Walk the prunable layers once; the working graph is truncated as decisions are made."""
        working = self.original
        prev = 0.0
        states: list[LayerState] = []
        actions: list[float] = []
        clipped: list[bool] = []
        for t, layer_id in enumerate(self.layer_ids):
            state = self.layer_state(t, working, prev)
            raw = float(policy(state.features))
            action = self.clip_action(raw, t, working)
            kept = select_kept(working.weights[f"{layer_id}.weight"], action)
            working = remove_output_channels(working, layer_id, kept)
            states.append(state)
            actions.append(action)
            clipped.append(action != raw)
            prev = action
        plan = SparsityPlan(ratios=list(zip(self.layer_ids, actions)))
        return plan, states, actions, clipped

    def compute_reward(self, kind: RewardKind, pruned: ModelGraph) -> float:
        match kind:
            case RewardKind.ENTROPY:
                return network_entropy_reward(
                    pruned, self.data.calibration, self.entropy_config, maximize=self.config.maximize_entropy
                )
            case RewardKind.ACCURACY:
                if not self.data.has_mini:
                    raise SearchError("accuracy reward needs a non-empty mini split")
                return mini_accuracy(pruned, self.data)
            case RewardKind.RANDOM:
                return float(self.reward_rng.uniform())
        raise SearchError(f"unknown reward kind {kind}")

    def evaluate_plan(self, plan: SparsityPlan) -> tuple[ModelGraph, float, float]:
        """(pruned graph, reward, preserved FLOPS ratio) for a plan."""
        pruned = prune_network(self.original, plan, self.cache, self.config.ridge, self.config.reconstruct)
        ratio = preserved_ratio(pruned, self.original)
        limit = self.config.flops_target * (1.0 + self.config.budget_tolerance)
        if ratio > limit:
            raise InfeasibleBudgetError(f"plan keeps {ratio:.4f} of the FLOPS, above the allowed {limit:.4f}")
        return pruned, self.compute_reward(self.config.reward, pruned), ratio


def mini_accuracy(graph: ModelGraph, data: EvalData) -> float:
    predictions = graph.predict(data.mini_images).argmax(axis=1)
    return float(np.mean(predictions == data.mini_labels))


def clip_action(
    action: float,
    layer_id: str,
    graph: ModelGraph,
    original_flops: int,
    flops_target: float,
    a_max: float,
) -> float:
    """
    Clamp a proposed sparsity into [a_min, a_max].

    a_min is the smallest sparsity at this layer for which pruning every later
    layer at a_max still brings total FLOPS to at most flops_target of the
    original. Kept counts are enumerated from the full width down.
    """
    ids = graph.prunable_ids
    n = graph.layer(layer_id).c_out
    later = {j: kept_count(graph.layer(j).c_out, a_max) for j in ids[ids.index(layer_id) + 1:]}
    budget = flops_target * original_flops
    for k in range(n, kept_count(n, a_max) - 1, -1):
        if flops_with_widths(graph, {**later, layer_id: k}) <= budget:
            a_min = 1.0 - k / n
            break
    else:
        raise InfeasibleBudgetError(
            f"{layer_id}: FLOPS target {flops_target} is out of reach even at sparsity {a_max} here and below"
        )
    return float(min(max(action, a_min), a_max))


# ============== EPISODES ==============

def run_episode(
    agent: DdpgAgent,
    env: PruningEnvironment,
    episode: int = 0,
    explore: Optional[Callable[[np.ndarray], float]] = None,
) -> EpisodeResult:
    """
    One pass over the prunable layers followed by pruning and scoring.

    `explore` replaces the agent's policy (warm-up episodes use uniform draws).
    """
    policy = explore or (lambda features: agent.act(features))
    plan, states, actions, clipped = env.rollout(policy)
    pruned, reward, ratio = env.evaluate_plan(plan)

    for i, (state, action) in enumerate(zip(states, actions)):
        terminal = i == len(states) - 1
        agent.remember(Transition(
            state=state.features,
            action=action,
            reward=reward if terminal else 0.0,
            next_state=state.features if terminal else states[i + 1].features,
            terminal=terminal,
        ))

    accuracy = mini_accuracy(pruned, env.data) if env.data.has_mini else None
    result = EpisodeResult(
        episode=episode,
        plan=plan,
        reward=reward,
        preserved_ratio=ratio,
        clipped=clipped,
        sigma=agent.sigma,
        mini_accuracy=accuracy,
    )
    logger.info(
        f"Episode {episode}: reward {reward:.4f}, preserved {ratio:.4f}"
        + (f", mini accuracy {accuracy:.4f}" if accuracy is not None else "")
    )
    return result


def search(
    graph: ModelGraph,
    cache: CalibrationCache,
    data: EvalData,
    config: SearchConfig,
    agent_config: AgentConfig,
    entropy_config: EntropyConfig,
    out_dir: Optional[Path] = None,
) -> tuple[SearchResult, DdpgAgent]:
    """
    Run the full search and keep the highest-reward plan.

    The first `warmup_episodes` take uniform actions and skip learning. After
    warm-up each episode is followed by one update per stored step and a noise
    decay. With `out_dir` the per-episode log and the agent are written there.
    """
    rngs = spawn_generators(config.seed, SEARCH_STREAMS)
    agent = DdpgAgent(agent_config, rngs["agent"])
    env = PruningEnvironment(graph, cache, data, config, entropy_config, rngs["reward"])
    warmup_rng = rngs["warmup"]

    log = CsvLog(out_dir / "episodes.csv", EPISODE_LOG_HEADER) if out_dir else None
    history: list[EpisodeResult] = []
    best: Optional[EpisodeResult] = None
    infeasible = 0
    for episode in range(config.episodes):
        warmup = episode < config.warmup_episodes
        explore = (lambda _: float(warmup_rng.uniform())) if warmup else None
        try:
            result = run_episode(agent, env, episode, explore)
        except InfeasibleBudgetError as e:
            logger.warning(f"Episode {episode} aborted: {e}")
            infeasible += 1
            continue

        history.append(result)
        if best is None or result.reward > best.reward:
            best = result
            logger.info(f"New best at episode {episode}: reward {best.reward:.4f}")
        baseline = agent.update_baseline(result.reward)
        if not warmup:
            for _ in range(len(env.layer_ids)):
                agent.update(agent_config.batch_size, agent_config.gamma, agent_config.tau, baseline)
            agent.decay_noise()
        if log:
            log.append([
                episode,
                f"{result.reward:.6f}",
                f"{result.preserved_ratio:.6f}",
                f"{result.sigma:.6f}",
                format_ratios(result.plan),
            ])

    if best is None:
        raise SearchError(f"all {config.episodes} episodes were infeasible at FLOPS target {config.flops_target}")
    if out_dir:
        agent.save(out_dir / "agent.ckpt")
    return SearchResult(best=best, history=history, infeasible_episodes=infeasible), agent


# ============== PROBES ==============

def sample_feasible_plans(env: PruningEnvironment, count: int, rng: np.random.Generator) -> list[SparsityPlan]:
    """Plans from uniform random proposals, each clipped into the budget."""
    plans = []
    for _ in range(count):
        plan, *_ = env.rollout(lambda _: float(rng.uniform()))
        plans.append(plan)
    return plans


def bin_robustness(
    graph: ModelGraph,
    plans: list[SparsityPlan],
    cache: CalibrationCache,
    batch: np.ndarray,
    bins_a: int,
    bins_b: int,
    ridge: float = 1e-4,
    maximize: bool = False,
) -> float:
    """Spearman correlation of entropy rewards for the same plans under two bin counts."""
    if len(plans) < 2:
        raise ValueError("rank correlation needs at least two plans")
    config_a = EntropyConfig(bins=bins_a)
    config_b = EntropyConfig(bins=bins_b)
    rewards_a, rewards_b = [], []
    for plan in plans:
        pruned = prune_network(graph, plan, cache, ridge)
        rewards_a.append(network_entropy_reward(pruned, batch, config_a, maximize))
        rewards_b.append(network_entropy_reward(pruned, batch, config_b, maximize))
    rho = float(stats.spearmanr(rewards_a, rewards_b).statistic)
    logger.info(f"Entropy reward rank correlation, {bins_a} vs {bins_b} bins: {rho:.4f}")
    return rho
