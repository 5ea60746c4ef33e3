import logging
from typing import Any

from app.dependencies import PLAN_NAME, PRUNED_NAME, get_baseline, get_dataset, get_plan
from app.logic.checkpoint import save_checkpoint
from app.logic.environment import EvalData, search
from app.logic.graph import flops_report
from app.logic.pruner import build_calibration_cache, prune_network
from app.logic.runs import RunContext, save_plan
from app.logic.trainer import evaluate
from app.models.configs import RunConfig
from app.schemas import Command
from app.utilities.commands import CommandRouter
from app.utilities.rng import SEARCH_STREAMS, spawn_generators
from app.utilities.tables import format_ratios

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["pruning"])


@router.command(Command.SEARCH)
def search_plan(config: RunConfig, run: RunContext) -> dict[str, Any]:
    """Search a sparsity plan for a trained baseline and prune it with the best one."""
    graph = get_baseline(config, run)
    dataset = get_dataset(config, run)
    cache_rng = spawn_generators(config.search.seed, SEARCH_STREAMS)["cache"]
    cache = build_calibration_cache(graph, dataset.calibration.images, config.search.positions_per_sample, cache_rng)
    data = EvalData(
        calibration=dataset.calibration.images,
        mini_images=dataset.mini_val.images,
        mini_labels=dataset.mini_val.labels,
    )

    run.path("episodes.csv")
    run.path("agent.ckpt")
    result, _ = search(graph, cache, data, config.search, config.agent, config.entropy, run.run_dir)
    best = result.best
    save_plan(best.plan, run.path(PLAN_NAME))
    pruned = prune_network(graph, best.plan, cache, config.search.ridge, config.search.reconstruct)
    save_checkpoint(pruned, run.path(PRUNED_NAME))
    logger.info(f"Best plan (episode {best.episode}): {format_ratios(best.plan)}")
    return {
        "best_episode": best.episode,
        "best_reward": best.reward,
        "preserved_ratio": best.preserved_ratio,
        "mini_accuracy": best.mini_accuracy,
        "test_accuracy": evaluate(pruned, dataset.test),
        "parameters": pruned.parameter_count(),
        "baseline_parameters": graph.parameter_count(),
        "infeasible_episodes": result.infeasible_episodes,
    }


@router.command(Command.PRUNE)
def apply_plan(config: RunConfig, run: RunContext) -> dict[str, Any]:
    graph = get_baseline(config, run)
    plan = get_plan(config, run)
    dataset = get_dataset(config, run)
    cache_rng = spawn_generators(config.search.seed, SEARCH_STREAMS)["cache"]
    cache = build_calibration_cache(graph, dataset.calibration.images, config.search.positions_per_sample, cache_rng)
    pruned = prune_network(graph, plan, cache, config.search.ridge, config.search.reconstruct)
    save_checkpoint(pruned, run.path(PRUNED_NAME))
    report = flops_report(pruned, graph)
    return {
        "preserved_ratio": report.ratio,
        "flops": report.total,
        "parameters": pruned.parameter_count(),
        "test_accuracy": evaluate(pruned, dataset.test),
        "reconstructed": config.search.reconstruct,
    }
