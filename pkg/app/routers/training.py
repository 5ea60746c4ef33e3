import logging
from typing import Any

from app.dependencies import (
    BASELINE_NAME, FINETUNED_NAME, SCRATCH_NAME, get_baseline, get_dataset, get_plan, get_pruned,
)
from app.logic.checkpoint import save_checkpoint
from app.logic.graph import build_preset, flops_report
from app.logic.runs import RunContext
from app.logic.trainer import HISTORY_HEADER, TrainResult, evaluate, fine_tune, train, train_from_scratch
from app.models.configs import RunConfig
from app.schemas import Command
from app.utilities.commands import CommandRouter
from app.utilities.tables import write_csv

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["training"])


def _write_history(run: RunContext, result: TrainResult) -> None:
    write_csv(
        run.path("history.csv"),
        HISTORY_HEADER,
        ([r.epoch + 1, f"{r.lr:.6f}", f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.test_acc:.6f}"] for r in result.history),
    )


@router.command(Command.TRAIN)
def train_baseline(config: RunConfig, run: RunContext) -> dict[str, Any]:
    """Train a preset from random initialization."""
    dataset = get_dataset(config, run)
    graph = build_preset(config.arch, seed=config.train.seed)
    result = train(graph, dataset, config.train)
    save_checkpoint(result.graph, run.path(BASELINE_NAME))
    _write_history(run, result)
    return {
        "test_accuracy": evaluate(result.graph, dataset.test),
        "parameters": result.graph.parameter_count(),
        "flops": flops_report(result.graph).total,
    }


@router.command(Command.FINETUNE)
def finetune_pruned(config: RunConfig, run: RunContext) -> dict[str, Any]:
    graph = get_pruned(config, run)
    dataset = get_dataset(config, run)
    before = evaluate(graph, dataset.test)
    result = fine_tune(graph, dataset, config.train)
    save_checkpoint(result.graph, run.path(FINETUNED_NAME))
    _write_history(run, result)
    after = evaluate(result.graph, dataset.test)
    logger.info(f"Fine-tuning moved test accuracy from {before:.4f} to {after:.4f}")
    return {"test_accuracy_before": before, "test_accuracy": after, "parameters": result.graph.parameter_count()}


@router.command(Command.SCRATCH)
def train_scratch(config: RunConfig, run: RunContext) -> dict[str, Any]:
    """Train the architecture a plan describes from fresh weights."""
    plan = get_plan(config, run)
    # only the architecture of the reference graph is used
    original = get_baseline(config, run) if config.checkpoint else build_preset(config.arch, seed=config.train.seed)
    dataset = get_dataset(config, run)
    result = train_from_scratch(plan, original, dataset, config.train)
    save_checkpoint(result.graph, run.path(SCRATCH_NAME))
    _write_history(run, result)
    return {
        "test_accuracy": evaluate(result.graph, dataset.test),
        "parameters": result.graph.parameter_count(),
        "preserved_ratio": flops_report(result.graph, original).ratio,
    }
