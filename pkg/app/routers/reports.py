"""
Evaluation and entropy reports.

These handlers print their result table to stdout on purpose: it is the
command's output, meant to be read or piped. Diagnostics, including a copy of
the same numbers, go through logging (stderr).
"""

import logging
from typing import Any

from app.dependencies import get_any_checkpoint, get_dataset
from app.logic.entropy import entropy_report
from app.logic.graph import flops_report
from app.logic.runs import RunContext
from app.logic.trainer import evaluate
from app.models.configs import RunConfig
from app.schemas import Command
from app.utilities.commands import CommandRouter
from app.utilities.tables import write_csv

logger = logging.getLogger(__name__)

router = CommandRouter(tags=["reports"])

ENTROPY_HEADER = ["layer", "mean_ame", "valid_channels", "excluded_channels", "bins", "samples"]


@router.command(Command.EVAL)
def evaluate_checkpoint(config: RunConfig, run: RunContext) -> dict[str, Any]:
    graph = get_any_checkpoint(config, run)
    dataset = get_dataset(config, run)
    accuracy = evaluate(graph, dataset.test)
    logger.info(f"Test accuracy {accuracy:.4f} on {len(dataset.test)} images")
    print(f"test accuracy: {accuracy:.4f} ({len(dataset.test)} images)")
    return {
        "test_accuracy": accuracy,
        "parameters": graph.parameter_count(),
        "flops": flops_report(graph).total,
    }


@router.command(Command.ENTROPY_REPORT)
def report_entropy(config: RunConfig, run: RunContext) -> dict[str, Any]:
    """Per-layer mean AME of a checkpoint on the calibration batch."""
    graph = get_any_checkpoint(config, run)
    dataset = get_dataset(config, run)
    report = entropy_report(graph, dataset.calibration.images, config.entropy)
    rows = [
        [layer.layer_id, f"{layer.mean_ame:.6f}", layer.valid_channels, layer.excluded_channels, report.bins, report.samples]
        for layer in report.layers
    ]
    write_csv(run.path("entropy.csv"), ENTROPY_HEADER, rows)
    logger.info(f"Network mean AME {report.network_mean:.4f} over {len(report.layers)} layers, {report.bins} bins")
    for layer in report.layers:
        print(f"{layer.layer_id:<10} {layer.mean_ame:.4f}  ({layer.valid_channels} maps, {layer.excluded_channels} excluded)")
    print(f"{'network':<10} {report.network_mean:.4f}")
    return {"network_mean": report.network_mean, "bins": report.bins, "layers": [l.layer_id for l in report.layers]}
