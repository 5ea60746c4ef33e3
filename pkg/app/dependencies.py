import logging
from pathlib import Path
from typing import Optional

from app.logic.checkpoint import load_checkpoint
from app.logic.data import load_dataset
from app.logic.graph import ModelGraph
from app.logic.runs import RunContext, load_plan
from app.models.configs import RunConfig
from app.models.data import Dataset
from app.models.search import SparsityPlan
from app.schemas import Command

logger = logging.getLogger(__name__)

BASELINE_NAME = "baseline.ckpt"
PRUNED_NAME = "pruned.ckpt"
FINETUNED_NAME = "finetuned.ckpt"
SCRATCH_NAME = "scratch.ckpt"
PLAN_NAME = "plan.tsv"


def get_dataset(config: RunConfig, run: RunContext) -> Dataset:
    dataset = load_dataset(config.data_dir, config.data, config.search.calibration_size, config.seed)
    run.record_normalization(dataset.normalization)
    return dataset


def get_baseline(config: RunConfig, run: RunContext) -> ModelGraph:
    path = run.require(config.checkpoint, [BASELINE_NAME], Command.TRAIN)
    return load_checkpoint(path)


def get_pruned(config: RunConfig, run: RunContext) -> ModelGraph:
    path = run.require(config.checkpoint, [PRUNED_NAME], Command.SEARCH)
    return load_checkpoint(path)


def get_any_checkpoint(config: RunConfig, run: RunContext) -> ModelGraph:
    """The explicit checkpoint, else the most processed one of the newest run that has any."""
    path = run.require(
        config.checkpoint,
        [FINETUNED_NAME, PRUNED_NAME, SCRATCH_NAME, BASELINE_NAME],
        Command.TRAIN,
    )
    return load_checkpoint(path)


def get_plan(config: RunConfig, run: RunContext, explicit: Optional[Path] = None) -> SparsityPlan:
    path = run.require(explicit or config.plan, [PLAN_NAME], Command.SEARCH)
    return load_plan(path)
