"""
Run orchestration: configuration loading, per-run output directories,
plan files, prerequisite lookup and the run manifest.
"""

import configparser
import datetime
import logging
import platform
import time
from importlib import metadata
from pathlib import Path
from typing import Any, Optional

import numpy as np
from pydantic import BaseModel, ValidationError

from app.logic.checkpoint import CheckpointError
from app.logic.data import DatasetFormatError, SubsetError
from app.logic.entropy import EntropyError
from app.logic.environment import InfeasibleBudgetError, SearchError
from app.logic.graph import GraphError
from app.logic.numerics import ShapeError
from app.logic.trainer import TrainingDivergedError
from app.models.configs import RunConfig
from app.models.runs import NormalizationStats, RunManifest
from app.models.search import SparsityPlan
from app.schemas import Command
from app.settings import Settings
from app.utilities.commands import CommandRegistry

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
CONFIG_SECTIONS = ("search", "agent", "train", "entropy", "data")
# flag name → (section or None for the run level, key)
FLAG_KEYS: dict[str, tuple[Optional[str], str]] = {
    "arch": (None, "arch"),
    "data_dir": (None, "data_dir"),
    "out": (None, "output_dir"),
    "checkpoint": (None, "checkpoint"),
    "plan": (None, "plan"),
    "seed": (None, "seed"),
    "reward": ("search", "reward"),
    "maximize_entropy": ("search", "maximize_entropy"),
    "flops_target": ("search", "flops_target"),
    "episodes": ("search", "episodes"),
    "calibration_size": ("search", "calibration_size"),
    "reconstruct": ("search", "reconstruct"),
    "bins": ("entropy", "bins"),
    "epochs": ("train", "epochs"),
}


# ============== EXCEPTIONS ==============

class CommandError(ValueError):
    """Raised for unknown commands or unusable configuration."""
    pass


class MissingArtifactError(FileNotFoundError):
    """Raised when a command needs an artifact no earlier run produced."""
    pass


class RunOutcome(BaseModel):
    status: int
    run_dir: Optional[Path] = None
    artifacts: list[str] = []
    results: dict[str, Any] = {}


# ============== CONFIG ==============

def read_config_file(path: Path) -> dict[str, Any]:
    parser = configparser.ConfigParser()
    try:
        with path.open() as f:
            parser.read_file(f)
    except (OSError, configparser.Error) as e:
        raise CommandError(f"cannot read config file {path}: {e}")
    data: dict[str, Any] = {}
    for section in parser.sections():
        values = dict(parser[section])
        if section == "run":
            data.update(values)
        elif section in CONFIG_SECTIONS:
            data[section] = values
        else:
            raise CommandError(f"{path}: unknown section [{section}]; expected [run] or one of {list(CONFIG_SECTIONS)}")
    return data


def load_run_config(
    command: str,
    flags: dict[str, Any],
    config_path: Optional[Path],
    settings: Settings,
) -> RunConfig:
    """Merge settings < config file < flags into a validated RunConfig."""
    try:
        command = Command(command)
    except ValueError:
        raise CommandError(f"unknown command {command!r}; choose from {[c.value for c in Command]}")

    data: dict[str, Any] = {
        "command": command,
        "data_dir": settings.data_dir,
        "output_dir": settings.output_dir,
        "seed": settings.seed,
    }
    if config_path is not None:
        for key, value in read_config_file(config_path).items():
            if key in CONFIG_SECTIONS:
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value

    for flag, value in flags.items():
        if value is None or flag not in FLAG_KEYS:
            continue
        section, key = FLAG_KEYS[flag]
        if section is None:
            data[key] = value
        else:
            data.setdefault(section, {})[key] = value

    # the run seed drives every stream unless a section pins its own
    seed_flag = flags.get("seed")
    for section in ("search", "train"):
        block = data.setdefault(section, {})
        if seed_flag is not None or "seed" not in block:
            block["seed"] = data["seed"]

    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise CommandError(f"invalid configuration:\n{e}")


# ============== PLANS ==============

def save_plan(plan: SparsityPlan, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{layer_id}\t{ratio:.6f}\n" for layer_id, ratio in plan.ratios))


def load_plan(path: Path) -> SparsityPlan:
    ratios = []
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 2:
            raise CommandError(f"{path}:{number}: expected 'layer_id<TAB>sparsity', got {line!r}")
        try:
            ratios.append((fields[0], float(fields[1])))
        except ValueError:
            raise CommandError(f"{path}:{number}: sparsity {fields[1]!r} is not a number")
    try:
        return SparsityPlan(ratios=ratios)
    except ValidationError as e:
        raise CommandError(f"{path}: {e}")


# ============== RUN DIRECTORIES ==============

def create_run_dir(output_dir: Path, command: Command, now: Optional[datetime.datetime] = None) -> Path:
    stamp = (now or datetime.datetime.now()).strftime("%Y%m%d-%H%M%S")
    base = output_dir / f"{stamp}-{command.value}"
    run_dir, suffix = base, 1
    while run_dir.exists():
        run_dir = base.with_name(f"{base.name}-{suffix}")
        suffix += 1
    run_dir.mkdir(parents=True)
    return run_dir


def find_latest_artifact(output_dir: Path, names: list[str], exclude: Optional[Path] = None) -> Optional[Path]:
    """Newest earlier run directory holding any of `names` (earlier names win within a run)."""
    if not output_dir.is_dir():
        return None
    for run_dir in sorted((p for p in output_dir.iterdir() if p.is_dir()), key=lambda p: p.name, reverse=True):
        if exclude is not None and run_dir.resolve() == exclude.resolve():
            continue
        for name in names:
            if (run_dir / name).is_file():
                return run_dir / name
    return None


def package_versions() -> dict[str, str]:
    versions = {"python": platform.python_version()}
    for package in ("numpy", "scipy", "pydantic", "pydantic-settings"):
        try:
            versions[package] = metadata.version(package)
        except metadata.PackageNotFoundError:
            versions[package] = "unknown"
    return versions


class RunContext:
    """Output directory and manifest of one command invocation."""

    def __init__(self, config: RunConfig, run_dir: Path):
        self.config = config
        self.run_dir = run_dir
        self.started = time.perf_counter()
        self.manifest = RunManifest(
            run_id=run_dir.name,
            command=config.command.value,
            seed=config.seed,
            config=config.model_dump(mode="json"),
            versions=package_versions(),
        )

    def path(self, name: str) -> Path:
        """Path of an artifact inside the run directory, recorded in the manifest."""
        if name not in self.manifest.artifacts:
            self.manifest.artifacts.append(name)
        return self.run_dir / name

    def record_normalization(self, stats: Optional[NormalizationStats]) -> None:
        self.manifest.normalization = stats

    def require(self, explicit: Optional[Path], names: list[str], producer: Command) -> Path:
        """An explicit path, else the newest matching artifact of an earlier run."""
        if explicit is not None:
            return explicit
        found = find_latest_artifact(self.config.output_dir, names, exclude=self.run_dir)
        if found is None:
            raise MissingArtifactError(
                f"{self.config.command} needs {' or '.join(names)} and none was found under "
                f"{self.config.output_dir}; run `{producer.value}` first or pass the file explicitly"
            )
        logger.info(f"Using {found}")
        return found

    def finish(self, results: dict[str, Any]) -> Path:
        self.manifest.results = results
        self.manifest.wall_time_s = time.perf_counter() - self.started
        path = self.run_dir / MANIFEST_NAME
        path.write_text(self.manifest.model_dump_json(indent=2))
        return path


# Errors that end a command with a diagnostic instead of a traceback.
USAGE_ERRORS = (CommandError, MissingArtifactError, DatasetFormatError, SubsetError, CheckpointError, GraphError, EntropyError)
RUNTIME_ERRORS = (SearchError, InfeasibleBudgetError, TrainingDivergedError)
# checked after USAGE_ERRORS, several of which are ValueError subclasses
NUMERIC_ERRORS = (ShapeError, np.linalg.LinAlgError, ValueError)


def run_command(config: RunConfig, registry: CommandRegistry) -> RunOutcome:
    """Execute one command in a fresh run directory; the manifest is written even on failure."""
    handler = registry.get(config.command)
    if handler is None:
        logger.error(f"No handler registered for {config.command}")
        return RunOutcome(status=2)

    run = RunContext(config, create_run_dir(config.output_dir, config.command))
    logger.info(f"Running {config.command} in {run.run_dir} (seed {config.seed})")
    status = 0
    try:
        results = handler(config, run)
    except USAGE_ERRORS as e:
        logger.error(str(e))
        results, status = {"error": str(e)}, 2
    except RUNTIME_ERRORS as e:
        logger.error(str(e))
        results, status = {"error": str(e)}, 1
    except NUMERIC_ERRORS as e:
        logger.exception(f"{config.command} failed: {type(e).__name__}: {e}")
        results, status = {"error": str(e)}, 1
    run.finish(results)
    return RunOutcome(status=status, run_dir=run.run_dir, artifacts=list(run.manifest.artifacts), results=results)
