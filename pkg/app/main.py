import argparse
import logging
import sys
from pathlib import Path
from typing import Optional

from dotenv import load_dotenv

from app.logic.runs import CommandError, load_run_config, run_command
from app.routers import pruning, reports, training
from app.schemas import ArchPreset, Command, RewardKind
from app.settings import get_settings
from app.utilities.commands import CommandRegistry

load_dotenv()

logger = logging.getLogger(__name__)

registry = CommandRegistry()
registry.include_router(training.router)
registry.include_router(pruning.router)
registry.include_router(reports.router)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="python -m app.main",
        description="Entropy-guided filter pruning for chain CNNs on CIFAR-10.",
    )
    parser.add_argument("command", choices=[c.value for c in Command])
    parser.add_argument("--arch", choices=[a.value for a in ArchPreset])
    parser.add_argument("--data-dir", type=Path, help="directory holding the CIFAR-10 binary batches")
    parser.add_argument("--reward", choices=[r.value for r in RewardKind])
    parser.add_argument("--maximize-entropy", action="store_true", default=None,
                        help="reward the mean entropy itself (negative control)")
    parser.add_argument("--flops-target", type=float, help="fraction of the original FLOPS to keep")
    parser.add_argument("--bins", type=int, help="quantization bins for spatial entropy")
    parser.add_argument("--episodes", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", type=Path, help="root of the per-run output directories")
    parser.add_argument("--config", type=Path, help="INI file with [run], [search], [agent], [train], [entropy], [data]")
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--plan", type=Path)
    parser.add_argument("--calibration-size", type=int)
    parser.add_argument("--no-reconstruct", dest="reconstruct", action="store_false", default=None,
                        help="truncate successor weights instead of refitting them")
    parser.add_argument("--log-level")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    settings = get_settings()
    logging.basicConfig(
        level=(args.log_level or settings.log_level).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    try:
        config = load_run_config(args.command, flags, args.config, settings)
    except CommandError as e:
        logger.error(str(e))
        return 2
    outcome = run_command(config, registry)
    logger.info(f"{config.command} finished with status {outcome.status}; outputs in {outcome.run_dir}")
    return outcome.status


if __name__ == '__main__':
    sys.exit(main())
