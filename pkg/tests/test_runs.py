import datetime
import json

import numpy as np
import pytest

from app.logic.environment import SearchError
from app.logic.numerics import ShapeError
from app.logic.runs import (
    MANIFEST_NAME,
    CommandError,
    MissingArtifactError,
    RunContext,
    create_run_dir,
    find_latest_artifact,
    load_plan,
    load_run_config,
    run_command,
    save_plan,
)
from app.main import main
from app.models.configs import RunConfig
from app.models.search import SparsityPlan
from app.schemas import Command
from app.settings import Settings
from app.utilities.commands import CommandRegistry, CommandRouter
from app.utilities.tables import read_csv

TINY_RUN_INI = """
[search]
episodes = 2
warmup_episodes = 1
calibration_size = 8

[agent]
batch_size = 4
hidden = 16

[train]
epochs = 1
batch_size = 16

[entropy]
bins = 16

[data]
train_size = 24
test_size = 8
mini_size = 8
"""


@pytest.fixture
def settings(tmp_path) -> Settings:
    return Settings(data_dir=tmp_path / "data", output_dir=tmp_path / "runs", seed=1)


class TestPlans:
    def test_round_trip(self, tmp_path):
        plan = SparsityPlan(ratios=[("conv1", 0.5), ("conv2", 0.25), ("conv3", 0.0)])
        save_plan(plan, tmp_path / "plan.tsv")
        assert (tmp_path / "plan.tsv").read_text().splitlines()[0] == "conv1\t0.500000"
        assert load_plan(tmp_path / "plan.tsv") == plan

    @pytest.mark.parametrize("text", ["conv1 0.5\n", "conv1\tlots\n", "conv1\t1.0\n"])
    def test_malformed_plans(self, tmp_path, text):
        (tmp_path / "plan.tsv").write_text(text)
        with pytest.raises(CommandError):
            load_plan(tmp_path / "plan.tsv")


class TestConfig:
    def test_flags_beat_file_beat_settings(self, tmp_path, settings):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nseed = 2\narch = vgg16\n\n[search]\nflops_target = 0.4\n")
        config = load_run_config("search", {"seed": 3, "flops_target": 0.3}, ini, settings)
        assert config.seed == 3
        assert config.arch == "vgg16"
        assert config.search.flops_target == 0.3
        assert config.search.seed == config.train.seed == 3
        assert config.output_dir == settings.output_dir

    def test_section_seed_survives_without_seed_flag(self, tmp_path, settings):
        ini = tmp_path / "run.ini"
        ini.write_text("[run]\nseed = 2\n\n[search]\nseed = 9\n")
        config = load_run_config("search", {}, ini, settings)
        assert config.search.seed == 9
        assert config.train.seed == 2

    def test_flag_mapping(self, settings):
        config = load_run_config("search", {"bins": 32, "reconstruct": False, "epochs": 0, "reward": "random"}, None, settings)
        assert config.entropy.bins == 32
        assert config.search.reconstruct is False
        assert config.train.epochs == 0
        assert config.search.reward == "random"

    def test_layer_list_from_file(self, tmp_path, settings):
        ini = tmp_path / "run.ini"
        ini.write_text("[entropy]\nlayers = conv1, conv3\n")
        assert load_run_config("entropy-report", {}, ini, settings).entropy.layers == ["conv1", "conv3"]

    def test_unknown_command(self, settings):
        with pytest.raises(CommandError, match="unknown command"):
            load_run_config("distill", {}, None, settings)

    def test_unknown_section(self, tmp_path, settings):
        ini = tmp_path / "run.ini"
        ini.write_text("[optimizer]\nlr = 1\n")
        with pytest.raises(CommandError, match="optimizer"):
            load_run_config("train", {}, ini, settings)

    @pytest.mark.parametrize("flags", [{"flops_target": 1.5}, {"bins": 1}, {"checkpoint": "absent.ckpt"}])
    def test_invalid_values(self, settings, flags):
        with pytest.raises(CommandError):
            load_run_config("search", flags, None, settings)


class TestRunDirectories:
    def test_collisions_get_suffix(self, tmp_path):
        now = datetime.datetime(2026, 1, 2, 3, 4, 5)
        first = create_run_dir(tmp_path, Command.TRAIN, now)
        second = create_run_dir(tmp_path, Command.TRAIN, now)
        assert first.name == "20260102-030405-train"
        assert second.name == "20260102-030405-train-1"

    def test_latest_artifact(self, tmp_path):
        for name in ("20260101-000000-train", "20260102-000000-train", "20260103-000000-eval"):
            (tmp_path / name).mkdir()
        (tmp_path / "20260101-000000-train" / "baseline.ckpt").write_bytes(b"")
        (tmp_path / "20260102-000000-train" / "baseline.ckpt").write_bytes(b"")
        newest = tmp_path / "20260102-000000-train" / "baseline.ckpt"
        assert find_latest_artifact(tmp_path, ["baseline.ckpt"]) == newest
        assert find_latest_artifact(tmp_path, ["baseline.ckpt"], exclude=newest.parent).parent.name == "20260101-000000-train"
        assert find_latest_artifact(tmp_path, ["plan.tsv"]) is None
        assert find_latest_artifact(tmp_path / "absent", ["plan.tsv"]) is None

    def test_missing_artifact_names_producer(self, tmp_path):
        config = RunConfig(command=Command.FINETUNE, output_dir=tmp_path)
        run = RunContext(config, create_run_dir(tmp_path, Command.FINETUNE))
        with pytest.raises(MissingArtifactError, match="run `search` first"):
            run.require(None, ["pruned.ckpt"], Command.SEARCH)


class TestRunCommand:
    @staticmethod
    def registry(handler) -> CommandRegistry:
        router = CommandRouter(tags=["test"])
        router.command(Command.EVAL)(handler)
        registry = CommandRegistry()
        registry.include_router(router)
        return registry

    def test_success_writes_manifest(self, tmp_path):
        def handler(config, run):
            run.path("note.txt").write_text("ok")
            return {"value": 1}

        outcome = run_command(RunConfig(command=Command.EVAL, output_dir=tmp_path), self.registry(handler))
        assert outcome.status == 0
        manifest = json.loads((outcome.run_dir / MANIFEST_NAME).read_text())
        assert manifest["command"] == "eval"
        assert manifest["results"] == {"value": 1}
        assert manifest["artifacts"] == ["note.txt"]
        assert "numpy" in manifest["versions"]

    @pytest.mark.parametrize(
        "error,status",
        [
            (CommandError("bad"), 2),
            (SearchError("stuck"), 1),
            (ShapeError("conv weight does not fit"), 1),
            (np.linalg.LinAlgError("singular matrix"), 1),
            (ValueError("nan in logits"), 1),
        ],
    )
    def test_failures_map_to_status(self, tmp_path, error, status):
        def handler(config, run):
            raise error

        outcome = run_command(RunConfig(command=Command.EVAL, output_dir=tmp_path), self.registry(handler))
        assert outcome.status == status
        manifest = json.loads((outcome.run_dir / MANIFEST_NAME).read_text())
        assert manifest["results"]["error"] == str(error)

    def test_numeric_failures_are_logged_with_traceback(self, tmp_path, caplog):
        def handler(config, run):
            raise np.linalg.LinAlgError("singular matrix")

        with caplog.at_level("ERROR", logger="app.logic.runs"):
            run_command(RunConfig(command=Command.EVAL, output_dir=tmp_path), self.registry(handler))
        record = next(r for r in caplog.records if "singular matrix" in r.getMessage())
        assert "LinAlgError" in record.getMessage()
        assert record.exc_info is not None

    def test_unregistered_command(self, tmp_path):
        outcome = run_command(RunConfig(command=Command.TRAIN, output_dir=tmp_path), CommandRegistry())
        assert outcome.status == 2
        assert outcome.run_dir is None

    def test_routers_refuse_duplicates(self):
        router = CommandRouter()
        router.command(Command.EVAL)(lambda config, run: {})
        with pytest.raises(ValueError):
            router.command(Command.EVAL)(lambda config, run: {})


class TestCli:
    def test_eval_without_artifacts_is_usage_error(self, tmp_path, cifar_dir):
        status = main(["eval", "--data-dir", str(cifar_dir), "--out", str(tmp_path / "runs")])
        assert status == 2

    def test_bad_config_file(self, tmp_path, cifar_dir):
        ini = tmp_path / "run.ini"
        ini.write_text("[search]\nflops_target = 2\n")
        assert main(["search", "--config", str(ini), "--data-dir", str(cifar_dir)]) == 2

    def test_full_pipeline(self, tmp_path, cifar_dir, capsys):
        out = tmp_path / "runs"
        ini = tmp_path / "tiny.ini"
        ini.write_text(TINY_RUN_INI)
        common = ["--data-dir", str(cifar_dir), "--out", str(out), "--config", str(ini), "--seed", "0"]
        for command in ("train", "search", "finetune", "eval", "entropy-report", "prune", "scratch"):
            assert main([command, *common]) == 0, command
        stdout = capsys.readouterr().out
        assert "test accuracy:" in stdout
        assert stdout.count("network ") == 1
        assert " INFO " not in stdout

        runs = {p.name.split("-", 2)[2].rstrip("-0123456789"): p for p in out.iterdir()}
        assert (runs["train"] / "baseline.ckpt").is_file()
        assert len(read_csv(runs["train"] / "history.csv")) == 1
        search_dir = runs["search"]
        assert len(read_csv(search_dir / "episodes.csv")) == 2
        assert load_plan(search_dir / "plan.tsv").layer_ids == [f"conv{i}" for i in range(1, 7)]
        assert (search_dir / "pruned.ckpt").is_file()
        assert (search_dir / "agent.ckpt").is_file()
        assert [row["layer"] for row in read_csv(runs["entropy-report"] / "entropy.csv")]
        for run_dir in out.iterdir():
            manifest = json.loads((run_dir / MANIFEST_NAME).read_text())
            assert manifest["seed"] == 0
            assert manifest["normalization"] is not None
