from pathlib import Path

import numpy as np
import pytest

from app.logic.graph import ModelGraph, build_graph
from app.logic.pruner import build_calibration_cache
from app.models.configs import EntropyConfig
from app.models.graph import LayerBlueprint
from app.schemas import LayerKind

TINY_SHAPE = (3, 8, 8)
RECORD_BYTES = 3073


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(42)


def tiny_graph(seed: int = 0) -> ModelGraph:
    """conv4-pool-conv8-pool-linear10 on 3×8×8 inputs."""
    blueprint = [
        LayerBlueprint(kind=LayerKind.CONV, width=4),
        LayerBlueprint(kind=LayerKind.RELU),
        LayerBlueprint(kind=LayerKind.MAXPOOL, kernel=2, stride=2, pad=0),
        LayerBlueprint(kind=LayerKind.CONV, width=8),
        LayerBlueprint(kind=LayerKind.RELU),
        LayerBlueprint(kind=LayerKind.MAXPOOL, kernel=2, stride=2, pad=0),
        LayerBlueprint(kind=LayerKind.FLATTEN),
        LayerBlueprint(kind=LayerKind.LINEAR, width=10),
    ]
    return build_graph("tiny", blueprint, TINY_SHAPE, seed)


@pytest.fixture
def graph() -> ModelGraph:
    return tiny_graph()


@pytest.fixture
def batch(rng) -> np.ndarray:
    return rng.standard_normal((8, *TINY_SHAPE)).astype(np.float32)


@pytest.fixture
def cache(graph, batch):
    return build_calibration_cache(graph, batch, positions_per_sample=10, rng=np.random.default_rng(7))


@pytest.fixture
def entropy_config() -> EntropyConfig:
    return EntropyConfig(bins=16)


def write_cifar_batch(path: Path, labels: list[int], rng: np.random.Generator) -> None:
    records = np.empty((len(labels), RECORD_BYTES), dtype=np.uint8)
    records[:, 0] = labels
    records[:, 1:] = rng.integers(0, 256, size=(len(labels), RECORD_BYTES - 1), dtype=np.uint8)
    path.write_bytes(records.tobytes())


@pytest.fixture
def cifar_dir(tmp_path, rng) -> Path:
    """Synthetic CIFAR-10 binary batches: 5 × 8 training records, 10 test records."""
    data_dir = tmp_path / "cifar-10-batches-bin"
    data_dir.mkdir()
    for i in range(1, 6):
        write_cifar_batch(data_dir / f"data_batch_{i}.bin", list(rng.integers(0, 10, size=8)), rng)
    write_cifar_batch(data_dir / "test_batch.bin", list(rng.integers(0, 10, size=10)), rng)
    return data_dir
