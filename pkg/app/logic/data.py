"""
CIFAR-10 binary batches and the seeded splits drawn from them.

Each record is one label byte followed by 3072 pixel bytes: the 32×32 red
plane, then green, then blue, each row-major.
"""

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from app.models.configs import DataConfig
from app.models.data import Dataset, Split, SubsetSizes
from app.models.runs import NormalizationStats

logger = logging.getLogger(__name__)

RECORD_BYTES = 3073
NUM_CLASSES = 10
IMAGE_SHAPE = (3, 32, 32)
TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILE = "test_batch.bin"

CIFAR10_STATS = NormalizationStats(
    mean=(0.4914, 0.4822, 0.4465),
    std=(0.2470, 0.2435, 0.2616),
)


# ============== EXCEPTIONS ==============

class DatasetFormatError(ValueError):
    """Raised for batch files that do not follow the record layout."""
    pass


class SubsetError(ValueError):
    pass


# ============== LOADING ==============

def read_batch(path: Path) -> Split:
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size == 0 or raw.size % RECORD_BYTES != 0:
        whole = raw.size - raw.size % RECORD_BYTES
        raise DatasetFormatError(
            f"{path}: length {raw.size} is not a positive multiple of {RECORD_BYTES}; "
            f"last complete record ends at byte offset {whole}"
        )
    records = raw.reshape(-1, RECORD_BYTES)
    labels = records[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= NUM_CLASSES)
    if bad.size:
        raise DatasetFormatError(
            f"{path}: label {labels[bad[0]]} ≥ {NUM_CLASSES} in record {bad[0]} at byte offset {bad[0] * RECORD_BYTES}"
        )
    images = records[:, 1:].reshape(-1, *IMAGE_SHAPE).astype(np.float32) / 255.0
    return Split(images=images, labels=labels)


def load_cifar10(paths: Sequence[Path]) -> Split:
    """Concatenate batch files into one split with pixels scaled to [0, 1]."""
    if not paths:
        raise DatasetFormatError("no batch files given")
    parts = [read_batch(Path(path)) for path in paths]
    split = Split(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
    )
    logger.info(f"Loaded {len(split)} records from {len(parts)} file(s)")
    return split


def standardize(images: np.ndarray, stats: NormalizationStats = CIFAR10_STATS) -> np.ndarray:
    mean = np.asarray(stats.mean, dtype=np.float32)[:, None, None]
    std = np.asarray(stats.std, dtype=np.float32)[:, None, None]
    return ((images - mean) / std).astype(np.float32)


# ============== SPLITS ==============

def subset(pool: Split, test_pool: Split, sizes: SubsetSizes, seed: int) -> Dataset:
    """
    Seeded splits: train and mini_val are disjoint draws from `pool`,
    calibration is drawn from train, test from `test_pool`.
    """
    if min(sizes.train, sizes.mini_val, sizes.calibration, sizes.test) < 0:
        raise SubsetError(f"split sizes must be nonnegative: {sizes}")
    if sizes.train + sizes.mini_val > len(pool):
        raise SubsetError(
            f"train ({sizes.train}) + mini_val ({sizes.mini_val}) exceed the {len(pool)} available images"
        )
    if sizes.calibration > sizes.train:
        raise SubsetError(f"calibration ({sizes.calibration}) must fit inside train ({sizes.train})")
    if sizes.test > len(test_pool):
        raise SubsetError(f"test ({sizes.test}) exceeds the {len(test_pool)} available test images")

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(pool))
    train_idx = order[:sizes.train]
    mini_idx = order[sizes.train:sizes.train + sizes.mini_val]
    calibration_idx = rng.choice(train_idx, size=sizes.calibration, replace=False)
    test_idx = rng.permutation(len(test_pool))[:sizes.test]
    return Dataset(
        train=pool.take(train_idx),
        mini_val=pool.take(mini_idx),
        calibration=pool.take(calibration_idx),
        test=test_pool.take(test_idx),
    )


def normalize_dataset(dataset: Dataset, stats: NormalizationStats = CIFAR10_STATS) -> Dataset:
    splits = {
        name: Split(images=standardize(split.images, stats), labels=split.labels)
        for name, split in (
            ("train", dataset.train),
            ("test", dataset.test),
            ("mini_val", dataset.mini_val),
            ("calibration", dataset.calibration),
        )
    }
    return Dataset(**splits, normalization=stats)


def load_dataset(data_dir: Path, config: DataConfig, calibration_size: int, seed: int) -> Dataset:
    """Read the standard batch files under `data_dir`, split and standardize."""
    missing = [name for name in [*TRAIN_FILES, TEST_FILE] if not (data_dir / name).exists()]
    if missing:
        raise DatasetFormatError(
            f"{data_dir} is missing {', '.join(missing)}; point --data-dir at the extracted cifar-10-batches-bin directory"
        )
    pool = load_cifar10([data_dir / name for name in TRAIN_FILES])
    test_pool = load_cifar10([data_dir / TEST_FILE])
    sizes = SubsetSizes(
        train=config.train_size,
        mini_val=config.mini_size,
        calibration=calibration_size,
        test=config.test_size,
    )
    dataset = normalize_dataset(subset(pool, test_pool, sizes, seed))
    logger.info(
        f"Splits: train {len(dataset.train)}, test {len(dataset.test)}, "
        f"mini {len(dataset.mini_val)}, calibration {len(dataset.calibration)}"
    )
    return dataset
