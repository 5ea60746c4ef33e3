import numpy as np
import pytest

from app.logic.data import (
    CIFAR10_STATS,
    RECORD_BYTES,
    DatasetFormatError,
    SubsetError,
    load_cifar10,
    load_dataset,
    read_batch,
    standardize,
    subset,
)
from app.models.configs import DataConfig
from app.models.data import Split, SubsetSizes


def indexed_pool(n: int) -> Split:
    """Images that carry their own index, so draws can be traced."""
    return Split(images=np.arange(n, dtype=np.float32).reshape(n, 1, 1, 1), labels=np.arange(n) % 10)


def ids(split: Split) -> set[int]:
    return set(split.images.ravel().astype(int).tolist())


class TestBatchFiles:
    def test_crafted_record(self, tmp_path):
        record = np.full(RECORD_BYTES, 255, dtype=np.uint8)
        record[0] = 3
        path = tmp_path / "one.bin"
        path.write_bytes(record.tobytes())
        split = read_batch(path)
        assert split.labels.tolist() == [3]
        assert split.images.shape == (1, 3, 32, 32)
        assert np.all(split.images == 1.0)

    def test_channel_planes_in_order(self, tmp_path):
        record = np.zeros(RECORD_BYTES, dtype=np.uint8)
        record[1 + 1024:1 + 2048] = 51
        path = tmp_path / "green.bin"
        path.write_bytes(record.tobytes())
        images = read_batch(path).images
        assert images[0, 0].max() == 0.0
        assert np.allclose(images[0, 1], 0.2)
        assert images[0, 2].max() == 0.0

    def test_truncated_file(self, tmp_path):
        path = tmp_path / "short.bin"
        path.write_bytes(bytes(RECORD_BYTES + 100))
        with pytest.raises(DatasetFormatError, match=f"byte offset {RECORD_BYTES}"):
            read_batch(path)

    def test_label_out_of_range(self, tmp_path):
        records = np.zeros((2, RECORD_BYTES), dtype=np.uint8)
        records[1, 0] = 10
        path = tmp_path / "bad.bin"
        path.write_bytes(records.tobytes())
        with pytest.raises(DatasetFormatError, match="record 1"):
            read_batch(path)

    def test_files_are_concatenated(self, cifar_dir):
        split = load_cifar10(sorted(cifar_dir.glob("data_batch_*.bin")))
        assert len(split) == 40


class TestSubsets:
    SIZES = SubsetSizes(train=20, mini_val=10, calibration=5, test=6)

    def test_partition(self):
        dataset = subset(indexed_pool(40), indexed_pool(10), self.SIZES, seed=0)
        assert len(dataset.train) == 20 and len(dataset.mini_val) == 10
        assert len(dataset.calibration) == 5 and len(dataset.test) == 6
        assert not ids(dataset.train) & ids(dataset.mini_val)
        assert ids(dataset.calibration) <= ids(dataset.train)

    def test_seeded(self):
        a = subset(indexed_pool(40), indexed_pool(10), self.SIZES, seed=1)
        b = subset(indexed_pool(40), indexed_pool(10), self.SIZES, seed=1)
        c = subset(indexed_pool(40), indexed_pool(10), self.SIZES, seed=2)
        np.testing.assert_array_equal(a.train.images, b.train.images)
        assert not np.array_equal(a.train.images, c.train.images)

    @pytest.mark.parametrize(
        "sizes",
        [
            SubsetSizes(train=35, mini_val=10, calibration=5, test=6),
            SubsetSizes(train=5, mini_val=0, calibration=6, test=6),
            SubsetSizes(train=20, mini_val=0, calibration=5, test=11),
        ],
    )
    def test_oversubscription(self, sizes):
        with pytest.raises(SubsetError):
            subset(indexed_pool(40), indexed_pool(10), sizes, seed=0)


def test_standardize_centers_channel_means():
    images = np.empty((2, 3, 4, 4), np.float32)
    for c, mean in enumerate(CIFAR10_STATS.mean):
        images[:, c] = mean
    np.testing.assert_allclose(standardize(images), 0.0, atol=1e-6)


def test_load_dataset(cifar_dir):
    dataset = load_dataset(cifar_dir, DataConfig(train_size=24, test_size=8, mini_size=8), 8, seed=0)
    assert (len(dataset.train), len(dataset.test), len(dataset.mini_val), len(dataset.calibration)) == (24, 8, 8, 8)
    assert dataset.normalization == CIFAR10_STATS
    assert dataset.train.images.dtype == np.float32


def test_missing_files(tmp_path):
    with pytest.raises(DatasetFormatError, match="data_batch_1.bin"):
        load_dataset(tmp_path, DataConfig(), 10, seed=0)
