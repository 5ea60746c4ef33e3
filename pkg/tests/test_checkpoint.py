import numpy as np
import pytest

from app.logic.checkpoint import CheckpointError, MAGIC, load_checkpoint, read_container, save_checkpoint, write_container
from app.logic.graph import build_preset, remove_output_channels


def test_round_trip_is_bit_identical(tmp_path, graph):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(graph, path)
    assert load_checkpoint(path).is_identical(graph)


def test_pruned_graph_round_trip(tmp_path):
    graph = remove_output_channels(build_preset("tinyvgg6"), "conv3", [0, 5, 9])
    path = tmp_path / "pruned.ckpt"
    save_checkpoint(graph, path)
    loaded = load_checkpoint(path)
    assert loaded.is_identical(graph)
    assert loaded.layer("conv3").c_out == 3


def test_header_layout(tmp_path):
    path = tmp_path / "c.ckpt"
    write_container(path, {"kind": "test"}, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    data = path.read_bytes()
    assert data[:4] == MAGIC
    assert int.from_bytes(data[4:6], "little") == 1
    metadata, arrays = read_container(path)
    assert metadata == {"kind": "test"}
    np.testing.assert_array_equal(arrays["w"], np.arange(6).reshape(2, 3))


def test_truncated_file_reports_offset(tmp_path, graph):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(graph, path)
    data = path.read_bytes()
    path.write_bytes(data[:-10])
    with pytest.raises(CheckpointError, match="byte offset"):
        load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(path)


def test_trailing_bytes_rejected(tmp_path, graph):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(graph, path)
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(path)


def test_weights_must_match_layers(tmp_path, graph):
    path = tmp_path / "tiny.ckpt"
    save_checkpoint(graph, path)
    metadata, arrays = read_container(path)
    arrays["conv1.weight"] = arrays["conv1.weight"][:2]
    write_container(path, metadata, arrays)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.ckpt")
