"""
Binary checkpoint container.

Layout (little-endian):
    b"ENPR" | u16 version | u32 metadata length | metadata (UTF-8 JSON)
    | u32 entry count | entries

Each entry is u16 name length | name (UTF-8) | u8 dtype code | u8 ndim
| u32 dims[ndim] | float32 data in C order.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any

import numpy as np
from pydantic import BaseModel, ValidationError

from app.logic.graph import GraphError, ModelGraph, validate_graph
from app.models.graph import LayerSpec

logger = logging.getLogger(__name__)

MAGIC = b"ENPR"
FORMAT_VERSION = 1
_DTYPE_CODES = {1: np.dtype("<f4")}
_FLOAT32_CODE = 1


class CheckpointError(ValueError):
    """Raised for malformed, truncated or inconsistent checkpoint files."""
    pass


class GraphMetadata(BaseModel):
    kind: str = "graph"
    arch: str
    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]


# ============== CONTAINER ==============

class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(
                f"{self.path}: truncated while reading {what} at byte offset {self.offset} "
                f"(need {size} bytes, {len(self.data) - self.offset} left)"
            )
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def write_container(path: Path, metadata: dict[str, Any], arrays: dict[str, np.ndarray]) -> None:
    meta = json.dumps(metadata, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<HI", FORMAT_VERSION, len(meta)), meta, struct.pack("<I", len(arrays))]
    for name, array in arrays.items():
        encoded = name.encode("utf-8")
        data = np.ascontiguousarray(array, dtype="<f4")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<BB", _FLOAT32_CODE, data.ndim))
        parts.append(struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(data.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def read_container(path: Path) -> tuple[dict[str, Any], dict[str, np.ndarray]]:
    try:
        reader = _Reader(path.read_bytes(), path)
    except FileNotFoundError:
        raise CheckpointError(f"checkpoint {path} does not exist")

    magic = reader.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at byte offset 0, expected {MAGIC!r}")
    version, meta_len = reader.unpack("<HI", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} at byte offset 4")
    meta_offset = reader.offset
    try:
        metadata = json.loads(reader.take(meta_len, "metadata").decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: unreadable metadata at byte offset {meta_offset}: {e}")

    (count,) = reader.unpack("<I", "entry count")
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        entry_offset = reader.offset
        (name_len,) = reader.unpack("<H", "entry name length")
        name = reader.take(name_len, "entry name").decode("utf-8", errors="replace")
        code, ndim = reader.unpack("<BB", f"{name} header")
        if code not in _DTYPE_CODES:
            raise CheckpointError(f"{path}: entry {name!r} at byte offset {entry_offset} has unknown dtype code {code}")
        dims = reader.unpack(f"<{ndim}I", f"{name} dims")
        dtype = _DTYPE_CODES[code]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f"{name} data")
        arrays[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(np.float32)

    if reader.offset != len(reader.data):
        raise CheckpointError(f"{path}: {len(reader.data) - reader.offset} trailing bytes at byte offset {reader.offset}")
    return metadata, arrays


# ============== GRAPHS ==============

def save_checkpoint(graph: ModelGraph, path: Path) -> None:
    metadata = GraphMetadata(arch=graph.arch, input_shape=graph.input_shape, layers=graph.layers)
    write_container(path, metadata.model_dump(mode="json"), graph.weights)
    logger.info(f"Saved {graph.arch} checkpoint ({graph.parameter_count()} parameters) to {path}")


def load_checkpoint(path: Path) -> ModelGraph:
    raw_meta, arrays = read_container(path)
    try:
        metadata = GraphMetadata.model_validate(raw_meta)
    except ValidationError as e:
        raise CheckpointError(f"{path}: metadata does not describe a graph: {e}")
    if metadata.kind != "graph":
        raise CheckpointError(f"{path}: holds a {metadata.kind!r} checkpoint, not a graph")

    graph = ModelGraph(
        arch=metadata.arch,
        input_shape=metadata.input_shape,
        layers=metadata.layers,
        weights=arrays,
    )
    try:
        validate_graph(graph)
    except GraphError as e:
        raise CheckpointError(f"{path}: weights do not match the stored architecture: {e}")
    return graph
