"""
Filter pruning with least-squares reconstruction of the following layer.

Filters of each prunable conv are ranked by L2 norm and the weakest are
removed. The next parameterized layer is then refit so that, on a calibration
cache of sampled receptive fields, its outputs from the surviving channels
match the original network's outputs.
"""

import logging
import math
from typing import Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.logic.graph import GraphError, ModelGraph, remove_output_channels
from app.logic.numerics import im2col, least_squares
from app.models.search import SparsityPlan
from app.schemas import LayerKind

logger = logging.getLogger(__name__)

# Fractions of a filter below this are rounding noise, e.g. from 6-decimal plan files.
KEPT_COUNT_SLACK = 1e-3


class CacheEntry(BaseModel):
    """Sampled inputs/outputs of one parameterized layer of the unpruned network."""
    model_config = ConfigDict(arbitrary_types_allowed=True)

    layer_id: str
    kind: LayerKind
    # rows × (C_in · channel_width), columns ordered channel-major
    inputs: np.ndarray
    # rows × C_out, pre-activation
    outputs: np.ndarray
    channel_width: int
    kernel: Optional[tuple[int, int]] = None
    sample_ids: np.ndarray
    positions: Optional[np.ndarray] = None


class CalibrationCache(BaseModel):
    entries: dict[str, CacheEntry]
    samples: int
    positions_per_sample: int

    def entry(self, layer_id: str) -> CacheEntry:
        if layer_id not in self.entries:
            raise GraphError(f"calibration cache has no entry for {layer_id}")
        return self.entries[layer_id]


class Reconstruction(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    weight: np.ndarray
    bias: np.ndarray
    residual: float
    fallback: bool = False
    underdetermined: bool = False


# ============== RANKING ==============

def rank_filters_l2(weight: np.ndarray) -> np.ndarray:
    """Filter indices by descending L2 norm; ties keep the lower index first."""
    norms = np.sqrt(np.square(weight.astype(np.float64)).reshape(weight.shape[0], -1).sum(axis=1))
    return np.argsort(-norms, kind="stable")


def kept_count(n: int, sparsity: float) -> int:
    """ceil((1 − a)·n), never below one filter."""
    return max(1, math.ceil((1.0 - sparsity) * n - KEPT_COUNT_SLACK))


def select_kept(weight: np.ndarray, sparsity: float) -> np.ndarray:
    """Sorted indices of the strongest ceil((1 − a)·n) filters."""
    order = rank_filters_l2(weight)
    return np.sort(order[:kept_count(weight.shape[0], sparsity)])


def plan_widths(graph: ModelGraph, plan: SparsityPlan) -> dict[str, int]:
    _check_plan(graph, plan)
    return {layer_id: kept_count(graph.layer(layer_id).c_out, a) for layer_id, a in plan.ratios}


def _check_plan(graph: ModelGraph, plan: SparsityPlan) -> None:
    if plan.layer_ids != graph.prunable_ids:
        raise GraphError(
            f"plan covers {plan.layer_ids}, but {graph.arch} has prunable layers {graph.prunable_ids}"
        )


# ============== CALIBRATION ==============

def build_calibration_cache(
    graph: ModelGraph,
    samples: np.ndarray,
    positions_per_sample: int,
    rng: np.random.Generator,
) -> CalibrationCache:
    """
    Record receptive-field rows and original outputs for every parameterized layer.

    Convs get `positions_per_sample` random output positions per sample; linear
    layers get one row per sample.
    """
    if len(samples) == 0:
        raise ValueError("calibration needs at least one sample")
    ids = graph.parameterized_ids
    forward = graph.forward(samples, capture=ids, keep_inputs=True)

    entries: dict[str, CacheEntry] = {}
    n = len(samples)
    for layer_id in ids:
        spec = graph.layer(layer_id)
        layer_input = forward.inputs[graph.index(layer_id)]
        output = forward.captured[layer_id]
        if spec.kind == LayerKind.CONV:
            oh, ow = spec.out_hw
            per_sample = min(positions_per_sample, oh * ow)
            local = np.stack([rng.choice(oh * ow, size=per_sample, replace=False) for _ in range(n)])
            positions = (np.arange(n)[:, None] * oh * ow + local).reshape(-1)
            patches = im2col(layer_input, *spec.kernel, spec.stride, spec.pad, positions, layer_id=layer_id)
            oy, ox = np.divmod(patches.positions % (oh * ow), ow)
            entries[layer_id] = CacheEntry(
                layer_id=layer_id,
                kind=spec.kind,
                inputs=patches.data,
                outputs=output[patches.sample_ids, :, oy, ox],
                channel_width=spec.kernel[0] * spec.kernel[1],
                kernel=spec.kernel,
                sample_ids=patches.sample_ids,
                positions=patches.positions,
            )
        else:
            entries[layer_id] = CacheEntry(
                layer_id=layer_id,
                kind=spec.kind,
                inputs=layer_input.reshape(n, -1),
                outputs=output,
                channel_width=graph.input_channel_width(layer_id),
                sample_ids=np.arange(n),
            )
        logger.debug(f"Cached {entries[layer_id].inputs.shape[0]} rows for {layer_id}")
    return CalibrationCache(entries=entries, samples=n, positions_per_sample=positions_per_sample)


# ============== RECONSTRUCTION ==============

def _input_columns(entry: CacheEntry, kept_in: Sequence[int] | np.ndarray) -> np.ndarray:
    kept_in = np.asarray(kept_in, dtype=np.int64)
    return (kept_in[:, None] * entry.channel_width + np.arange(entry.channel_width)).reshape(-1)


def _residual(design: np.ndarray, weight: np.ndarray, bias: np.ndarray, targets: np.ndarray) -> float:
    return float(np.square(design @ weight.T + bias - targets).sum())


def truncation_residual(
    entry: CacheEntry,
    weight: np.ndarray,
    bias: np.ndarray,
    kept_in: Sequence[int] | np.ndarray,
    kept_out: Sequence[int] | np.ndarray,
) -> float:
    """Residual of simply dropping the removed input channels from the original weights."""
    cols = _input_columns(entry, kept_in)
    kept_out = np.asarray(kept_out, dtype=np.int64)
    flat = weight.reshape(weight.shape[0], -1).astype(np.float64)
    return _residual(
        entry.inputs[:, cols].astype(np.float64),
        flat[kept_out][:, cols],
        bias[kept_out].astype(np.float64),
        entry.outputs[:, kept_out].astype(np.float64),
    )


def reconstruct_layer(
    entry: CacheEntry,
    kept_in: Sequence[int] | np.ndarray,
    kept_out: Sequence[int] | np.ndarray,
    ridge: float,
) -> Reconstruction:
    """Refit weights over the surviving input channels (plus bias) to the cached outputs."""
    kept_in = np.asarray(kept_in, dtype=np.int64)
    kept_out = np.asarray(kept_out, dtype=np.int64)
    cols = _input_columns(entry, kept_in)
    x = entry.inputs[:, cols].astype(np.float64)
    design = np.hstack([x, np.ones((x.shape[0], 1))])
    targets = entry.outputs[:, kept_out].astype(np.float64)

    solved = least_squares(design, targets, ridge)
    if solved.underdetermined:
        logger.warning(
            f"{entry.layer_id}: {design.shape[0]} calibration rows for {design.shape[1]} unknowns; "
            f"fit relies on ridge {solved.ridge:.1e}"
        )
    flat = solved.weights[:-1].T
    bias = solved.weights[-1]
    residual = _residual(x, flat, bias, targets)

    if entry.kind == LayerKind.CONV:
        weight = flat.reshape(kept_out.size, kept_in.size, *entry.kernel)
    else:
        weight = flat
    return Reconstruction(
        weight=weight.astype(np.float32),
        bias=bias.astype(np.float32),
        residual=residual,
        fallback=solved.fallback,
        underdetermined=solved.underdetermined,
    )


def prune_network(
    graph: ModelGraph,
    plan: SparsityPlan,
    cache: CalibrationCache,
    ridge: float = 1e-4,
    reconstruct: bool = True,
) -> ModelGraph:
    """
    Apply a sparsity plan layer by layer.

    For each prunable conv the strongest filters of its current weights are
    kept; the next parameterized layer is refit on the cache unless
    `reconstruct` is off, in which case its weights are only truncated.
    """
    _check_plan(graph, plan)
    pruned = graph
    for layer_id, sparsity in plan.ratios:
        spec = pruned.layer(layer_id)
        kept = select_kept(pruned.weights[f"{layer_id}.weight"], sparsity)
        successor = pruned.successor(layer_id)
        pruned = remove_output_channels(pruned, layer_id, kept)
        if not reconstruct or kept.size == spec.c_out or successor is None:
            continue
        result = reconstruct_layer(cache.entry(successor.id), kept, np.arange(successor.c_out), ridge)
        pruned = pruned.with_layer_weights(successor.id, result.weight, result.bias)
        logger.debug(
            f"{layer_id}: kept {kept.size}/{spec.c_out} filters, "
            f"{successor.id} refit residual {result.residual:.4e}"
        )
    return pruned
