"""
Spatial entropy of activation maps.

Each channel is min-max quantized into B bins. Its aggregation entropy (AME)
is the mean, over the four nearest-neighbor offsets, of the relative increase
of the joint (bivariate) entropy of neighboring cells over the univariate
entropy of the grid. All entropies are in bits.
"""

import logging
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy import special, stats
from skimage.feature import graycomatrix

from app.logic.graph import ModelGraph
from app.models.configs import EntropyConfig
from app.models.entropy import EntropyReport, JointHistogram, LayerEntropy, QuantizedGrid
from app.schemas import GridStatus

logger = logging.getLogger(__name__)

# Largest grid (H·W) for which the full pairwise spatial entropy is evaluated.
SDE_MAX_CELLS = 4096


# ============== EXCEPTIONS ==============

class EntropyError(ValueError):
    """Raised for inputs entropy cannot be defined on."""
    pass


class ExcludedGridError(EntropyError):
    """Raised when an all-zero or constant channel reaches an entropy computation."""
    pass


class SdeSizeError(EntropyError):
    pass


# ============== QUANTIZATION ==============

def _quantize_maps(maps: np.ndarray, bins: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Quantize a stack of M×H×W maps independently.

    Returns (cells, valid, all_zero); cells of excluded maps are zero.
    """
    maps = maps.astype(np.float64)
    lo = maps.min(axis=(1, 2))
    hi = maps.max(axis=(1, 2))
    all_zero = ~np.any(maps != 0.0, axis=(1, 2))
    valid = (hi > lo) & ~all_zero
    span = np.where(valid, hi - lo, 1.0)
    scaled = (maps - lo[:, None, None]) / span[:, None, None] * bins
    cells = np.minimum(np.floor(scaled).astype(np.int64), bins - 1)
    cells[~valid] = 0
    return cells, valid, all_zero


def _check_grid_shape(height: int, width: int) -> None:
    if height < 2 or width < 2:
        raise EntropyError(f"spatial entropy needs at least a 2×2 grid, got {height}×{width}")


def quantize_channel(channel: np.ndarray, bins: int) -> QuantizedGrid:
    channel = np.asarray(channel)
    if channel.ndim != 2:
        raise EntropyError(f"channel must be a 2-D map, got shape {channel.shape}")
    if bins < 2:
        raise EntropyError(f"need at least 2 bins, got {bins}")
    height, width = channel.shape
    _check_grid_shape(height, width)

    cells, valid, all_zero = _quantize_maps(channel[None], bins)
    if all_zero[0]:
        status = GridStatus.EXCLUDED_ALL_ZERO
    elif not valid[0]:
        status = GridStatus.EXCLUDED_CONSTANT
    else:
        status = GridStatus.VALID
    return QuantizedGrid(height=height, width=width, cells=cells[0], bins=bins, status=status)


# ============== ENTROPIES ==============

def _require_valid(grid: QuantizedGrid) -> None:
    if not grid.valid:
        raise ExcludedGridError(f"grid is excluded from entropy ({grid.status})")


def _offset_views(cells: np.ndarray, dk: int, dl: int) -> tuple[np.ndarray, np.ndarray]:
    """Aligned views over the last two axes: src[..., i, j] pairs with cells[..., i+dk, j+dl]."""
    h, w = cells.shape[-2:]
    src = cells[..., max(0, -dk):h - max(0, dk), max(0, -dl):w - max(0, dl)]
    dst = cells[..., max(0, dk):h - max(0, -dk), max(0, dl):w - max(0, -dl)]
    return src, dst


@lru_cache(maxsize=1)
def _glcm_row_sign() -> int:
    """Row direction graycomatrix steps in for a positive angle (+1 is downward)."""
    column = np.array([[0], [1]], dtype=np.uint8)
    counts = graycomatrix(column, distances=[1], angles=[np.pi / 2], levels=2)[:, :, 0, 0]
    return 1 if counts[0, 1] else -1


def _glcm_geometry(dk: int, dl: int) -> tuple[float, float]:
    """(distance, angle) making graycomatrix pair cell (i, j) with (i + dk, j + dl)."""
    return float(np.hypot(dk, dl)), float(np.arctan2(_glcm_row_sign() * dk, dl))


def univariate_entropy(grid: QuantizedGrid) -> float:
    _require_valid(grid)
    return float(stats.entropy(np.bincount(grid.cells.ravel(), minlength=grid.bins), base=2))


def joint_distribution(grid: QuantizedGrid, offset: tuple[int, int]) -> JointHistogram:
    """Bin-pair counts of (cell, cell + offset) over all in-bounds positions."""
    _require_valid(grid)
    dk, dl = offset
    if abs(dk) >= grid.height or abs(dl) >= grid.width:
        raise EntropyError(f"offset {offset} leaves no in-bounds pairs on a {grid.height}×{grid.width} grid")
    distance, angle = _glcm_geometry(dk, dl)
    matrix = graycomatrix(
        grid.cells.astype(np.uint16),
        distances=[distance],
        angles=[angle],
        levels=grid.bins,
        symmetric=False,
        normed=False,
    )
    counts = matrix[:, :, 0, 0].astype(np.int64)
    return JointHistogram(offset=(dk, dl), counts=counts, pair_count=int(counts.sum()))


def bivariate_entropy(histogram: JointHistogram) -> float:
    return float(stats.entropy(histogram.counts.ravel(), base=2))


def relative_entropy(joint: float, univariate: float) -> float:
    """(H(k,l) − H0) / H0, clamped to [0, 1]."""
    if univariate <= 0.0:
        raise EntropyError("relative entropy is undefined for a zero-entropy grid")
    return float(np.clip((joint - univariate) / univariate, 0.0, 1.0))


def ame(channel: np.ndarray, config: EntropyConfig) -> Optional[float]:
    """Aggregation entropy of one channel; None for all-zero or constant maps."""
    grid = quantize_channel(channel, config.bins)
    if not grid.valid:
        return None
    h0 = univariate_entropy(grid)
    total = 0.0
    for offset in config.offsets:
        total += relative_entropy(bivariate_entropy(joint_distribution(grid, offset)), h0)
    return total / len(config.offsets)


def sde_terms(channel: np.ndarray, config: EntropyConfig) -> dict[tuple[int, int], float]:
    """Relative entropy for every nonzero offset that fits inside the grid."""
    grid = quantize_channel(channel, config.bins)
    _require_valid(grid)
    if grid.height * grid.width > SDE_MAX_CELLS:
        raise SdeSizeError(
            f"full spatial entropy is limited to {SDE_MAX_CELLS} cells, got {grid.height}×{grid.width}"
        )
    h0 = univariate_entropy(grid)
    terms: dict[tuple[int, int], float] = {}
    for dk in range(-grid.height + 1, grid.height):
        for dl in range(-grid.width + 1, grid.width):
            if (dk, dl) == (0, 0):
                continue
            terms[(dk, dl)] = relative_entropy(bivariate_entropy(joint_distribution(grid, (dk, dl))), h0)
    return terms


def sde(channel: np.ndarray, config: EntropyConfig) -> float:
    """
    Spatial entropy over all position pairs.

    Equivalent to (1/HW)·Σ over position pairs of H_R(displacement): each offset
    contributes once per in-bounds pair, and the zero offset contributes nothing.
    """
    terms = sde_terms(channel, config)
    height, width = np.asarray(channel).shape
    total = 0.0
    for (dk, dl), value in terms.items():
        total += (height - abs(dk)) * (width - abs(dl)) * value
    return total / (height * width)


# ============== LAYERS ==============

def _grouped_entropy(codes: np.ndarray, groups: int, stride: int, per_group_total: int) -> np.ndarray:
    """Entropy per group, where code // stride identifies the group."""
    uniq, counts = np.unique(codes, return_counts=True)
    bits = special.entr(counts / per_group_total) / np.log(2.0)
    return np.bincount(uniq // stride, weights=bits, minlength=groups)


def batch_ame(maps: np.ndarray, config: EntropyConfig) -> np.ndarray:
    """
    AME of every map in an M×H×W stack, NaN where the map is excluded.

    Matches `ame` map by map; histograms of all maps are built in one pass.
    """
    maps = np.asarray(maps)
    if maps.ndim != 3:
        raise EntropyError(f"expected an M×H×W stack, got shape {maps.shape}")
    _check_grid_shape(*maps.shape[1:])
    bins = config.bins
    values = np.full(maps.shape[0], np.nan)
    cells, valid, _ = _quantize_maps(maps, bins)
    cells = cells[valid]
    m, h, w = cells.shape
    if m == 0:
        return values

    map_ids = np.arange(m, dtype=np.int64)[:, None, None]
    h0 = _grouped_entropy((map_ids * bins + cells).ravel(), m, bins, h * w)
    total = np.zeros(m)
    for dk, dl in config.offsets:
        src, dst = _offset_views(cells, dk, dl)
        codes = (map_ids * bins + src) * bins + dst
        joint = _grouped_entropy(codes.ravel(), m, bins * bins, src.shape[1] * src.shape[2])
        total += np.clip((joint - h0) / h0, 0.0, 1.0)
    values[valid] = total / len(config.offsets)
    return values


def summarize_layer(layer_id: str, activations: np.ndarray, config: EntropyConfig) -> LayerEntropy:
    activations = np.asarray(activations)
    if activations.ndim != 4:
        raise EntropyError(f"{layer_id}: activations must be N×C×H×W, got shape {activations.shape}")
    n, c, h, w = activations.shape
    values = batch_ame(activations.reshape(n * c, h, w), config)
    kept = values[~np.isnan(values)]
    mean = float(kept.mean()) if kept.size else 0.0
    if not kept.size:
        logger.warning(f"{layer_id}: every channel is all-zero or constant; entropy taken as 0")
    return LayerEntropy(
        layer_id=layer_id,
        mean_ame=mean,
        valid_channels=int(kept.size),
        excluded_channels=int(values.size - kept.size),
    )


def layer_entropy(activations: np.ndarray, config: EntropyConfig) -> float:
    """Mean AME over all (sample, channel) maps of one layer's output, excluded maps skipped."""
    return summarize_layer("layer", activations, config).mean_ame


def entropy_layers(graph: ModelGraph, config: EntropyConfig) -> list[str]:
    """Convolutions whose rectified outputs enter the network entropy."""
    conv_ids = graph.conv_ids
    if not conv_ids:
        raise EntropyError(f"{graph.arch} has no convolutional layers to measure")
    if config.layers is None:
        return conv_ids
    unknown = [layer_id for layer_id in config.layers if layer_id not in conv_ids]
    if unknown:
        raise EntropyError(f"entropy layers {unknown} are not convolutions of {graph.arch}")
    return list(config.layers)


def entropy_report(graph: ModelGraph, batch: np.ndarray, config: EntropyConfig) -> EntropyReport:
    conv_ids = entropy_layers(graph, config)
    capture = {graph.activation_id(conv_id): conv_id for conv_id in conv_ids}
    captured = graph.forward(batch, capture=capture.keys()).captured
    layers = [summarize_layer(conv_id, captured[act_id], config) for act_id, conv_id in capture.items()]
    network_mean = float(np.mean([layer.mean_ame for layer in layers]))
    return EntropyReport(layers=layers, network_mean=network_mean, bins=config.bins, samples=len(batch))


def network_entropy_reward(
    graph: ModelGraph,
    batch: np.ndarray,
    config: EntropyConfig,
    maximize: bool = False,
) -> float:
    """1 − mean layer AME; the mean itself when `maximize` is set."""
    report = entropy_report(graph, batch, config)
    logger.debug(f"Network entropy {report.network_mean:.4f} over {len(report.layers)} layers")
    return report.network_mean if maximize else 1.0 - report.network_mean
