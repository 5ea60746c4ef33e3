"""
Dense tensor arithmetic for chain CNNs.

Forward and backward passes for conv/linear/pool/activation layers, patch
extraction and a ridge-regularized least-squares solver. Tensors are plain
numpy arrays: activations are N×C×H×W, conv weights Cout×Cin×Kh×Kw, linear
weights out×in. Dot products and the solver accumulate in float64; results
are cast back to the input dtype.
"""

import logging
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import linalg

from app.models.tensors import LayerParams, LeastSquaresResult, PatchMatrix
from app.schemas import LayerKind

logger = logging.getLogger(__name__)

# Relative pivot size below which a Cholesky factor is treated as singular.
SINGULAR_PIVOT_RTOL = 1e-7


# ============== EXCEPTIONS ==============

class ShapeError(ValueError):
    """Raised when tensor extents do not fit the requested operation."""
    pass


class MissingCacheError(ValueError):
    """Raised when a backward pass has no cached forward input."""
    pass


class UnsupportedLayerError(ValueError):
    pass


# ============== GEOMETRY ==============

def _check_rank(tensor: np.ndarray, rank: int, name: str) -> None:
    if tensor.ndim != rank:
        raise ShapeError(f"{name} must be rank {rank}, got shape {tensor.shape}")


def conv_output_extent(size: int, kernel: int, stride: int, pad: int) -> int:
    """Output extent of a strided window; rejects geometries that do not tile exactly."""
    if stride < 1 or pad < 0:
        raise ShapeError(f"invalid stride {stride} / pad {pad}")
    span = size + 2 * pad - kernel
    if span < 0:
        raise ShapeError(f"kernel {kernel} larger than padded extent {size + 2 * pad}")
    if span % stride != 0:
        raise ShapeError(
            f"extent {size} with kernel {kernel}, stride {stride}, pad {pad} "
            f"gives a non-integer output extent"
        )
    return span // stride + 1


def im2col(
    x: np.ndarray,
    kh: int,
    kw: int,
    stride: int = 1,
    pad: int = 0,
    positions: Optional[Sequence[int] | np.ndarray] = None,
    layer_id: Optional[str] = None,
) -> PatchMatrix:
    """
    Unfold receptive fields into rows.

    Row r holds the zero-padded field for output position r, positions being
    enumerated sample-major then row-major (n, oy, ox). Columns are ordered
    (c, ky, kx), matching `weight.reshape(Cout, -1)`. Every row records the
    sample it came from and its flat output position.
    """
    _check_rank(x, 4, "input")
    n, c, h, w = x.shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)

    padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # n, c, oh, ow, kh, kw
    windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]

    if positions is None:
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * oh * ow, c * kh * kw)
        return PatchMatrix(
            data=np.ascontiguousarray(cols),
            layer_id=layer_id,
            sample_ids=np.repeat(np.arange(n), oh * ow),
            positions=np.arange(n * oh * ow),
        )

    positions = np.asarray(positions, dtype=np.int64).reshape(-1)
    total = n * oh * ow
    if positions.size and (positions.min() < 0 or positions.max() >= total):
        raise ShapeError(f"position index out of range [0, {total})")
    sample, rest = np.divmod(positions, oh * ow)
    oy, ox = np.divmod(rest, ow)
    cols = windows[sample, :, oy, ox].reshape(positions.size, c * kh * kw)
    return PatchMatrix(data=np.ascontiguousarray(cols), layer_id=layer_id, sample_ids=sample, positions=positions)


def col2im(
    cols: np.ndarray,
    x_shape: tuple[int, int, int, int],
    kh: int,
    kw: int,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    """Scatter-add patch rows back onto an input-shaped tensor (adjoint of im2col)."""
    n, c, h, w = x_shape
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)
    cols = cols.reshape(n, oh, ow, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)

    padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        i_end = i + stride * oh
        for j in range(kw):
            j_end = j + stride * ow
            padded[:, :, i:i_end:stride, j:j_end:stride] += cols[:, :, i, j, :, :]
    return padded[:, :, pad:pad + h, pad:pad + w]


# ============== LAYERS ==============

def conv2d_forward(
    x: np.ndarray,
    weight: np.ndarray,
    bias: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> np.ndarray:
    _check_rank(x, 4, "input")
    _check_rank(weight, 4, "conv weight")
    cout, cin, kh, kw = weight.shape
    n, c, h, w = x.shape
    if c != cin:
        raise ShapeError(f"conv weight {weight.shape} expects {cin} input channels, input has shape {x.shape}")
    if bias.shape != (cout,):
        raise ShapeError(f"conv bias must have shape ({cout},), got {bias.shape}")
    oh = conv_output_extent(h, kh, stride, pad)
    ow = conv_output_extent(w, kw, stride, pad)

    cols = im2col(x, kh, kw, stride, pad).data.astype(np.float64)
    out = cols @ weight.reshape(cout, -1).astype(np.float64).T + bias.astype(np.float64)
    return out.reshape(n, oh, ow, cout).transpose(0, 3, 1, 2).astype(x.dtype)


def conv2d_backward(
    x: np.ndarray,
    weight: np.ndarray,
    dout: np.ndarray,
    stride: int = 1,
    pad: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cout, cin, kh, kw = weight.shape
    cols = im2col(x, kh, kw, stride, pad).data.astype(np.float64)
    dout_rows = dout.transpose(0, 2, 3, 1).reshape(-1, cout).astype(np.float64)

    db = dout_rows.sum(axis=0)
    dw = (dout_rows.T @ cols).reshape(weight.shape)
    dcols = dout_rows @ weight.reshape(cout, -1).astype(np.float64)
    dx = col2im(dcols, x.shape, kh, kw, stride, pad)
    return dx.astype(x.dtype), dw.astype(weight.dtype), db.astype(weight.dtype)


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    _check_rank(x, 2, "linear input")
    _check_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear weight {weight.shape} expects {weight.shape[1]} features, input has shape {x.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"linear bias must have shape ({weight.shape[0]},), got {bias.shape}")
    out = x.astype(np.float64) @ weight.astype(np.float64).T + bias.astype(np.float64)
    return out.astype(x.dtype)


def linear_backward(
    x: np.ndarray, weight: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    dout64 = dout.astype(np.float64)
    dx = dout64 @ weight.astype(np.float64)
    dw = dout64.T @ x.astype(np.float64)
    db = dout64.sum(axis=0)
    return dx.astype(x.dtype), dw.astype(weight.dtype), db.astype(weight.dtype)


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: np.ndarray, dout: np.ndarray) -> np.ndarray:
    return (dout * (x > 0)).astype(x.dtype, copy=False)


def _pool_windows(x: np.ndarray, k: int) -> np.ndarray:
    """Reshape N×C×H×W into N×C×H'×W'×(k·k) non-overlapping windows."""
    _check_rank(x, 4, "pool input")
    n, c, h, w = x.shape
    oh = conv_output_extent(h, k, k, 0)
    ow = conv_output_extent(w, k, k, 0)
    return x.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)


def _unpool_windows(windows: np.ndarray, x_shape: tuple[int, ...], k: int) -> np.ndarray:
    n, c, h, w = x_shape
    oh, ow = h // k, w // k
    return windows.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


def maxpool_forward(x: np.ndarray, k: int = 2) -> np.ndarray:
    return _pool_windows(x, k).max(axis=-1)


def maxpool_backward(x: np.ndarray, dout: np.ndarray, k: int = 2) -> np.ndarray:
    windows = _pool_windows(x, k)
    # ties route the gradient to the first maximum only
    winners = windows.argmax(axis=-1)[..., None]
    dwindows = np.zeros_like(windows)
    np.put_along_axis(dwindows, winners, dout[..., None].astype(x.dtype), axis=-1)
    return _unpool_windows(dwindows, x.shape, k)


def avgpool_forward(x: np.ndarray, k: int = 2) -> np.ndarray:
    return _pool_windows(x, k).astype(np.float64).mean(axis=-1).astype(x.dtype)


def avgpool_backward(x: np.ndarray, dout: np.ndarray, k: int = 2) -> np.ndarray:
    share = (dout.astype(np.float64) / (k * k))[..., None]
    dwindows = np.broadcast_to(share, dout.shape + (k * k,))
    return _unpool_windows(np.ascontiguousarray(dwindows), x.shape, k).astype(x.dtype)


def layer_forward(kind: LayerKind, x: np.ndarray, params: LayerParams) -> np.ndarray:
    """Apply one layer of the given kind."""
    match kind:
        case LayerKind.CONV:
            return conv2d_forward(x, params.weight, params.bias, params.stride, params.pad)
        case LayerKind.LINEAR:
            return linear_forward(x, params.weight, params.bias)
        case LayerKind.RELU:
            return relu_forward(x)
        case LayerKind.MAXPOOL:
            return maxpool_forward(x, params.pool)
        case LayerKind.AVGPOOL:
            return avgpool_forward(x, params.pool)
        case LayerKind.FLATTEN:
            return x.reshape(x.shape[0], -1)
    raise UnsupportedLayerError(f"unsupported layer kind: {kind}")


def layer_backward(
    kind: LayerKind,
    cached_input: Optional[np.ndarray],
    dout: np.ndarray,
    params: LayerParams,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """
    Backward pass of one layer.

    Args:
        kind: layer kind
        cached_input: the tensor that was passed to the matching forward call
        dout: gradient of the loss with respect to the layer output
        params: the same parameters used in the forward call

    Returns:
        (input gradient, {"weight": ..., "bias": ...} for parameterized layers, else {})
    """
    if cached_input is None:
        raise MissingCacheError(f"{kind} backward called without a cached forward input")

    match kind:
        case LayerKind.CONV:
            dx, dw, db = conv2d_backward(cached_input, params.weight, dout, params.stride, params.pad)
            return dx, {"weight": dw, "bias": db}
        case LayerKind.LINEAR:
            dx, dw, db = linear_backward(cached_input, params.weight, dout)
            return dx, {"weight": dw, "bias": db}
        case LayerKind.RELU:
            return relu_backward(cached_input, dout), {}
        case LayerKind.MAXPOOL:
            return maxpool_backward(cached_input, dout, params.pool), {}
        case LayerKind.AVGPOOL:
            return avgpool_backward(cached_input, dout, params.pool), {}
        case LayerKind.FLATTEN:
            return dout.reshape(cached_input.shape), {}
    raise UnsupportedLayerError(f"unsupported layer kind: {kind}")


# ============== LEAST SQUARES ==============

def _spd_solve(gram: np.ndarray, rhs: np.ndarray, ridge: float) -> Optional[np.ndarray]:
    """Cholesky solve of (gram + ridge·I) W = rhs; None when the system is numerically singular."""
    system = gram + ridge * np.eye(gram.shape[0])
    try:
        factor, lower = linalg.cho_factor(system, lower=False, check_finite=True)
    except linalg.LinAlgError:
        return None
    pivots = np.abs(np.diag(factor))
    if ridge == 0.0 and pivots.min() <= SINGULAR_PIVOT_RTOL * pivots.max():
        return None
    return linalg.cho_solve((factor, lower), rhs)


def least_squares(x: np.ndarray, y: np.ndarray, ridge: float = 0.0) -> LeastSquaresResult:
    """
    Minimize ‖XW − Y‖² + ridge·‖W‖² through the normal equations.

    A singular system at ridge 0 is retried with ridge = 1e-6·trace(XᵀX)/P and
    the result is flagged as a fallback.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y[:, None]
    if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
        raise ShapeError(f"design matrix must be M×P with M, P ≥ 1, got shape {x.shape}")
    if y.ndim != 2 or y.shape[0] != x.shape[0]:
        raise ShapeError(f"targets {y.shape} do not align with design matrix {x.shape}")
    if ridge < 0:
        raise ValueError(f"ridge must be nonnegative, got {ridge}")

    m, p = x.shape
    gram = x.T @ x
    rhs = x.T @ y
    underdetermined = m < p

    weights = _spd_solve(gram, rhs, ridge)
    if weights is not None:
        return LeastSquaresResult(weights=weights, ridge=ridge, underdetermined=underdetermined)
    if ridge > 0:
        raise linalg.LinAlgError(f"regularized normal equations are singular (ridge={ridge})")

    fallback = 1e-6 * float(np.trace(gram)) / p
    if fallback <= 0.0:
        fallback = 1e-6
    logger.warning(f"Singular normal equations ({m}×{p}); retrying with ridge {fallback:.3e}")
    weights = _spd_solve(gram, rhs, fallback)
    if weights is None:
        raise linalg.LinAlgError(f"normal equations stay singular at fallback ridge {fallback:.3e}")
    return LeastSquaresResult(weights=weights, ridge=fallback, fallback=True, underdetermined=underdetermined)
