"""
Neural primitives and statistical kernels.

Tensors are float64 numpy arrays. Spatial primitives accept an optional
leading batch axis: [C,H,W] or [N,C,H,W].
"""

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage, special, stats

from .errors import (
    AllZeroAttributionError,
    InsufficientSampleError,
    ShapeMismatchError,
    UndefinedCorrelationError,
)

ArrayLike = Union[np.ndarray, Sequence[float]]

SSIM_WINDOW = 7
ENTROPY_BINS = 100
WILCOXON_MIN_NONZERO = 5
WILCOXON_EXACT_MAX_N = 25


@dataclass(frozen=True)
class StatResult:
    """Container for a test statistic and its p-value"""
    statistic: float
    p_value: float


def as_tensor(x: ArrayLike) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _batched(x: np.ndarray, ndim: int) -> Tuple[np.ndarray, bool]:
    if x.ndim == ndim:
        return x[np.newaxis], True
    if x.ndim == ndim + 1:
        return x, False
    raise ShapeMismatchError(f"expected {ndim}-d or batched {ndim + 1}-d input, got shape {x.shape}")


def _pad_spatial(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]
    return np.pad(x, widths)


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [..., H', W', kh, kw] view over the last two axes
    view = sliding_window_view(x, (kh, kw), axis=(-2, -1))
    return view[..., ::stride, ::stride, :, :]


def conv2d(input: ArrayLike, kernel: ArrayLike, bias: ArrayLike,
           stride: int = 1, pad: int = 0) -> np.ndarray:
    """Zero-padded cross-correlation: [C,H,W] x [F,C,kH,kW] -> [F,H',W']"""
    x, squeeze = _batched(as_tensor(input), 3)
    kernel = as_tensor(kernel)
    bias = as_tensor(bias)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if kernel.ndim != 4 or kernel.shape[1] != x.shape[1]:
        raise ShapeMismatchError(
            f"kernel {kernel.shape} does not match input channels {x.shape[1]}")
    if bias.shape != (kernel.shape[0],):
        raise ShapeMismatchError(f"bias {bias.shape} does not match {kernel.shape[0]} filters")
    _, _, h, w = x.shape
    kh, kw = kernel.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise ShapeMismatchError(f"kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})")

    windows = _windows(_pad_spatial(x, pad), kh, kw, stride)
    out = np.einsum("nchwij,fcij->nfhw", windows, kernel) + bias[:, None, None]
    return out[0] if squeeze else out


def conv2d_backward(grad_out: np.ndarray, input: np.ndarray, kernel: np.ndarray,
                    stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoint of conv2d on batched tensors.

    Returns (grad_input [N,C,H,W], grad_kernel [F,C,kH,kW], grad_bias [F]).
    """
    n, c, h, w = input.shape
    kh, kw = kernel.shape[2:]
    oh, ow = grad_out.shape[2:]

    windows = _windows(_pad_spatial(input, pad), kh, kw, stride)
    grad_kernel = np.einsum("nfhw,nchwij->fcij", grad_out, windows)
    grad_bias = grad_out.sum(axis=(0, 2, 3))

    grad_padded = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            grad_padded[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += \
                np.einsum("nfhw,fc->nchw", grad_out, kernel[:, :, i, j])
    grad_input = grad_padded[:, :, pad:pad + h, pad:pad + w]
    return grad_input, grad_kernel, grad_bias


def pool2d(input: ArrayLike, mode: str, window: int, stride: int,
           return_indices: bool = False):
    """Max or average pooling over square windows.

    With return_indices, max mode also returns the flat in-window argmax
    of every output cell (needed by the backward pass).
    """
    x, squeeze = _batched(as_tensor(input), 3)
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pooling mode: {mode}")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeMismatchError(f"pool window {window} larger than input {x.shape[2:]}")

    windows = _windows(x, window, window, stride)
    flat = windows.reshape(windows.shape[:4] + (window * window,))
    if mode == "max":
        argmax = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    else:
        argmax = None
        out = flat.mean(axis=-1)

    if squeeze:
        out = out[0]
        argmax = argmax[0] if argmax is not None else None
    if return_indices:
        return out, argmax
    return out


def pool2d_backward(grad_out: np.ndarray, input_shape: Tuple[int, ...], mode: str,
                    window: int, stride: int, argmax: Optional[np.ndarray] = None) -> np.ndarray:
    """Adjoint of pool2d on batched tensors; max mode routes to the recorded argmax"""
    n, c, _, _ = input_shape
    oh, ow = grad_out.shape[2:]
    grad_input = np.zeros(input_shape)
    if mode == "max":
        if argmax is None:
            raise ValueError("max pooling backward needs argmax indices")
        rows = np.arange(oh)[:, None] * stride + argmax // window
        cols = np.arange(ow)[None, :] * stride + argmax % window
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(grad_input, (nn, cc, rows, cols), grad_out)
    else:
        share = grad_out / (window * window)
        for i in range(window):
            for j in range(window):
                grad_input[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += share
    return grad_input


def dense(input: ArrayLike, weights: ArrayLike, bias: ArrayLike) -> np.ndarray:
    """W.x + b for [N] or batched [B,N] input"""
    x = as_tensor(input)
    weights = as_tensor(weights)
    bias = as_tensor(bias)
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeMismatchError(f"weights {weights.shape} do not match input {x.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeMismatchError(f"bias {bias.shape} does not match {weights.shape[0]} outputs")
    return x @ weights.T + bias


def activation(input: ArrayLike, kind: str) -> np.ndarray:
    x = as_tensor(input)
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "sigmoid":
        return special.expit(x)
    raise ValueError(f"unknown activation: {kind}")


def _resize_axis(in_size: int, out_size: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    return lo, hi, src - lo


def bilinear_resize(input: ArrayLike, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners-false bilinear interpolation over the last two axes"""
    x = as_tensor(input)
    if x.ndim < 2 or x.shape[-2] < 1 or x.shape[-1] < 1:
        raise ShapeMismatchError(f"cannot resize shape {x.shape}")
    r0, r1, fr = _resize_axis(x.shape[-2], out_h)
    c0, c1, fc = _resize_axis(x.shape[-1], out_w)

    rows = x[..., r0, :] * (1.0 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return rows[..., c0] * (1.0 - fc) + rows[..., c1] * fc


def min_max_normalize(values: ArrayLike) -> np.ndarray:
    """Rescale to [0,1]; a constant input maps to 0.5 everywhere"""
    v = as_tensor(values)
    lo, hi = v.min(), v.max()
    if hi == lo:
        return np.full_like(v, 0.5)
    return (v - lo) / (hi - lo)


def pearson_corr(a: ArrayLike, b: ArrayLike) -> float:
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.shape != b.shape or a.size < 2:
        raise ShapeMismatchError(f"pearson needs equal lengths >= 2, got {a.size} and {b.size}")
    if np.ptp(a) == 0 or np.ptp(b) == 0:
        raise UndefinedCorrelationError("correlation undefined for a zero-variance series")
    r = stats.pearsonr(a, b).statistic
    return float(np.clip(r, -1.0, 1.0))


def wilcoxon_signed_rank(a: ArrayLike, b: ArrayLike, method: Optional[str] = None) -> StatResult:
    """Two-sided paired signed-rank test with zero differences dropped.

    Exact for up to 25 non-zero differences, normal approximation with tie
    correction beyond; `method` ('exact' or 'approx') forces a path.
    """
    a = as_tensor(a).ravel()
    b = as_tensor(b).ravel()
    if a.shape != b.shape:
        raise ShapeMismatchError(f"paired samples differ in length: {a.size} vs {b.size}")
    diffs = a - b
    diffs = diffs[diffs != 0]
    if diffs.size < WILCOXON_MIN_NONZERO:
        raise InsufficientSampleError(
            f"only {diffs.size} non-zero differences, need {WILCOXON_MIN_NONZERO}", nonzero=int(diffs.size))
    if method is None:
        method = "exact" if diffs.size <= WILCOXON_EXACT_MAX_N else "approx"

    result = stats.wilcoxon(diffs, zero_method="wilcox", correction=False,
                            alternative="two-sided", method=method)
    return StatResult(statistic=float(result.statistic), p_value=float(np.clip(result.pvalue, 0.0, 1.0)))


def ssim(a: ArrayLike, b: ArrayLike, data_range: float = 1.0, window: int = SSIM_WINDOW) -> float:
    """Mean structural similarity over all valid uniform window positions"""
    a = as_tensor(a)
    b = as_tensor(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ShapeMismatchError(f"ssim needs equal 2-d shapes, got {a.shape} and {b.shape}")
    if min(a.shape) < window:
        raise ShapeMismatchError(f"image {a.shape} smaller than {window}x{window} window")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2

    def local_mean(x):
        return ndimage.uniform_filter(x, size=window)

    mu_a = local_mean(a)
    mu_b = local_mean(b)
    var_a = local_mean(a * a) - mu_a * mu_a
    var_b = local_mean(b * b) - mu_b * mu_b
    cov = local_mean(a * b) - mu_a * mu_b

    index = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    half = window // 2
    valid = index[half:a.shape[0] - half, half:a.shape[1] - half]
    return float(np.clip(valid.mean(), -1.0, 1.0))


def histogram_entropy(values: ArrayLike, bins: int = ENTROPY_BINS) -> float:
    """Shannon entropy (nats) of an equal-width histogram over [min, max]"""
    v = as_tensor(values).ravel()
    if bins < 2 or v.size < 1:
        raise ValueError(f"need bins >= 2 and at least one value, got bins={bins}, n={v.size}")
    lo, hi = v.min(), v.max()
    if lo == hi:
        return 0.0
    counts, _ = np.histogram(v, bins=bins, range=(lo, hi))
    return float(stats.entropy(counts[counts > 0]))


def gini_index(values: ArrayLike) -> float:
    v = np.sort(as_tensor(values).ravel())
    if v.size and v[0] < 0:
        raise ValueError("gini index needs non-negative values")
    total = v.sum()
    if total == 0:
        raise AllZeroAttributionError("gini index undefined for an all-zero vector")
    d = v.size
    ranks = np.arange(1, d + 1)
    return float(np.dot(2 * ranks - d - 1, v) / (d * total))
