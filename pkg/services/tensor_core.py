"""Dense rank-4 tensors (N, C, H, W) and the raw compute kernels.

Tensors are plain numpy arrays in row-major NCHW layout. Convolution lowers
to im2col over a strided window view followed by one tensordot, so every
output element is an independent reduction and results are reproducible at
a fixed BLAS thread count.
"""

from __future__ import annotations

import logging
from typing import Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray

from .errors import ArgumentError, ShapeError


logger = logging.getLogger(__name__)

Tensor4 = NDArray[np.floating]

_DTYPE: type = np.float32


def set_precision(bits: int) -> None:
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ArgumentError(f"Unsupported precision: {bits} (use 32 or 64)")
    logger.debug("Element precision set to float%d", bits)


def get_dtype() -> type:
    return _DTYPE


def as_tensor4(x, name: str = "x") -> Tensor4:
    arr = np.asarray(x)
    if arr.ndim != 4:
        raise ShapeError(f"{name} must be rank-4 (N, C, H, W), got shape {arr.shape}")
    if min(arr.shape) <= 0:
        raise ArgumentError(f"{name} has non-positive dims {arr.shape}")
    if arr.dtype != _DTYPE:
        arr = arr.astype(_DTYPE)
    return arr


def zeros4(n: int, c: int, h: int, w: int) -> Tensor4:
    return np.zeros((n, c, h, w), dtype=_DTYPE)


def out_size(in_size: int, kernel: int, pad: int, stride: int) -> int:
    return (in_size + 2 * pad - kernel) // stride + 1


# -----------------------------
# Random numbers
# -----------------------------


class Rng:
    """Seeded random stream. Identical seeds give identical streams."""

    def __init__(self, seed: int) -> None:
        if not 0 <= int(seed) < 2**64:
            raise ArgumentError(f"Seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def fork(self, stream: int) -> "Rng":
        """Independent child stream derived from this seed and a stream number."""
        child = np.random.SeedSequence(entropy=self.seed, spawn_key=(int(stream),))
        return Rng(int(child.generate_state(1, dtype=np.uint64)[0]))


def rng_gaussian(rng: Rng, std: float, shape: Sequence[int]) -> NDArray[np.floating]:
    if not std > 0:
        raise ArgumentError(f"Gaussian std must be positive, got {std}")
    return rng.generator.normal(0.0, std, size=tuple(shape)).astype(_DTYPE)


def rng_uniform_int(rng: Rng, lo: int, hi: int, shape: Sequence[int]) -> NDArray[np.integer]:
    """Discrete uniform samples on the closed range [lo, hi]."""
    if lo > hi:
        raise ArgumentError(f"Invalid integer range [{lo}, {hi}]")
    return rng.generator.integers(lo, hi, size=tuple(shape), endpoint=True)


# -----------------------------
# Convolution
# -----------------------------


def _check_conv_args(x: Tensor4, w: NDArray, stride: int, pad: int) -> Tuple[int, int, int, int]:
    if w.ndim != 4:
        raise ShapeError(f"Weight tensor must be (Cout, Cin, F, F), got shape {w.shape}")
    cout, cin, fh, fw = w.shape
    if fh != fw:
        raise ShapeError(f"Kernels must be square, got {fh}x{fw}")
    if x.shape[1] != cin:
        raise ShapeError(f"Input has {x.shape[1]} channels but weights expect {cin}")
    if stride not in (1, 2):
        raise ArgumentError(f"Stride must be 1 or 2, got {stride}")
    if pad < 0:
        raise ArgumentError(f"Padding must be non-negative, got {pad}")
    if min(w.shape) <= 0:
        raise ArgumentError(f"Weight tensor has non-positive dims {w.shape}")
    oh = out_size(x.shape[2], fh, pad, stride)
    ow = out_size(x.shape[3], fw, pad, stride)
    if oh <= 0 or ow <= 0:
        raise ArgumentError(f"Kernel {fh}x{fw} does not fit input {x.shape[2:]} with pad {pad}")
    return cout, fh, oh, ow


def _pad_spatial(x: Tensor4, pad: int) -> Tensor4:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), mode="constant")


def im2col(x: Tensor4, kernel: int, stride: int, pad: int) -> NDArray:
    """Window view of shape (N, C, OH, OW, F, F); no copy is made."""
    xp = _pad_spatial(x, pad)
    windows = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))
    return windows[:, :, ::stride, ::stride]


def col2im(cols: NDArray, x_shape: Tuple[int, ...], kernel: int, stride: int, pad: int) -> Tensor4:
    """Scatter-add (N, C, OH, OW, F, F) window gradients back to an (N, C, H, W) input."""
    n, c, h, w = x_shape
    oh, ow = cols.shape[2], cols.shape[3]
    dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kernel):
        for j in range(kernel):
            dxp[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, :, :, i, j]
    if pad == 0:
        return dxp
    return dxp[:, :, pad : pad + h, pad : pad + w]


def conv2d_forward(x: Tensor4, w: NDArray, stride: int = 1, pad: int = 0) -> Tensor4:
    x = as_tensor4(x)
    w = np.asarray(w, dtype=x.dtype)
    _check_conv_args(x, w, stride, pad)
    cols = im2col(x, w.shape[2], stride, pad)
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward(
    x: Tensor4, w: NDArray, dy: Tensor4, stride: int = 1, pad: int = 0
) -> Tuple[Tensor4, NDArray]:
    x = as_tensor4(x)
    w = np.asarray(w, dtype=x.dtype)
    cout, kernel, oh, ow = _check_conv_args(x, w, stride, pad)
    dy = np.asarray(dy, dtype=x.dtype)
    expected = (x.shape[0], cout, oh, ow)
    if dy.shape != expected:
        raise ShapeError(f"Output gradient has shape {dy.shape}, expected {expected}")

    cols = im2col(x, kernel, stride, pad)
    dw = np.tensordot(dy, cols, axes=([0, 2, 3], [0, 2, 3]))
    # (N, OH, OW, Cin, F, F) -> (N, Cin, OH, OW, F, F)
    dcols = np.tensordot(dy, w, axes=([1], [0])).transpose(0, 3, 1, 2, 4, 5)
    dx = col2im(dcols, x.shape, kernel, stride, pad)
    return np.ascontiguousarray(dx), np.ascontiguousarray(dw)


# -----------------------------
# Pooling
# -----------------------------

POOL_KERNEL = 3
POOL_STRIDE = 2
POOL_PAD = 1


def _pool_counts(h: int, w: int, dtype) -> NDArray:
    """Number of in-image elements under each pooling window, shape (OH, OW)."""
    ones = np.ones((1, 1, h, w), dtype=dtype)
    return im2col(ones, POOL_KERNEL, POOL_STRIDE, POOL_PAD).sum(axis=(4, 5))[0, 0]


def avg_pool(x: Tensor4) -> Tensor4:
    """3x3 stride-2 average pooling; zero padding is excluded from each divisor."""
    x = as_tensor4(x)
    if x.shape[2] < 2 or x.shape[3] < 2:
        raise ShapeError(f"avg_pool needs H, W >= 2, got {x.shape[2:]}")
    sums = im2col(x, POOL_KERNEL, POOL_STRIDE, POOL_PAD).sum(axis=(4, 5))
    return np.ascontiguousarray(sums / _pool_counts(x.shape[2], x.shape[3], x.dtype))


def avg_pool_backward(x_shape: Tuple[int, ...], dy: Tensor4) -> Tensor4:
    n, c, h, w = x_shape
    counts = _pool_counts(h, w, dy.dtype)
    expected = (n, c, counts.shape[0], counts.shape[1])
    if dy.shape != expected:
        raise ShapeError(f"Output gradient has shape {dy.shape}, expected {expected}")
    share = dy / counts
    cols = np.broadcast_to(share[..., None, None], share.shape + (POOL_KERNEL, POOL_KERNEL))
    return np.ascontiguousarray(col2im(cols, x_shape, POOL_KERNEL, POOL_STRIDE, POOL_PAD))


def global_avg_pool(x: Tensor4) -> Tensor4:
    x = as_tensor4(x)
    return x.mean(axis=(2, 3), keepdims=True)


def global_avg_pool_backward(x_shape: Tuple[int, ...], dy: Tensor4) -> Tensor4:
    n, c, h, w = x_shape
    if dy.shape != (n, c, 1, 1):
        raise ShapeError(f"Output gradient has shape {dy.shape}, expected {(n, c, 1, 1)}")
    return np.ascontiguousarray(np.broadcast_to(dy / (h * w), x_shape))
