"""Dense array primitives and seeded random streams.

Arrays are plain row-major numpy ndarrays. Every helper here refuses to hand
back NaN or Inf: a non-finite result raises ``NumericOverflowError``.
"""
from __future__ import annotations

import numpy as np

from .errors import DimensionError, NumericOverflowError, ParameterError


def check_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.isfinite(x).all():
        raise NumericOverflowError(f"non-finite values in {what}")
    return x


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    with np.errstate(over="ignore", invalid="ignore"):
        c = a @ b
    return check_finite(c, "matmul result")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int):
    # x: (B, C, H, W) -> view (B, C, oh, ow, kh, kw)
    if kh < 1 or kw < 1 or stride < 1 or pad < 0:
        raise ParameterError(f"bad window geometry k=({kh},{kw}) stride={stride} pad={pad}")
    _, _, h, w = x.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def im2col(x: np.ndarray, kernel_hw: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unfold receptive fields into columns.

    A ``(C, H, W)`` input gives ``(C*kh*kw, L)``; a batched ``(B, C, H, W)``
    input gives ``(C*kh*kw, B*L)`` with columns ordered batch-major. Rows are
    ordered (channel, kernel row, kernel col), matching a weight tensor of
    shape ``(out_ch, C, kh, kw)`` reshaped to ``(out_ch, C*kh*kw)``.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise DimensionError(f"im2col expects a 3-D or 4-D input, got shape {x.shape}")
    kh, kw = kernel_hw
    win = _windows(x, kh, kw, stride, pad)
    b, c, oh, ow = win.shape[:4]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, b * oh * ow)
    return np.ascontiguousarray(cols)


def col2im(cols: np.ndarray, input_shape, kernel_hw, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Scatter-add columns back onto an input-shaped array (adjoint of im2col)."""
    single = len(input_shape) == 3
    shape4 = (1, *input_shape) if single else tuple(input_shape)
    b, c, h, w = shape4
    kh, kw = kernel_hw
    oh = conv_output_size(h, kh, stride, pad)
    ow = conv_output_size(w, kw, stride, pad)
    cols = cols.reshape(c, kh, kw, b, oh, ow)
    out = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += (
                cols[:, i, j].transpose(1, 0, 2, 3)
            )
    if pad:
        out = out[:, :, pad:-pad, pad:-pad]
    return out[0] if single else out


class RngStream:
    """Seeded random stream; substreams are derived, never shared."""

    def __init__(self, seed: int, key: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = int(seed)
        self.key = tuple(int(k) for k in key)
        self.gen = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence(self.seed, spawn_key=self.key))
        )

    def derive(self, *key: int) -> "RngStream":
        return RngStream(self.seed, self.key + tuple(key))

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n: int) -> np.ndarray:
        return self.gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, key={self.key})"


def sample_normal(rng: RngStream, mean: float, stddev: float, shape, dtype=np.float64) -> np.ndarray:
    if stddev < 0:
        raise ParameterError(f"stddev must be >= 0, got {stddev}")
    z = rng.gen.standard_normal(shape)
    return (mean + stddev * z).astype(dtype)
