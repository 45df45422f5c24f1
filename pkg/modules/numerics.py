"""
Numerics Module
Dense kernels every other module builds on: convolution, linear maps,
row softmax, unfold/fold, separable resampling and the 2-D FFT.

All kernels are pure functions of numpy arrays. A "Tensor" is a plain
``numpy.ndarray`` of rank <= 4; images and feature maps are [C, H, W].
Each kernel that takes part in training also exposes its vector-Jacobian
product (``*_backward``) for the autodiff module.
"""

import logging
from dataclasses import dataclass
from typing import NamedTuple, Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, NumericalError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

RESIZE_MODES = ("nearest", "bilinear", "bicubic")
BICUBIC_A = -0.5


class ComplexTensor(NamedTuple):
    """Real and imaginary planes of a complex-valued tensor"""
    real: np.ndarray
    imag: np.ndarray

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.real.shape

    def to_complex(self) -> np.ndarray:
        return self.real + 1j * self.imag


@dataclass(frozen=True)
class GridMeta:
    """Geometry of an unfolded patch grid, enough to fold rows back into an image"""
    patch: int
    stride: int
    pad: int
    gh: int
    gw: int
    channels: int
    height: int
    width: int

    @classmethod
    def for_image(cls, channels: int, height: int, width: int,
                  patch: int, stride: int = 1, pad: int = 0) -> "GridMeta":
        if patch < 1 or stride < 1 or pad < 0:
            raise DimensionError(f"invalid patch geometry: patch={patch} stride={stride} pad={pad}")
        if height + 2 * pad < patch or width + 2 * pad < patch:
            raise DimensionError(
                f"patch {patch} larger than padded image {height + 2 * pad}x{width + 2 * pad}"
            )
        gh = (height + 2 * pad - patch) // stride + 1
        gw = (width + 2 * pad - patch) // stride + 1
        return cls(patch, stride, pad, gh, gw, channels, height, width)

    @property
    def n(self) -> int:
        return self.gh * self.gw

    @property
    def row_length(self) -> int:
        return self.channels * self.patch * self.patch

    @property
    def padded_shape(self) -> Tuple[int, int, int]:
        return (self.channels, self.height + 2 * self.pad, self.width + 2 * self.pad)

    def with_channels(self, channels: int) -> "GridMeta":
        return GridMeta(self.patch, self.stride, self.pad, self.gh, self.gw,
                        channels, self.height, self.width)

    def coords(self, index: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Grid (row, col) of flat row indices"""
        return np.divmod(np.asarray(index), self.gw)

    def centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates of every patch centre, flattened in grid order"""
        rows = np.arange(self.gh) * self.stride - self.pad + self.patch // 2
        cols = np.arange(self.gw) * self.stride - self.pad + self.patch // 2
        rr, cc = np.meshgrid(rows, cols, indexing="ij")
        return rr.reshape(-1), cc.reshape(-1)


def _as_float(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64)


def _finite(x: np.ndarray, op: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"{op} produced non-finite values")
    return x


def _require_rank(x: np.ndarray, rank: int, what: str):
    if x.ndim != rank:
        raise DimensionError(f"{what} must have rank {rank}, got shape {x.shape}")


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (pad, pad), (pad, pad)))


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return x[:, pad:-pad, pad:-pad]


def _windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """Strided view [C, H', W', kh, kw] over a padded [C, H, W] array"""
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _col2im(cols: np.ndarray, padded_shape: Tuple[int, int, int], stride: int) -> np.ndarray:
    """Scatter-add columns [C, kh, kw, gh, gw] back onto a padded image"""
    _, kh, kw, gh, gw = cols.shape
    out = np.zeros(padded_shape, dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * (gh - 1) + 1:stride, j:j + stride * (gw - 1) + 1:stride] += cols[:, i, j]
    return out


# --------------------------------------------------------------------------
# Convolution and linear maps
# --------------------------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """
    2-D cross-correlation with zero padding

    Args:
        x: Input [Cin, H, W]
        weight: Kernel [Cout, Cin, kh, kw]
        bias: Optional [Cout]
        stride: Step between output samples
        pad: Zero padding on every side

    Returns:
        Output [Cout, H', W'] with H' = (H + 2*pad - kh) // stride + 1
    """
    x = _as_float(x)
    weight = _as_float(weight)
    _require_rank(x, 3, "conv2d input")
    _require_rank(weight, 4, "conv2d weight")
    cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv2d: input has {cin} channels, weight expects {wcin}")
    if stride < 1 or pad < 0 or kh < 1 or kw < 1:
        raise DimensionError(f"conv2d: invalid stride={stride} pad={pad} kernel={kh}x{kw}")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}")

    win = _windows(_pad(x, pad), kh, kw, stride)
    out = np.tensordot(weight, win, axes=([1, 2, 3], [0, 3, 4]))
    if bias is not None:
        bias = _as_float(bias)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias shape {bias.shape} does not match {cout} outputs")
        out = out + bias[:, None, None]
    return _finite(out, "conv2d")


def conv2d_backward(grad: np.ndarray, x, weight, stride: int = 1,
                    pad: int = 0) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dweight, dbias) of conv2d for an output gradient"""
    x = _as_float(x)
    weight = _as_float(weight)
    xp = _pad(x, pad)
    win = _windows(xp, weight.shape[2], weight.shape[3], stride)
    dweight = np.tensordot(grad, win, axes=([1, 2], [1, 2]))
    dbias = grad.sum(axis=(1, 2))
    cols = np.tensordot(weight, grad, axes=([0], [0]))
    dx = _unpad(_col2im(cols, xp.shape, stride), pad)
    return dx, dweight, dbias


def linear(x, weight, bias=None) -> np.ndarray:
    """Row-wise affine map: out[i] = weight @ x[i] + bias"""
    x = _as_float(x)
    weight = _as_float(weight)
    _require_rank(x, 2, "linear input")
    _require_rank(weight, 2, "linear weight")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: input dim {x.shape[1]} does not match weight {weight.shape}")
    out = x @ weight.T
    if bias is not None:
        bias = _as_float(bias)
        if bias.shape != (weight.shape[0],):
            raise DimensionError(f"linear: bias shape {bias.shape} does not match {weight.shape[0]} outputs")
        out = out + bias
    return _finite(out, "linear")


def relu(x) -> np.ndarray:
    return np.maximum(_as_float(x), 0.0)


def avg_pool2d(x, k: int) -> np.ndarray:
    """Non-overlapping k x k average pooling"""
    x = _as_float(x)
    _require_rank(x, 3, "avg_pool2d input")
    c, h, w = x.shape
    if h % k or w % k:
        raise DimensionError(f"avg_pool2d: {h}x{w} not divisible by {k}")
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4))


def avg_pool2d_backward(grad: np.ndarray, k: int) -> np.ndarray:
    return np.repeat(np.repeat(grad, k, axis=1), k, axis=2) / (k * k)


# --------------------------------------------------------------------------
# Softmax
# --------------------------------------------------------------------------

def softmax_rows(m) -> np.ndarray:
    """Row-wise softmax, stabilised by subtracting each row's maximum"""
    m = _as_float(m)
    _require_rank(m, 2, "softmax_rows input")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise DimensionError(f"softmax_rows: empty matrix {m.shape}")
    e = np.exp(m - m.max(axis=1, keepdims=True))
    return _finite(e / e.sum(axis=1, keepdims=True), "softmax_rows")


def softmax_rows_backward(grad: np.ndarray, s: np.ndarray) -> np.ndarray:
    return s * (grad - (grad * s).sum(axis=1, keepdims=True))


# --------------------------------------------------------------------------
# Unfold / fold
# --------------------------------------------------------------------------

def unfold(x, patch: int, stride: int = 1, pad: int = 0) -> Tuple[np.ndarray, GridMeta]:
    """
    Unfold an image into flattened patch rows

    Row i is the [C, patch, patch] block at grid position i (row-major),
    flattened channel-first.
    """
    x = _as_float(x)
    _require_rank(x, 3, "unfold input")
    c, h, w = x.shape
    grid = GridMeta.for_image(c, h, w, patch, stride, pad)
    win = _windows(_pad(x, pad), patch, patch, stride)
    rows = win.transpose(1, 2, 0, 3, 4).reshape(grid.n, grid.row_length)
    return np.ascontiguousarray(rows), grid


def _check_rows(rows: np.ndarray, grid: GridMeta):
    if rows.ndim != 2 or rows.shape != (grid.n, grid.row_length):
        raise DimensionError(
            f"patch rows {rows.shape} inconsistent with grid ({grid.n}, {grid.row_length})"
        )


def patch_sum(rows, grid: GridMeta) -> np.ndarray:
    """Sum overlapping patch contributions into an image; the adjoint of unfold"""
    rows = _as_float(rows)
    _check_rows(rows, grid)
    p = grid.patch
    cols = rows.reshape(grid.gh, grid.gw, grid.channels, p, p).transpose(2, 3, 4, 0, 1)
    return _unpad(_col2im(cols, grid.padded_shape, grid.stride), grid.pad)


def coverage(grid: GridMeta) -> np.ndarray:
    """Per-pixel count of patches covering each pixel, shape [1, H, W]"""
    ones = np.ones((grid.n, grid.patch * grid.patch))
    return patch_sum(ones, grid.with_channels(1))


def fold(patches, grid: GridMeta) -> np.ndarray:
    """Fold patch rows back into an image, averaging overlaps by coverage count"""
    total = patch_sum(patches, grid)
    count = coverage(grid)
    out = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return _finite(out, "fold")


def fold_backward(grad: np.ndarray, grid: GridMeta) -> np.ndarray:
    count = coverage(grid)
    scaled = np.divide(grad, count, out=np.zeros_like(grad), where=count > 0)
    rows, _ = unfold(scaled, grid.patch, grid.stride, grid.pad)
    return rows


def gather_rows(rows, index) -> np.ndarray:
    rows = np.asarray(rows)
    return rows[np.asarray(index, dtype=np.int64)]


# --------------------------------------------------------------------------
# Resampling
# --------------------------------------------------------------------------

def _cubic(d: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    d = np.abs(d)
    near = ((a + 2.0) * d - (a + 3.0)) * d * d + 1.0
    far = ((a * d - 5.0 * a) * d + 8.0 * a) * d - 4.0 * a
    return np.where(d <= 1.0, near, np.where(d < 2.0, far, 0.0))


def interpolation_matrix(in_size: int, out_size: int, mode: str) -> np.ndarray:
    """
    Matrix [out_size, in_size] resampling one axis (align_corners=False)

    Border taps are clamped to the nearest valid sample, so each row sums to 1.
    """
    if mode not in RESIZE_MODES:
        raise ValueError(f"Unsupported resize mode: {mode}")
    if in_size < 1 or out_size < 1:
        raise DimensionError(f"resize: invalid sizes {in_size} -> {out_size}")

    scale = in_size / out_size
    dst = np.arange(out_size)
    m = np.zeros((out_size, in_size))

    if mode == "nearest":
        src = np.minimum(np.floor(dst * scale).astype(np.int64), in_size - 1)
        m[dst, src] = 1.0
    elif mode == "bilinear":
        src = np.maximum((dst + 0.5) * scale - 0.5, 0.0)
        i0 = np.floor(src).astype(np.int64)
        t = src - i0
        np.add.at(m, (dst, np.minimum(i0, in_size - 1)), 1.0 - t)
        np.add.at(m, (dst, np.minimum(i0 + 1, in_size - 1)), t)
    else:
        src = (dst + 0.5) * scale - 0.5
        i0 = np.floor(src).astype(np.int64)
        t = src - i0
        for k in range(-1, 3):
            np.add.at(m, (dst, np.clip(i0 + k, 0, in_size - 1)), _cubic(k - t))
    return m


def separable(x, rows_matrix: np.ndarray, cols_matrix: np.ndarray) -> np.ndarray:
    """Apply out[c] = rows_matrix @ x[c] @ cols_matrix.T to every channel"""
    x = _as_float(x)
    _require_rank(x, 3, "separable input")
    if rows_matrix.shape[1] != x.shape[1] or cols_matrix.shape[1] != x.shape[2]:
        raise DimensionError(
            f"separable: matrices {rows_matrix.shape}/{cols_matrix.shape} do not fit input {x.shape}"
        )
    return np.matmul(np.matmul(rows_matrix, x), cols_matrix.T)


def separable_backward(grad: np.ndarray, rows_matrix: np.ndarray, cols_matrix: np.ndarray) -> np.ndarray:
    return np.matmul(np.matmul(rows_matrix.T, grad), cols_matrix)


def resize(x, out_h: int, out_w: int, mode: str = "bicubic") -> np.ndarray:
    """
    Resize [C, H, W] to [C, out_h, out_w]

    Modes: nearest, bilinear, bicubic (a = -0.5). Pixel-centre alignment
    (align_corners=False).
    """
    x = _as_float(x)
    _require_rank(x, 3, "resize input")
    _, h, w = x.shape
    if (out_h, out_w) == (h, w):
        return x.copy()
    ah = interpolation_matrix(h, out_h, mode)
    aw = interpolation_matrix(w, out_w, mode)
    if mode == "nearest":
        return x[:, np.argmax(ah, axis=1)][:, :, np.argmax(aw, axis=1)]
    # offsetting by a pixel value keeps constant images bit-exact
    anchor = x[:, :1, :1]
    out = anchor + separable(x - anchor, ah, aw)
    return _finite(out, "resize")


# --------------------------------------------------------------------------
# Fourier transform
# --------------------------------------------------------------------------

def fft2(x) -> ComplexTensor:
    """Unnormalised forward 2-D DFT over the last two axes (any size)"""
    x = _as_float(x)
    spectrum = np.fft.fft2(x, axes=(-2, -1))
    out = ComplexTensor(np.ascontiguousarray(spectrum.real), np.ascontiguousarray(spectrum.imag))
    _finite(out.real, "fft2")
    _finite(out.imag, "fft2")
    return out


def fft2_backward(grad_real: Optional[np.ndarray], grad_imag: Optional[np.ndarray]) -> np.ndarray:
    """Gradient w.r.t. the real input of sum(gr * Re F(x) + gi * Im F(x))"""
    g = np.zeros_like(grad_real if grad_real is not None else grad_imag, dtype=np.complex128)
    if grad_real is not None:
        g = g + grad_real
    if grad_imag is not None:
        g = g - 1j * grad_imag
    return np.fft.fft2(g, axes=(-2, -1)).real


# --------------------------------------------------------------------------
# Windows
# --------------------------------------------------------------------------

def gaussian_taps(size: int, sigma: float) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    taps = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return taps / taps.sum()


def valid_filter_matrix(n: int, taps: np.ndarray) -> np.ndarray:
    """Banded matrix [n - len(taps) + 1, n] applying a 'valid' 1-D filter"""
    k = len(taps)
    if n < k:
        raise DimensionError(f"filter of {k} taps does not fit {n} samples")
    m = np.zeros((n - k + 1, n))
    for i in range(n - k + 1):
        m[i, i:i + k] = taps
    return m
