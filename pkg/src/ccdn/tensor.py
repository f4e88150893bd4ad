"""Dense tensors and the differentiable primitives CCDN is built from.

Tensors are plain numpy arrays laid out ``(height, width, channels)``.
Every primitive is stride 1 and size preserving:

* ``conv2d_forward`` / ``conv2d_backward`` -- zero padded "same" convolution
  (cross-correlation, as in every CNN framework) with per-channel bias.
* ``relu_forward`` / ``relu_backward``.
* ``maxpool2_forward`` / ``maxpool2_backward`` -- 2x2 window anchored at the
  output pixel, zero padded by one row/column at the bottom/right.

The functions accept float32 (training) and float64 (gradient checks) and
keep the dtype of their input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensors or kernel banks have incompatible shapes."""


def as_tensor(data, dtype=None) -> np.ndarray:
    """Return ``data`` as a validated ``(H, W, C)`` array.

    2-D input is promoted to a single channel.
    """
    arr = np.asarray(data, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ShapeError(f"tensor must be HxWxC, got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ShapeError(f"tensor dimensions must be >= 1, got {arr.shape}")
    return arr


@dataclass
class ConvKernelBank:
    """Weights ``(out, in, kh, kw)`` and biases ``(out,)`` of one conv layer."""

    weights: np.ndarray
    biases: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.biases = np.asarray(self.biases)
        if self.weights.ndim != 4:
            raise ShapeError(f"weights must be 4-D (out, in, kh, kw), got {self.weights.shape}")
        out, _, kh, kw = self.weights.shape
        if kh % 2 == 0 or kw % 2 == 0:
            raise ShapeError(f"kernel size must be odd, got {kh}x{kw}")
        if self.biases.shape != (out,):
            raise ShapeError(f"expected {out} biases, got shape {self.biases.shape}")

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def kernel_h(self) -> int:
        return self.weights.shape[2]

    @property
    def kernel_w(self) -> int:
        return self.weights.shape[3]

    @property
    def size(self) -> int:
        return self.weights.size + self.biases.size

    def astype(self, dtype) -> "ConvKernelBank":
        return ConvKernelBank(self.weights.astype(dtype), self.biases.astype(dtype))

    def copy(self) -> "ConvKernelBank":
        return ConvKernelBank(self.weights.copy(), self.biases.copy())

    def weight_matrix(self) -> np.ndarray:
        # rows ordered (kernel row, kernel col, channel) to match im2col
        return self.weights.transpose(2, 3, 1, 0).reshape(-1, self.out_channels)


def im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Patches of a zero-padded ``(H, W, C)`` tensor as an ``(H*W, kh*kw*C)`` matrix."""
    h, w, c = x.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    # view is (H, W, C, kh, kw); reorder to kernel-row-major, channel innermost
    windows = sliding_window_view(padded, (kh, kw), axis=(0, 1))
    return np.ascontiguousarray(windows.transpose(0, 1, 3, 4, 2)).reshape(h * w, kh * kw * c)


def conv2d_forward(x: np.ndarray, bank: ConvKernelBank, return_cols: bool = False):
    """Same-size convolution; optionally also returns the im2col matrix for reuse."""
    x = as_tensor(x)
    if x.shape[2] != bank.in_channels:
        raise ShapeError(
            f"input has {x.shape[2]} channels, kernel bank expects {bank.in_channels}")
    h, w, _ = x.shape
    cols = im2col(x, bank.kernel_h, bank.kernel_w)
    out = cols @ bank.weight_matrix().astype(x.dtype, copy=False)
    out += bank.biases.astype(x.dtype, copy=False)
    out = out.reshape(h, w, bank.out_channels)
    return (out, cols) if return_cols else out


def conv2d_backward(x: np.ndarray, bank: ConvKernelBank, upstream: np.ndarray,
                    need_input_grad: bool = True, cols: np.ndarray | None = None):
    """Gradients of ``sum(conv2d_forward(x, bank) * upstream)``.

    Returns ``(grad_input, grad_weights, grad_biases)``; ``grad_input`` is
    ``None`` when ``need_input_grad`` is false (first layer).  ``cols`` may
    carry the im2col matrix saved by the forward pass.
    """
    x = as_tensor(x)
    upstream = as_tensor(upstream)
    h, w, _ = x.shape
    if upstream.shape != (h, w, bank.out_channels):
        raise ShapeError(
            f"upstream gradient shape {upstream.shape} != forward output "
            f"{(h, w, bank.out_channels)}")
    g = upstream.reshape(h * w, bank.out_channels)
    if cols is None:
        cols = im2col(x, bank.kernel_h, bank.kernel_w)
    gw = (cols.T @ g).reshape(bank.kernel_h, bank.kernel_w, bank.in_channels,
                              bank.out_channels).transpose(3, 2, 0, 1)
    gb = g.sum(axis=0)
    gx = None
    if need_input_grad:
        # adjoint of a same-size correlation = correlation with the flipped,
        # channel-transposed kernel
        flipped = bank.weights[:, :, ::-1, ::-1].transpose(2, 3, 0, 1)
        gcols = im2col(upstream, bank.kernel_h, bank.kernel_w)
        gx = (gcols @ flipped.reshape(-1, bank.in_channels).astype(g.dtype, copy=False))
        gx = gx.reshape(h, w, bank.in_channels)
    return gx, np.ascontiguousarray(gw), gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    if np.shape(x) != np.shape(upstream):
        raise ShapeError(f"shape mismatch {np.shape(x)} vs {np.shape(upstream)}")
    return np.where(x > 0, upstream, 0).astype(np.result_type(upstream), copy=False)


# window offsets in row-major order; argmax ties go to the earliest entry
_POOL_OFFSETS = ((0, 0), (0, 1), (1, 0), (1, 1))


def maxpool2_forward(x: np.ndarray):
    """2x2 stride-1 max pool.

    Returns ``(output, argmax)`` where ``argmax[y, x, c]`` is the index into
    ``((0,0), (0,1), (1,0), (1,1))`` of the winning window cell.
    """
    x = as_tensor(x)
    h, w, _ = x.shape
    padded = np.pad(x, ((0, 1), (0, 1), (0, 0)))
    c0, c1 = padded[:h, :w], padded[:h, 1:]
    c2, c3 = padded[1:, :w], padded[1:, 1:]
    # strict comparisons keep the earlier cell on ties
    top_right = c1 > c0
    bottom_right = c3 > c2
    top = np.maximum(c0, c1)
    bottom = np.maximum(c2, c3)
    use_bottom = bottom > top
    out = np.where(use_bottom, bottom, top)
    argmax = np.where(use_bottom, 2 + bottom_right.view(np.uint8), top_right.view(np.uint8))
    return out, argmax.astype(np.uint8, copy=False)


def maxpool2_backward(argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    upstream = as_tensor(upstream)
    if argmax.shape != upstream.shape:
        raise ShapeError(f"argmax shape {argmax.shape} != upstream shape {upstream.shape}")
    h, w, c = upstream.shape
    padded = np.zeros((h + 1, w + 1, c), dtype=upstream.dtype)
    for k, (dy, dx) in enumerate(_POOL_OFFSETS):
        padded[dy:dy + h, dx:dx + w] += upstream * (argmax == k)
    # anything routed to the padding row/column is dropped
    return padded[:h, :w]
