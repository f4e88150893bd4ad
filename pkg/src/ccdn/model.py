"""The CCDN network: six stride-1 conv layers, pooling after layers 1 and 4.

Layer shapes are fixed::

    conv 9x9x1->20  ReLU  pool
    conv 3x3x20->20 ReLU
    conv 3x3x20->20 ReLU
    conv 3x3x20->20 ReLU  pool
    conv 3x3x20->20 ReLU
    conv 3x3x20->1  ReLU          -> response map, same size as the image
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .tensor import (
    ConvKernelBank,
    ShapeError,
    as_tensor,
    conv2d_backward,
    conv2d_forward,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
)

# (kernel_h, kernel_w, in_channels, out_channels) per layer
LAYER_SHAPES = (
    (9, 9, 1, 20),
    (3, 3, 20, 20),
    (3, 3, 20, 20),
    (3, 3, 20, 20),
    (3, 3, 20, 20),
    (3, 3, 20, 1),
)
POOL_AFTER = frozenset({0, 3})
INIT_WEIGHT_STD = 0.1
INIT_BIAS = 0.1


@dataclass
class CcdnParams:
    layer1: ConvKernelBank
    layer2: ConvKernelBank
    layer3: ConvKernelBank
    layer4: ConvKernelBank
    layer5: ConvKernelBank
    layer6: ConvKernelBank

    def __post_init__(self):
        for i, (bank, shape) in enumerate(zip(self.layers, LAYER_SHAPES), start=1):
            got = (bank.kernel_h, bank.kernel_w, bank.in_channels, bank.out_channels)
            if got != shape:
                raise ShapeError(f"layer{i}: expected kernel bank {shape}, got {got}")

    @property
    def layers(self) -> tuple[ConvKernelBank, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))

    @property
    def dtype(self):
        return self.layer1.weights.dtype

    def astype(self, dtype) -> "CcdnParams":
        return CcdnParams(*(b.astype(dtype) for b in self.layers))

    def copy(self) -> "CcdnParams":
        return CcdnParams(*(b.copy() for b in self.layers))

    def to_vector(self) -> np.ndarray:
        """All scalars as one flat vector (per layer: weights then biases)."""
        return np.concatenate([a.ravel() for b in self.layers for a in (b.weights, b.biases)])

    @classmethod
    def from_vector(cls, vec: np.ndarray) -> "CcdnParams":
        vec = np.asarray(vec)
        if vec.size != PARAM_COUNT:
            raise ShapeError(f"expected {PARAM_COUNT} parameters, got {vec.size}")
        banks, pos = [], 0
        for kh, kw, cin, cout in LAYER_SHAPES:
            n = kh * kw * cin * cout
            weights = vec[pos:pos + n].reshape(cout, cin, kh, kw).copy()
            biases = vec[pos + n:pos + n + cout].copy()
            pos += n + cout
            banks.append(ConvKernelBank(weights, biases))
        return cls(*banks)

    def __eq__(self, other):
        if not isinstance(other, CcdnParams):
            return NotImplemented
        return all(
            a.weights.dtype == b.weights.dtype
            and np.array_equal(a.weights, b.weights)
            and np.array_equal(a.biases, b.biases)
            for a, b in zip(self.layers, other.layers))


PARAM_COUNT = sum(kh * kw * cin * cout + cout for kh, kw, cin, cout in LAYER_SHAPES)


def param_count(params) -> int:
    """Number of trainable scalars in a CcdnParams or a single kernel bank."""
    if isinstance(params, ConvKernelBank):
        return params.size
    return sum(bank.size for bank in params.layers)


def init_params(seed=None, dtype=np.float32) -> CcdnParams:
    """Weights ~ N(0, 0.1^2), biases = 0.1. Draws happen in float64, layer by layer."""
    rng = np.random.default_rng(seed)
    banks = []
    for kh, kw, cin, cout in LAYER_SHAPES:
        weights = rng.normal(0.0, INIT_WEIGHT_STD, size=(cout, cin, kh, kw))
        biases = np.full(cout, INIT_BIAS)
        banks.append(ConvKernelBank(weights.astype(dtype), biases.astype(dtype)))
    return CcdnParams(*banks)


def _check_image(image, dtype) -> np.ndarray:
    x = as_tensor(image, dtype=dtype)
    if x.shape[2] != 1:
        raise ShapeError(f"CCDN expects a single-channel image, got {x.shape[2]} channels")
    return x


def forward(image, params: CcdnParams) -> np.ndarray:
    """Response map ``(H, W)`` for a grayscale image with values in [0, 1]."""
    return forward_with_cache(image, params)[0]


def forward_with_cache(image, params: CcdnParams):
    """Forward pass that also returns the activations needed by :func:`backward`."""
    x = _check_image(image, params.dtype)
    cache = []
    for i, bank in enumerate(params.layers):
        pre, cols = conv2d_forward(x, bank, return_cols=True)
        act = relu_forward(pre)
        argmax = None
        if i in POOL_AFTER:
            out, argmax = maxpool2_forward(act)
        else:
            out = act
        cache.append((x, cols, pre, argmax))
        x = out
    return x[:, :, 0], cache


def backward(cache, grad_response: np.ndarray, params: CcdnParams) -> CcdnParams:
    """Parameter gradients of ``sum(response * grad_response)``."""
    grad = as_tensor(grad_response, dtype=params.dtype)
    grads = [None] * len(params.layers)
    for i in reversed(range(len(params.layers))):
        x, cols, pre, argmax = cache[i]
        if argmax is not None:
            grad = maxpool2_backward(argmax, grad)
        grad = relu_backward(pre, grad)
        gx, gw, gb = conv2d_backward(x, params.layers[i], grad, need_input_grad=i > 0,
                                     cols=cols)
        grads[i] = ConvKernelBank(gw, gb)
        grad = gx
    return CcdnParams(*grads)


# --- weights file -----------------------------------------------------------

MAGIC = b"CCDN"
VERSION = 1


class WeightsFormatError(ValueError):
    """Base class for malformed weights files."""


class NotAWeightsFile(WeightsFormatError):
    pass


class UnsupportedVersion(WeightsFormatError):
    pass


class WeightsShapeMismatch(WeightsFormatError):
    def __init__(self, layer: int, expected, got):
        super().__init__(f"layer{layer}: shape mismatch, expected {expected}, got {tuple(got)}")
        self.layer = layer


class TruncatedWeightsFile(WeightsFormatError):
    pass


def weights_to_bytes(params: CcdnParams) -> bytes:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    for bank in params.layers:
        chunks.append(struct.pack("<4I", bank.kernel_h, bank.kernel_w,
                                  bank.in_channels, bank.out_channels))
        chunks.append(np.ascontiguousarray(bank.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(bank.biases, dtype="<f4").tobytes())
    return b"".join(chunks)


def weights_from_bytes(data: bytes) -> CcdnParams:
    if data[:4] != MAGIC:
        raise NotAWeightsFile("not a weights file (bad magic)")
    pos = 4

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise TruncatedWeightsFile(f"weights file truncated while reading {what}")
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersion(f"unsupported weights file version {version}")
    banks = []
    for i, expected in enumerate(LAYER_SHAPES, start=1):
        got = struct.unpack("<4I", take(16, f"layer{i} header"))
        if got != expected:
            raise WeightsShapeMismatch(i, expected, got)
        kh, kw, cin, cout = got
        n = kh * kw * cin * cout
        weights = np.frombuffer(take(4 * n, f"layer{i} weights"), dtype="<f4")
        biases = np.frombuffer(take(4 * cout, f"layer{i} biases"), dtype="<f4")
        banks.append(ConvKernelBank(weights.reshape(cout, cin, kh, kw).astype(np.float32),
                                    biases.astype(np.float32)))
    if pos != len(data):
        raise WeightsFormatError(f"{len(data) - pos} trailing bytes after layer6")
    return CcdnParams(*banks)


def save_weights(params: CcdnParams, destination) -> None:
    Path(destination).write_bytes(weights_to_bytes(params))


def load_weights(source) -> CcdnParams:
    return weights_from_bytes(Path(source).read_bytes())
