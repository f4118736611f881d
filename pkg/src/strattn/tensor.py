"""Dense tensor primitives.

Activations are ``numpy.ndarray`` objects in NCHW layout; convolution weights
are ``(out, in // groups, kH, kW)``. Everything defaults to float64 so that
finite-difference checks are meaningful. Setting ``STRATT_DTYPE=float32``
before import switches the default precision.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

DTYPE = np.dtype(os.environ.get("STRATT_DTYPE", "float64"))
if DTYPE not in (np.float64, np.float32):
    raise ImportError(f"STRATT_DTYPE must be float64 or float32, got {DTYPE}")

DEBUG = os.environ.get("STRATT_DEBUG", "") not in ("", "0")


class ShapeError(ValueError):
    """Raised when tensor extents disagree; ``dim`` names the offending axis."""

    def __init__(self, message: str, dim: str | None = None):
        super().__init__(message if dim is None else f"{message} (dimension: {dim})")
        self.dim = dim


class NumericalError(FloatingPointError):
    pass


def as_tensor(x, dtype=None) -> np.ndarray:
    arr = np.ascontiguousarray(x, dtype=dtype or DTYPE)
    if arr.ndim == 0 or any(s < 1 for s in arr.shape):
        raise ShapeError(f"tensor extents must all be >= 1, got {arr.shape}")
    return arr


def check_finite(arr: np.ndarray, where: str) -> np.ndarray:
    if DEBUG and not np.all(np.isfinite(arr)):
        raise NumericalError(f"non-finite values produced by {where}")
    return arr


# ---------------------------------------------------------------------------
# Random numbers
# ---------------------------------------------------------------------------

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


@dataclass
class Rng:
    """Counter-based SplitMix64 generator.

    The n-th 64-bit output for a seed is ``mix(seed + (n + 1) * 0x9E3779B97F4A7C15)``
    with the standard SplitMix64 finaliser, all arithmetic mod 2**64. Because
    each output depends only on ``(seed, position)`` the stream is
    reproducible bit-for-bit on any platform and can be vectorised.

    Uniform doubles take the top 53 bits. Normals use Box-Muller on
    consecutive uniform pairs.
    """

    seed: int
    position: int = 0

    def uint64(self, n: int) -> np.ndarray:
        idx = np.arange(self.position + 1, self.position + 1 + n, dtype=np.uint64)
        self.position += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.seed % 2**64) + idx * _GAMMA
            return _splitmix64(z)

    def uniform(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.uint64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, shape=()) -> np.ndarray:
        n = int(np.prod(shape, dtype=np.int64))
        m = (n + 1) // 2
        u = self.uniform((2, m))
        radius = np.sqrt(-2.0 * np.log1p(-u[0]))
        theta = 2.0 * np.pi * u[1]
        z = np.concatenate([radius * np.cos(theta), radius * np.sin(theta)])[:n]
        return z.reshape(shape)

    def integers(self, low: int, high: int, shape=()) -> np.ndarray:
        if high <= low:
            raise ValueError(f"empty integer range [{low}, {high})")
        return (low + np.floor(self.uniform(shape) * (high - low))).astype(np.int64)

    def permutation(self, n: int) -> np.ndarray:
        return np.argsort(self.uniform(n), kind="stable")

    def spawn(self, stream: int) -> "Rng":
        """Independent generator for a named sub-stream."""
        with np.errstate(over="ignore"):
            child = _splitmix64(np.array([self.seed % 2**64], dtype=np.uint64) ^ np.uint64(stream * 0x2545F4914F6CDD1D % 2**64))
        return Rng(int(child[0]))

    def state(self) -> tuple[int, int]:
        return self.seed, self.position


def seeded_init(shape, fan_in: int, rng: Rng) -> np.ndarray:
    """He-normal initialisation: standard normals scaled by sqrt(2 / fan_in)."""
    if fan_in < 1:
        raise ValueError(f"fan_in must be >= 1, got {fan_in}")
    return (rng.normal(tuple(shape)) * np.sqrt(2.0 / fan_in)).astype(DTYPE)


# ---------------------------------------------------------------------------
# Elementwise ops
# ---------------------------------------------------------------------------


def sigmoid(x: np.ndarray) -> np.ndarray:
    # exp of a non-positive argument only, so neither branch overflows
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def softmax(logits: np.ndarray, axis: int = -1, mask: np.ndarray | None = None) -> np.ndarray:
    """Max-shifted softmax along ``axis``.

    ``mask`` (broadcastable to ``logits``) marks valid entries with True; masked
    entries get exactly zero probability and the rest renormalise.
    """
    if not -logits.ndim <= axis < logits.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {logits.ndim}", dim="axis")
    if mask is not None:
        mask = np.broadcast_to(mask, logits.shape)
        if not np.all(np.any(mask, axis=axis)):
            raise ValueError("softmax slice is fully masked (degenerate neighbourhood)")
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_backward(grad_p: np.ndarray, p: np.ndarray, axis: int = -1) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=axis, keepdims=True))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(grad: np.ndarray, out: np.ndarray) -> np.ndarray:
    return np.where(out > 0, grad, 0.0)


# ---------------------------------------------------------------------------
# Grouped convolution
# ---------------------------------------------------------------------------


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass
class ConvCache:
    x_shape: tuple
    cols: np.ndarray  # (G, N*Ho*Wo, Cg*kH*kW), or the reshaped input for 1x1
    weight: np.ndarray
    groups: int
    stride: tuple[int, int]
    padding: tuple[int, int]
    out_hw: tuple[int, int]
    has_bias: bool


def conv_output_size(size: int, k: int, s: int, p: int) -> int:
    return (size + 2 * p - k) // s + 1


def conv2d_grouped(x, weight, bias=None, groups=1, stride=1, padding=0, *, return_cache=False):
    """Grouped 2-D cross-correlation (no kernel flip)."""
    if x.ndim != 4:
        raise ShapeError(f"input must be NCHW, got rank {x.ndim}", dim="rank")
    if weight.ndim != 4:
        raise ShapeError(f"weight must be (out, in/groups, kH, kW), got rank {weight.ndim}", dim="rank")
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if groups < 1 or c % groups:
        raise ShapeError(f"groups={groups} does not divide {c} input channels", dim="channels")
    if o % groups:
        raise ShapeError(f"groups={groups} does not divide {o} output channels", dim="out_channels")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} channels per group, input has {c // groups}", dim="in_channels")
    if bias is not None and bias.shape != (o,):
        raise ShapeError(f"bias shape {bias.shape} != ({o},)", dim="bias")
    ho, wo = conv_output_size(h, kh, sh, ph), conv_output_size(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h}x{w}", dim="spatial")
    og = o // groups

    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        cols = x.reshape(n, groups, cg, h * w)
        out = np.matmul(weight.reshape(groups, og, cg), cols).reshape(n, o, h, w)
    else:
        xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
        win = win[:, :, : sh * (ho - 1) + 1 : sh, : sw * (wo - 1) + 1 : sw]
        cols = (
            win.reshape(n, groups, cg, ho, wo, kh, kw)
            .transpose(1, 0, 3, 4, 2, 5, 6)
            .reshape(groups, n * ho * wo, cg * kh * kw)
        )
        wmat = weight.reshape(groups, og, cg * kh * kw).transpose(0, 2, 1)
        out = np.matmul(cols, wmat).reshape(groups, n, ho, wo, og).transpose(1, 0, 4, 2, 3).reshape(n, o, ho, wo)
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = check_finite(np.ascontiguousarray(out), "conv2d_grouped")
    if return_cache:
        return out, ConvCache(x.shape, cols, weight, groups, (sh, sw), (ph, pw), (ho, wo), bias is not None)
    return out


def pointwise_conv(x, weight, bias=None, groups=1, *, return_cache=False):
    """Grouped 1x1 convolution whose result at a pixel depends only on that
    pixel's values, bit for bit.

    BLAS kernels may round differently depending on where a column falls in
    a tile, which breaks exact translation equivariance. Here each output is
    accumulated over input channels with plain elementwise ops. The cache is
    interchangeable with :func:`conv2d_grouped`'s.
    """
    n, c, h, w = x.shape
    o, cg, kh, kw = weight.shape
    if (kh, kw) != (1, 1):
        raise ShapeError(f"pointwise_conv needs a 1x1 kernel, got {kh}x{kw}", dim="kernel")
    if groups < 1 or c % groups or o % groups:
        raise ShapeError(f"groups={groups} must divide {c} input and {o} output channels", dim="channels")
    if cg != c // groups:
        raise ShapeError(f"weight expects {cg} channels per group, input has {c // groups}", dim="in_channels")
    og = o // groups
    cols = x.reshape(n, groups, cg, h * w)
    wm = weight.reshape(groups, og, cg)
    out = wm[None, :, :, 0, None] * cols[:, :, None, 0]
    for k in range(1, cg):
        out += wm[None, :, :, k, None] * cols[:, :, None, k]
    out = out.reshape(n, o, h, w)
    if bias is not None:
        out = out + bias[None, :, None, None]
    out = check_finite(out, "pointwise_conv")
    if return_cache:
        return out, ConvCache(x.shape, cols, weight, groups, (1, 1), (0, 0), (h, w), bias is not None)
    return out


def conv2d_grouped_backward(grad_out: np.ndarray, cache: ConvCache):
    """Return ``(grad_x, grad_weight, grad_bias)``; grad_bias is None without bias."""
    n, c, h, w = cache.x_shape
    o, cg, kh, kw = cache.weight.shape
    g = cache.groups
    og = o // g
    ho, wo = cache.out_hw
    if grad_out.shape != (n, o, ho, wo):
        raise ShapeError(f"grad shape {grad_out.shape} != {(n, o, ho, wo)}", dim="grad_out")
    grad_bias = grad_out.sum(axis=(0, 2, 3)) if cache.has_bias else None

    if kh == kw == 1 and cache.stride == (1, 1) and cache.padding == (0, 0):
        go = grad_out.reshape(n, g, og, h * w)
        wm = cache.weight.reshape(g, og, cg)
        grad_w = np.matmul(go, cache.cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(o, cg, 1, 1)
        grad_x = np.matmul(wm.transpose(0, 2, 1), go).reshape(n, c, h, w)
        return grad_x, grad_w, grad_bias

    sh, sw = cache.stride
    ph, pw = cache.padding
    go = grad_out.reshape(n, g, og, ho, wo).transpose(1, 0, 3, 4, 2).reshape(g, n * ho * wo, og)
    grad_w = np.matmul(go.transpose(0, 2, 1), cache.cols).reshape(o, cg, kh, kw)
    grad_cols = np.matmul(go, cache.weight.reshape(g, og, cg * kh * kw))
    grad_cols = grad_cols.reshape(g, n, ho, wo, cg, kh, kw).transpose(1, 0, 4, 5, 6, 2, 3).reshape(n, c, kh, kw, ho, wo)
    grad_xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_xp[:, :, i : i + sh * (ho - 1) + 1 : sh, j : j + sw * (wo - 1) + 1 : sw] += grad_cols[:, :, i, j]
    grad_x = grad_xp[:, :, ph : ph + h, pw : pw + w]
    return np.ascontiguousarray(grad_x), grad_w, grad_bias


# ---------------------------------------------------------------------------
# Batch normalisation
# ---------------------------------------------------------------------------


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5
    mode: str = "training"

    @classmethod
    def create(cls, channels: int, **kwargs) -> "BatchNormParams":
        return cls(
            gamma=np.ones(channels, dtype=DTYPE),
            beta=np.zeros(channels, dtype=DTYPE),
            running_mean=np.zeros(channels, dtype=DTYPE),
            running_var=np.ones(channels, dtype=DTYPE),
            **kwargs,
        )

    def __post_init__(self):
        if not 0.0 < self.momentum < 1.0:
            raise ValueError(f"momentum must lie in (0, 1), got {self.momentum}")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.mode not in ("training", "frozen"):
            raise ValueError(f"unknown batch-norm mode {self.mode!r}")


@dataclass
class BNCache:
    x_hat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    training: bool
    count: int = field(default=1)


def batch_norm(x: np.ndarray, params: BatchNormParams, *, return_cache=False):
    """Per-channel batch normalisation over (N, H, W).

    In training mode the running statistics are updated in place with
    ``running = (1 - momentum) * running + momentum * batch``; the running
    variance uses the unbiased batch estimate.
    """
    n, c, h, w = x.shape
    if c != params.gamma.shape[0]:
        raise ShapeError(f"batch_norm expects {params.gamma.shape[0]} channels, got {c}", dim="channels")
    training = params.mode == "training"
    count = n * h * w
    if training:
        if count == 1:
            raise ValueError("training-mode batch_norm needs more than one value per channel")
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = params.momentum
        params.running_mean[...] = (1 - m) * params.running_mean + m * mean
        params.running_var[...] = (1 - m) * params.running_var + m * var * count / (count - 1)
    else:
        mean, var = params.running_mean, params.running_var
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = check_finite(params.gamma[None, :, None, None] * x_hat + params.beta[None, :, None, None], "batch_norm")
    if return_cache:
        return out, BNCache(x_hat, inv_std, params.gamma.copy(), training, count)
    return out


def batch_norm_backward(grad_out: np.ndarray, cache: BNCache):
    """Return ``(grad_x, grad_gamma, grad_beta)``."""
    grad_gamma = np.sum(grad_out * cache.x_hat, axis=(0, 2, 3))
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    scale = (cache.gamma * cache.inv_std)[None, :, None, None]
    if not cache.training:
        return grad_out * scale, grad_gamma, grad_beta
    m = cache.count
    grad_x = scale / m * (
        m * grad_out - grad_beta[None, :, None, None] - cache.x_hat * grad_gamma[None, :, None, None]
    )
    return grad_x, grad_gamma, grad_beta


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

TENSOR_MAGIC = b"STRA"
TENSOR_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f8"): 0, np.dtype("<f4"): 1}
_TAG_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4")}


def write_tensor(fh: BinaryIO, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    dt = arr.dtype.newbyteorder("<")
    if dt not in _DTYPE_TAGS:
        raise TypeError(f"cannot serialise dtype {arr.dtype}")
    fh.write(TENSOR_MAGIC)
    fh.write(struct.pack("<II", TENSOR_VERSION, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(struct.pack("<B", _DTYPE_TAGS[dt]))
    fh.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise EOFError(f"truncated tensor record: wanted {n} bytes, got {len(buf)}")
    return buf


def read_tensor(fh: BinaryIO) -> np.ndarray:
    magic = _read_exact(fh, 4)
    if magic != TENSOR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, rank = struct.unpack("<II", _read_exact(fh, 8))
    if version != TENSOR_VERSION:
        raise ValueError(f"unsupported tensor format version {version}")
    shape = struct.unpack(f"<{rank}Q", _read_exact(fh, 8 * rank))
    (tag,) = struct.unpack("<B", _read_exact(fh, 1))
    if tag not in _TAG_DTYPES:
        raise ValueError(f"unknown dtype tag {tag}")
    dt = _TAG_DTYPES[tag]
    count = int(np.prod(shape, dtype=np.int64))
    data = np.frombuffer(_read_exact(fh, count * dt.itemsize), dtype=dt)
    return data.reshape(shape).astype(dt.newbyteorder("="))


def save_tensor(path, arr: np.ndarray) -> None:
    with open(path, "wb") as fh:
        write_tensor(fh, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return read_tensor(fh)
