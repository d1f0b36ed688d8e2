"""Initialization schemes, normalization layers, DropBlock and label smoothing.

Normalization layers double as the regularization maps applied to the two
branches of a polynomial step. Every layer works on ``N x C`` (mlp mode) or
``N x C x H x W`` (conv mode) inputs; the feature/channel axis is axis 1.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .module import Module

INIT_KINDS = ("zero_mean", "xavier", "kaiming_normal", "kaiming_uniform", "orthogonal")
NORM_KINDS = ("identity", "batch", "instance", "ibn", "mean_subtract", "iter")


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class InitSpec:
    kind: str = "zero_mean"
    D: float = 16.0

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}; expected one of {INIT_KINDS}")
        if not self.D > 0:
            raise ValueError(f"InitSpec.D must be positive, got {self.D}")


def zero_mean_std(D: float, M_n: int) -> float:
    """Standard deviation sqrt(D / M_n) of the zero-mean polynomial init."""
    if M_n <= 0:
        raise ValueError(f"M_n must be positive, got {M_n}")
    return math.sqrt(D / M_n)


def _fans(shape) -> Tuple[int, int]:
    # linear weights are stored (in, out); conv kernels (F, C, kh, kw)
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = int(np.prod(shape[2:]))
    return shape[1] * receptive, shape[0] * receptive


def init_parameter(shape, spec: InitSpec, M_n: int, rng: np.random.Generator) -> np.ndarray:
    """Draw initial values for one parameter.

    ``M_n`` is the number of polynomial parameters in the order-n term the
    parameter belongs to; only the zero-mean scheme uses it. For the other
    schemes 1-D parameters start at zero.
    """
    if M_n <= 0:
        raise ValueError(f"M_n must be positive, got {M_n}")
    shape = tuple(int(s) for s in shape)
    if spec.kind == "zero_mean":
        return rng.normal(0.0, zero_mean_std(spec.D, M_n), size=shape)
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in, fan_out = _fans(shape)
    if spec.kind == "xavier":
        return rng.normal(0.0, math.sqrt(2.0 / (fan_in + fan_out)), size=shape)
    if spec.kind == "kaiming_normal":
        return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)
    if spec.kind == "kaiming_uniform":
        bound = math.sqrt(6.0 / fan_in)
        return rng.uniform(-bound, bound, size=shape)
    # orthogonal: rows of the flattened matrix (or its columns, whichever is fewer) orthonormal
    rows, cols = shape[0], int(np.prod(shape[1:]))
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return q.reshape(shape)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NormKind:
    kind: str = "identity"
    momentum: float = 0.1
    eps: float = 1e-5
    ratio: float = 0.8
    iterations: int = 5
    affine: bool = True

    def __post_init__(self):
        if self.kind not in NORM_KINDS:
            raise ValueError(f"unknown norm kind {self.kind!r}; expected one of {NORM_KINDS}")
        if not self.eps > 0:
            raise ValueError("eps must be positive")
        if self.kind == "ibn" and not 0 <= self.ratio <= 1:
            raise ValueError(f"IBN ratio must lie in [0, 1], got {self.ratio}")
        if self.kind == "iter" and self.iterations < 1:
            raise ValueError("IterNorm needs at least one iteration")

    @property
    def is_polynomial(self) -> bool:
        """True when the map is affine in its input at inference time."""
        return self.kind not in ("instance", "ibn")


def mean_subtract(x: Tensor) -> Tensor:
    """Subtract the mean over the feature axis, i.e. apply (I - ones/h)."""
    return x - x.mean(axis=1, keepdims=True)


def ibn_split(channels: int, ratio: float) -> Tuple[int, int]:
    """(instance-norm channels, batch-norm channels) for an IBN layer."""
    n_in = int(math.floor(ratio * channels))
    return n_in, channels - n_in


def _stat_axes(x: Tensor) -> tuple:
    return (0,) if x.ndim == 2 else (0, 2, 3)


def _broadcast_shape(x: Tensor) -> tuple:
    return (1, -1) if x.ndim == 2 else (1, -1, 1, 1)


class Identity(Module):
    kind = NormKind("identity")

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return x

    def frozen_affine(self, channels: int):
        return np.eye(channels), np.zeros(channels)


class _Affine(Module):
    def _init_affine(self, channels: int, affine: bool):
        self.affine = affine
        self.channels = channels
        if affine:
            self.weight = self.add_parameter("weight", np.ones(channels))
            self.bias = self.add_parameter("bias", np.zeros(channels))

    def _apply_affine(self, y: Tensor) -> Tensor:
        if not self.affine:
            return y
        shape = _broadcast_shape(y)
        return y * self.weight.reshape(shape) + self.bias.reshape(shape)

    def _affine_arrays(self):
        if not self.affine:
            return np.ones(self.channels), np.zeros(self.channels)
        return self.weight.data.astype(np.float64), self.bias.data.astype(np.float64)


class MeanSubtract(_Affine):
    def __init__(self, channels: int, affine: bool = False):
        super().__init__()
        self._init_affine(channels, affine)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self._apply_affine(mean_subtract(x))

    def frozen_affine(self, channels: int):
        g, b = self._affine_arrays()
        return g[:, None] * (np.eye(channels) - 1.0 / channels), b


class BatchNorm(_Affine):
    """Per-channel normalization over the batch (and spatial) axes.

    Running mean/variance are exponential moving averages of the batch
    statistics (unbiased variance) and replace them at inference.
    """

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self._init_affine(channels, affine)
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        shape = _broadcast_shape(x)
        if training:
            if x.shape[0] < 2:
                raise ValueError("BatchNorm in training mode needs a batch of at least 2 samples")
            axes = _stat_axes(x)
            mean = x.mean(axis=axes, keepdims=True)
            centered = x - mean
            var = (centered * centered).mean(axis=axes, keepdims=True)
            y = centered * ag.power(var + self.eps, -0.5)
            count = x.size // x.shape[1]
            m = self.momentum
            batch_mean = mean.data.reshape(-1).astype(np.float64)
            batch_var = var.data.reshape(-1).astype(np.float64) * count / max(count - 1, 1)
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * batch_mean
            self._buffers["running_var"] = (1 - m) * self._buffers["running_var"] + m * batch_var
        else:
            rm = self._buffers["running_mean"].astype(x.dtype).reshape(shape)
            rv = self._buffers["running_var"].astype(x.dtype).reshape(shape)
            y = (x - rm) * (1.0 / np.sqrt(rv + self.eps))
        return self._apply_affine(y)

    def frozen_affine(self, channels: int):
        g, b = self._affine_arrays()
        inv = 1.0 / np.sqrt(self._buffers["running_var"] + self.eps)
        return np.diag(g * inv), b - g * inv * self._buffers["running_mean"]


class InstanceNorm(_Affine):
    """Per-sample, per-channel normalization over the spatial axes."""

    def __init__(self, channels: int, eps: float = 1e-5, affine: bool = True):
        super().__init__()
        self.eps = eps
        self._init_affine(channels, affine)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if x.ndim != 4:
            raise ValueError("InstanceNorm needs N x C x H x W input")
        mean = x.mean(axis=(2, 3), keepdims=True)
        centered = x - mean
        var = (centered * centered).mean(axis=(2, 3), keepdims=True)
        return self._apply_affine(centered * ag.power(var + self.eps, -0.5))

    def frozen_affine(self, channels: int):
        raise ValueError("instance normalization is not an affine map of its input")


class IBN(Module):
    """Instance norm on the first floor(ratio*C) channels, batch norm on the rest."""

    def __init__(self, channels: int, ratio: float = 0.8, momentum: float = 0.1, eps: float = 1e-5,
                 affine: bool = True):
        super().__init__()
        self.n_in, self.n_bn = ibn_split(channels, ratio)
        self.inorm = self.add_child("IN", InstanceNorm(self.n_in, eps, affine)) if self.n_in else None
        self.bnorm = self.add_child("BN", BatchNorm(self.n_bn, momentum, eps, affine)) if self.n_bn else None

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if self.bnorm is None:
            return self.inorm(x, training)
        if self.inorm is None:
            return self.bnorm(x, training)
        c = x.shape[1]
        first = self.inorm(ag.slice_axis(x, 1, 0, self.n_in), training)
        rest = self.bnorm(ag.slice_axis(x, 1, self.n_in, c), training)
        return ag.concat([first, rest], axis=1)

    def frozen_affine(self, channels: int):
        if self.n_in:
            raise ValueError("IBN contains instance normalization, which is not affine")
        return self.bnorm.frozen_affine(channels)


def _newton_schulz_inv_sqrt(sigma: Tensor, iterations: int) -> Tuple[Tensor, Tensor]:
    """Approximate sigma^{-1/2} by trace-normalized Newton-Schulz steps."""
    c = sigma.shape[0]
    eye = np.eye(c, dtype=sigma.dtype)
    trace = ag.hadamard(sigma, Tensor(eye)).sum()
    sigma_n = sigma * ag.power(trace, -1.0)
    p = Tensor(eye)
    for _ in range(iterations):
        p3 = ag.matmul(ag.matmul(p, p), p)
        p = (p * 3.0 - ag.matmul(p3, sigma_n)) * 0.5
    return p * ag.power(trace, -0.5), trace


def _to_features(x: Tensor) -> Tensor:
    # (N, C[, H, W]) -> (C, m)
    if x.ndim == 2:
        return ag.transpose(x)
    c = x.shape[1]
    return ag.transpose(x, (1, 0, 2, 3)).reshape(c, -1)


def _from_features(y: Tensor, like: Tensor) -> Tensor:
    if like.ndim == 2:
        return ag.transpose(y)
    n, c, h, w = like.shape
    return ag.transpose(y.reshape(c, n, h, w), (1, 0, 2, 3))


def iter_norm(x: Tensor, iterations: int = 5, eps: float = 1e-5) -> Tuple[Tensor, Tensor, Tensor]:
    """Whiten the features of ``x`` with Newton-Schulz iterations.

    Returns (whitened x, batch mean, whitening matrix).
    """
    feats = _to_features(x)
    c, m = feats.shape
    if m < 2:
        raise ValueError("iterative normalization needs at least two samples")
    mean = feats.mean(axis=1, keepdims=True)
    centered = feats - mean
    sigma = ag.matmul(centered, ag.transpose(centered)) * (1.0 / m) + np.eye(c, dtype=x.dtype) * eps
    if not np.all(np.isfinite(sigma.data)):
        raise ag.NumericError("non-finite covariance in iterative normalization")
    whitening, _ = _newton_schulz_inv_sqrt(sigma, iterations)
    return _from_features(ag.matmul(whitening, centered), x), mean, whitening


class IterNorm(_Affine):
    """Iterative (Newton-Schulz) whitening with running statistics for inference."""

    def __init__(self, channels: int, iterations: int = 5, eps: float = 1e-5, momentum: float = 0.1,
                 affine: bool = True):
        super().__init__()
        self.iterations, self.eps, self.momentum = iterations, eps, momentum
        self._init_affine(channels, affine)
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_wm", np.eye(channels))

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        if training:
            y, mean, wm = iter_norm(x, self.iterations, self.eps)
            m = self.momentum
            self._buffers["running_mean"] = (1 - m) * self._buffers["running_mean"] + m * mean.data.reshape(-1)
            self._buffers["running_wm"] = (1 - m) * self._buffers["running_wm"] + m * wm.data
        else:
            feats = _to_features(x)
            mean = self._buffers["running_mean"].astype(x.dtype)[:, None]
            wm = Tensor(self._buffers["running_wm"].astype(x.dtype))
            y = _from_features(ag.matmul(wm, feats - mean), x)
        return self._apply_affine(y)

    def frozen_affine(self, channels: int):
        g, b = self._affine_arrays()
        wm = self._buffers["running_wm"]
        return g[:, None] * wm, b - g * (wm @ self._buffers["running_mean"])


def make_norm(kind: NormKind, channels: int) -> Module:
    """Instantiate the normalization layer described by ``kind``."""
    if kind.kind == "identity":
        return Identity()
    if kind.kind == "mean_subtract":
        return MeanSubtract(channels, affine=False)
    if kind.kind == "batch":
        return BatchNorm(channels, kind.momentum, kind.eps, kind.affine)
    if kind.kind == "instance":
        return InstanceNorm(channels, kind.eps, kind.affine)
    if kind.kind == "ibn":
        return IBN(channels, kind.ratio, kind.momentum, kind.eps, kind.affine)
    return IterNorm(channels, kind.iterations, kind.eps, kind.momentum, kind.affine)


# ---------------------------------------------------------------------------
# DropBlock and label smoothing
# ---------------------------------------------------------------------------

def dropblock_mask(shape, block_size: int, keep_prob: float, rng: np.random.Generator) -> np.ndarray:
    """Binary keep-mask with square holes, one independent map per (sample, channel)."""
    n, c, h, w = shape
    if block_size > min(h, w) or block_size < 1:
        raise ValueError(f"block_size {block_size} does not fit a {h}x{w} feature map")
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    valid_h, valid_w = h - block_size + 1, w - block_size + 1
    gamma = (1 - keep_prob) / block_size ** 2 * (h * w) / (valid_h * valid_w)
    seeds = rng.random((n, c, valid_h, valid_w)) < gamma
    dropped = np.zeros(shape, dtype=bool)
    for i in range(block_size):
        for j in range(block_size):
            dropped[:, :, i:i + valid_h, j:j + valid_w] |= seeds
    return ~dropped


def dropblock(x: Tensor, block_size: int = 3, keep_prob: float = 0.9, training: bool = True,
              rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero contiguous squares of each feature map and rescale the survivors."""
    if x.ndim != 4:
        raise ValueError("dropblock needs N x C x H x W input")
    if block_size > min(x.shape[2:]):
        raise ValueError(f"block_size {block_size} exceeds feature map {x.shape[2:]}")
    if not 0 < keep_prob <= 1:
        raise ValueError(f"keep_prob must lie in (0, 1], got {keep_prob}")
    if not training or keep_prob == 1:
        return x
    rng = np.random.default_rng() if rng is None else rng
    mask = dropblock_mask(x.shape, block_size, keep_prob, rng)
    kept = mask.sum()
    scale = mask.size / kept if kept else 0.0
    return x * (mask.astype(x.dtype) * scale)


def label_smooth(labels, K: int, eps: float) -> np.ndarray:
    """Rows ``(1 - eps) * onehot + eps / K``."""
    labels = np.asarray(labels, dtype=np.int64)
    if not 0 <= eps < 1:
        raise ValueError(f"smoothing eps must lie in [0, 1), got {eps}")
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ValueError(f"labels must lie in [0, {K}); got range [{labels.min()}, {labels.max()}]")
    out = np.full((labels.size, K), eps / K)
    out[np.arange(labels.size), labels] += 1.0 - eps
    return out
