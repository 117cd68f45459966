"""
Differentiable operations used by the segmentation network.

Only what the network needs is here: dilated 3x3-style convolution, batch
normalization, ReLU, channel concatenation, per-cell softmax, weighted
negative log-likelihood, and the reparameterized Gaussian sample and KL term
of variational weights. Plus elementwise add/mul/sum for composing losses.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit

from ..errors import ConfigurationError, NoObservableCellsError, NonFiniteError, ShapeError
from .core import Function, Tensor

logger = logging.getLogger(__name__)

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_FLOOR = 1e-12


# ============================================================================
# Elementwise
# ============================================================================

class Add(Function):
    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return self.unbroadcast(grad, self.shapes[0]), self.unbroadcast(grad, self.shapes[1])


class Mul(Function):
    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return (
            self.unbroadcast(grad * self.b, self.a.shape),
            self.unbroadcast(grad * self.a, self.b.shape),
        )


class Sum(Function):
    def forward(self, a):
        self.shape = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    def backward(self, grad):
        return (np.broadcast_to(grad, self.shape).copy(),)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return Mul.apply(a, b)


def tensor_sum(a: Tensor) -> Tensor:
    return Sum.apply(a)


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad):
        return (grad * self.mask,)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the subgradient at 0 is 0"""
    return ReLU.apply(x)


class ConcatChannels(Function):
    def forward(self, *arrays):
        self.splits = np.cumsum([a.shape[1] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=1)

    def backward(self, grad):
        return tuple(np.split(grad, self.splits, axis=1))


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    if not tensors:
        raise ConfigurationError("nothing to concatenate")
    dims = [t.shape for t in tensors]
    if any(len(d) != 4 or d[0] != dims[0][0] or d[2:] != dims[0][2:] for d in dims):
        raise ShapeError("concatenation needs equal batch and spatial extents", dims)
    return ConcatChannels.apply(*tensors)


# ============================================================================
# Convolution
# ============================================================================

class Conv2dDilated(Function):
    """
    Stride-1 convolution with zero padding dilation * (k // 2).

    Computed tap by tap: each kernel offset contributes one
    (Cout x Cin) @ (Cin x B*H*W) product on a shifted view of the padded input.
    """

    def forward(self, x, w, b, dilation: int = 1):
        batch, _, height, width = x.shape
        cout, _, kh, kw = w.shape
        pad_h, pad_w = dilation * (kh // 2), dilation * (kw // 2)
        xp = np.pad(x, ((0, 0), (0, 0), (pad_h, pad_h), (pad_w, pad_w)))
        self.xp, self.w, self.dilation = xp, w, dilation
        self.pad = (pad_h, pad_w)
        self.out_hw = (height, width)

        out = np.empty((batch, cout, height, width), dtype=np.result_type(x, w, b))
        out[...] = b.reshape(1, cout, 1, 1)
        for ky in range(kh):
            for kx in range(kw):
                patch = self._patch(ky, kx)
                out += np.tensordot(w[:, :, ky, kx], patch, axes=([1], [1])).transpose(1, 0, 2, 3)
        return out

    def _patch(self, ky: int, kx: int) -> np.ndarray:
        d = self.dilation
        height, width = self.out_hw
        return self.xp[:, :, ky * d: ky * d + height, kx * d: kx * d + width]

    def backward(self, grad):
        w, d = self.w, self.dilation
        height, width = self.out_hw
        _, _, kh, kw = w.shape
        grad_xp = np.zeros_like(self.xp)
        grad_w = np.zeros_like(w)
        for ky in range(kh):
            for kx in range(kw):
                patch = self._patch(ky, kx)
                grad_w[:, :, ky, kx] = np.tensordot(grad, patch, axes=([0, 2, 3], [0, 2, 3]))
                grad_xp[:, :, ky * d: ky * d + height, kx * d: kx * d + width] += np.tensordot(
                    w[:, :, ky, kx], grad, axes=([0], [1])
                ).transpose(1, 0, 2, 3)
        pad_h, pad_w = self.pad
        grad_x = grad_xp[:, :, pad_h: pad_h + height, pad_w: pad_w + width]
        grad_b = grad.sum(axis=(0, 2, 3))
        return grad_x, grad_w, grad_b


def conv2d_dilated(x: Tensor, weights: Tensor, bias: Tensor, dilation: int = 1) -> Tensor:
    """
    Dilated convolution that keeps the spatial extents of `x`.

    x: B x Cin x H x W, weights: Cout x Cin x k x k (k odd), bias: Cout.
    """
    if dilation < 1:
        raise ConfigurationError(f"dilation must be >= 1, got {dilation}")
    if x.data.ndim != 4 or weights.data.ndim != 4 or bias.data.ndim != 1:
        raise ShapeError("convolution expects 4D input/weights and 1D bias",
                         [x.shape, weights.shape, bias.shape])
    cout, cin, kh, kw = weights.shape
    if x.shape[1] != cin or bias.shape[0] != cout:
        raise ShapeError("convolution channel mismatch", [x.shape, weights.shape, bias.shape])
    if kh != kw or kh % 2 == 0:
        raise ShapeError("convolution kernel must be square with odd size", [weights.shape])
    return Conv2dDilated.apply(x, weights, bias, dilation=dilation)


# ============================================================================
# Normalization
# ============================================================================

@dataclass
class RunningStats:
    """Per-channel running mean/variance of a batch-norm layer"""
    mean: np.ndarray
    var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def create(cls, channels: int) -> "RunningStats":
        return cls(mean=np.zeros(channels, dtype=np.float32), var=np.ones(channels, dtype=np.float32))


class BatchNorm(Function):
    def forward(self, x, scale, shift, running: RunningStats = None, training: bool = True):
        channels = x.shape[1]
        shape = (1, channels, 1, 1)
        axes = (0, 2, 3)
        self.training = training
        if training:
            count = x.size // channels
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            if running is not None:
                unbiased = var * count / max(count - 1, 1)
                running.mean[...] = (1 - running.momentum) * running.mean + running.momentum * mean
                running.var[...] = (1 - running.momentum) * running.var + running.momentum * unbiased
        else:
            mean, var = running.mean.astype(x.dtype), running.var.astype(x.dtype)
        eps = running.eps if running is not None else BN_EPS
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
        self.xhat, self.inv_std, self.scale = xhat, inv_std, scale
        return xhat * scale.reshape(shape) + shift.reshape(shape)

    def backward(self, grad):
        channels = grad.shape[1]
        shape = (1, channels, 1, 1)
        axes = (0, 2, 3)
        grad_scale = (grad * self.xhat).sum(axis=axes)
        grad_shift = grad.sum(axis=axes)
        gxhat = grad * self.scale.reshape(shape)
        if self.training:
            count = grad.size // channels
            grad_x = (self.inv_std.reshape(shape) / count) * (
                count * gxhat
                - gxhat.sum(axis=axes).reshape(shape)
                - self.xhat * (gxhat * self.xhat).sum(axis=axes).reshape(shape)
            )
        else:
            grad_x = gxhat * self.inv_std.reshape(shape)
        return grad_x, grad_scale, grad_shift


def batch_norm(
    x: Tensor,
    scale: Tensor,
    shift: Tensor,
    running: Optional[RunningStats],
    training: bool,
) -> Tensor:
    """
    Per-channel normalization over batch and grid cells.

    Train mode normalizes with batch statistics (eps 1e-5) and updates the
    running statistics with momentum 0.1; eval mode uses the running ones.
    """
    if x.data.ndim != 4:
        raise ShapeError("batch norm expects B x C x H x W input", [x.shape])
    if x.data.size == 0:
        raise ShapeError("batch norm over an empty batch", [x.shape])
    channels = x.shape[1]
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError("batch norm scale/shift must match the channel count",
                         [x.shape, scale.shape, shift.shape])
    if not training and running is None:
        raise ConfigurationError("eval-mode batch norm needs running statistics")
    return BatchNorm.apply(x, scale, shift, running=running, training=training)


# ============================================================================
# Output layer and loss
# ============================================================================

class SoftmaxCells(Function):
    def forward(self, logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(shifted)
        self.p = e / e.sum(axis=1, keepdims=True)
        return self.p

    def backward(self, grad):
        p = self.p
        return (p * (grad - (grad * p).sum(axis=1, keepdims=True)),)


def softmax_cells(logits: Tensor) -> Tensor:
    """Softmax over the channel axis of a B x C x H x W tensor"""
    if logits.data.ndim < 2 or logits.shape[1] < 2:
        raise ShapeError("softmax needs at least two classes on axis 1", [logits.shape])
    if not np.all(np.isfinite(logits.data)):
        raise NonFiniteError("non-finite logits", logits.name)
    return SoftmaxCells.apply(logits)


class WeightedNLL(Function):
    def forward(self, probs, labels: np.ndarray = None, cell_weights: np.ndarray = None):
        p_true = np.take_along_axis(probs, labels[:, None], axis=1)[:, 0]
        floored = np.maximum(p_true, PROB_FLOOR)
        total = cell_weights.sum(dtype=np.float64)
        self.labels, self.floored, self.total = labels, floored, total
        self.active = p_true >= PROB_FLOOR
        self.cell_weights = cell_weights.astype(probs.dtype, copy=False)
        self.probs_shape = probs.shape
        self.dtype = probs.dtype
        loss = -(self.cell_weights * np.log(floored)).sum(dtype=np.float64) / total
        return np.asarray(loss, dtype=probs.dtype)

    def backward(self, grad):
        grad_true = -grad * self.cell_weights * self.active / (self.floored * self.total)
        grad_probs = np.zeros(self.probs_shape, dtype=self.dtype)
        np.put_along_axis(grad_probs, self.labels[:, None], grad_true[:, None].astype(self.dtype), axis=1)
        return (grad_probs,)


def weighted_nll(probs: Tensor, labels: np.ndarray, cell_weights: np.ndarray) -> Tensor:
    """
    -sum_cells w * log p(label) / sum_cells w.

    probs: B x C x H x W, labels: B x H x W class ids, cell_weights: B x H x W
    in [0, 1]. Cells with weight 0 contribute nothing.
    """
    labels = np.asarray(labels, dtype=np.int64)
    cell_weights = np.asarray(cell_weights)
    batch, classes, height, width = probs.shape
    if labels.shape != (batch, height, width) or cell_weights.shape != labels.shape:
        raise ShapeError("probabilities, labels and weights disagree",
                         [probs.shape, labels.shape, cell_weights.shape])
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise ShapeError(f"labels outside [0, {classes})", [labels.shape])
    if cell_weights.size and (cell_weights.min() < 0 or cell_weights.max() > 1):
        raise ConfigurationError("cell weights must lie in [0, 1]")
    if not cell_weights.sum() > 0:
        raise NoObservableCellsError()
    return WeightedNLL.apply(probs, labels=labels, cell_weights=cell_weights)


# ============================================================================
# Variational weights
# ============================================================================

def softplus(rho: np.ndarray) -> np.ndarray:
    return np.logaddexp(0, rho)


class ReparamSample(Function):
    def forward(self, mu, rho, epsilon: np.ndarray = None):
        self.epsilon = epsilon.astype(mu.dtype, copy=False)
        self.dsigma = expit(rho).astype(mu.dtype, copy=False)
        return mu + softplus(rho) * self.epsilon

    def backward(self, grad):
        return grad, grad * self.epsilon * self.dsigma


def reparameterize(mu: Tensor, rho: Tensor, epsilon: np.ndarray) -> Tensor:
    """w = mu + softplus(rho) * epsilon, differentiable in mu and rho"""
    if mu.shape != rho.shape or np.shape(epsilon) != mu.shape:
        raise ShapeError("mu, rho and epsilon must share a shape", [mu.shape, rho.shape, np.shape(epsilon)])
    return ReparamSample.apply(mu, rho, epsilon=np.asarray(epsilon))


class GaussianKL(Function):
    def forward(self, mu, rho, gamma: float = 1.0):
        sigma = softplus(rho)
        self.mu, self.sigma, self.gamma = mu, sigma, gamma
        self.dsigma = expit(rho)
        kl = 0.5 * np.log(gamma) - np.log(sigma) + (sigma ** 2 + mu ** 2) / (2 * gamma) - 0.5
        return np.asarray(kl.sum(dtype=np.float64), dtype=mu.dtype)

    def backward(self, grad):
        grad_mu = grad * self.mu / self.gamma
        grad_sigma = -1.0 / self.sigma + self.sigma / self.gamma
        return grad_mu, (grad * grad_sigma * self.dsigma).astype(self.mu.dtype, copy=False)


def gaussian_kl(mu: Tensor, rho: Tensor, gamma: float) -> Tensor:
    """Sum over weights of KL[N(mu, softplus(rho)^2) || N(0, gamma)]"""
    if gamma <= 0:
        raise ConfigurationError(f"prior variance must be positive, got {gamma}")
    if mu.shape != rho.shape:
        raise ShapeError("mu and rho must share a shape", [mu.shape, rho.shape])
    return GaussianKL.apply(mu, rho, gamma=gamma)


def check_finite(array: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(array)):
        logger.error("non-finite values in %s", name)
        raise NonFiniteError("non-finite values", name)


__all__ = [
    "BN_EPS",
    "BN_MOMENTUM",
    "PROB_FLOOR",
    "RunningStats",
    "add",
    "mul",
    "tensor_sum",
    "relu",
    "concat_channels",
    "conv2d_dilated",
    "batch_norm",
    "softmax_cells",
    "weighted_nll",
    "softplus",
    "reparameterize",
    "gaussian_kl",
    "check_finite",
]
