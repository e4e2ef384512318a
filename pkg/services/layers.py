from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Literal, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

import config
from . import tensor_core as tc
from .errors import ArgumentError, ShapeError, UsageError


logger = logging.getLogger(__name__)

# "collect" normalizes with batch statistics and records them without touching
# the running moments; used when recomputing inference moments after training.
Mode = Literal["train", "infer", "collect"]


@dataclass
class Parameter:
    """A learnable tensor and the gradient slot the optimizer reads."""

    name: str
    value: NDArray
    grad: Optional[NDArray] = None

    @property
    def size(self) -> int:
        return int(self.value.size)


# -----------------------------
# Batch normalization
# -----------------------------


@dataclass
class BatchNormState:
    channels: int
    learn_affine: bool = False
    epsilon: float = config.BN_EPSILON
    ema_decay: float = config.BN_EMA_DECAY
    running_mean: NDArray = field(default=None)  # type: ignore[assignment]
    running_var: NDArray = field(default=None)  # type: ignore[assignment]
    gamma: NDArray = field(default=None)  # type: ignore[assignment]
    beta: NDArray = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.channels < 1:
            raise ArgumentError(f"BatchNorm needs at least one channel, got {self.channels}")
        dtype = tc.get_dtype()
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=dtype)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=dtype)
        if self.gamma is None:
            self.gamma = np.ones(self.channels, dtype=dtype)
        if self.beta is None:
            self.beta = np.zeros(self.channels, dtype=dtype)


@dataclass
class BatchNormCache:
    mode: Mode
    xhat: NDArray
    inv_std: NDArray
    gamma: NDArray
    learn_affine: bool
    batch_mean: Optional[NDArray] = None
    batch_var: Optional[NDArray] = None


def _per_channel(v: NDArray) -> NDArray:
    return v.reshape(1, -1, 1, 1)


def batch_moments(x: tc.Tensor4) -> Tuple[NDArray, NDArray]:
    """Per-channel mean and biased variance over (N, H, W)."""
    mean = x.mean(axis=(0, 2, 3))
    var = ((x - _per_channel(mean)) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def batchnorm_forward(
    x: tc.Tensor4, state: BatchNormState, mode: Mode = "train"
) -> Tuple[tc.Tensor4, BatchNormCache]:
    x = tc.as_tensor4(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"BatchNorm expects {state.channels} channels, got {x.shape[1]}")

    batch_mean = batch_var = None
    if mode == "infer":
        mean, var = state.running_mean, state.running_var
    else:
        if x.shape[0] * x.shape[2] * x.shape[3] < 2:
            raise ArgumentError("Training-mode BatchNorm needs at least 2 values per channel")
        mean, var = batch_moments(x)
        batch_mean, batch_var = mean, var
        if mode == "train":
            d = state.ema_decay
            state.running_mean = (d * state.running_mean + (1.0 - d) * mean).astype(x.dtype)
            state.running_var = (d * state.running_var + (1.0 - d) * var).astype(x.dtype)

    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - _per_channel(mean)) * _per_channel(inv_std)
    y = xhat * _per_channel(state.gamma) + _per_channel(state.beta)
    cache = BatchNormCache(
        mode=mode,
        xhat=xhat,
        inv_std=inv_std,
        gamma=state.gamma,
        learn_affine=state.learn_affine,
        batch_mean=batch_mean,
        batch_var=batch_var,
    )
    return y.astype(x.dtype, copy=False), cache


def batchnorm_backward(
    cache: BatchNormCache, dy: tc.Tensor4
) -> Tuple[tc.Tensor4, Optional[NDArray], Optional[NDArray]]:
    """Gradient of the train-mode forward. Affine gradients are None when the affine is frozen."""
    if cache.mode != "train":
        raise UsageError(f"BatchNorm backward needs a train-mode cache, got '{cache.mode}'")
    if dy.shape != cache.xhat.shape:
        raise ShapeError(f"Output gradient has shape {dy.shape}, expected {cache.xhat.shape}")

    xhat = cache.xhat
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    dxhat = dy * _per_channel(cache.gamma)
    sum_dxhat = dxhat.sum(axis=(0, 2, 3))
    sum_dxhat_xhat = (dxhat * xhat).sum(axis=(0, 2, 3))
    dx = _per_channel(cache.inv_std / m) * (
        m * dxhat - _per_channel(sum_dxhat) - xhat * _per_channel(sum_dxhat_xhat)
    )
    if not cache.learn_affine:
        return dx, None, None
    dgamma = (dy * xhat).sum(axis=(0, 2, 3))
    dbeta = dy.sum(axis=(0, 2, 3))
    return dx, dgamma, dbeta


class BatchNormLayer:
    kind = "bn"

    def __init__(self, name: str, channels: int, learn_affine: bool = False) -> None:
        self.name = name
        self.state = BatchNormState(channels=channels, learn_affine=learn_affine)
        self._cache: Optional[BatchNormCache] = None
        self._gamma = Parameter(f"{name}.gamma", self.state.gamma)
        self._beta = Parameter(f"{name}.beta", self.state.beta)
        # Per-batch (mean, var) pairs recorded in "collect" mode
        self.collected: List[Tuple[NDArray, NDArray]] = []

    def parameters(self) -> List[Parameter]:
        if not self.state.learn_affine:
            return []
        # The optimizer updates these arrays in place, so they stay shared with the state.
        self._gamma.value = self.state.gamma
        self._beta.value = self.state.beta
        return [self._gamma, self._beta]

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        y, cache = batchnorm_forward(x, self.state, mode)
        if mode == "collect":
            self.collected.append((cache.batch_mean, cache.batch_var))
        self._cache = cache if mode == "train" else None
        return y

    def backward(self, dy: tc.Tensor4) -> tc.Tensor4:
        if self._cache is None:
            raise UsageError(f"Layer '{self.name}' has no train-mode forward to differentiate")
        dx, dgamma, dbeta = batchnorm_backward(self._cache, dy)
        if self.state.learn_affine:
            self._gamma.grad = dgamma
            self._beta.grad = dbeta
        self._cache = None
        return dx


# -----------------------------
# ReLU
# -----------------------------


def relu(x: tc.Tensor4) -> tc.Tensor4:
    return np.maximum(x, 0)


def relu_backward(x: tc.Tensor4, dy: tc.Tensor4) -> tc.Tensor4:
    return np.where(x > 0, dy, 0).astype(dy.dtype, copy=False)


class ReLULayer:
    def __init__(self, name: str) -> None:
        self.name = name
        self._x: Optional[tc.Tensor4] = None

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        self._x = x if mode == "train" else None
        return relu(x)

    def backward(self, dy: tc.Tensor4) -> tc.Tensor4:
        if self._x is None:
            raise UsageError(f"Layer '{self.name}' has no train-mode forward to differentiate")
        dx = relu_backward(self._x, dy)
        self._x = None
        return dx


# -----------------------------
# Softmax cross-entropy
# -----------------------------


@dataclass
class LossOutput:
    loss: float
    dlogits: tc.Tensor4


def softmax(logits: NDArray, axis: int = 1) -> NDArray:
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_cross_entropy(logits: tc.Tensor4, labels: NDArray) -> LossOutput:
    logits = tc.as_tensor4(logits, "logits")
    n, k = logits.shape[0], logits.shape[1]
    if logits.shape[2:] != (1, 1):
        raise ShapeError(f"Logits must be (N, K, 1, 1), got {logits.shape}")
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"Got {labels.shape[0]} labels for a batch of {n}")
    if labels.min() < 0 or labels.max() >= k:
        raise ArgumentError(f"Labels must lie in [0, {k})")

    z = logits.reshape(n, k)
    shifted = z - z.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())

    grad = np.exp(log_probs)
    grad[rows, labels] -= 1.0
    grad /= n
    return LossOutput(loss=loss, dlogits=grad.reshape(n, k, 1, 1).astype(logits.dtype, copy=False))


# -----------------------------
# Channel zero-padding for downsampling skips
# -----------------------------


def zero_pad_channels(x: tc.Tensor4, c_out: int) -> tc.Tensor4:
    c = x.shape[1]
    if c_out < c:
        raise ArgumentError(f"Cannot pad {c} channels down to {c_out}")
    if c_out == c:
        return x
    pad = np.zeros((x.shape[0], c_out - c, x.shape[2], x.shape[3]), dtype=x.dtype)
    return np.concatenate([x, pad], axis=1)


def zero_pad_channels_backward(dy: tc.Tensor4, c_in: int) -> tc.Tensor4:
    return np.ascontiguousarray(dy[:, :c_in])
