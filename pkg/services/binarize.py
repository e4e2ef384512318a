"""Sign binarization of conv weights with a fixed per-layer scale.

Propagation uses s * sign(W) where s = gain / sqrt(F^2 * Cin) is the He
initialization std of the layer and is never learned. The optimizer only
ever touches the full-precision shadow weights W; the gradient with respect
to the binarized tensor is applied to W unchanged (straight-through).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

from . import tensor_core as tc
from .errors import ArgumentError, UsageError
from .layers import Mode, Parameter


logger = logging.getLogger(__name__)

RESNET_GAIN = math.sqrt(2.0)
PLAIN_GAIN = 2.0


def layer_scale(kernel: int, cin: int, gain: float) -> float:
    if kernel < 1 or cin < 1 or not gain > 0:
        raise ArgumentError(f"layer_scale needs F >= 1, Cin >= 1, gain > 0 (got {kernel}, {cin}, {gain})")
    return gain / math.sqrt(kernel * kernel * cin)


def binarize_weights(w: NDArray, s: float) -> NDArray:
    """s * sign(w) with sign(0) taken as +1."""
    if not s > 0:
        raise ArgumentError(f"Binarization scale must be positive, got {s}")
    return np.where(w >= 0, s, -s).astype(w.dtype, copy=False)


@dataclass
class ConvLayerState:
    cout: int
    cin: int
    kernel: int
    gain: float = RESNET_GAIN
    stride: int = 1
    binarized: bool = False
    weights: NDArray = field(default=None)  # type: ignore[assignment]
    scale: float = field(init=False)

    def __post_init__(self) -> None:
        if self.stride not in (1, 2):
            raise ArgumentError(f"Stride must be 1 or 2, got {self.stride}")
        self.scale = layer_scale(self.kernel, self.cin, self.gain)
        if self.weights is None:
            self.weights = np.zeros((self.cout, self.cin, self.kernel, self.kernel), dtype=tc.get_dtype())

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    def propagated_weights(self) -> NDArray:
        if self.binarized:
            return binarize_weights(self.weights, self.scale)
        return self.weights


def binarized_conv_forward(x: tc.Tensor4, layer: ConvLayerState) -> tc.Tensor4:
    if not layer.binarized:
        raise UsageError("binarized_conv_forward called on a full-precision layer")
    w_hat = binarize_weights(layer.weights, layer.scale)
    return tc.conv2d_forward(x, w_hat, layer.stride, layer.pad)


def binarized_conv_backward(
    x: tc.Tensor4, layer: ConvLayerState, dy: tc.Tensor4
) -> Tuple[tc.Tensor4, NDArray]:
    """Returns (dx, dW_shadow); dW_shadow is dL/dW_hat applied straight through."""
    if not layer.binarized:
        raise UsageError("binarized_conv_backward called on a full-precision layer")
    w_hat = binarize_weights(layer.weights, layer.scale)
    return tc.conv2d_backward(x, w_hat, dy, layer.stride, layer.pad)


class ConvLayer:
    """Bias-free convolution over shadow weights, binarized or full precision."""

    kind = "conv"

    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        kernel: int,
        stride: int = 1,
        gain: float = RESNET_GAIN,
        binarized: bool = False,
    ) -> None:
        self.name = name
        self.state = ConvLayerState(cout=cout, cin=cin, kernel=kernel, gain=gain, stride=stride, binarized=binarized)
        self.weight = Parameter(f"{name}.weight", self.state.weights)
        self._x: Optional[tc.Tensor4] = None

    def parameters(self) -> List[Parameter]:
        return [self.weight]

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        self._x = x if mode == "train" else None
        st = self.state
        if st.binarized:
            return binarized_conv_forward(x, st)
        return tc.conv2d_forward(x, st.weights, st.stride, st.pad)

    def backward(self, dy: tc.Tensor4) -> tc.Tensor4:
        if self._x is None:
            raise UsageError(f"Layer '{self.name}' has no train-mode forward to differentiate")
        st = self.state
        if st.binarized:
            dx, dw = binarized_conv_backward(self._x, st, dy)
        else:
            dx, dw = tc.conv2d_backward(self._x, st.weights, dy, st.stride, st.pad)
        self.weight.grad = dw
        self._x = None
        return dx
