"""Wide ResNet and plain all-conv topologies, He initialization, parameter accounting.

Layout for blocks_per_scale B and width k:

    input BN -> [ReLU] -> conv3x3 (16k)
    -> scale 1: B blocks at 16k
    -> scale 2: B blocks at 32k, first block downsamples
    -> scale 3: B blocks at 64k, first block downsamples
    -> BN -> ReLU -> conv1x1 (num_classes) -> BN (frozen) -> GAP -> logits

Each block is pre-activation: BN -> ReLU -> conv3x3 -> BN -> ReLU -> conv3x3.
Downsampling blocks stride their first conv; their skip path is a 3x3
stride-2 average pool followed by channel zero-padding.
"""

from __future__ import annotations

import logging
from typing import Callable, Iterator, List, Optional, Sequence, Union

from . import tensor_core as tc
from .binarize import ConvLayer
from .errors import ArgumentError, UsageError
from .layers import BatchNormLayer, Mode, Parameter, ReLULayer, zero_pad_channels, zero_pad_channels_backward
from .schemas import NetworkConfig


logger = logging.getLogger(__name__)

ConvFactory = Callable[..., object]
BatchNormFactory = Callable[..., object]
Observer = Optional[Callable[[str, tc.Tensor4], None]]


def default_conv_factory(name, cin, cout, kernel, stride, gain, binarized):
    return ConvLayer(name, cin, cout, kernel, stride=stride, gain=gain, binarized=binarized)


def default_bn_factory(name, channels, learn_affine):
    return BatchNormLayer(name, channels, learn_affine=learn_affine)


class GlobalAvgPoolLayer:
    def __init__(self, name: str) -> None:
        self.name = name
        self._shape = None

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        self._shape = x.shape if mode == "train" else None
        return tc.global_avg_pool(x)

    def backward(self, dy: tc.Tensor4) -> tc.Tensor4:
        if self._shape is None:
            raise UsageError(f"Layer '{self.name}' has no train-mode forward to differentiate")
        return tc.global_avg_pool_backward(self._shape, dy)


class ResidualBlock:
    def __init__(
        self,
        name: str,
        cin: int,
        cout: int,
        stride: int,
        cfg: NetworkConfig,
        conv_factory: ConvFactory,
        bn_factory: BatchNormFactory,
    ) -> None:
        self.name = name
        self.cin = cin
        self.cout = cout
        self.stride = stride
        self.skip = cfg.skip_connections
        learn = cfg.learn_bn_affine

        def conv(suffix: str, c_in: int, s: int):
            full = f"{name}.{suffix}"
            binarized = cfg.binarized and full not in cfg.binarize_exclude
            return conv_factory(full, c_in, cout, 3, s, cfg.gain, binarized)

        self.layers = [
            bn_factory(f"{name}.bn1", cin, learn),
            ReLULayer(f"{name}.relu1"),
            conv("conv1", cin, stride),
            bn_factory(f"{name}.bn2", cout, learn),
            ReLULayer(f"{name}.relu2"),
            conv("conv2", cout, 1),
        ]
        self._x_shape = None

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def _skip_forward(self, x: tc.Tensor4) -> tc.Tensor4:
        s = tc.avg_pool(x) if self.stride == 2 else x
        return zero_pad_channels(s, self.cout)

    def forward(self, x: tc.Tensor4, mode: Mode, observer: Observer = None) -> tc.Tensor4:
        self._x_shape = x.shape if mode == "train" else None
        h = x
        for layer in self.layers:
            h = layer.forward(h, mode)
            if observer is not None:
                observer(layer.name, h)
        if not self.skip:
            return h
        return h + self._skip_forward(x)

    def backward(self, dy: tc.Tensor4) -> tc.Tensor4:
        if self._x_shape is None:
            raise UsageError(f"Block '{self.name}' has no train-mode forward to differentiate")
        dh = dy
        for layer in reversed(self.layers):
            dh = layer.backward(dh)
        if not self.skip:
            return dh
        ds = zero_pad_channels_backward(dy, self.cin)
        if self.stride == 2:
            ds = tc.avg_pool_backward((self._x_shape[0], self.cin) + tuple(self._x_shape[2:]), ds)
        return dh + ds

    def leaves(self) -> Iterator[object]:
        yield from self.layers


Node = Union[ResidualBlock, object]


class Network:
    def __init__(self, cfg: NetworkConfig, nodes: Sequence[Node]) -> None:
        self.cfg = cfg
        self.nodes: List[Node] = list(nodes)

    # Structure

    def leaves(self) -> Iterator[object]:
        for node in self.nodes:
            if isinstance(node, ResidualBlock):
                yield from node.leaves()
            else:
                yield node

    def conv_layers(self) -> List[object]:
        return [layer for layer in self.leaves() if getattr(layer, "kind", None) == "conv"]

    def bn_layers(self) -> List[object]:
        return [layer for layer in self.leaves() if getattr(layer, "kind", None) == "bn"]

    def parameters(self) -> List[Parameter]:
        return [p for node in self.nodes for p in node.parameters()]

    # Propagation

    def forward(self, x: tc.Tensor4, mode: Mode = "train", observer: Observer = None) -> tc.Tensor4:
        h = tc.as_tensor4(x)
        expected = (self.cfg.input_channels, self.cfg.image_size, self.cfg.image_size)
        if tuple(h.shape[1:]) != expected:
            raise ArgumentError(f"Network expects inputs of shape (N, {expected[0]}, {expected[1]}, {expected[2]}), got {h.shape}")
        for node in self.nodes:
            if isinstance(node, ResidualBlock):
                h = node.forward(h, mode, observer)
            else:
                h = node.forward(h, mode)
            if observer is not None:
                observer(node.name, h)
        return h

    def backward(self, dlogits: tc.Tensor4) -> tc.Tensor4:
        dh = dlogits
        for node in reversed(self.nodes):
            dh = node.backward(dh)
        return dh

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


def _build(
    cfg: NetworkConfig,
    conv_factory: ConvFactory = default_conv_factory,
    bn_factory: BatchNormFactory = default_bn_factory,
) -> Network:
    widths = cfg.scale_widths

    def binarized(name: str) -> bool:
        return cfg.binarized and name not in cfg.binarize_exclude

    nodes: List[Node] = [
        bn_factory("input_bn", cfg.input_channels, cfg.input_relu or cfg.learn_bn_affine),
    ]
    if cfg.input_relu:
        nodes.append(ReLULayer("input_relu"))
    nodes.append(conv_factory("conv0", cfg.input_channels, widths[0], 3, 1, cfg.gain, binarized("conv0")))

    cin = widths[0]
    for scale, cout in enumerate(widths, start=1):
        for b in range(1, cfg.blocks_per_scale + 1):
            stride = 2 if (scale > 1 and b == 1) else 1
            nodes.append(ResidualBlock(f"scale{scale}.block{b}", cin, cout, stride, cfg, conv_factory, bn_factory))
            cin = cout

    nodes.extend(
        [
            bn_factory("final_bn", cin, cfg.learn_bn_affine),
            ReLULayer("final_relu"),
            conv_factory("head", cin, cfg.num_classes, 1, 1, cfg.gain, binarized("head")),
            # Never learned, in any mode
            bn_factory("head_bn", cfg.num_classes, False),
            GlobalAvgPoolLayer("gap"),
        ]
    )
    unknown = set(cfg.binarize_exclude) - {layer.name for layer in _conv_leaves(nodes)}
    if unknown:
        raise ArgumentError(f"binarize_exclude names unknown conv layers: {sorted(unknown)}")
    return Network(cfg, nodes)


def _conv_leaves(nodes: Sequence[Node]) -> Iterator[object]:
    for node in nodes:
        leaves = node.leaves() if isinstance(node, ResidualBlock) else [node]
        for layer in leaves:
            if getattr(layer, "kind", None) == "conv":
                yield layer


def _validate(cfg: NetworkConfig) -> None:
    if cfg.blocks_per_scale < 1 or cfg.width < 1 or cfg.num_classes < 2:
        raise ArgumentError("Network needs blocks_per_scale >= 1, width >= 1, num_classes >= 2")
    if cfg.image_size < 4:
        raise ArgumentError(f"Image size {cfg.image_size} is too small for two downsampling stages")


def build_wide_resnet(cfg: NetworkConfig, conv_factory: ConvFactory = default_conv_factory, bn_factory: BatchNormFactory = default_bn_factory) -> Network:
    _validate(cfg)
    if not cfg.skip_connections:
        raise ArgumentError("build_wide_resnet needs skip_connections=true; use build_plain_cnn")
    net = _build(cfg, conv_factory, bn_factory)
    logger.info("Built wide ResNet %d-%d: %d learned parameters", cfg.conv_layer_count, cfg.width, param_count(net))
    return net


def build_plain_cnn(cfg: NetworkConfig, conv_factory: ConvFactory = default_conv_factory, bn_factory: BatchNormFactory = default_bn_factory) -> Network:
    _validate(cfg)
    if cfg.skip_connections:
        raise ArgumentError("build_plain_cnn needs skip_connections=false")
    net = _build(cfg, conv_factory, bn_factory)
    logger.info("Built plain CNN %d-%d: %d learned parameters", cfg.conv_layer_count, cfg.width, param_count(net))
    return net


def build_network(cfg: NetworkConfig, conv_factory: ConvFactory = default_conv_factory, bn_factory: BatchNormFactory = default_bn_factory) -> Network:
    if cfg.skip_connections:
        return build_wide_resnet(cfg, conv_factory, bn_factory)
    return build_plain_cnn(cfg, conv_factory, bn_factory)


def he_init(net: Network, seed: int) -> None:
    """Gaussian shadow weights with std gain / sqrt(F^2 * Cin); learned BN affines at (1, 0)."""
    rng = tc.Rng(seed)
    for layer in net.conv_layers():
        st = layer.state
        st.weights[...] = tc.rng_gaussian(rng, st.scale, st.weights.shape)
    for layer in net.bn_layers():
        layer.state.gamma.fill(1.0)
        layer.state.beta.fill(0.0)


def create_network(cfg: NetworkConfig) -> Network:
    net = build_network(cfg)
    he_init(net, cfg.seed)
    return net


def param_count(net: Network) -> int:
    return sum(p.size for p in net.parameters())


def conv_weight_count(net: Network) -> int:
    return sum(int(layer.state.weights.size) for layer in net.conv_layers())


def closed_form_param_count(cfg: NetworkConfig) -> int:
    """Learned scalars of a build, from the config alone."""
    w1, w2, w3 = cfg.scale_widths
    b = cfg.blocks_per_scale
    convs = 9 * cfg.input_channels * w1
    cin = w1
    for w in (w1, w2, w3):
        convs += 9 * cin * w + 9 * w * w + (b - 1) * 2 * 9 * w * w
        cin = w
    convs += w3 * cfg.num_classes
    affine = 0
    if cfg.input_relu or cfg.learn_bn_affine:
        affine += 2 * cfg.input_channels
    if cfg.learn_bn_affine:
        affine += 2 * w3  # final_bn
        cin = w1
        for w in (w1, w2, w3):
            affine += 2 * (cin + w) + (b - 1) * 4 * w
            cin = w
    return int(convs + affine)
