"""1-bit-per-weight model files and the multiplier-free inference path.

File layout, every multi-byte field little-endian:

    header      magic "B1W1" | version u16 | conv count u16 | bn count u16 | payload bytes u64
    conv record index u16 | F u16 | Cin u32 | Cout u32 | stride u16 | scale f32 | bit offset u64
    bn record   index u16 | channels u32 | epsilon f32 | has_affine u8
                | mean f32[C] | var f32[C] | (gamma f32[C] | beta f32[C] if has_affine)
    payload     one bit per conv weight, 1 = +1 and 0 = -1, ordered (Cout, Cin, kh, kw)
                row-major, most significant bit first, each layer padded to a whole byte

The network topology is not in the file: it is rebuilt from the NetworkConfig
stored in the JSON sidecar next to it.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
from numpy.typing import NDArray

import config
from . import tensor_core as tc
from .binarize import layer_scale
from .errors import ArgumentError, ExportError, FormatError, IntegrityError, ShapeError
from .layers import Mode, Parameter, softmax
from .model_builder import Network, build_network
from .schemas import NetworkConfig, parse_network_config


logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4sHHHQ")
CONV_RECORD = struct.Struct("<HHIIHfQ")
BN_RECORD = struct.Struct("<HIfB")
F32 = np.dtype("<f4")


@dataclass
class ConvRecord:
    index: int
    kernel: int
    cin: int
    cout: int
    stride: int
    scale: float
    bit_offset: int

    @property
    def weight_count(self) -> int:
        return self.kernel * self.kernel * self.cin * self.cout

    @property
    def byte_count(self) -> int:
        return (self.weight_count + 7) // 8


@dataclass
class BatchNormRecord:
    index: int
    channels: int
    epsilon: float
    mean: NDArray
    var: NDArray
    gamma: Optional[NDArray] = None
    beta: Optional[NDArray] = None

    @property
    def has_affine(self) -> bool:
        return self.gamma is not None

    @property
    def nbytes(self) -> int:
        return BN_RECORD.size + 4 * self.channels * (4 if self.has_affine else 2)


@dataclass
class PackedModel:
    version: int
    convs: List[ConvRecord]
    bns: List[BatchNormRecord]
    payload: bytes
    file_size: int = 0

    def layer_bits(self, rec: ConvRecord) -> NDArray[np.uint8]:
        start = rec.bit_offset // 8
        packed = np.frombuffer(self.payload, dtype=np.uint8, count=rec.byte_count, offset=start)
        return np.unpackbits(packed, count=rec.weight_count)


def sidecar_path(path: str | Path) -> Path:
    p = Path(path)
    return p.with_name(p.name + config.SIDECAR_SUFFIX)


# -----------------------------
# Sizes
# -----------------------------


class _ConvSpec:
    kind = "conv"

    def __init__(self, name, cin, cout, kernel, stride, gain, binarized):
        self.name, self.cin, self.cout, self.kernel = name, cin, cout, kernel
        self.stride, self.gain, self.binarized = stride, gain, binarized

    def parameters(self) -> List[Parameter]:
        return []


class _BatchNormSpec:
    kind = "bn"

    def __init__(self, name, channels, learn_affine):
        self.name, self.channels, self.learn_affine = name, channels, learn_affine

    def parameters(self) -> List[Parameter]:
        return []


def predicted_payload_bytes(cfg: NetworkConfig) -> int:
    skeleton = build_network(cfg, conv_factory=_ConvSpec, bn_factory=_BatchNormSpec)
    return sum((c.kernel * c.kernel * c.cin * c.cout + 7) // 8 for c in skeleton.conv_layers())


def predicted_file_size(cfg: NetworkConfig) -> int:
    """Exact packed file size for a config, without building any weights."""
    skeleton = build_network(cfg, conv_factory=_ConvSpec, bn_factory=_BatchNormSpec)
    convs = skeleton.conv_layers()
    size = HEADER.size + CONV_RECORD.size * len(convs)
    for bn in skeleton.bn_layers():
        size += BN_RECORD.size + 4 * bn.channels * (4 if bn.learn_affine else 2)
    return size + sum((c.kernel * c.kernel * c.cin * c.cout + 7) // 8 for c in convs)


# -----------------------------
# Export
# -----------------------------


def export_packed(net: Network, path: str | Path, metadata: Optional[Dict[str, Any]] = None) -> Path:
    convs = net.conv_layers()
    unbinarized = [layer.name for layer in convs if not layer.state.binarized]
    if unbinarized:
        excluded = [n for n in unbinarized if n in net.cfg.binarize_exclude]
        if excluded:
            raise ExportError(f"Layers excluded from binarization have no 1-bit form: {excluded}")
        raise ExportError(f"Network has full-precision conv layers: {unbinarized[:5]}")

    records = bytearray()
    payload = bytearray()
    for index, layer in enumerate(convs):
        st = layer.state
        bits = np.packbits((st.weights >= 0).reshape(-1))
        records += CONV_RECORD.pack(index, st.kernel, st.cin, st.cout, st.stride, st.scale, 8 * len(payload))
        payload += bits.tobytes()

    bns = net.bn_layers()
    for index, layer in enumerate(bns):
        st = layer.state
        records += BN_RECORD.pack(index, st.channels, st.epsilon, int(st.learn_affine))
        arrays = [st.running_mean, st.running_var] + ([st.gamma, st.beta] if st.learn_affine else [])
        for arr in arrays:
            records += np.asarray(arr, dtype=F32).tobytes()

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    with out.open("wb") as f:
        f.write(HEADER.pack(config.PACK_MAGIC, config.PACK_VERSION, len(convs), len(bns), len(payload)))
        f.write(records)
        f.write(payload)

    sidecar = {
        "format": config.PACK_MAGIC.decode("ascii"),
        "version": config.PACK_VERSION,
        "network": net.cfg.model_dump(mode="json"),
        "normalization": "pixel / 255",
    }
    sidecar.update(metadata or {})
    sidecar_path(out).write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info("Packed model written: %s (%d conv layers, %d payload bytes)", out, len(convs), len(payload))
    return out


# -----------------------------
# Parsing
# -----------------------------


def read_packed(path: str | Path) -> PackedModel:
    src = Path(path)
    if not src.is_file():
        raise FormatError(f"Packed model does not exist: {src}")
    raw = src.read_bytes()
    name = src.name

    if len(raw) < HEADER.size:
        raise FormatError(f"{name}: truncated header", offset=len(raw))
    magic, version, conv_count, bn_count, payload_len = HEADER.unpack_from(raw, 0)
    if magic != config.PACK_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}, expected {config.PACK_MAGIC!r}", offset=0)
    if version != config.PACK_VERSION:
        raise FormatError(f"{name}: unsupported format version {version}", offset=4)
    pos = HEADER.size

    convs: List[ConvRecord] = []
    for _ in range(conv_count):
        if pos + CONV_RECORD.size > len(raw):
            raise FormatError(f"{name}: truncated conv record", offset=pos)
        convs.append(ConvRecord(*CONV_RECORD.unpack_from(raw, pos)))
        pos += CONV_RECORD.size

    bns: List[BatchNormRecord] = []
    for _ in range(bn_count):
        if pos + BN_RECORD.size > len(raw):
            raise FormatError(f"{name}: truncated batch-norm record", offset=pos)
        index, channels, eps, has_affine = BN_RECORD.unpack_from(raw, pos)
        pos += BN_RECORD.size
        count = 4 if has_affine else 2
        if pos + 4 * channels * count > len(raw):
            raise FormatError(f"{name}: truncated batch-norm moments", offset=pos)
        arrays = []
        for _ in range(count):
            arrays.append(np.frombuffer(raw, dtype=F32, count=channels, offset=pos).copy())
            pos += 4 * channels
        bns.append(BatchNormRecord(index, channels, eps, *arrays))

    if len(raw) - pos != payload_len:
        raise FormatError(f"{name}: payload is {len(raw) - pos} bytes, header says {payload_len}", offset=pos)
    expected = sum(r.byte_count for r in convs)
    if payload_len != expected:
        raise FormatError(f"{name}: payload of {payload_len} bytes does not match the {expected} the records need", offset=pos)
    offset = 0
    for rec in convs:
        if rec.bit_offset != 8 * offset:
            raise FormatError(f"{name}: conv record {rec.index} has bit offset {rec.bit_offset}, expected {8 * offset}")
        offset += rec.byte_count

    return PackedModel(version=version, convs=convs, bns=bns, payload=raw[pos:], file_size=len(raw))


def read_sidecar(path: str | Path) -> Dict[str, Any]:
    side = sidecar_path(path)
    if not side.is_file():
        raise FormatError(f"Sidecar config does not exist: {side}")
    try:
        return json.loads(side.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{side.name}: not valid JSON ({exc})") from exc


# -----------------------------
# Multiplier-free inference
# -----------------------------


class PackedConvLayer:
    """Conv layer holding only sign bits and the layer scale."""

    kind = "conv"

    def __init__(self, name, cin, cout, kernel, stride, gain, binarized) -> None:
        self.name = name
        self.cin = cin
        self.cout = cout
        self.kernel = kernel
        self.stride = stride
        self.gain = gain
        self.scale = 0.0
        self.positive: Optional[NDArray[np.bool_]] = None  # (Cout, Cin*F*F)

    @property
    def pad(self) -> int:
        return (self.kernel - 1) // 2

    def load(self, rec: ConvRecord, bits: NDArray[np.uint8]) -> None:
        self.scale = float(rec.scale)
        self.positive = bits.astype(bool).reshape(self.cout, -1)

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        return signconv_infer(x, self)


def signconv_infer(x: tc.Tensor4, layer: PackedConvLayer) -> tc.Tensor4:
    """Sign-gated sums of input elements, then one multiplication by the scale per output."""
    x = tc.as_tensor4(x)
    if x.shape[1] != layer.cin:
        raise ShapeError(f"Layer '{layer.name}' expects {layer.cin} channels, got {x.shape[1]}")
    if layer.positive is None:
        raise ArgumentError(f"Layer '{layer.name}' has no weights loaded")
    cols = tc.im2col(x, layer.kernel, layer.stride, layer.pad)
    n, _, oh, ow = cols.shape[:4]
    # (N, OH, OW, Cin*F*F), same (Cin, kh, kw) order as the bit stream
    patches = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, -1)
    total = patches.sum(axis=-1)
    out = np.empty((n, layer.cout, oh, ow), dtype=x.dtype)
    for co in range(layer.cout):
        plus = patches[..., layer.positive[co]].sum(axis=-1)
        # plus - (total - plus)
        out[:, co] = (plus + plus - total) * layer.scale
    return out


class FoldedBatchNormLayer:
    """Inference BN as a per-channel affine: a = gamma / sqrt(var + eps), b = beta - mean * a."""

    kind = "bn"

    def __init__(self, name, channels, learn_affine) -> None:
        self.name = name
        self.channels = channels
        self.learn_affine = learn_affine
        self.a: Optional[NDArray] = None
        self.b: Optional[NDArray] = None

    def load(self, rec: BatchNormRecord) -> None:
        a = 1.0 / np.sqrt(rec.var.astype(np.float64) + rec.epsilon)
        if rec.has_affine:
            a = a * rec.gamma
            b = rec.beta - rec.mean * a
        else:
            b = -rec.mean * a
        dtype = tc.get_dtype()
        self.a = a.astype(dtype).reshape(1, -1, 1, 1)
        self.b = b.astype(dtype).reshape(1, -1, 1, 1)

    def parameters(self) -> List[Parameter]:
        return []

    def forward(self, x: tc.Tensor4, mode: Mode) -> tc.Tensor4:
        if x.shape[1] != self.channels:
            raise ShapeError(f"Layer '{self.name}' expects {self.channels} channels, got {x.shape[1]}")
        return x * self.a + self.b


@dataclass
class InferenceNet:
    cfg: NetworkConfig
    net: Network
    packed: PackedModel
    metadata: Dict[str, Any] = field(default_factory=dict)

    def logits(self, x: tc.Tensor4) -> tc.Tensor4:
        return self.net.forward(x, "infer")


def import_packed(path: str | Path) -> InferenceNet:
    packed = read_packed(path)
    sidecar = read_sidecar(path)
    if "network" not in sidecar:
        raise FormatError(f"{sidecar_path(path).name}: missing 'network' section")
    cfg = parse_network_config(sidecar["network"])
    net = build_network(cfg, conv_factory=PackedConvLayer, bn_factory=FoldedBatchNormLayer)

    convs = net.conv_layers()
    bns = net.bn_layers()
    if len(convs) != len(packed.convs) or len(bns) != len(packed.bns):
        raise IntegrityError(
            f"File holds {len(packed.convs)} conv / {len(packed.bns)} BN records, "
            f"config builds {len(convs)} / {len(bns)}"
        )
    for layer, rec in zip(convs, packed.convs):
        geometry = (rec.kernel, rec.cin, rec.cout, rec.stride)
        if geometry != (layer.kernel, layer.cin, layer.cout, layer.stride):
            raise IntegrityError(f"Conv record {rec.index} geometry {geometry} does not match layer '{layer.name}'")
        expected = np.float32(layer_scale(rec.kernel, rec.cin, layer.gain))
        if abs(np.float32(rec.scale) - expected) > np.finfo(np.float32).eps * expected:
            raise IntegrityError(f"Conv record {rec.index} scale {rec.scale} differs from g/sqrt(F^2*Cin) = {expected}")
        layer.load(rec, packed.layer_bits(rec))
    for layer, rec in zip(bns, packed.bns):
        if rec.channels != layer.channels or rec.has_affine != layer.learn_affine:
            raise IntegrityError(f"BN record {rec.index} does not match layer '{layer.name}'")
        layer.load(rec)
    logger.info("Packed model loaded: %s", path)
    return InferenceNet(cfg=cfg, net=net, packed=packed, metadata=sidecar)


def infer(model: InferenceNet, image: NDArray) -> NDArray:
    """Class probabilities for one (C, H, W) image or an (N, C, H, W) batch.

    uint8 inputs are raw pixels and are scaled by 1/255 first.
    """
    arr = np.asarray(image)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    cfg = model.cfg
    expected = (cfg.input_channels, cfg.image_size, cfg.image_size)
    if arr.ndim != 4 or tuple(arr.shape[1:]) != expected:
        raise ArgumentError(f"Expected image of shape {expected}, got {np.asarray(image).shape}")
    x = arr.astype(tc.get_dtype()) / 255.0 if arr.dtype == np.uint8 else arr.astype(tc.get_dtype())
    logits = model.logits(x).reshape(arr.shape[0], -1)
    probs = softmax(logits.astype(np.float64), axis=1)
    return probs[0] if single else probs


def describe_packed(path: str | Path) -> Dict[str, Any]:
    """Header, per-layer records and a file-size audit for `inspect`."""
    packed = read_packed(path)
    layers = [
        {
            "index": r.index,
            "F": r.kernel,
            "Cin": r.cin,
            "Cout": r.cout,
            "stride": r.stride,
            "scale": r.scale,
            "bits": r.weight_count,
            "bytes": r.byte_count,
        }
        for r in packed.convs
    ]
    weights = sum(r.weight_count for r in packed.convs)
    report: Dict[str, Any] = {
        "magic": config.PACK_MAGIC.decode("ascii"),
        "version": packed.version,
        "conv_layers": len(packed.convs),
        "bn_layers": len(packed.bns),
        "layers": layers,
        "weights": weights,
        "payload_bytes": len(packed.payload),
        "float32_bytes": 4 * weights,
        "reduction": (4 * weights) / len(packed.payload) if packed.payload else 0.0,
        "file_size": packed.file_size,
    }
    side = sidecar_path(path)
    if side.is_file():
        cfg = parse_network_config(read_sidecar(path)["network"])
        report["predicted_file_size"] = predicted_file_size(cfg)
        report["size_audit"] = "ok" if report["predicted_file_size"] == packed.file_size else "mismatch"
    return report
