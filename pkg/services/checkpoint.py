"""Full-precision training checkpoints.

Layout, all integers little-endian:

    magic "B1WC" (4 bytes) | version u16 | manifest length u32 | manifest (UTF-8 JSON) | payload

The manifest carries the run config, progress counters and a tensor table
(name, shape, byte offset into the payload, byte count). The payload holds
the raw little-endian tensors: shadow weights, BN moments and affines, and
momentum buffers.
"""

from __future__ import annotations

import json
import logging
import struct
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from numpy.typing import NDArray

import config
from . import tensor_core as tc
from .errors import FormatError, IntegrityError
from .model_builder import Network, build_network
from .schemas import RunConfig, parse_run_config
from .train_engine import OptimizerState


logger = logging.getLogger(__name__)

HEADER = struct.Struct("<4sHI")
MOMENTUM_PREFIX = "momentum/"


def _collect_tensors(net: Network, opt: OptimizerState | None) -> List[Tuple[str, NDArray]]:
    tensors: List[Tuple[str, NDArray]] = []
    for layer in net.conv_layers():
        tensors.append((f"{layer.name}.weight", layer.state.weights))
    for layer in net.bn_layers():
        st = layer.state
        tensors += [
            (f"{layer.name}.running_mean", st.running_mean),
            (f"{layer.name}.running_var", st.running_var),
            (f"{layer.name}.gamma", st.gamma),
            (f"{layer.name}.beta", st.beta),
        ]
    if opt is not None:
        for name in sorted(opt.buffers):
            tensors.append((MOMENTUM_PREFIX + name, opt.buffers[name]))
    return tensors


def save_checkpoint(
    path: str | Path,
    net: Network,
    run_cfg: RunConfig,
    opt: OptimizerState | None = None,
    epoch: int = 0,
    global_iter: int = 0,
) -> Path:
    dtype = np.dtype(tc.get_dtype()).newbyteorder("<")
    table = []
    payload = bytearray()
    for name, arr in _collect_tensors(net, opt):
        raw = np.ascontiguousarray(arr, dtype=dtype).tobytes(order="C")
        table.append({"name": name, "shape": list(arr.shape), "offset": len(payload), "nbytes": len(raw)})
        payload.extend(raw)

    manifest = {
        "run_config": run_cfg.model_dump(mode="json"),
        "epoch": epoch,
        "global_iter": global_iter,
        "dtype": dtype.str,
        "optimizer": None if opt is None else {"momentum": opt.momentum, "weight_decay": opt.weight_decay, "lr": opt.lr},
        "tensors": table,
    }
    manifest_bytes = json.dumps(manifest, sort_keys=True).encode("utf-8")

    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.with_suffix(out.suffix + ".tmp")
    with tmp.open("wb") as f:
        f.write(HEADER.pack(config.CHECKPOINT_MAGIC, config.CHECKPOINT_VERSION, len(manifest_bytes)))
        f.write(manifest_bytes)
        f.write(payload)
    tmp.replace(out)
    logger.info("Checkpoint saved: %s (epoch %d)", out, epoch)
    return out


def _read_manifest(raw: bytes, name: str) -> Tuple[dict, int]:
    if len(raw) < HEADER.size:
        raise FormatError(f"{name}: truncated header", offset=len(raw))
    magic, version, manifest_len = HEADER.unpack_from(raw, 0)
    if magic != config.CHECKPOINT_MAGIC:
        raise FormatError(f"{name}: bad magic {magic!r}", offset=0)
    if version != config.CHECKPOINT_VERSION:
        raise FormatError(f"{name}: unsupported checkpoint version {version}", offset=4)
    end = HEADER.size + manifest_len
    if len(raw) < end:
        raise FormatError(f"{name}: truncated manifest", offset=len(raw))
    try:
        manifest = json.loads(raw[HEADER.size : end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{name}: unreadable manifest ({exc})", offset=HEADER.size) from exc
    return manifest, end


def load_checkpoint(path: str | Path) -> Tuple[Network, RunConfig, OptimizerState, dict]:
    """Rebuild the network and optimizer state; returns (net, run_cfg, opt, manifest)."""
    src = Path(path)
    if not src.is_file():
        raise FormatError(f"Checkpoint does not exist: {src}")
    raw = src.read_bytes()
    manifest, base = _read_manifest(raw, src.name)

    run_cfg = parse_run_config(manifest["run_config"])
    tc.set_precision(run_cfg.precision)
    dtype = np.dtype(manifest["dtype"])
    net = build_network(run_cfg.network)

    tensors: Dict[str, NDArray] = {}
    for entry in manifest["tensors"]:
        start = base + entry["offset"]
        if start + entry["nbytes"] > len(raw):
            raise FormatError(f"{src.name}: tensor '{entry['name']}' is truncated", offset=len(raw))
        arr = np.frombuffer(raw, dtype=dtype, count=entry["nbytes"] // dtype.itemsize, offset=start)
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(tc.get_dtype())

    def take(name: str, target: NDArray) -> None:
        if name not in tensors:
            raise IntegrityError(f"{src.name}: missing tensor '{name}'")
        if tensors[name].shape != target.shape:
            raise IntegrityError(f"{src.name}: tensor '{name}' has shape {tensors[name].shape}, expected {target.shape}")
        target[...] = tensors[name]

    for layer in net.conv_layers():
        take(f"{layer.name}.weight", layer.state.weights)
    for layer in net.bn_layers():
        st = layer.state
        take(f"{layer.name}.running_mean", st.running_mean)
        take(f"{layer.name}.running_var", st.running_var)
        take(f"{layer.name}.gamma", st.gamma)
        take(f"{layer.name}.beta", st.beta)

    opt_meta = manifest.get("optimizer") or {}
    opt = OptimizerState(
        momentum=opt_meta.get("momentum", run_cfg.momentum),
        weight_decay=opt_meta.get("weight_decay", run_cfg.weight_decay),
        lr=opt_meta.get("lr", run_cfg.schedule.lr_max),
    )
    for name, arr in tensors.items():
        if name.startswith(MOMENTUM_PREFIX):
            opt.buffers[name[len(MOMENTUM_PREFIX) :]] = arr.copy()
    logger.info("Checkpoint loaded: %s (epoch %s)", src, manifest.get("epoch"))
    return net, run_cfg, opt, manifest
