from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

import config
from services import tensor_core as tc
from services.checkpoint import load_checkpoint, save_checkpoint
from services.data_pipeline import Dataset, load_dataset
from services.deploy_pack import describe_packed, export_packed, import_packed, infer
from services.errors import ArgumentError, BitWeightError, ConfigError, FormatError
from services.model_builder import create_network, param_count
from services.schemas import NetworkConfig, RunConfig, parse_run_config
from services.train_engine import EpochRecord, OptimizerState, evaluate, train


# -----------------------------
# Config assembly
# -----------------------------


def _read_config_dict(config_path: Optional[str]) -> Dict[str, Any]:
    if config_path is None:
        return {}
    path = Path(config_path).expanduser()
    if not path.is_file():
        raise ConfigError(f"Config file does not exist: {path}")
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"Config file is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("Config file must hold a JSON object")
    return data


def build_run_config(
    config_path: Optional[str] = None,
    data_dir: Optional[str] = None,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    mode: Optional[str] = None,
    epochs: Optional[int] = None,
    cutout: Optional[int] = None,
) -> RunConfig:
    """JSON config with command-line overrides applied on top."""
    data = _read_config_dict(config_path)
    env_dir = os.environ.get(config.DATA_DIR_ENV)
    if data_dir is not None:
        data["data_dir"] = data_dir
    elif env_dir:
        data["data_dir"] = env_dir
    if out_dir is not None:
        data["out_dir"] = out_dir
    if seed is not None:
        data["seed"] = seed
        data.setdefault("network", {})["seed"] = seed
        data.setdefault("augment", {})["seed"] = seed
    if threads is not None:
        data["threads"] = threads
    if mode is not None:
        data["mode"] = mode
    if epochs is not None:
        data["epochs"] = epochs
    if cutout is not None:
        data.setdefault("augment", {})["cutout_size"] = cutout
    return parse_run_config(data)


def _check_dataset_fits(net_cfg: NetworkConfig, ds: Dataset) -> None:
    expected = (net_cfg.input_channels, net_cfg.image_size, net_cfg.image_size)
    if ds.image_shape != expected:
        raise ConfigError(f"Dataset images are {ds.image_shape}, network expects {expected}")
    if ds.class_count != net_cfg.num_classes:
        raise ConfigError(f"Dataset has {ds.class_count} classes, network has {net_cfg.num_classes}")


def _resolve_data_dir(data_dir: Optional[str], fallback: Optional[str]) -> Optional[str]:
    return data_dir or os.environ.get(config.DATA_DIR_ENV) or fallback


def _fail(exc: BitWeightError) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return exc.exit_code


# -----------------------------
# Commands
# -----------------------------


def cmd_train(
    config_path: Optional[str] = None,
    data_dir: Optional[str] = None,
    out_dir: Optional[str] = None,
    seed: Optional[int] = None,
    threads: Optional[int] = None,
    mode: Optional[str] = None,
    epochs: Optional[int] = None,
    cutout: Optional[int] = None,
) -> int:
    try:
        cfg = build_run_config(config_path, data_dir, out_dir, seed, threads, mode, epochs, cutout)
        tc.set_precision(cfg.precision)
        train_ds = load_dataset(cfg.dataset, cfg.data_dir, "train", cfg.seed)
        test_ds = load_dataset(cfg.dataset, cfg.data_dir, "test", cfg.seed)
        _check_dataset_fits(cfg.network, train_ds)

        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / config.TRAIN_LOG_NAME
        log_path.unlink(missing_ok=True)
        ckpt_path = out / config.CHECKPOINT_NAME

        net = create_network(cfg.network)
        print(f"{cfg.mode} network: {cfg.network.conv_layer_count} conv layers, {param_count(net)} parameters")

        progress: Dict[str, Any] = {"opt": None, "iter": 0}

        def on_cycle_end(net, opt: OptimizerState, record: EpochRecord, global_iter: int) -> None:
            save_checkpoint(ckpt_path, net, cfg, opt, record.epoch, global_iter)
            progress.update(opt=opt, iter=global_iter)

        net, log = train(net, train_ds, test_ds, cfg, log_path=log_path, on_cycle_end=on_cycle_end)
        last = log.records[-1]
        # Same counters, moments recomputed
        save_checkpoint(ckpt_path, net, cfg, progress["opt"], last.epoch, progress["iter"])

        if cfg.network.binarized and not cfg.network.binarize_exclude:
            packed = export_packed(net, out / config.PACKED_NAME, metadata={"dataset": cfg.dataset})
            print(f"packed model: {packed} ({packed.stat().st_size} bytes)")
        if log.final is not None:
            print(f"final top-1 error {log.final.top1:.4f}, top-5 error {log.final.top5:.4f}")
        return 0
    except BitWeightError as exc:
        return _fail(exc)


def cmd_eval(checkpoint: str, split: str = "test", data_dir: Optional[str] = None) -> int:
    try:
        if split not in ("train", "test"):
            raise ArgumentError(f"Split must be 'train' or 'test', got '{split}'")
        net, run_cfg, _, _ = load_checkpoint(checkpoint)
        ds = load_dataset(run_cfg.dataset, _resolve_data_dir(data_dir, run_cfg.data_dir), split, run_cfg.seed)
        _check_dataset_fits(run_cfg.network, ds)
        top1, top5 = evaluate(net, ds, run_cfg.batch_size)
        print(f"{run_cfg.dataset} {split}: top-1 error {top1:.4f}, top-5 error {top5:.4f}")
        return 0
    except BitWeightError as exc:
        return _fail(exc)


def cmd_export(checkpoint: str, out: Optional[str] = None) -> int:
    try:
        net, run_cfg, _, _ = load_checkpoint(checkpoint)
        target = Path(out) if out else Path(run_cfg.out_dir) / config.PACKED_NAME
        packed = export_packed(net, target, metadata={"dataset": run_cfg.dataset})
        print(f"packed model: {packed} ({packed.stat().st_size} bytes)")
        return 0
    except BitWeightError as exc:
        return _fail(exc)


IMAGE_SUFFIXES = (".pgm", ".ppm", ".pnm", ".png")


def read_image_file(path: str | Path, net_cfg: NetworkConfig) -> np.ndarray:
    """One (C, H, W) uint8 image from a PGM/PPM file or a raw dataset record.

    A raw record is C*H*W pixel bytes, optionally preceded by the one or two
    label bytes of a CIFAR record.
    """
    src = Path(path)
    if not src.is_file():
        raise ArgumentError(f"Image file does not exist: {src}")
    c, size = net_cfg.input_channels, net_cfg.image_size
    pixels = c * size * size

    if src.suffix.lower() in IMAGE_SUFFIXES:
        try:
            with Image.open(src) as img:
                img = img.convert("L" if c == 1 else "RGB")
                arr = np.asarray(img, dtype=np.uint8)
        except (UnidentifiedImageError, OSError) as exc:
            raise FormatError(f"{src.name}: unreadable image ({exc})") from exc
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.shape[:2] != (size, size) or arr.shape[2] != c:
            raise ArgumentError(f"{src.name}: image is {arr.shape}, network expects ({size}, {size}, {c})")
        return np.ascontiguousarray(arr.transpose(2, 0, 1))

    raw = src.read_bytes()
    label_bytes = len(raw) - pixels
    if label_bytes not in (0, 1, 2):
        raise ArgumentError(f"{src.name}: {len(raw)} bytes is not a ({c}, {size}, {size}) raw record")
    return np.frombuffer(raw, dtype=np.uint8, offset=label_bytes).reshape(c, size, size).copy()


def cmd_infer(packed: str, image_file: str) -> int:
    try:
        model = import_packed(packed)
        image = read_image_file(image_file, model.cfg)
        probs = infer(model, image)
        print(json.dumps({"class": int(np.argmax(probs)), "probabilities": [round(float(p), 6) for p in probs]}))
        return 0
    except BitWeightError as exc:
        return _fail(exc)


def cmd_inspect(packed: str) -> int:
    try:
        report = describe_packed(packed)
        print(f"{report['magic']} v{report['version']}: {report['conv_layers']} conv layers, {report['bn_layers']} BN layers")
        for layer in report["layers"]:
            print(
                f"  conv {layer['index']:3d}  F={layer['F']} Cin={layer['Cin']} Cout={layer['Cout']} "
                f"stride={layer['stride']} s={layer['scale']:.6f} bits={layer['bits']} bytes={layer['bytes']}"
            )
        print(f"weights {report['weights']}, payload {report['payload_bytes']} bytes, float32 {report['float32_bytes']} bytes")
        print(f"reduction {report['reduction']:.2f}x, file size {report['file_size']} bytes")
        if "predicted_file_size" in report:
            print(f"predicted file size {report['predicted_file_size']} bytes: {report['size_audit']}")
        return 0 if report.get("size_audit", "ok") == "ok" else FormatError.exit_code
    except BitWeightError as exc:
        return _fail(exc)
