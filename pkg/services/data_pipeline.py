from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, List, Literal, Optional, Tuple

import numpy as np
from numpy.typing import NDArray

import config
from . import tensor_core as tc
from .errors import ArgumentError, FormatError
from .schemas import AugmentConfig


logger = logging.getLogger(__name__)

Split = Literal["train", "test"]

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_PIXELS = 3 * 32 * 32


@dataclass
class Dataset:
    images: NDArray[np.uint8]  # (count, C, H, W)
    labels: NDArray[np.int64]
    split: str
    class_count: int

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ArgumentError(f"Dataset images must be (count, C, H, W), got {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise ArgumentError(f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ArgumentError(f"Labels must lie in [0, {self.class_count})")

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]


# -----------------------------
# Loaders
# -----------------------------


def _read_bytes(path: Path) -> bytes:
    if not path.is_file():
        raise FormatError(f"Dataset file does not exist: {path}")
    return path.read_bytes()


def read_idx(path: Path, magic: int) -> NDArray[np.uint8]:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise FormatError(f"{path.name}: truncated header", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{path.name}: bad magic 0x{found:08X}, expected 0x{magic:08X}", offset=0)
    dims = found & 0xFF
    header = 4 + 4 * dims
    if len(raw) < header:
        raise FormatError(f"{path.name}: truncated dimension table", offset=len(raw))
    shape = struct.unpack(f">{dims}I", raw[4:header])
    expected = int(np.prod(shape))
    if len(raw) - header < expected:
        raise FormatError(
            f"{path.name}: truncated payload, expected {expected} bytes, found {len(raw) - header}",
            offset=len(raw),
        )
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(shape)


def load_mnist(data_dir: str | Path, split: Split = "train") -> Dataset:
    base = Path(data_dir)
    image_name, label_name = config.MNIST_FILES[split]
    images = read_idx(base / image_name, IDX_IMAGE_MAGIC)
    labels = read_idx(base / label_name, IDX_LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise FormatError(f"MNIST {split}: {images.shape[0]} images but {labels.shape[0]} labels")
    images = images.reshape(images.shape[0], 1, images.shape[1], images.shape[2])
    logger.info("Loaded MNIST %s: %d images", split, images.shape[0])
    return Dataset(images=np.ascontiguousarray(images), labels=labels.astype(np.int64), split=split, class_count=10)


def _parse_cifar_records(path: Path, label_bytes: int) -> Tuple[NDArray[np.uint8], NDArray[np.int64]]:
    raw = _read_bytes(path)
    record = label_bytes + CIFAR_PIXELS
    if len(raw) == 0 or len(raw) % record:
        whole = (len(raw) // record) * record
        raise FormatError(f"{path.name}: truncated record, size {len(raw)} is not a multiple of {record}", offset=whole)
    rows = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
    # CIFAR-100 carries (coarse, fine); the fine label is the last label byte
    labels = rows[:, label_bytes - 1].astype(np.int64)
    images = rows[:, label_bytes:].reshape(-1, 3, 32, 32)
    return images, labels


def load_cifar(data_dir: str | Path, variant: Literal["c10", "c100"] = "c10", split: Split = "train") -> Dataset:
    base = Path(data_dir)
    if variant == "c10":
        files, label_bytes, classes = config.CIFAR10_FILES[split], 1, 10
    elif variant == "c100":
        files, label_bytes, classes = config.CIFAR100_FILES[split], 2, 100
    else:
        raise ArgumentError(f"Unknown CIFAR variant: {variant}")

    parts = [_parse_cifar_records(base / name, label_bytes) for name in files]
    images = np.concatenate([p[0] for p in parts])
    labels = np.concatenate([p[1] for p in parts])
    if labels.max() >= classes:
        bad = int(np.argmax(labels >= classes))
        raise FormatError(f"CIFAR-{classes} {split}: label {labels[bad]} out of range in record {bad}")
    logger.info("Loaded CIFAR-%d %s: %d images", classes, split, images.shape[0])
    return Dataset(images=np.ascontiguousarray(images), labels=labels, split=split, class_count=classes)


def make_synthetic(count: int = 500, seed: int = 0, image_size: int = 8, channels: int = 1, split: Split = "train") -> Dataset:
    """Two linearly separable classes: brighter left half vs brighter right half."""
    if count < 1:
        raise ArgumentError("Synthetic dataset needs at least one sample")
    rng = tc.Rng(seed)
    labels = tc.rng_uniform_int(rng, 0, 1, (count,)).astype(np.int64)
    images = tc.rng_uniform_int(rng, 0, 95, (count, channels, image_size, image_size))
    half = image_size // 2
    images[labels == 0, :, :, :half] += 160
    images[labels == 1, :, :, half:] += 160
    return Dataset(images=images.astype(np.uint8), labels=labels, split=split, class_count=2)


def load_dataset(name: str, data_dir: Optional[str | Path], split: Split, seed: int = 0) -> Dataset:
    if name == "synthetic":
        return make_synthetic(seed=seed if split == "train" else seed + 1, split=split)
    if data_dir is None:
        raise ArgumentError(f"Dataset '{name}' needs a data directory (--data-dir or ${config.DATA_DIR_ENV})")
    if name == "mnist":
        return load_mnist(data_dir, split)
    if name == "cifar10":
        return load_cifar(data_dir, "c10", split)
    if name == "cifar100":
        return load_cifar(data_dir, "c100", split)
    raise ArgumentError(f"Unknown dataset: {name}")


# -----------------------------
# Augmentation (single image, (C, H, W) uint8)
# -----------------------------


def hflip(img: NDArray[np.uint8], rng: tc.Rng, p: float = config.HFLIP_PROB) -> NDArray[np.uint8]:
    if p > 0 and rng.generator.random() < p:
        return img[:, :, ::-1].copy()
    return img


def random_pad_crop(
    img: NDArray[np.uint8], rng: tc.Rng, pad: int = config.PAD_PIXELS, offset: Optional[Tuple[int, int]] = None
) -> NDArray[np.uint8]:
    """Pad each side with random pixel values, then crop back to the original size.

    `offset` fixes the crop's top-left corner in padded coordinates.
    """
    if pad < 0:
        raise ArgumentError(f"Padding must be non-negative, got {pad}")
    if pad == 0:
        return img
    c, h, w = img.shape
    padded = tc.rng_uniform_int(rng, 0, 255, (c, h + 2 * pad, w + 2 * pad)).astype(np.uint8)
    padded[:, pad : pad + h, pad : pad + w] = img
    if offset is None:
        dy, dx = (int(v) for v in tc.rng_uniform_int(rng, 0, 2 * pad, (2,)))
    else:
        dy, dx = offset
        if not (0 <= dy <= 2 * pad and 0 <= dx <= 2 * pad):
            raise ArgumentError(f"Crop offset {offset} outside [0, {2 * pad}]")
    return padded[:, dy : dy + h, dx : dx + w].copy()


def cutout_box(h: int, w: int, size: int, rng: tc.Rng, center: Optional[Tuple[int, int]] = None) -> Tuple[int, int, int, int]:
    """Clipped patch bounds (r0, r1, c0, c1), half-open.

    A patch centred at (cy, cx) spans [cy - size//2, cy - size//2 + size). The
    top-left corner is drawn uniformly from [-(size-1), H-1] x [-(size-1), W-1],
    so every pixel is covered by exactly `size` row and `size` column draws.
    """
    half = size // 2
    if center is None:
        top = int(tc.rng_uniform_int(rng, -(size - 1), h - 1, ()))
        left = int(tc.rng_uniform_int(rng, -(size - 1), w - 1, ()))
    else:
        top, left = center[0] - half, center[1] - half
    return max(top, 0), min(top + size, h), max(left, 0), min(left + size, w)


def cutout(
    img: NDArray[np.uint8], rng: tc.Rng, size: int = config.CUTOUT_SIZE, center: Optional[Tuple[int, int]] = None
) -> NDArray[np.uint8]:
    if size < 0:
        raise ArgumentError(f"Cutout size must be non-negative, got {size}")
    if size == 0:
        return img
    c, h, w = img.shape
    r0, r1, c0, c1 = cutout_box(h, w, size, rng, center)
    out = img.copy()
    if r1 > r0 and c1 > c0:
        out[:, r0:r1, c0:c1] = tc.rng_uniform_int(rng, 0, 255, (c, r1 - r0, c1 - c0))
    return out


def augment_image(img: NDArray[np.uint8], aug: AugmentConfig, rng: tc.Rng) -> NDArray[np.uint8]:
    if aug.hflip:
        img = hflip(img, rng)
    if aug.pad > 0:
        img = random_pad_crop(img, rng, aug.pad)
    if aug.cutout_size > 0:
        img = cutout(img, rng, aug.cutout_size)
    return img


# -----------------------------
# Minibatches
# -----------------------------


def batches_per_epoch(count: int, batch: int) -> int:
    return count // batch


def normalize_pixels(images: NDArray[np.uint8]) -> tc.Tensor4:
    return images.astype(tc.get_dtype()) / 255.0


def epoch_indices(ds: Dataset, batch: int, rng: tc.Rng, shuffle: bool = True) -> List[NDArray[np.int64]]:
    order = rng.generator.permutation(len(ds)) if shuffle else np.arange(len(ds))
    return [order[b * batch : (b + 1) * batch] for b in range(batches_per_epoch(len(ds), batch))]


def make_minibatches(
    ds: Dataset,
    batch: int,
    rng: tc.Rng,
    aug: Optional[AugmentConfig] = None,
    shuffle: bool = True,
) -> Iterator[Tuple[tc.Tensor4, NDArray[np.int64]]]:
    """One epoch: a random permutation cut into full batches; the short tail is dropped."""
    if len(ds) == 0:
        raise ArgumentError("Cannot batch an empty dataset")
    if batch < 1 or batch > len(ds):
        raise ArgumentError(f"Batch size {batch} must lie in [1, {len(ds)}]")

    augmenting = aug is not None and aug.enabled
    for idx in epoch_indices(ds, batch, rng, shuffle):
        images = ds.images[idx]
        if augmenting:
            images = np.stack([augment_image(img, aug, rng) for img in images])
        yield normalize_pixels(images), ds.labels[idx]
