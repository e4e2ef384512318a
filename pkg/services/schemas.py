from __future__ import annotations

from typing import List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

import config
from .errors import ConfigError


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


# -----------------------------
# Network
# -----------------------------


class NetworkConfig(_Strict):
    blocks_per_scale: int = Field(3, ge=1)
    width: int = Field(1, ge=1)
    num_classes: int = Field(10, ge=2)
    input_channels: int = Field(3, ge=1)
    image_size: int = Field(32, ge=2)
    binarized: bool = False
    input_relu: bool = False
    skip_connections: bool = True
    learn_bn_affine: bool = False
    binarize_exclude: List[str] = Field(default_factory=list)
    seed: int = Field(0, ge=0, lt=2**64)

    @property
    def conv_layer_count(self) -> int:
        return 6 * self.blocks_per_scale + 2

    @property
    def scale_widths(self) -> Tuple[int, int, int]:
        return (16 * self.width, 32 * self.width, 64 * self.width)

    @property
    def gain(self) -> float:
        return 2.0 ** 0.5 if self.skip_connections else 2.0


# -----------------------------
# Augmentation and schedule
# -----------------------------


class AugmentConfig(_Strict):
    hflip: bool = False
    pad: int = Field(config.PAD_PIXELS, ge=0)
    cutout_size: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)

    @property
    def enabled(self) -> bool:
        return self.hflip or self.pad > 0 or self.cutout_size > 0


class ScheduleConfig(_Strict):
    kind: Literal["warm_restart", "step"] = "warm_restart"
    lr_max: float = Field(config.LR_MAX, gt=0)
    lr_min: float = Field(config.LR_MIN, ge=0)
    cycle_epochs: List[int] = Field(default_factory=lambda: list(config.CYCLE_EPOCHS))
    step_values: List[float] = Field(default_factory=lambda: list(config.STEP_LR_VALUES))
    step_boundaries: List[int] = Field(default_factory=lambda: list(config.STEP_LR_BOUNDARIES))

    @field_validator("cycle_epochs")
    @classmethod
    def _positive_cycles(cls, value: List[int]) -> List[int]:
        if not value or any(c <= 0 for c in value):
            raise ValueError("cycle_epochs must be a non-empty list of positive integers")
        return value

    @model_validator(mode="after")
    def _check_ranges(self) -> "ScheduleConfig":
        if self.lr_min > self.lr_max:
            raise ValueError("lr_min must not exceed lr_max")
        if len(self.step_values) != len(self.step_boundaries) + 1:
            raise ValueError("step_values needs exactly one more entry than step_boundaries")
        return self


# -----------------------------
# Run
# -----------------------------


class RunConfig(_Strict):
    dataset: Literal["mnist", "cifar10", "cifar100", "synthetic"] = "cifar10"
    data_dir: Optional[str] = None
    out_dir: str = "runs/default"
    mode: Literal["full", "1bit"] = "full"
    seed: int = Field(0, ge=0, lt=2**64)
    threads: Optional[int] = Field(None, ge=1)
    epochs: Optional[int] = Field(None, ge=1)
    batch_size: int = Field(config.BATCH_SIZE, ge=1)
    momentum: float = Field(config.MOMENTUM, ge=0, lt=1)
    weight_decay: float = Field(config.WEIGHT_DECAY, ge=0)
    precision: Literal[32, 64] = 32
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)

    @model_validator(mode="after")
    def _mode_drives_binarization(self) -> "RunConfig":
        self.network.binarized = self.mode == "1bit"
        return self

    @model_validator(mode="after")
    def _run_seed_fills_subseeds(self) -> "RunConfig":
        # An explicit network.seed or augment.seed wins over the run seed
        if "seed" not in self.network.model_fields_set:
            self.network.seed = self.seed
        if "seed" not in self.augment.model_fields_set:
            self.augment.seed = self.seed
        return self


def parse_run_config(data: dict) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid run config: {exc}") from exc


def parse_network_config(data: dict) -> NetworkConfig:
    try:
        return NetworkConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid network config: {exc}") from exc
