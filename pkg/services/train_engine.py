from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from numpy.typing import NDArray

import config
from . import tensor_core as tc
from .data_pipeline import Dataset, batches_per_epoch, make_minibatches, normalize_pixels
from .errors import ArgumentError, NonFiniteError, RangeError, ShapeError
from .layers import Parameter, softmax_cross_entropy
from .model_builder import Network
from .schemas import AugmentConfig, RunConfig, ScheduleConfig


logger = logging.getLogger(__name__)


# -----------------------------
# Learning-rate schedules
# -----------------------------


@dataclass(frozen=True)
class Schedule:
    iterations_per_epoch: int
    kind: str = "warm_restart"
    lr_max: float = config.LR_MAX
    lr_min: float = config.LR_MIN
    cycle_epochs: Tuple[int, ...] = config.CYCLE_EPOCHS
    step_values: Tuple[float, ...] = config.STEP_LR_VALUES
    step_boundaries: Tuple[int, ...] = config.STEP_LR_BOUNDARIES
    step_total_epochs: int = config.STEP_TOTAL_EPOCHS

    def __post_init__(self) -> None:
        if self.iterations_per_epoch < 1:
            raise ArgumentError(f"iterations_per_epoch must be positive, got {self.iterations_per_epoch}")

    @classmethod
    def from_config(cls, cfg: ScheduleConfig, iterations_per_epoch: int, epochs: Optional[int] = None) -> "Schedule":
        sched = cls(
            iterations_per_epoch=iterations_per_epoch,
            kind=cfg.kind,
            lr_max=cfg.lr_max,
            lr_min=cfg.lr_min,
            cycle_epochs=tuple(cfg.cycle_epochs),
            step_values=tuple(cfg.step_values),
            step_boundaries=tuple(cfg.step_boundaries),
        )
        return sched if epochs is None else sched.prefix(epochs)

    @property
    def cycle_ends(self) -> Tuple[int, ...]:
        return tuple(int(v) for v in np.cumsum(self.cycle_epochs))

    @property
    def total_epochs(self) -> int:
        if self.kind == "step":
            return self.step_total_epochs
        return self.cycle_ends[-1]

    @property
    def total_iterations(self) -> int:
        return self.total_epochs * self.iterations_per_epoch

    @property
    def evaluation_epochs(self) -> Tuple[int, ...]:
        """Epochs after which the test set is evaluated."""
        if self.kind == "step":
            inner = [b for b in self.step_boundaries if b < self.total_epochs]
            return tuple(inner) + (self.total_epochs,)
        return self.cycle_ends

    def prefix(self, epochs: int) -> "Schedule":
        """Truncate to the first `epochs` epochs; warm restarts must stop on a cycle end."""
        if self.kind == "step":
            if epochs < 1:
                raise RangeError(f"Epoch count must be positive, got {epochs}")
            return _replace(self, step_total_epochs=epochs)
        ends = self.cycle_ends
        if epochs not in ends:
            raise RangeError(f"Epoch count {epochs} is not a cycle end; choose one of {ends}")
        return _replace(self, cycle_epochs=self.cycle_epochs[: ends.index(epochs) + 1])


def _replace(sched: Schedule, **changes) -> Schedule:
    values = asdict(sched)
    values.update(changes)
    return Schedule(**values)


def cosine_decay(t: float, period: float, lr_max: float, lr_min: float) -> float:
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


def warm_restart_lr(global_iter: int, schedule: Schedule) -> float:
    """Per-iteration cosine decay from lr_max to lr_min, restarting at each cycle start.

    The iteration one past the last one of the schedule reports lr_min, the
    endpoint of the final cycle.
    """
    total = schedule.total_iterations
    if global_iter < 0 or global_iter > total:
        raise RangeError(f"Iteration {global_iter} is outside the schedule [0, {total}]")
    if global_iter == total:
        return schedule.lr_min
    start = 0
    for epochs in schedule.cycle_epochs:
        period = epochs * schedule.iterations_per_epoch
        if global_iter < start + period:
            return cosine_decay(global_iter - start, period, schedule.lr_max, schedule.lr_min)
        start += period
    raise RangeError(f"Iteration {global_iter} is outside the schedule")


def step_lr(global_iter: int, schedule: Schedule) -> float:
    total = schedule.total_iterations
    if global_iter < 0 or global_iter > total:
        raise RangeError(f"Iteration {global_iter} is outside the schedule [0, {total}]")
    epoch = global_iter // schedule.iterations_per_epoch
    stage = sum(1 for b in schedule.step_boundaries if epoch >= b)
    return schedule.step_values[stage]


def learning_rate(global_iter: int, schedule: Schedule) -> float:
    if schedule.kind == "step":
        return step_lr(global_iter, schedule)
    return warm_restart_lr(global_iter, schedule)


# -----------------------------
# Optimizer
# -----------------------------


@dataclass
class OptimizerState:
    momentum: float = config.MOMENTUM
    weight_decay: float = config.WEIGHT_DECAY
    lr: float = config.LR_MAX
    buffers: Dict[str, NDArray] = field(default_factory=dict)


def sgd_momentum_step(
    params: Sequence[Parameter], opt: OptimizerState, grads: Optional[Sequence[NDArray]] = None
) -> None:
    """v <- mu*v + (g + lambda*w); w <- w - lr*v, in place on each parameter array."""
    if grads is None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in params]
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameters")
    for p, g in zip(params, grads):
        if g.shape != p.value.shape:
            raise ShapeError(f"Gradient for '{p.name}' has shape {g.shape}, expected {p.value.shape}")
        v = opt.buffers.get(p.name)
        if v is None:
            v = np.zeros_like(p.value)
            opt.buffers[p.name] = v
        elif v.shape != p.value.shape:
            raise ShapeError(f"Momentum buffer for '{p.name}' has shape {v.shape}, expected {p.value.shape}")
        v *= opt.momentum
        v += g + opt.weight_decay * p.value
        p.value -= opt.lr * v


# -----------------------------
# Evaluation
# -----------------------------


class EvalResult(NamedTuple):
    top1: float
    top5: float
    loss: float


def topk_errors(logits: NDArray, labels: NDArray, ks: Sequence[int] = (1, 5)) -> List[int]:
    """Number of samples whose label is absent from the k largest logits; ties go to the lower index."""
    scores = logits.reshape(logits.shape[0], -1)
    order = np.argsort(-scores, axis=1, kind="stable")
    labels = np.asarray(labels).reshape(-1, 1)
    misses = []
    for k in ks:
        k = min(k, scores.shape[1])
        hit = (order[:, :k] == labels).any(axis=1)
        misses.append(int((~hit).sum()))
    return misses


def evaluate_with_loss(net: Network, ds: Dataset, batch: int = config.BATCH_SIZE) -> EvalResult:
    if len(ds) == 0:
        raise ArgumentError("Cannot evaluate on an empty dataset")
    miss1 = miss5 = 0
    loss_sum = 0.0
    for start in range(0, len(ds), batch):
        x = normalize_pixels(ds.images[start : start + batch])
        y = ds.labels[start : start + batch]
        logits = net.forward(x, "infer")
        m1, m5 = topk_errors(logits, y)
        miss1 += m1
        miss5 += m5
        loss_sum += softmax_cross_entropy(logits, y).loss * len(y)
    n = len(ds)
    return EvalResult(top1=miss1 / n, top5=miss5 / n, loss=loss_sum / n)


def evaluate(net: Network, ds: Dataset, batch: int = config.BATCH_SIZE) -> Tuple[float, float]:
    result = evaluate_with_loss(net, ds, batch)
    return result.top1, result.top5


# -----------------------------
# Batch-norm moment recomputation
# -----------------------------


def recompute_bn_moments(
    net: Network,
    train_ds: Dataset,
    aug: Optional[AugmentConfig] = None,
    batch: int = config.BATCH_SIZE,
    rng: Optional[tc.Rng] = None,
) -> None:
    """Set every BN layer's inference moments to the average of its per-batch moments.

    One pass over as many full batches as the training set yields, with the
    training augmentation applied and batch statistics in effect.
    """
    if len(train_ds) == 0:
        raise ArgumentError("Cannot recompute moments from an empty dataset")
    rng = rng or tc.Rng(aug.seed if aug is not None else 0)
    bn_layers = net.bn_layers()
    for layer in bn_layers:
        layer.collected.clear()
    batches = 0
    for x, _ in make_minibatches(train_ds, batch, rng, aug):
        net.forward(x, "collect")
        batches += 1
    for layer in bn_layers:
        means = np.stack([m for m, _ in layer.collected])
        variances = np.stack([v for _, v in layer.collected])
        layer.state.running_mean = means.mean(axis=0).astype(tc.get_dtype())
        layer.state.running_var = variances.mean(axis=0).astype(tc.get_dtype())
        layer.collected.clear()
    logger.info("Recomputed moments of %d BN layers over %d batches", len(bn_layers), batches)


# -----------------------------
# Training loop
# -----------------------------


@dataclass
class EpochRecord:
    epoch: int
    cycle: int
    cycle_end: bool
    lr: float
    train_loss: float
    train_error: float
    test_loss: Optional[float] = None
    test_top1: Optional[float] = None
    test_top5: Optional[float] = None
    wall_time: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class TrainLog:
    records: List[EpochRecord] = field(default_factory=list)
    final: Optional[EvalResult] = None
    final_ema: Optional[EvalResult] = None

    def append(self, record: EpochRecord, path: Optional[Path] = None) -> None:
        self.records.append(record)
        if path is not None:
            with Path(path).open("a", encoding="utf-8") as f:
                f.write(record.to_json() + "\n")


CycleCallback = Callable[[Network, OptimizerState, EpochRecord, int], None]


def _first_nonfinite_layer(net: Network, x: tc.Tensor4) -> Optional[str]:
    found: List[str] = []

    def observer(name: str, h: tc.Tensor4) -> None:
        if not found and not np.all(np.isfinite(h)):
            found.append(name)

    net.forward(x, "collect", observer=observer)
    for layer in net.bn_layers():
        layer.collected.clear()
    return found[0] if found else None


def _cycle_of(epoch: int, ends: Sequence[int]) -> int:
    for i, end in enumerate(ends, start=1):
        if epoch <= end:
            return i
    return len(ends)


def train(
    net: Network,
    train_ds: Dataset,
    test_ds: Optional[Dataset],
    cfg: RunConfig,
    log_path: Optional[Path] = None,
    on_cycle_end: Optional[CycleCallback] = None,
    opt: Optional[OptimizerState] = None,
) -> Tuple[Network, TrainLog]:
    if len(train_ds) < cfg.batch_size:
        raise ArgumentError(f"Training set of {len(train_ds)} images is smaller than one batch of {cfg.batch_size}")

    ipe = batches_per_epoch(len(train_ds), cfg.batch_size)
    sched = Schedule.from_config(cfg.schedule, ipe, cfg.epochs)
    eval_epochs = set(sched.evaluation_epochs)
    opt = opt or OptimizerState(momentum=cfg.momentum, weight_decay=cfg.weight_decay, lr=sched.lr_max)
    rng = tc.Rng(cfg.augment.seed).fork(1)
    aug = cfg.augment if cfg.augment.enabled else None
    params = net.parameters()
    log = TrainLog()

    logger.info(
        "Training %s for %d epochs (%d iterations/epoch, %d parameters)",
        "1-bit" if cfg.network.binarized else "full-precision",
        sched.total_epochs,
        ipe,
        sum(p.size for p in params),
    )

    global_iter = 0
    for epoch in range(1, sched.total_epochs + 1):
        started = time.perf_counter()
        loss_sum = 0.0
        misses = 0
        seen = 0
        for x, y in make_minibatches(train_ds, cfg.batch_size, rng, aug):
            opt.lr = learning_rate(global_iter, sched)
            logits = net.forward(x, "train")
            out = softmax_cross_entropy(logits, y)
            if not math.isfinite(out.loss):
                layer = _first_nonfinite_layer(net, x)
                raise NonFiniteError(f"Loss became non-finite at epoch {epoch}, iteration {global_iter}", layer=layer)
            net.backward(out.dlogits)
            sgd_momentum_step(params, opt)
            loss_sum += out.loss * len(y)
            misses += topk_errors(logits, y, ks=(1,))[0]
            seen += len(y)
            global_iter += 1

        record = EpochRecord(
            epoch=epoch,
            cycle=_cycle_of(epoch, sched.evaluation_epochs),
            cycle_end=epoch in eval_epochs,
            lr=learning_rate(global_iter - 1, sched),  # rate of the epoch's last step
            train_loss=loss_sum / seen,
            train_error=misses / seen,
        )
        if record.cycle_end and test_ds is not None:
            result = evaluate_with_loss(net, test_ds, cfg.batch_size)
            record.test_loss, record.test_top1, record.test_top5 = result.loss, result.top1, result.top5
            log.final_ema = result
        record.wall_time = time.perf_counter() - started
        log.append(record, log_path)
        logger.info(
            "epoch %d lr %.5f train loss %.4f err %.4f%s",
            epoch,
            record.lr,
            record.train_loss,
            record.train_error,
            "" if record.test_top1 is None else f" | test top1 {record.test_top1:.4f} top5 {record.test_top5:.4f}",
        )
        if record.cycle_end and on_cycle_end is not None:
            on_cycle_end(net, opt, record, global_iter)

    recompute_bn_moments(net, train_ds, aug, cfg.batch_size, tc.Rng(cfg.augment.seed).fork(2))
    if test_ds is not None:
        log.final = evaluate_with_loss(net, test_ds, cfg.batch_size)
        logger.info("Final (recomputed moments): top1 %.4f top5 %.4f", log.final.top1, log.final.top5)
    return net, log
