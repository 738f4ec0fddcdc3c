"""SGD/Nesterov training recipe, transfer-learning freeze modes and the epoch loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import ops
from .backbone import Model, NetworkConfig, build_model, efftiny
from .checkpoint import config_digest, load_checkpoint, load_into, save_checkpoint
from .data import IMAGENET, AugmentationPolicy, BatchLoader, NormalizationStats, index_dataset
from .evaluation import EvalResult, evaluate
from .tensor import NonFiniteError, Parameter, Tensor

log = logging.getLogger(__name__)

FREEZE_MODES = ("full", "feature_extraction", "partial")


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(message)
        self.epoch, self.batch = epoch, batch


@dataclass(frozen=True)
class LrSchedule:
    initial: float = 0.01
    halve_every: int = 5

    def __post_init__(self):
        if not self.initial > 0:
            raise ValueError("schedule.initial must be > 0")
        if self.halve_every < 1:
            raise ValueError("schedule.halve_every must be >= 1")


def lr_at(schedule: LrSchedule, epoch: int) -> float:
    """Step decay: ``initial * 0.5 ** (epoch // halve_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return schedule.initial * 0.5 ** (epoch // schedule.halve_every)


@dataclass
class OptimizerState:
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-5
    velocity: dict[str, np.ndarray] = field(default_factory=dict)


def sgd_step(parameters: Iterable[Parameter], state: OptimizerState, lr: float) -> None:
    """One SGD step with coupled L2 decay and (Nesterov) momentum, in place.

    g = grad + wd * p;  v = mu * v + g;  p -= lr * (g + mu * v)  (Nesterov)
    or p -= lr * v otherwise. Frozen parameters are skipped and lose any
    velocity buffer.
    """
    mu = state.momentum
    for p in parameters:
        if not p.trainable:
            state.velocity.pop(p.name, None)
            continue
        if p.grad is None:
            raise ValueError(f"trainable parameter {p.name!r} has no gradient")
        g = p.grad
        if p.decay and state.weight_decay:
            g = g + state.weight_decay * p.data
        v = state.velocity.get(p.name)
        v = g.copy() if v is None else mu * v + g
        state.velocity[p.name] = v
        step = g + mu * v if state.nesterov else v
        p.data -= lr * step


def set_trainable(p: Parameter, flag: bool) -> None:
    p.trainable = flag
    p.requires_grad = flag


def apply_freeze(model: Model, mode: str = "full", last_k: int = 1, freeze_bn_stats: bool = False) -> dict[str, bool]:
    """Set the trainable mask for one of the three transfer-learning modes.

    feature_extraction: only the classifier trains.
    partial: the last ``last_k`` stages, head conv, CBAM and classifier train.
    full: everything trains.
    Running statistics of frozen batch-norm layers keep updating unless
    ``freeze_bn_stats``.
    """
    if mode not in FREEZE_MODES:
        raise ValueError(f"unknown freeze mode {mode!r}; expected one of {FREEZE_MODES}")
    n_stages = len(model.stages)
    if mode == "partial" and not 1 <= last_k <= n_stages:
        raise ValueError(f"last_k={last_k} outside [1, {n_stages}] stages")
    if mode == "full":
        trainable_groups = None
    elif mode == "feature_extraction":
        trainable_groups = {"classifier"}
    else:
        trainable_groups = {"head", "cbam", "classifier"}
        trainable_groups |= {f"stage{i}" for i in range(n_stages - last_k + 1, n_stages + 1)}

    mask = {}
    for name, p in model.named_parameters().items():
        flag = trainable_groups is None or name.split(".", 1)[0] in trainable_groups
        set_trainable(p, flag)
        mask[name] = flag
    for bn in model.batchnorms():
        bn.update_stats = not (freeze_bn_stats and not mask[bn.scale.name])
    return mask


# -- configuration ----------------------------------------------------------------


@dataclass(frozen=True)
class BatchSizes:
    train: int = 16
    val: int = 32
    eval: int = 32

    def __post_init__(self):
        for name in ("train", "val", "eval"):
            if getattr(self, name) < 1:
                raise ValueError(f"batch.{name} must be >= 1")


@dataclass
class TrainConfig:
    root: str | None = None
    network: NetworkConfig = field(default_factory=efftiny)
    epochs: int = 20
    batch: BatchSizes = field(default_factory=BatchSizes)
    seed: int = 0
    freeze: str = "full"
    partial_stages: int = 1
    freeze_bn_stats: bool = False
    schedule: LrSchedule = field(default_factory=LrSchedule)
    momentum: float = 0.9
    nesterov: bool = True
    weight_decay: float = 1e-5
    augment: AugmentationPolicy | None = field(default_factory=AugmentationPolicy)
    stats: NormalizationStats = IMAGENET
    init_checkpoint: str | None = None
    reinit_head: bool = False
    deterministic: bool = True

    def validate(self) -> TrainConfig:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.freeze not in FREEZE_MODES:
            raise ValueError(f"freeze must be one of {FREEZE_MODES}")
        self.network.validate()
        return self

    def digest(self) -> str:
        return config_digest(dataclasses.asdict(self))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    seconds: float


@dataclass
class RunResult:
    history: list[EpochRecord]
    best_epoch: int
    best_val_accuracy: float
    steps: int
    model: Model
    checkpoint_path: Path | None = None

    def epochs_to(self, threshold: float) -> int | None:
        """1-based count of epochs until validation accuracy first reaches ``threshold``."""
        for rec in self.history:
            if rec.val_accuracy >= threshold:
                return rec.epoch + 1
        return None

    def to_json(self) -> dict:
        return {
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "steps": self.steps,
            "checkpoint": str(self.checkpoint_path) if self.checkpoint_path else None,
            "history": [dataclasses.asdict(r) for r in self.history],
        }


# -- loop -------------------------------------------------------------------------


def train_step(model: Model, images: np.ndarray, labels: np.ndarray, state: OptimizerState, lr: float):
    """Forward (train mode), backward and one optimizer step. Returns (loss, logits)."""
    model.zero_grad()
    logits = model(Tensor(images.astype(model.dtype, copy=False)), "train")
    loss = ops.softmax_cross_entropy(logits, labels)
    value = float(loss.data)
    if not math.isfinite(value):
        return value, logits.data
    loss.backward()
    sgd_step(model.parameters(), state, lr)
    return value, logits.data


def snapshot(model: Model) -> dict[str, np.ndarray]:
    out = {n: p.data.copy() for n, p in model.named_parameters().items()}
    out.update({n: b.copy() for n, b in model.named_buffers().items()})
    return out


def restore(model: Model, snap: dict[str, np.ndarray]) -> None:
    params = model.named_parameters()
    for name, arr in snap.items():
        if name in params:
            params[name].data = arr.copy()
        else:
            model.set_buffer(name, arr)


def prepare_model(config: TrainConfig) -> Model:
    """Build the network, optionally warm-start from a checkpoint, apply the freeze mode."""
    model = build_model(config.network, seed=config.seed)
    if config.init_checkpoint:
        report = load_into(model, load_checkpoint(config.init_checkpoint), reinit_head=config.reinit_head,
                           strict=False, seed=config.seed)
        if report.unknown:
            log.warning("ignored %d unknown checkpoint tensors", len(report.unknown))
    apply_freeze(model, config.freeze, config.partial_stages, config.freeze_bn_stats)
    return model


def loaders(config: TrainConfig, train_index=None, val_index=None):
    r = config.network.input_resolution
    train_index = train_index or index_dataset(config.root, "training")
    val_index = val_index or index_dataset(config.root, "validation")
    train = BatchLoader(train_index, config.batch.train, size=r, shuffle=True, seed=config.seed,
                        policy=config.augment, stats=config.stats)
    val = BatchLoader(val_index, config.batch.val, size=r, stats=config.stats)
    return train, val


def fit(config: TrainConfig, out_dir=None, train_index=None, val_index=None, model: Model | None = None,
        stop_at: float | None = None) -> RunResult:
    """Train for ``config.epochs`` epochs and keep the best-validation weights.

    Ties in validation accuracy keep the earlier epoch. The returned model
    holds the best weights; with ``out_dir`` they are also written to
    ``best.ckpt`` (velocities included) and the history to ``history.csv``.
    ``stop_at`` ends training after the first epoch whose validation
    accuracy reaches it.
    """
    config.validate()
    model = model or prepare_model(config)
    train_loader, val_loader = loaders(config, train_index, val_index)
    state = OptimizerState(config.momentum, config.nesterov, config.weight_decay)
    out = Path(out_dir) if out_dir else None
    if out:
        out.mkdir(parents=True, exist_ok=True)

    history: list[EpochRecord] = []
    best, best_acc, best_epoch, steps = None, -1.0, -1, 0
    ckpt_path = out / "best.ckpt" if out else None
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        lr = lr_at(config.schedule, epoch)
        train_loader.epoch = epoch
        losses, correct, seen = 0.0, 0, 0
        for b, (images, labels) in enumerate(train_loader):
            try:
                loss, logits = train_step(model, images, labels, state, lr)
            except NonFiniteError as exc:
                raise TrainingAborted(f"non-finite values at epoch {epoch}, batch {b}: {exc}", epoch, b) from exc
            if not math.isfinite(loss):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {b}", epoch, b)
            steps += 1
            losses += loss * len(labels)
            correct += int((logits.argmax(axis=1) == labels).sum())
            seen += len(labels)
        val = evaluate(model, val_loader)
        rec = EpochRecord(epoch, lr, losses / seen, correct / seen, val.loss, val.accuracy, time.perf_counter() - t0)
        history.append(rec)
        log.info("epoch %d lr %.5f train_loss %.4f train_acc %.4f val_acc %.4f (%.1fs)", epoch, lr,
                 rec.train_loss, rec.train_accuracy, rec.val_accuracy, rec.seconds)
        if val.accuracy > best_acc:
            best_acc, best_epoch, best = val.accuracy, epoch, snapshot(model)
            if ckpt_path:
                meta = {"epoch": epoch, "lr": lr, "schedule_position": epoch + 1, "config_digest": config.digest(),
                        "metrics": dataclasses.asdict(rec), "class_names": train_loader.index.class_names}
                save_checkpoint(ckpt_path, model, state, meta)
        if stop_at is not None and val.accuracy >= stop_at:
            break
    if out:
        write_history(out / "history.csv", history)
    restore(model, best)
    return RunResult(history, best_epoch, best_acc, steps, model, ckpt_path)


def write_history(path, history: list[EpochRecord]) -> None:
    import csv

    cols = [f.name for f in dataclasses.fields(EpochRecord)]
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for rec in history:
            w.writerow([getattr(rec, c) for c in cols])


def evaluate_split(model: Model, config: TrainConfig, split: str = "evaluation", index=None) -> EvalResult:
    index = index or index_dataset(config.root, split)
    loader = BatchLoader(index, config.batch.eval, size=config.network.input_resolution, stats=config.stats)
    return evaluate(model, loader, index.class_names)


def run_protocol(config: TrainConfig, k: int = 5, out_dir=None):
    """Fit ``k`` models from scratch (seeds seed..seed+k-1) and average test accuracy."""
    from .evaluation import k_run_protocol

    test_index = index_dataset(config.root, "evaluation")

    def one(seed: int) -> float:
        cfg = dataclasses.replace(config, seed=seed)
        sub = Path(out_dir) / f"run{seed}" if out_dir else None
        res = fit(cfg, sub)
        return evaluate_split(res.model, cfg, index=test_index).accuracy

    return k_run_protocol(one, k, config.seed)


__all__ = [
    "BatchSizes",
    "EpochRecord",
    "LrSchedule",
    "OptimizerState",
    "RunResult",
    "TrainConfig",
    "TrainingAborted",
    "apply_freeze",
    "evaluate_split",
    "fit",
    "lr_at",
    "prepare_model",
    "run_protocol",
    "sgd_step",
    "train_step",
]
