"""Desk-scale experiments on the procedural shapes data: the 11-class
benchmark layout and a two-task transfer-learning study."""
from __future__ import annotations

import dataclasses
import math
import statistics
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import efftiny
from .data import BatchLoader, index_dataset
from .shapes import SHAPES, generate_shapes
from .train import OptimizerState, TrainConfig, fit, prepare_model, train_step

DESK_COUNTS = {"training": 100, "validation": 20, "evaluation": 20}
TASK_A = ("circle", "square", "triangle", "plus", "ring")


def make_desk_dataset(root, seed: int = 0, size: int = 64) -> Path:
    """11 classes x (100 train / 20 val / 20 test) at ``size`` x ``size``."""
    return generate_shapes(root, DESK_COUNTS, SHAPES, size=size, seed=seed)


@dataclass
class TransferStudy:
    threshold: float
    budget: int
    seeds: list[int]
    finetune_epochs: list[float] = field(default_factory=list)
    scratch_epochs: list[float] = field(default_factory=list)
    pretrain_checkpoint: str = ""

    @property
    def finetune_median(self) -> float:
        return statistics.median(self.finetune_epochs)

    @property
    def scratch_median(self) -> float:
        return statistics.median(self.scratch_epochs)

    def to_json(self) -> dict:
        return {**dataclasses.asdict(self), "finetune_median": self.finetune_median,
                "scratch_median": self.scratch_median}


def _epochs_to(result, threshold: float) -> float:
    n = result.epochs_to(threshold)
    return math.inf if n is None else float(n)


def pretrain_task_a(workdir, epochs: int = 6, seed: int = 0) -> Path:
    """Fit EffTiny on the 5-class shapes task and return its best checkpoint."""
    workdir = Path(workdir)
    root = generate_shapes(workdir / "task_a", {"training": 60, "validation": 10, "evaluation": 10},
                           TASK_A, seed=1000 + seed)
    cfg = TrainConfig(root=str(root), network=efftiny(num_classes=len(TASK_A)), epochs=epochs, seed=seed)
    return fit(cfg, workdir / "task_a_run").checkpoint_path


def transfer_study(workdir, seeds=(0, 1, 2), budget: int = 8, threshold: float = 0.9,
                   per_class: int = 40, checkpoint=None) -> TransferStudy:
    """Epochs to reach ``threshold`` validation accuracy on the 11-class task,
    fine-tuning from a task-A checkpoint (new head) versus from scratch.

    Runs that never reach the threshold within ``budget`` count as infinity.
    """
    workdir = Path(workdir)
    ckpt = checkpoint or pretrain_task_a(workdir)
    root = generate_shapes(workdir / "task_b", {"training": per_class, "validation": 20, "evaluation": 20},
                           SHAPES, seed=2000)
    train_idx, val_idx = index_dataset(root, "training"), index_dataset(root, "validation")
    study = TransferStudy(threshold, budget, list(seeds), pretrain_checkpoint=str(ckpt))
    for s in seeds:
        base = TrainConfig(root=str(root), epochs=budget, seed=s)
        tuned = dataclasses.replace(base, init_checkpoint=str(ckpt), reinit_head=True, freeze="full")
        for cfg, sink in ((tuned, study.finetune_epochs), (base, study.scratch_epochs)):
            res = fit(cfg, train_index=train_idx, val_index=val_idx, stop_at=threshold)
            sink.append(_epochs_to(res, threshold))
    return study


def frozen_drift(checkpoint, root, steps: int = 100, seed: int = 0, freeze_bn_stats: bool = True) -> dict:
    """Train ``steps`` batches in feature-extraction mode from ``checkpoint``.

    Returns the names of frozen tensors whose bytes changed (expected empty)
    and whether the classifier moved.
    """
    idx = index_dataset(root, "training")
    cfg = TrainConfig(root=str(root), network=efftiny(num_classes=len(idx.class_names)), seed=seed,
                      init_checkpoint=str(checkpoint), reinit_head=True, freeze="feature_extraction",
                      freeze_bn_stats=freeze_bn_stats)
    model = prepare_model(cfg)
    frozen = {n: p.data.tobytes() for n, p in model.named_parameters().items() if not p.trainable}
    if freeze_bn_stats:
        frozen.update({n: b.tobytes() for n, b in model.named_buffers().items()})
    head = model.fc_weight.data.copy()
    loader = BatchLoader(idx, cfg.batch.train, size=cfg.network.input_resolution, shuffle=True, seed=seed, policy=cfg.augment)
    state = OptimizerState()
    done, epoch = 0, 0
    while done < steps:
        loader.epoch = epoch
        for images, labels in loader:
            train_step(model, images, labels, state, cfg.schedule.initial)
            done += 1
            if done == steps:
                break
        epoch += 1
    current = {n: p.data.tobytes() for n, p in model.named_parameters().items()}
    current.update({n: b.tobytes() for n, b in model.named_buffers().items()})
    changed = sorted(n for n, raw in frozen.items() if current[n] != raw)
    return {"steps": done, "frozen_tensors": len(frozen), "changed": changed,
            "classifier_moved": not np.array_equal(head, model.fc_weight.data)}


__all__ = ["DESK_COUNTS", "TASK_A", "TransferStudy", "frozen_drift", "make_desk_dataset",
           "pretrain_task_a", "transfer_study"]
