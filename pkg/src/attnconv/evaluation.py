"""Accuracy, confusion matrices, k-run averaging and throughput measurement."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import ops
from .tensor import Tensor, no_grad


def argmax(logits) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.asarray(logits).argmax(axis=1)


def accuracy(predictions, labels) -> float:
    p = np.asarray(predictions).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.size == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if p.shape != y.shape:
        raise ValueError(f"{p.size} predictions vs {y.size} labels")
    return float((p == y).sum()) / p.size


@dataclass
class ConfusionMatrix:
    """Counts indexed [true class, predicted class]."""

    counts: np.ndarray
    class_names: list[str]

    @classmethod
    def from_predictions(cls, predictions, labels, k: int, class_names: Sequence[str] | None = None):
        p = np.asarray(predictions, dtype=np.int64).reshape(-1)
        y = np.asarray(labels, dtype=np.int64).reshape(-1)
        if p.shape != y.shape:
            raise ValueError(f"{p.size} predictions vs {y.size} labels")
        for name, ids in (("prediction", p), ("label", y)):
            bad = ids[(ids < 0) | (ids >= k)]
            if bad.size:
                raise ValueError(f"{name} id {bad[0]} outside [0, {k})")
        counts = np.zeros((k, k), dtype=np.int64)
        np.add.at(counts, (y, p), 1)
        names = list(class_names) if class_names is not None else [str(i) for i in range(k)]
        return cls(counts, names)

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        return ConfusionMatrix(self.counts + other.counts, self.class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def support(self) -> np.ndarray:
        return self.counts.sum(axis=1)

    @property
    def empty_rows(self) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.support == 0)]

    def normalized(self) -> np.ndarray:
        """Divide each row by its true-class total; empty rows stay zero."""
        sup = self.support.astype(np.float64)[:, None]
        return np.divide(self.counts, sup, out=np.zeros(self.counts.shape), where=sup > 0)

    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total

    def per_class_recall(self) -> np.ndarray:
        return np.diag(self.normalized())

    def to_csv(self, path) -> None:
        norm = self.normalized()
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["true\\pred"] + self.class_names)
            for name, row in zip(self.class_names, norm):
                w.writerow([name] + [f"{v:.6f}" for v in row])

    def to_pgm(self, path, cell: int = 16) -> None:
        from .data import write_pgm

        write_pgm(path, np.kron(self.normalized(), np.ones((cell, cell))))


@dataclass
class EvalResult:
    accuracy: float
    loss: float
    confusion: ConfusionMatrix
    predictions: np.ndarray
    labels: np.ndarray

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "loss": self.loss,
            "num_samples": int(self.labels.size),
            "class_names": self.confusion.class_names,
            "per_class_recall": dict(zip(self.confusion.class_names, self.confusion.per_class_recall().tolist())),
            "empty_classes": [self.confusion.class_names[i] for i in self.confusion.empty_rows],
            "confusion_counts": self.confusion.counts.tolist(),
            "confusion_normalized": self.confusion.normalized().tolist(),
        }

    def write(self, out_dir, heatmap: bool = True) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.json").write_text(json.dumps(self.to_json(), indent=2))
        self.confusion.to_csv(out / "confusion.csv")
        if heatmap:
            self.confusion.to_pgm(out / "confusion.pgm")


def evaluate(model, loader, class_names: Sequence[str] | None = None) -> EvalResult:
    """Eval-mode pass over ``loader``; never touches parameters or running stats."""
    preds, labels, total_loss = [], [], 0.0
    with no_grad():
        for images, y in loader:
            logits = model(Tensor(images.astype(model.dtype)), "eval")
            total_loss += float(ops.softmax_cross_entropy(logits, y).data) * len(y)
            preds.append(argmax(logits.data))
            labels.append(y)
    p, y = np.concatenate(preds), np.concatenate(labels)
    k = model.config.num_classes
    names = list(class_names) if class_names is not None else None
    if names is not None:
        if len(names) > k:
            raise ValueError(f"dataset has {len(names)} classes but the model predicts {k}")
        names += [f"class{i}" for i in range(len(names), k)]
    cm = ConfusionMatrix.from_predictions(p, y, k, names)
    return EvalResult(accuracy(p, y), total_loss / y.size, cm, p, y)


@dataclass
class ProtocolResult:
    accuracies: list[float]
    seeds: list[int]
    complete: bool = True
    errors: list[str] = field(default_factory=list)

    @property
    def mean(self) -> float:
        if not self.accuracies:
            return math.nan
        return math.fsum(self.accuracies) / len(self.accuracies)

    @property
    def spread(self) -> float:
        """Largest distance of any run from the mean."""
        return max(abs(a - self.mean) for a in self.accuracies) if self.accuracies else math.nan

    def display(self, digits: int = 2) -> str:
        return f"{self.mean:.{digits}f}"

    def to_json(self) -> dict:
        return {
            "accuracies": self.accuracies,
            "seeds": self.seeds,
            "mean": self.mean,
            "display": self.display(),
            "complete": self.complete,
            "errors": self.errors,
        }


def k_run_protocol(run: Callable[[int], float], k: int = 5, seed: int = 0) -> ProtocolResult:
    """Run ``run(seed + i)`` for i < k from scratch and average the accuracies.

    A failing run marks the result incomplete; later runs still execute.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    result = ProtocolResult([], [])
    for i in range(k):
        s = seed + i
        try:
            result.accuracies.append(float(run(s)))
            result.seeds.append(s)
        except Exception as exc:  # noqa: BLE001 - reported, not swallowed
            result.complete = False
            result.errors.append(f"seed {s}: {type(exc).__name__}: {exc}")
    return result


@dataclass
class ThroughputReport:
    batch_size: int
    batches_per_second: float
    warmup_batches: int = 0
    timed_batches: int = 0
    seconds: float = 0.0

    @property
    def images_per_second(self) -> float:
        return self.batches_per_second * self.batch_size

    def to_json(self) -> dict:
        return {
            "batch_size": self.batch_size,
            "batches_per_second": self.batches_per_second,
            "images_per_second": self.images_per_second,
            "warmup_batches": self.warmup_batches,
            "timed_batches": self.timed_batches,
            "seconds": self.seconds,
        }


def benchmark_throughput(model, batch_size: int = 32, warmup_batches: int = 5, timed_batches: int = 50,
                         seed: int = 0, clock: Callable[[], float] = time.perf_counter) -> ThroughputReport:
    """Eval-mode forward throughput on synthetic input batches."""
    if timed_batches < 1:
        raise ValueError("timed_batches must be >= 1")
    r = model.config.input_resolution
    x = Tensor(np.random.default_rng(seed).standard_normal((batch_size, 3, r, r)).astype(model.dtype))
    with no_grad():
        for _ in range(warmup_batches):
            model(x, "eval")
        start = clock()
        for _ in range(timed_batches):
            model(x, "eval")
        elapsed = clock() - start
    return ThroughputReport(batch_size, timed_batches / elapsed, warmup_batches, timed_batches, elapsed)
