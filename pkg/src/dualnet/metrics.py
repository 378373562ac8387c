"""Accuracy-matrix bookkeeping and the ACC / FM / LA metrics."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)


class AccuracyMatrix:
    """``a[i][j]``: accuracy on task j's test set after the last batch of task i (0-based)."""

    def __init__(self, n_tasks: int):
        self.n_tasks = n_tasks
        self.a = np.full((n_tasks, n_tasks), np.nan)

    @classmethod
    def from_rows(cls, rows) -> "AccuracyMatrix":
        m = cls(len(rows))
        for i, row in enumerate(rows):
            for j, v in enumerate(row[: i + 1]):
                m.set(i, j, v)
        return m

    def set(self, i: int, j: int, value: float) -> None:
        if j > i:
            raise IndexError("only the lower triangle (j <= i) is recorded")
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"accuracy {value} outside [0, 1]")
        self.a[i, j] = value

    def complete(self) -> bool:
        return not np.isnan(self.a[np.tril_indices(self.n_tasks)]).any()

    def rows(self) -> list[list[float]]:
        return [[float(v) for v in self.a[i, : i + 1]] for i in range(self.n_tasks)]


@dataclass
class MetricResult:
    value: float
    status: str = "ok"


def _require_complete(m: AccuracyMatrix) -> None:
    if not m.complete():
        raise ValueError("accuracy matrix is not filled through the last task")


def acc(m: AccuracyMatrix) -> float:
    _require_complete(m)
    return float(m.a[-1].mean())


def la(m: AccuracyMatrix) -> float:
    _require_complete(m)
    return float(np.diag(m.a).mean())


def fm(m: AccuracyMatrix) -> MetricResult:
    """Mean over the first T-1 tasks of (best earlier accuracy - final accuracy); not clamped."""
    _require_complete(m)
    t = m.n_tasks
    if t < 2:
        return MetricResult(0.0, "undefined for a single task; reported as 0")
    best = np.array([m.a[j : t - 1, j].max() for j in range(t - 1)])
    return MetricResult(float((best - m.a[t - 1, : t - 1]).mean()))


def summarize(m: AccuracyMatrix) -> dict[str, float | str]:
    f = fm(m)
    return {"ACC": acc(m), "FM": f.value, "LA": la(m), "FM_status": f.status}


def mean_std(values) -> tuple[float, float]:
    """Mean and population standard deviation."""
    v = np.asarray(values, dtype=float)
    return float(v.mean()), float(v.std())


@dataclass
class EvalReport:
    accuracy: float
    n_scored: int
    n_excluded: int = 0
    warnings: list[str] = field(default_factory=list)


def evaluate_task(model, images: np.ndarray, labels: np.ndarray, protocol: str, task=None, batch: int = 256) -> EvalReport:
    """Fraction of the test set predicted correctly, without augmentation.

    Task-aware: the task's own head. Task-free: argmax over every class seen
    so far; test samples of never-observed classes are dropped with a warning.
    """
    if len(images) == 0:
        raise ValueError("empty test set")
    heads = model.heads
    warnings = []
    keep = np.ones(len(labels), dtype=bool)
    if protocol == "tf":
        seen = set(heads.classes)
        keep = np.array([int(y) in seen for y in labels])
        if not keep.all():
            msg = f"{int((~keep).sum())} test samples belong to classes never observed; excluded"
            logger.warning(msg)
            warnings.append(msg)
        if not keep.any():
            return EvalReport(0.0, 0, int(len(labels)), warnings)
    images, labels = images[keep], labels[keep]
    correct = 0
    with no_grad():
        for start in range(0, len(images), batch):
            x = Tensor(images[start : start + batch])
            logits = model.predict(x, task if protocol == "ta" else None)
            cols = logits.data.argmax(axis=1)
            pred = heads.class_ids(cols, task if protocol == "ta" else None)
            correct += int((pred == labels[start : start + batch]).sum())
    return EvalReport(correct / len(labels), len(labels), int((~keep).sum()), warnings)
