"""Datasets, split benchmarks and online task streams."""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .container import FormatError

DATASET_MAGIC = b"DNDS0001"
NO_TASK = 0xFFFFFFFF
PROTOCOLS = ("ta", "tf")


@dataclass
class Dataset:
    images: np.ndarray  # [N, C, H, W] float32 in [0, 1]
    labels: np.ndarray  # [N] int64
    n_classes: int
    tasks: np.ndarray | None = None  # [N] int64, -1 when absent
    labeled: np.ndarray | None = None  # [N] bool

    def __post_init__(self):
        n = len(self.images)
        if self.tasks is None:
            self.tasks = np.full(n, -1, dtype=np.int64)
        if self.labeled is None:
            self.labeled = np.ones(n, dtype=bool)
        if not (len(self.labels) == len(self.tasks) == len(self.labeled) == n):
            raise ValueError("dataset arrays disagree in length")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])


# ------------------------------------------------------------------ file format
def _record_dtype(pixels: int) -> np.dtype:
    return np.dtype([("labeled", "u1"), ("label", "<u4"), ("task", "<u4"), ("pixels", "<f4", (pixels,))])


def save_dataset(dataset: Dataset, path) -> None:
    n = len(dataset)
    c, h, w = dataset.image_shape
    rec = np.zeros(n, dtype=_record_dtype(c * h * w))
    rec["labeled"] = dataset.labeled.astype(np.uint8)
    rec["label"] = dataset.labels
    rec["task"] = np.where(dataset.tasks < 0, NO_TASK, dataset.tasks)
    rec["pixels"] = dataset.images.reshape(n, -1)
    header = DATASET_MAGIC + struct.pack("<IIIII", n, c, h, w, dataset.n_classes)
    Path(path).write_bytes(header + rec.tobytes())


def parse_dataset(buf: bytes) -> Dataset:
    if len(buf) < 8 or buf[:8] != DATASET_MAGIC:
        raise FormatError(f"bad magic {buf[:8]!r}, expected {DATASET_MAGIC!r}", 0)
    if len(buf) < 28:
        raise FormatError("truncated header", len(buf))
    n, c, h, w, n_classes = struct.unpack_from("<IIIII", buf, 8)
    dtype = _record_dtype(c * h * w)
    expected = 28 + n * dtype.itemsize
    if len(buf) < expected:
        complete = (len(buf) - 28) // dtype.itemsize
        raise FormatError(f"truncated at item {complete} of {n}", 28 + complete * dtype.itemsize)
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes", expected)
    rec = np.frombuffer(buf, dtype=dtype, count=n, offset=28)
    task = rec["task"].astype(np.int64)
    return Dataset(
        images=rec["pixels"].reshape(n, c, h, w).astype(np.float32),
        labels=rec["label"].astype(np.int64),
        n_classes=int(n_classes),
        tasks=np.where(task == NO_TASK, -1, task),
        labeled=rec["labeled"].astype(bool),
    )


def load_dataset(path) -> Dataset:
    return parse_dataset(Path(path).read_bytes())


# -------------------------------------------------------------- synthetic data
_SHAPES = ("disk", "square", "triangle", "ring", "cross", "hbars", "vbars", "checker", "diamond", "diagonal")


def _hsv_to_rgb(h: float, s: float, v: float) -> np.ndarray:
    i = int(h * 6.0) % 6
    f = h * 6.0 - int(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    return np.array([(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)][i])


def _shape_mask(kind: str, u: np.ndarray, v: np.ndarray, size: float) -> np.ndarray:
    """Soft-edged mask on rotated, centred coordinates ``u, v``."""
    r = np.sqrt(u**2 + v**2)
    if kind == "disk":
        d = r - size
    elif kind == "square":
        d = np.maximum(abs(u), abs(v)) - size * 0.85
    elif kind == "triangle":
        d = np.maximum(np.maximum(-v - size * 0.5, v * 0.5 + abs(u) * 0.866 - size * 0.5), -size)
    elif kind == "ring":
        d = abs(r - size * 0.75) - size * 0.25
    elif kind == "cross":
        d = np.minimum(np.maximum(abs(u) - size * 0.3, abs(v) - size), np.maximum(abs(v) - size * 0.3, abs(u) - size))
    elif kind == "hbars":
        d = np.maximum(np.maximum(abs(u), abs(v)) - size, -np.cos(v * np.pi * 3 / size) * size * 0.3)
    elif kind == "vbars":
        d = np.maximum(np.maximum(abs(u), abs(v)) - size, -np.cos(u * np.pi * 3 / size) * size * 0.3)
    elif kind == "checker":
        d = np.maximum(
            np.maximum(abs(u), abs(v)) - size,
            -np.sign(np.sin(u * np.pi * 2 / size) * np.sin(v * np.pi * 2 / size)) * 0.5,
        )
    elif kind == "diamond":
        d = abs(u) + abs(v) - size * 1.1
    else:  # diagonal
        d = np.maximum(np.maximum(abs(u), abs(v)) - size, -np.cos((u + v) * np.pi * 2 / size) * size * 0.3)
    return np.clip(0.5 - d, 0.0, 1.0)


def synthetic_dataset(n_classes: int = 10, per_class: int = 200, resolution: int = 32, seed: int = 0) -> Dataset:
    """Procedural class-conditional images: a coloured shape family over noisy texture.

    Class ``c`` fixes the shape family and a base colour; each image draws
    its own position, size, rotation, colour jitter, background and noise.
    """
    if resolution < 8:
        raise ValueError("resolution must be at least 8")
    rng = np.random.default_rng(seed)
    n = n_classes * per_class
    images = np.empty((n, 3, resolution, resolution), dtype=np.float32)
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), per_class)
    grid = (np.arange(resolution) + 0.5) / resolution * 2 - 1
    yy, xx = np.meshgrid(grid, grid, indexing="ij")
    golden = 0.6180339887
    for i, c in enumerate(labels):
        kind = _SHAPES[c % len(_SHAPES)]
        hue = (c * golden + 0.05 * (c // len(_SHAPES))) % 1.0
        color = _hsv_to_rgb((hue + rng.normal(0, 0.03)) % 1.0, rng.uniform(0.6, 1.0), rng.uniform(0.6, 1.0))
        bg = _hsv_to_rgb(rng.uniform(), rng.uniform(0.0, 0.4), rng.uniform(0.15, 0.6))
        cy, cx = rng.uniform(-0.3, 0.3, 2)
        size = rng.uniform(0.35, 0.6)
        angle = rng.uniform(-0.5, 0.5)
        ca, sa = np.cos(angle), np.sin(angle)
        u = (xx - cx) * ca + (yy - cy) * sa
        v = -(xx - cx) * sa + (yy - cy) * ca
        mask = _shape_mask(kind, u * resolution / 2, v * resolution / 2, size * resolution / 2)
        texture = 0.1 * np.sin(xx * rng.uniform(2, 8) + rng.uniform(0, 6)) * np.cos(yy * rng.uniform(2, 8))
        img = bg[:, None, None] * (1 - mask) + color[:, None, None] * mask
        img = img + texture + rng.normal(0, 0.06, img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return Dataset(images=images, labels=labels, n_classes=n_classes)


# ------------------------------------------------------------------ benchmarks
@dataclass
class TaskSpec:
    task_id: int
    classes: list[int]
    train_index: np.ndarray
    test_index: np.ndarray


@dataclass
class Benchmark:
    dataset: Dataset
    tasks: list[TaskSpec]
    validation: list[TaskSpec] = field(default_factory=list)
    classes_per_task: int = 0

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    def test_set(self, task_index: int) -> tuple[np.ndarray, np.ndarray]:
        spec = self.tasks[task_index]
        return self.dataset.images[spec.test_index], self.dataset.labels[spec.test_index]


def build_split_benchmark(
    dataset: Dataset,
    classes_per_task: int,
    n_tasks: int,
    seed: int = 0,
    test_fraction: float = 0.25,
    holdout_validation: bool = False,
    n_validation: int = 3,
) -> Benchmark:
    """Sample disjoint class sets per task without replacement, then split train/test per class."""
    classes = np.unique(dataset.labels[dataset.labeled])
    total = n_tasks + (n_validation if holdout_validation else 0)
    if classes_per_task < 1 or n_tasks < 1:
        raise ValueError("need at least one task with at least one class")
    if total * classes_per_task > len(classes):
        raise ValueError(
            f"{total} tasks x {classes_per_task} classes needs {total * classes_per_task} classes, "
            f"dataset has {len(classes)}"
        )
    rng = np.random.default_rng(seed)
    order = rng.permutation(classes)
    splits: dict[int, tuple[np.ndarray, np.ndarray]] = {}
    for c in order[: total * classes_per_task]:
        idx = np.flatnonzero((dataset.labels == c) & dataset.labeled)
        idx = rng.permutation(idx)
        n_test = int(round(len(idx) * test_fraction))
        splits[int(c)] = (np.sort(idx[n_test:]), np.sort(idx[:n_test]))

    def make(k: int, task_id: int) -> TaskSpec:
        cls = [int(c) for c in order[k * classes_per_task : (k + 1) * classes_per_task]]
        train = np.concatenate([splits[c][0] for c in cls])
        test = np.concatenate([splits[c][1] for c in cls])
        return TaskSpec(task_id, cls, train, test)

    offset = n_validation if holdout_validation else 0
    validation = [make(k, k) for k in range(offset)]
    tasks = [make(offset + k, k) for k in range(n_tasks)]
    return Benchmark(dataset, tasks, validation, classes_per_task)


# --------------------------------------------------------------------- streams
@dataclass
class StreamBatch:
    """One mini-batch of the online stream.

    ``labels`` holds -1 for unlabeled rows. ``task`` and ``task_classes``
    are ``None`` in the task-free protocol.
    """

    images: np.ndarray
    labels: np.ndarray
    labeled: np.ndarray
    task: int | None
    end_of_task: bool
    task_classes: tuple[int, ...] | None = None

    @property
    def labeled_images(self) -> np.ndarray:
        return self.images[self.labeled]

    @property
    def labeled_labels(self) -> np.ndarray:
        return self.labels[self.labeled]

    @property
    def unlabeled_images(self) -> np.ndarray:
        return self.images[~self.labeled]


class TaskStream:
    """Single-pass iterator over the training tasks of a benchmark."""

    def __init__(
        self,
        benchmark: Benchmark,
        batch_size: int = 10,
        protocol: str = "ta",
        rho: float = 1.0,
        rng: np.random.Generator | None = None,
        use_validation: bool = False,
    ):
        if protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}, got {protocol!r}")
        if not 0.0 < rho <= 1.0:
            raise ValueError("labeled fraction rho must lie in (0, 1]")
        if batch_size < 1:
            raise ValueError("batch size must be positive")
        self._benchmark = benchmark
        self._tasks = benchmark.validation if use_validation else benchmark.tasks
        self.batch_size = batch_size
        self.protocol = protocol
        self.rho = rho
        self._rng = rng or np.random.default_rng(0)
        self._consumed = False
        self.labeled_counts: list[int] = []

    @property
    def n_tasks(self) -> int:
        return len(self._tasks)

    def __iter__(self) -> Iterator[StreamBatch]:
        if self._consumed:
            raise RuntimeError("task stream already consumed; streams are single-pass")
        self._consumed = True
        return self._generate()

    def _generate(self) -> Iterator[StreamBatch]:
        data = self._benchmark.dataset
        for spec in self._tasks:
            order = self._rng.permutation(spec.train_index)
            n = len(order)
            n_labeled = int(round(self.rho * n))
            labeled = np.zeros(n, dtype=bool)
            labeled[self._rng.choice(n, size=n_labeled, replace=False)] = True
            self.labeled_counts.append(n_labeled)
            for start in range(0, n, self.batch_size):
                rows = order[start : start + self.batch_size]
                mask = labeled[start : start + self.batch_size]
                yield StreamBatch(
                    images=data.images[rows],
                    labels=np.where(mask, data.labels[rows], -1),
                    labeled=mask,
                    task=spec.task_id if self.protocol == "ta" else None,
                    end_of_task=start + self.batch_size >= n,
                    task_classes=tuple(spec.classes) if self.protocol == "ta" else None,
                )
