"""Fast learner: pixel-wise modulation of slow features, plus classifier heads."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .backbone import ArchConfig, linear
from .params import ParamSet, kaiming_uniform, linear_uniform
from .tensor import NumericalError, ShapeError, Tensor, conv2d, get_default_dtype, global_avg_pool, l2_norm_squared

NORM_EPS = 1e-8


class ProtocolError(RuntimeError):
    """A task identifier was required but missing, unknown, or leaked."""


def modulate_features(h: Tensor, m: Tensor) -> Tensor:
    """``h * m / ||m||^2`` with the squared norm taken per sample over C*H*W."""
    if h.shape != m.shape:
        raise ShapeError(f"slow feature {h.shape} and modulation map {m.shape} differ")
    norm = l2_norm_squared(m)
    if (norm.data < NORM_EPS).any():
        raise NumericalError(f"modulation map norm below {NORM_EPS}: fast-learner layer is dead")
    denom = (norm + NORM_EPS).reshape(-1, 1, 1, 1).broadcast_to(m.shape)
    return h * (m / denom)


class FastLearner:
    """L conv layers ``g_l``; layer l matches the slow stage l in shape."""

    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        self.config = config
        self.params = ParamSet()
        c_in = config.in_channels
        for i, width in enumerate(config.widths):
            self.params.add(f"g{i}", kaiming_uniform(rng, (width, c_in, 3, 3)))
            c_in = width
        self.output_shapes = self._shapes()
        if self.output_shapes != config.feature_shapes():
            raise ShapeError(
                f"fast layers {self.output_shapes} do not match slow stages {config.feature_shapes()}"
            )

    def _shapes(self) -> list[tuple[int, int, int]]:
        shapes = []
        h = w = self.config.resolution
        for i, stride in enumerate(self.config.strides):
            k = self.params[f"g{i}"].shape
            h = (h + 2 - k[2]) // stride + 1
            w = (w + 2 - k[3]) // stride + 1
            shapes.append((k[0], h, w))
        return shapes

    def modulation_maps(self, prev: Tensor, layer: int) -> Tensor:
        return conv2d(prev, self.params[f"g{layer}"], stride=self.config.strides[layer], padding=1).relu()

    def modulate(self, x: Tensor, slow_features: Sequence[Tensor]) -> tuple[Tensor, list[Tensor]]:
        """Run the recurrence ``m_l = g_l(h'_{l-1})``, ``h'_l = h_l * m_l / ||m_l||^2``."""
        if len(slow_features) != self.config.depth:
            raise ShapeError(f"expected {self.config.depth} slow feature maps, got {len(slow_features)}")
        prev = x
        adapted = []
        for layer, h in enumerate(slow_features):
            m = self.modulation_maps(prev, layer)
            prev = modulate_features(h, m)
            adapted.append(prev)
        return prev, adapted


class ClassifierHeads:
    """Per-task linear heads (multi-head) or one growing shared head (single-head).

    Labels handed to the heads are global class ids; each head maps them to
    its own column order.
    """

    def __init__(self, in_dim: int, mode: str, rng: np.random.Generator, prefix: str = "head"):
        if mode not in ("multi", "single"):
            raise ValueError(f"unknown head mode {mode!r}")
        self.in_dim = in_dim
        self.mode = mode
        self.rng = rng
        self.prefix = prefix
        self.params = ParamSet()
        self.task_classes: dict[int, list[int]] = {}
        self.classes: list[int] = []
        self._column: dict[int, int] = {}
        if mode == "single":
            dtype = get_default_dtype()
            self.params.add(f"{prefix}.weight", Tensor(np.zeros((in_dim, 0), dtype=dtype)))
            self.params.add(f"{prefix}.bias", Tensor(np.zeros((0,), dtype=dtype)))

    # --------------------------------------------------------- registration
    def register_task(self, task: int, classes: Sequence[int]) -> None:
        if self.mode != "multi":
            raise ProtocolError("task registration only applies to multi-head mode")
        if task in self.task_classes:
            return
        self.task_classes[task] = list(classes)
        k = len(classes)
        self.params.add(f"{self.prefix}.{task}.weight", linear_uniform(self.rng, self.in_dim, (self.in_dim, k)))
        self.params.add(f"{self.prefix}.{task}.bias", linear_uniform(self.rng, self.in_dim, (k,)))

    def observe_classes(self, labels: Sequence[int]) -> int:
        """Single-head: append zero rows for unseen classes. Returns how many were added."""
        if self.mode != "single":
            return 0
        new = []
        for y in labels:
            y = int(y)
            if y not in self._column and y not in new:
                new.append(y)
        if not new:
            return 0
        for y in new:
            self._column[y] = len(self.classes)
            self.classes.append(y)
        w = self.params[f"{self.prefix}.weight"]
        b = self.params[f"{self.prefix}.bias"]
        pad_w = np.zeros((self.in_dim, len(new)), dtype=w.data.dtype)
        pad_b = np.zeros((len(new),), dtype=b.data.dtype)
        self.params.replace(f"{self.prefix}.weight", Tensor(np.concatenate([w.data, pad_w], axis=1)))
        self.params.replace(f"{self.prefix}.bias", Tensor(np.concatenate([b.data, pad_b])))
        return len(new)

    @property
    def n_outputs(self) -> int:
        return len(self.classes)

    # ------------------------------------------------------------- mapping
    def _check_task(self, task) -> int:
        if task is None:
            raise ProtocolError("multi-head prediction requires a task id")
        task = int(task)
        if task not in self.task_classes:
            raise ProtocolError(f"unknown task id {task}")
        return task

    def head_key(self, task) -> int | None:
        return self._check_task(task) if self.mode == "multi" else None

    def columns(self, labels: Sequence[int], task=None) -> np.ndarray:
        """Map global class ids to column indices of the relevant head."""
        if self.mode == "multi":
            lookup = {c: i for i, c in enumerate(self.task_classes[self._check_task(task)])}
        else:
            lookup = self._column
        try:
            return np.array([lookup[int(y)] for y in labels], dtype=np.intp)
        except KeyError as exc:
            raise ValueError(f"label {exc.args[0]} outside head range") from None

    def class_ids(self, columns: np.ndarray, task=None) -> np.ndarray:
        order = self.task_classes[self._check_task(task)] if self.mode == "multi" else self.classes
        return np.asarray(order)[columns]

    # ------------------------------------------------------------- forward
    def __call__(self, feats: Tensor, task=None) -> Tensor:
        if self.mode == "multi":
            t = self._check_task(task)
            return linear(feats, self.params[f"{self.prefix}.{t}.weight"], self.params[f"{self.prefix}.{t}.bias"])
        if not self.classes:
            raise ProtocolError("single head has not observed any class yet")
        return linear(feats, self.params[f"{self.prefix}.weight"], self.params[f"{self.prefix}.bias"])


def pooled(h: Tensor) -> Tensor:
    return global_avg_pool(h)
