"""Online training loops: the dual fast/slow learner and the ER baselines."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .backbone import ArchConfig
from .fastnet import ProtocolError
from .losses import cross_entropy_rows, kl_rows, l2_rows
from .memory import EmptyMemory, EpisodicMemory, MemoryEntry, update_soft_label
from .metrics import AccuracyMatrix, evaluate_task, summarize
from .model import DualNet, ERNet
from .optim import SGD, Lookahead
from .seeding import component_rngs
from .ssl import (
    OBJECTIVES,
    AugmentConfig,
    augment,
    augment_pair,
    barlow_twins_loss,
    classification_objective,
    simclr_loss,
)
from .stream import Benchmark, StreamBatch, TaskStream
from .tensor import Tensor, global_avg_pool, no_grad

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    protocol: str = "ta"
    n_ssl_iters: int = 3
    inner_updates: int = 1
    lambda_tr: float = 2.0
    tau: float = 2.0
    lambda_bt: float = 2e-3
    replay_batch: int = 10
    ssl_batch: int = 10
    batch_size: int = 10
    slow_inner_lr: float = 3e-4
    lookahead_beta: float = 0.5
    lookahead_k: int = 5
    fast_lr: float = 0.03
    momentum: float = 0.0
    objective: str = "barlow_twins"
    simclr_temperature: float = 0.5
    center_correlation: bool = True
    augment_supervised: bool = False
    modulate: bool = True
    soft_loss: str = "kl"
    memory_policy: str = "ring"
    memory_slots: int = 50
    reservoir_per_class: bool = True
    rho: float = 1.0
    record_wall_time: bool = False
    check_isolation: bool = False
    arch: ArchConfig = field(default_factory=ArchConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        # crops are resized back to the backbone's input size
        if self.augment.resolution != self.arch.resolution:
            self.augment = replace(self.augment, resolution=self.arch.resolution)

    def validate(self) -> None:
        if self.protocol not in ("ta", "tf"):
            raise ValueError(f"protocol: expected ta|tf, got {self.protocol!r}")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective: expected one of {OBJECTIVES}, got {self.objective!r}")
        if self.soft_loss not in ("kl", "l2"):
            raise ValueError(f"soft_loss: expected kl|l2, got {self.soft_loss!r}")
        if self.n_ssl_iters < 0 or self.inner_updates < 0:
            raise ValueError("n_ssl_iters and inner_updates must be non-negative")
        for name in ("lambda_tr", "lambda_bt", "fast_lr", "slow_inner_lr"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {v}")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def head_mode(self) -> str:
        return "multi" if self.protocol == "ta" else "single"

    def supervised_augment(self) -> AugmentConfig:
        return self.augment if self.protocol == "ta" else self.augment.crop_flip_only()


# ---------------------------------------------------------- supervised loss
@dataclass
class LossStats:
    missing_soft: int = 0


def supervised_loss(
    model,
    images: np.ndarray,
    labels: Sequence[int],
    task,
    mem_batch: Sequence[MemoryEntry],
    lambda_tr: float,
    tau: float,
    soft_loss: str = "kl",
    stats: LossStats | None = None,
) -> Tensor:
    """Current-batch CE plus the memory mean of CE and ``lambda_tr`` x soft-label term.

    The soft-label term compares each memory entry's stored soft label
    (teacher) with the current prediction on that entry at temperature
    ``tau`` (student). Only the KL term is tempered. In single-head mode a
    soft label recorded when fewer classes existed is compared against the
    matching leading columns of the current logits.
    """
    b, m = len(images), len(mem_batch)
    x = images if m == 0 else np.concatenate([images, np.stack([e.image for e in mem_batch])])
    feats = model.features(Tensor(x))
    heads = model.heads

    all_labels = [int(y) for y in labels] + [int(e.hard_label) for e in mem_batch]
    keys = [heads.head_key(task)] * b + [heads.head_key(e.task_id) for e in mem_batch]
    weights = np.array([1.0 / b] * b + ([1.0 / m] * m if m else []))

    groups: dict = {}
    for r, k in enumerate(keys):
        groups.setdefault(k, []).append(r)

    total = None
    for key, rows in groups.items():
        rows_arr = np.asarray(rows)
        f = feats if len(rows) == len(keys) else feats.take_rows(rows_arr)
        logits = heads(f, key)
        cols = heads.columns([all_labels[r] for r in rows], key)
        ce = cross_entropy_rows(logits, cols)
        term = (ce * Tensor(weights[rows_arr])).sum()
        if lambda_tr > 0:
            by_len: dict[int, list[int]] = {}
            for local, r in enumerate(rows):
                if r < b:
                    continue
                soft = mem_batch[r - b].soft_label
                if soft is None:
                    if stats is not None:
                        stats.missing_soft += 1
                    continue
                by_len.setdefault(len(soft), []).append(local)
            for k, local_rows in by_len.items():
                student = logits.take_rows(np.asarray(local_rows))
                if k < student.shape[1]:
                    student = student[:, :k]
                teacher = np.stack([mem_batch[rows[i] - b].soft_label for i in local_rows])
                if soft_loss == "kl":
                    dist = kl_rows(teacher, student, tau)
                else:
                    dist = l2_rows(teacher, student)
                term = term + dist.sum() * (lambda_tr / m)
        total = term if total is None else total + term
    return total


# ----------------------------------------------------------------- learners
class _Learner:
    """Shared plumbing: head registration, memory writes, supervised updates."""

    def __init__(self, model, config: TrainConfig, rngs: dict[str, np.random.Generator]):
        self.model = model
        self.config = config
        self.rngs = rngs
        self.memory = EpisodicMemory(config.memory_policy, config.memory_slots, config.reservoir_per_class)
        self.sgd = SGD(config.fast_lr, config.momentum)
        self.loss_stats = LossStats()
        self.steps = 0

    def _check_protocol(self, batch: StreamBatch) -> None:
        if self.config.protocol == "tf" and (batch.task is not None or batch.task_classes is not None):
            raise ProtocolError("task identity leaked into a task-free stream")
        if self.config.protocol == "ta" and batch.task is None:
            raise ProtocolError("task-aware stream batch without a task id")

    def _register(self, batch: StreamBatch) -> None:
        heads = self.model.heads
        if self.config.protocol == "ta":
            heads.register_task(batch.task, batch.task_classes)
        else:
            heads.observe_classes(batch.labeled_labels)

    def _write_memory(self, batch: StreamBatch, with_soft: bool) -> None:
        x, y = batch.labeled_images, batch.labeled_labels
        if len(x) == 0:
            return
        logits = None
        if with_soft:
            with no_grad():
                logits = self.model.predict(Tensor(x), batch.task).data
        for i in range(len(x)):
            entry = MemoryEntry(image=x[i], hard_label=int(y[i]), task_id=batch.task)
            if logits is not None:
                if self.config.soft_loss == "kl":
                    update_soft_label(entry, logits[i], self.config.tau)
                else:
                    entry.soft_label = logits[i].astype(np.float32).copy()
            self.memory.write(entry, self.rngs["memory"])

    def _supervised(self, batch: StreamBatch) -> float | None:
        x, y = batch.labeled_images, batch.labeled_labels
        if len(x) == 0 or self.config.inner_updates == 0:
            return None
        cfg = self.config
        total = 0.0
        for _ in range(cfg.inner_updates):
            mem = self.memory.sample_batch(cfg.replay_batch, self.rngs["sup.sample"]) if len(self.memory) else []
            images = x
            if cfg.augment_supervised:
                joint = np.concatenate([x] + [e.image[None] for e in mem]) if mem else x
                joint = augment(joint, self.rngs["sup.augment"], cfg.supervised_augment(), 0.0)
                images = joint[: len(x)]
                mem = [replace(e, image=joint[len(x) + i]) for i, e in enumerate(mem)]
            params = self.model.supervised_params()
            params.zero_grad()
            loss = supervised_loss(
                self.model, images, y, batch.task, mem, cfg.lambda_tr, cfg.tau, cfg.soft_loss, self.loss_stats
            )
            loss.backward()
            self.sgd.step(params)
            total += loss.item()
        return total / cfg.inner_updates


class DualNetLearner(_Learner):
    """Per labeled batch: memory write, n Look-ahead SSL rounds, N supervised steps."""

    def __init__(self, config: TrainConfig, seed: int):
        config.validate()
        rngs = component_rngs(seed)
        super().__init__(DualNet(config.arch, config.head_mode, rngs, modulate=config.modulate), config, rngs)
        self.lookahead = Lookahead(SGD(config.slow_inner_lr, config.momentum), config.lookahead_k, config.lookahead_beta)

    # --------------------------------------------------------------- SSL
    def _ssl_loss(self, extra: np.ndarray) -> Callable[[int], Tensor | None]:
        cfg = self.config
        slow = self.model.slow

        def loss_fn(k: int) -> Tensor | None:
            try:
                entries = self.memory.sample_batch(cfg.ssl_batch, self.rngs["ssl.sample"])
            except EmptyMemory:
                entries = []
            if cfg.objective == "classification":
                if not entries:
                    return None
                imgs = np.stack([e.image for e in entries])
                view = augment(imgs, self.rngs["ssl.augment"], cfg.augment, cfg.augment.blur_p_a)
                head = self.model.slow_head
                labels = [e.hard_label for e in entries]
                logits = head(global_avg_pool(slow.forward_features(Tensor(view))[-1]))
                return classification_objective(logits, head.columns(labels))
            parts = [np.stack([e.image for e in entries])] if entries else []
            if len(extra):
                parts.append(extra)
            if not parts:
                return None
            imgs = np.concatenate(parts)
            if len(imgs) < 2:
                return None
            va, vb, _ = augment_pair(imgs, self.rngs["ssl.augment"], cfg.augment)
            z = slow.forward_projection(Tensor(np.concatenate([va, vb])))
            n = len(imgs)
            za, zb = z[:n], z[n:]
            if cfg.objective == "simclr":
                return simclr_loss(za, zb, cfg.simclr_temperature)
            return barlow_twins_loss(za, zb, cfg.lambda_bt, cfg.center_correlation)

        return loss_fn

    def ssl_phase(self, extra: np.ndarray) -> float | None:
        cfg = self.config
        if cfg.n_ssl_iters == 0:
            return None
        params = self.model.ssl_params(cfg.objective)
        guard = self._fingerprints() if cfg.check_isolation else None
        losses = []
        for _ in range(cfg.n_ssl_iters):
            if cfg.objective == "classification":
                self._grow_slow_head()
                params = self.model.ssl_params(cfg.objective)
            if self.lookahead.round(params, self._ssl_loss(extra)):
                losses.append(self.lookahead.stats.last_loss)
        if guard is not None and guard != self._fingerprints():
            raise AssertionError("SSL phase modified fast-learner or head parameters")
        return float(np.mean(losses)) if losses else None

    def _grow_slow_head(self) -> None:
        labels = [e.hard_label for e in self.memory.entries()]
        self.model.slow_head.observe_classes(labels)

    def _fingerprints(self) -> tuple[str, str]:
        return self.model.fast.params.fingerprint(), self.model.heads.params.fingerprint()

    def observe(self, batch: StreamBatch) -> dict:
        self._check_protocol(batch)
        self._register(batch)
        self._write_memory(batch, with_soft=self.config.lambda_tr > 0)
        loss_ssl = self.ssl_phase(batch.unlabeled_images)
        loss_tr = self._supervised(batch)
        self.steps += 1
        return {"loss_tr": loss_tr, "loss_ssl": loss_ssl}


class ERLearner(_Learner):
    """Experience replay on a single network; soft-label replay when ``lambda_tr > 0``.

    Unlabeled stream rows are ignored.
    """

    def __init__(self, config: TrainConfig, seed: int):
        config.validate()
        rngs = component_rngs(seed)
        super().__init__(ERNet(config.arch, config.head_mode, rngs), config, rngs)

    def observe(self, batch: StreamBatch) -> dict:
        self._check_protocol(batch)
        self._register(batch)
        self._write_memory(batch, with_soft=self.config.lambda_tr > 0)
        loss_tr = self._supervised(batch)
        self.steps += 1
        return {"loss_tr": loss_tr, "loss_ssl": None}


# ------------------------------------------------------------------ harness
@dataclass
class RunResult:
    learner: _Learner
    matrix: AccuracyMatrix
    metrics: dict
    log: list[dict]

    @property
    def model(self):
        return self.learner.model

    def log_text(self) -> str:
        return "".join(json.dumps(rec) + "\n" for rec in self.log)


def _run(learner: _Learner, benchmark: Benchmark, seed: int, stream: Iterable[StreamBatch] | None = None,
         on_batch: Callable[[_Learner, StreamBatch], None] | None = None) -> RunResult:
    cfg = learner.config
    if stream is None:
        stream = TaskStream(benchmark, cfg.batch_size, cfg.protocol, cfg.rho, learner.rngs["stream"])
    matrix = AccuracyMatrix(benchmark.n_tasks)
    log: list[dict] = []
    task_index = 0
    for batch in stream:
        t0 = time.perf_counter()
        out = learner.observe(batch)
        if on_batch is not None:
            on_batch(learner, batch)
        wall = round((time.perf_counter() - t0) * 1000, 3) if cfg.record_wall_time else None
        log.append(
            {"event": "batch", "task": task_index, "step": learner.steps, "loss_tr": out["loss_tr"],
             "loss_ssl": out["loss_ssl"], "wall_ms": wall}
        )
        if batch.end_of_task:
            accs = []
            for j in range(task_index + 1):
                x, y = benchmark.test_set(j)
                report = evaluate_task(learner.model, x, y, cfg.protocol, benchmark.tasks[j].task_id)
                matrix.set(task_index, j, report.accuracy)
                accs.append(report.accuracy)
            log.append({"event": "eval", "task": task_index, "step": learner.steps, "accuracies": accs})
            task_index += 1
    metrics = summarize(matrix)
    metrics["missing_soft_labels"] = learner.loss_stats.missing_soft
    log.append({"event": "metrics", **metrics})
    return RunResult(learner, matrix, metrics, log)


def train_stream(benchmark: Benchmark, config: TrainConfig, seed: int, **kwargs) -> RunResult:
    """Train the dual learner online over the benchmark's task stream."""
    return _run(DualNetLearner(config, seed), benchmark, seed, **kwargs)


def train_er_baseline(benchmark: Benchmark, config: TrainConfig, seed: int, **kwargs) -> RunResult:
    """Train the ER (``lambda_tr == 0``) or soft-label ER baseline."""
    return _run(ERLearner(config, seed), benchmark, seed, **kwargs)
