"""Episodic memory: per-task ring buffers and per-class reservoirs."""

from __future__ import annotations

from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import container
from .fastnet import ProtocolError
from .tensor import NumericalError

POLICIES = ("ring", "reservoir")


class EmptyMemory(LookupError):
    """Sampling was requested from a memory with no entries."""


@dataclass(eq=False)
class MemoryEntry:
    image: np.ndarray
    hard_label: int
    soft_label: np.ndarray | None = None
    task_id: int | None = None


def temperature_softmax(logits: np.ndarray, temperature: float) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64) / float(temperature)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def update_soft_label(entry: MemoryEntry, logits: np.ndarray, temperature: float) -> None:
    """Store ``softmax(logits / temperature)`` as the entry's soft label (overwrites)."""
    logits = np.asarray(logits)
    if not np.isfinite(logits).all():
        raise NumericalError("soft label logits contain NaN/Inf")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    entry.soft_label = temperature_softmax(logits, temperature).astype(np.float32)


class EpisodicMemory:
    """Bounded store of labelled examples.

    ``ring``: at most ``slots`` entries per task, oldest evicted first.
    ``reservoir``: at most ``slots`` entries per class, each class keeping a
    uniform sample of its stream. With ``per_class=False`` the reservoir is
    a single classical buffer of capacity ``slots``.
    """

    def __init__(self, policy: str, slots: int, per_class: bool = True):
        if policy not in POLICIES:
            raise ValueError(f"unknown memory policy {policy!r}")
        if slots < 1:
            raise ValueError("memory needs at least one slot")
        self.policy = policy
        self.slots = slots
        self.per_class = per_class
        self._buckets: "OrderedDict[int, deque | list]" = OrderedDict()
        self.seen: dict[int, int] = {}
        self._flat: list[MemoryEntry] | None = None

    # -------------------------------------------------------------- writing
    def _bucket_key(self, entry: MemoryEntry) -> int:
        if self.policy == "ring":
            if entry.task_id is None:
                raise ProtocolError("ring memory requires a task id on every write")
            return int(entry.task_id)
        return int(entry.hard_label) if self.per_class else 0

    def write(self, entry: MemoryEntry, rng: np.random.Generator | None = None) -> bool:
        """Insert ``entry``; returns whether it was stored."""
        key = self._bucket_key(entry)
        self._flat = None
        if self.policy == "ring":
            bucket = self._buckets.setdefault(key, deque(maxlen=self.slots))
            bucket.append(entry)
            return True
        bucket = self._buckets.setdefault(key, [])
        seen = self.seen.get(key, 0) + 1
        self.seen[key] = seen
        if len(bucket) < self.slots:
            bucket.append(entry)
            return True
        if rng is None:
            raise ValueError("reservoir writes need a random generator")
        j = int(rng.integers(0, seen))
        if j < self.slots:
            bucket[j] = entry
            return True
        return False

    # -------------------------------------------------------------- reading
    def entries(self) -> list[MemoryEntry]:
        if self._flat is None:
            self._flat = [e for bucket in self._buckets.values() for e in bucket]
        return self._flat

    def __len__(self) -> int:
        return sum(len(b) for b in self._buckets.values())

    def __iter__(self) -> Iterator[MemoryEntry]:
        return iter(self.entries())

    def bucket_sizes(self) -> dict[int, int]:
        return {k: len(b) for k, b in self._buckets.items()}

    @property
    def capacity(self) -> int | None:
        """Total bound, or ``None`` when it grows with the number of tasks/classes."""
        if self.policy == "reservoir" and not self.per_class:
            return self.slots
        return None

    def sample_batch(self, size: int, rng: np.random.Generator) -> list[MemoryEntry]:
        """Uniform draw with replacement. Raises :class:`EmptyMemory` if empty."""
        if size < 1:
            raise ValueError("batch size must be positive")
        pool = self.entries()
        if not pool:
            raise EmptyMemory("episodic memory is empty")
        return [pool[i] for i in rng.integers(0, len(pool), size)]

    # ---------------------------------------------------------- persistence
    def dump(self, path) -> None:
        arrays: dict[str, np.ndarray] = {
            "meta.policy": np.array([POLICIES.index(self.policy)]),
            "meta.slots": np.array([self.slots]),
            "meta.per_class": np.array([int(self.per_class)]),
            "meta.seen": np.array([[k, v] for k, v in self.seen.items()], dtype=np.int64).reshape(-1, 2),
        }
        for i, e in enumerate(self.entries()):
            arrays[f"mem.{i}.image"] = np.asarray(e.image, dtype=np.float32)
            arrays[f"mem.{i}.label"] = np.array([e.hard_label])
            arrays[f"mem.{i}.task"] = np.array([-1 if e.task_id is None else e.task_id])
            if e.soft_label is not None:
                arrays[f"mem.{i}.soft"] = np.asarray(e.soft_label, dtype=np.float32)
        container.save(path, arrays)

    @classmethod
    def restore(cls, path) -> "EpisodicMemory":
        arrays = container.load(path)
        mem = cls(
            POLICIES[int(arrays["meta.policy"][0])],
            int(arrays["meta.slots"][0]),
            per_class=bool(arrays["meta.per_class"][0]),
        )
        i = 0
        while f"mem.{i}.image" in arrays:
            task = int(arrays[f"mem.{i}.task"][0])
            entry = MemoryEntry(
                image=arrays[f"mem.{i}.image"],
                hard_label=int(arrays[f"mem.{i}.label"][0]),
                soft_label=arrays.get(f"mem.{i}.soft"),
                task_id=None if task < 0 else task,
            )
            key = mem._bucket_key(entry)
            if mem.policy == "ring":
                mem._buckets.setdefault(key, deque(maxlen=mem.slots)).append(entry)
            else:
                mem._buckets.setdefault(key, []).append(entry)
            i += 1
        mem.seen = {int(k): int(v) for k, v in arrays["meta.seen"]}
        return mem
