"""Cross-entropy and distillation terms shared by the objectives and trainers."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor, log_softmax


def one_hot(columns, n: int, dtype) -> np.ndarray:
    columns = np.asarray(columns, dtype=np.intp)
    if columns.size and (columns.min() < 0 or columns.max() >= n):
        raise ValueError(f"label column outside [0, {n})")
    out = np.zeros((columns.size, n), dtype=dtype)
    out[np.arange(columns.size), columns] = 1.0
    return out


def cross_entropy_rows(logits: Tensor, columns) -> Tensor:
    """Per-row cross-entropy against integer column targets, shape [N]."""
    target = one_hot(columns, logits.shape[1], logits.data.dtype)
    return -(log_softmax(logits) * Tensor(target)).sum(axis=1)


def cross_entropy(logits: Tensor, columns) -> Tensor:
    return cross_entropy_rows(logits, columns).mean()


def kl_rows(teacher_probs: np.ndarray, student_logits: Tensor, temperature: float) -> Tensor:
    """Per-row ``KL(teacher || softmax(student / temperature))``, shape [N].

    ``teacher_probs`` is a constant (stored soft labels); zero entries
    contribute nothing.
    """
    p = np.asarray(teacher_probs, dtype=student_logits.data.dtype)
    if p.shape != student_logits.shape:
        raise ValueError(f"teacher {p.shape} vs student {student_logits.shape}")
    with np.errstate(divide="ignore"):
        plogp = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0).sum(axis=1)
    cross = (log_softmax(student_logits, temperature) * Tensor(p)).sum(axis=1)
    return Tensor(plogp.astype(p.dtype)) - cross


def l2_rows(teacher_logits: np.ndarray, student_logits: Tensor) -> Tensor:
    """Per-row mean squared distance between stored and current logits."""
    diff = student_logits - Tensor(np.asarray(teacher_logits, dtype=student_logits.data.dtype))
    return (diff * diff).mean(axis=1)
