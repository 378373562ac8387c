"""Plain SGD and the Look-ahead wrapper used for the slow learner."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .params import ParamSet
from .tensor import NumericalError, Tensor

logger = logging.getLogger(__name__)


class SGD:
    """``p <- p - lr * g`` (or heavy-ball momentum when ``momentum > 0``)."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: ParamSet) -> None:
        for name, p in params.items():
            if p.grad is None:
                raise RuntimeError(f"parameter {name!r} has no gradient; call zero_grad() before backward()")
            if not np.isfinite(p.grad).all():
                raise NumericalError(f"non-finite gradient for {name!r}")
            g = p.grad
            if self.momentum > 0:
                v = self.velocity.get(name)
                if v is None or v.shape != g.shape:
                    v = np.zeros_like(g)
                v = self.momentum * v + g
                self.velocity[name] = v
                g = v
            p.data = p.data - p.data.dtype.type(self.lr) * g


@dataclass
class LookaheadStats:
    rounds: int = 0
    skipped: int = 0
    last_loss: float | None = None


class Lookahead:
    """K inner optimizer steps on working weights, then ``phi <- phi + beta (phi_K - phi)``.

    The working weights live directly in the parameter tensors during the
    round; the anchor copy is taken when the round starts.
    """

    def __init__(self, inner: SGD, k: int = 5, beta: float = 0.5):
        if k < 1:
            raise ValueError("Look-ahead needs k >= 1")
        if not 0.0 <= beta <= 1.0:
            raise ValueError("Look-ahead beta must lie in [0, 1]")
        self.inner = inner
        self.k = k
        self.beta = beta
        self.anchor: dict[str, np.ndarray] | None = None
        self.stats = LookaheadStats()

    def anchor_to(self, params: ParamSet) -> None:
        self.anchor = {name: p.data.copy() for name, p in params.items()}

    def interpolate(self, params: ParamSet) -> None:
        if self.anchor is None:
            raise RuntimeError("Look-ahead round finished without an anchor")
        for name, p in params.items():
            start = self.anchor[name]
            if self.beta == 0.0:
                p.data = start.copy()
            elif self.beta == 1.0:
                pass
            else:
                p.data = start + p.data.dtype.type(self.beta) * (p.data - start)
        self.anchor = None

    def round(self, params: ParamSet, loss_fn: Callable[[int], Tensor | None]) -> bool:
        """Run one round. ``loss_fn(k)`` builds the loss for inner step ``k``.

        ``loss_fn`` returning ``None`` means there is nothing to train on;
        the round is then skipped and ``False`` returned.
        """
        self.anchor_to(params)
        total = 0.0
        for k in range(self.k):
            params.zero_grad()
            loss = loss_fn(k)
            if loss is None:
                self.restore(params)
                self.stats.skipped += 1
                return False
            loss.backward()
            self.inner.step(params)
            total += loss.item()
        self.interpolate(params)
        self.stats.rounds += 1
        self.stats.last_loss = total / self.k
        return True

    def restore(self, params: ParamSet) -> None:
        if self.anchor is not None:
            params.load(self.anchor)
            self.anchor = None
