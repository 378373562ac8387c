"""Named parameter collections and weight initialisers."""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Iterable, Iterator, Mapping

import numpy as np

from . import container
from .tensor import Tensor, get_default_dtype


class ParamSet:
    """Ordered ``name -> Tensor`` map with stable iteration order."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        for name, p in items:
            self.add(name, p)

    def add(self, name: str, p: Tensor) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p.requires_grad = True
        self._params[name] = p
        return p

    def replace(self, name: str, p: Tensor) -> Tensor:
        """Swap in a new tensor under an existing name (used when heads grow)."""
        if name not in self._params:
            raise KeyError(name)
        p.requires_grad = True
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def tensors(self) -> list[Tensor]:
        return list(self._params.values())

    def merge(self, *others: "ParamSet", prefixes: Iterable[str] | None = None) -> "ParamSet":
        out = ParamSet()
        sets = (self, *others)
        prefixes = list(prefixes) if prefixes is not None else [""] * len(sets)
        for prefix, ps in zip(prefixes, sets):
            for name, p in ps.items():
                out._params[prefix + name] = p
        return out

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = np.zeros_like(p.data)

    def count(self) -> int:
        return int(sum(p.size for p in self._params.values()))

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        for name, p in self._params.items():
            if name not in arrays:
                if strict:
                    raise KeyError(f"missing parameter {name!r}")
                continue
            arr = np.asarray(arrays[name], dtype=p.data.dtype)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def save(self, path, prefix: str = "") -> None:
        container.save(path, {prefix + k: v for k, v in self.snapshot().items()})


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> Tensor:
    """He-uniform init for ReLU layers, fan-in mode; ``shape[1:]`` is the fan-in."""
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()), requires_grad=True)


def linear_uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(get_default_dtype()), requires_grad=True)
