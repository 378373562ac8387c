"""Deterministic per-component random streams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

COMPONENTS = (
    "init.backbone",
    "init.fast",
    "init.heads",
    "stream",
    "memory",
    "ssl.sample",
    "ssl.augment",
    "sup.sample",
    "sup.augment",
)


def component_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


def component_rngs(seed: int) -> dict[str, np.random.Generator]:
    return {name: component_rng(seed, name) for name in COMPONENTS}
