"""Slow learner: a reduced residual network with a projector head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .params import ParamSet, kaiming_uniform, linear_uniform
from .tensor import ShapeError, Tensor, conv2d, global_avg_pool


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 3
    resolution: int = 32
    widths: tuple[int, ...] = (8, 16, 32, 64)
    strides: tuple[int, ...] = (2, 2, 2, 2)
    proj_hidden: int = 128
    proj_dim: int = 64

    def __post_init__(self):
        if len(self.widths) < 1 or len(self.widths) != len(self.strides):
            raise ValueError("widths and strides must be non-empty and of equal length")

    @property
    def depth(self) -> int:
        return len(self.widths)

    def feature_shapes(self) -> list[tuple[int, int, int]]:
        """Per-stage (C, H, W) from the 3x3/pad-1 conv arithmetic."""
        shapes = []
        h = w = self.resolution
        for width, stride in zip(self.widths, self.strides):
            h = (h + 2 - 3) // stride + 1
            w = (w + 2 - 3) // stride + 1
            shapes.append((width, h, w))
        return shapes


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    out = x @ weight
    if bias is not None:
        out = out + bias.reshape(1, -1).broadcast_to(out.shape)
    return out


class SlowLearner:
    """Residual stages ``conv3x3 -> relu -> conv3x3 (+ skip) -> relu``.

    The skip path is a 1x1 strided projection whenever the stage changes
    stride or width; convs carry no bias.
    """

    def __init__(self, config: ArchConfig, rng: np.random.Generator):
        self.config = config
        self.params = ParamSet()
        c_in = config.in_channels
        for i, (width, stride) in enumerate(zip(config.widths, config.strides)):
            self.params.add(f"block{i}.conv1", kaiming_uniform(rng, (width, c_in, 3, 3)))
            self.params.add(f"block{i}.conv2", kaiming_uniform(rng, (width, width, 3, 3)))
            if stride != 1 or c_in != width:
                self.params.add(f"block{i}.skip", kaiming_uniform(rng, (width, c_in, 1, 1)))
            c_in = width
        d, hidden = c_in, config.proj_hidden
        self.params.add("proj.w1", linear_uniform(rng, d, (d, hidden)))
        self.params.add("proj.b1", linear_uniform(rng, d, (hidden,)))
        self.params.add("proj.w2", linear_uniform(rng, hidden, (hidden, config.proj_dim)))
        self.params.add("proj.b2", linear_uniform(rng, hidden, (config.proj_dim,)))

    @property
    def feature_dim(self) -> int:
        return self.config.widths[-1]

    def backbone_params(self) -> ParamSet:
        return ParamSet((k, v) for k, v in self.params.items() if k.startswith("block"))

    def _check_input(self, x: Tensor) -> None:
        c, r = self.config.in_channels, self.config.resolution
        if x.ndim != 4 or x.shape[1:] != (c, r, r):
            raise ShapeError(f"expected input [N,{c},{r},{r}], got {list(x.shape)}")

    def forward_features(self, x: Tensor) -> list[Tensor]:
        """All stage outputs ``h_1..h_L``; the last one is the representation."""
        self._check_input(x)
        p = self.params
        feats = []
        h = x
        for i, stride in enumerate(self.config.strides):
            out = conv2d(h, p[f"block{i}.conv1"], stride=stride, padding=1).relu()
            out = conv2d(out, p[f"block{i}.conv2"], stride=1, padding=1)
            skip = f"block{i}.skip"
            shortcut = conv2d(h, p[skip], stride=stride) if skip in p else h
            h = (out + shortcut).relu()
            feats.append(h)
        return feats

    def project(self, h_last: Tensor) -> Tensor:
        p = self.params
        z = linear(global_avg_pool(h_last), p["proj.w1"], p["proj.b1"]).relu()
        return linear(z, p["proj.w2"], p["proj.b2"])

    def forward_projection(self, x: Tensor) -> Tensor:
        return self.project(self.forward_features(x)[-1])
