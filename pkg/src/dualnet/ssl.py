"""Slow-learner objectives and the two-view augmentation pipeline."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .losses import cross_entropy
from .tensor import Tensor, concat

OBJECTIVES = ("barlow_twins", "simclr", "classification")
CORR_EPS = 1e-12

diagnostics: Counter = Counter()


# ---------------------------------------------------------------- augmentation
@dataclass(frozen=True)
class AugmentConfig:
    resolution: int = 32
    crop_p: float = 1.0
    crop_scale: tuple[float, float] = (0.6, 1.0)
    crop_ratio: tuple[float, float] = (3 / 4, 4 / 3)
    flip_p: float = 0.5
    jitter_p: float = 0.8
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    hue: float = 0.1
    grey_p: float = 0.2
    blur_p_a: float = 0.5
    blur_p_b: float = 0.1
    blur_sigma: tuple[float, float] = (0.1, 2.0)

    @classmethod
    def identity(cls, resolution: int = 32) -> "AugmentConfig":
        return cls(resolution=resolution, crop_p=0.0, flip_p=0.0, jitter_p=0.0, grey_p=0.0, blur_p_a=0.0, blur_p_b=0.0)

    def crop_flip_only(self) -> "AugmentConfig":
        return replace(self, jitter_p=0.0, grey_p=0.0, blur_p_a=0.0, blur_p_b=0.0)


class AugmentedPair(NamedTuple):
    view_a: np.ndarray
    view_b: np.ndarray
    source: np.ndarray


_LUMA = np.array([0.299, 0.587, 0.114])


def _bilinear(images: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample ``images[n, :, ys[n, i], xs[n, j]]`` bilinearly; ys [N,Ho], xs [N,Wo]."""
    n, _, h, w = images.shape
    y0 = np.clip(np.floor(ys).astype(np.intp), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(np.intp), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = np.clip(ys - y0, 0.0, 1.0)[:, None, :, None]
    wx = np.clip(xs - x0, 0.0, 1.0)[:, None, None, :]
    idx = np.arange(n)[:, None, None]

    def gather(yi, xi):
        # -> [N, Ho, Wo, C] then to NCHW
        return images[idx, :, yi[:, :, None], xi[:, None, :]].transpose(0, 3, 1, 2)

    top = gather(y0, x0) * (1 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1 - wx) + gather(y1, x1) * wx
    return top * (1 - wy) + bottom * wy


def resize(images: np.ndarray, size: int) -> np.ndarray:
    n, _, h, w = images.shape
    if (h, w) == (size, size):
        return images.copy()
    ys = np.broadcast_to((np.arange(size) + 0.5) * h / size - 0.5, (n, size))
    xs = np.broadcast_to((np.arange(size) + 0.5) * w / size - 0.5, (n, size))
    return _bilinear(images, ys, xs)


def random_resized_crop(images, rng, size, scale, ratio, p=1.0):
    n, _, h, w = images.shape
    area = h * w
    s = rng.uniform(scale[0], scale[1], n)
    log_r = rng.uniform(np.log(ratio[0]), np.log(ratio[1]), n)
    r = np.exp(log_r)
    cw = np.clip(np.sqrt(area * s * r), 1, w)
    ch = np.clip(np.sqrt(area * s / r), 1, h)
    top = rng.uniform(0, 1, n) * (h - ch)
    left = rng.uniform(0, 1, n) * (w - cw)
    apply = rng.uniform(size=n) < p
    ch, cw = np.where(apply, ch, h), np.where(apply, cw, w)
    top, left = np.where(apply, top, 0.0), np.where(apply, left, 0.0)
    grid = (np.arange(size) + 0.5) / size
    ys = top[:, None] + grid[None, :] * ch[:, None] - 0.5
    xs = left[:, None] + grid[None, :] * cw[:, None] - 0.5
    return _bilinear(images, ys, xs)


def hflip(images: np.ndarray) -> np.ndarray:
    return images[..., ::-1].copy()


def _grey(images: np.ndarray) -> np.ndarray:
    if images.shape[1] != 3:
        return images.mean(axis=1, keepdims=True)
    return np.tensordot(_LUMA, images, axes=([0], [1]))[:, None]


def _rotate_hue(images: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rotate chroma in YIQ space by ``angle`` radians per image."""
    to_yiq = np.array([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]])
    from_yiq = np.linalg.inv(to_yiq)
    yiq = np.einsum("ij,njhw->nihw", to_yiq, images)
    c, s = np.cos(angle)[:, None, None], np.sin(angle)[:, None, None]
    i, q = yiq[:, 1], yiq[:, 2]
    yiq = np.stack([yiq[:, 0], c * i - s * q, s * i + c * q], axis=1)
    return np.einsum("ij,njhw->nihw", from_yiq, yiq)


def color_jitter(images, rng, cfg: AugmentConfig, p: float):
    n = images.shape[0]
    apply = (rng.uniform(size=n) < p)[:, None, None, None]
    b = rng.uniform(1 - cfg.brightness, 1 + cfg.brightness, n)[:, None, None, None]
    c = rng.uniform(1 - cfg.contrast, 1 + cfg.contrast, n)[:, None, None, None]
    s = rng.uniform(1 - cfg.saturation, 1 + cfg.saturation, n)[:, None, None, None]
    hue = rng.uniform(-cfg.hue, cfg.hue, n) * 2 * np.pi
    out = np.clip(images * b, 0, 1)
    mean = _grey(out).mean(axis=(1, 2, 3), keepdims=True)
    out = np.clip((out - mean) * c + mean, 0, 1)
    if images.shape[1] == 3:
        g = _grey(out)
        out = np.clip((out - g) * s + g, 0, 1)
        out = np.clip(_rotate_hue(out, hue), 0, 1)
    return np.where(apply, out, images)


def random_greyscale(images, rng, p):
    apply = (rng.uniform(size=images.shape[0]) < p)[:, None, None, None]
    g = np.broadcast_to(_grey(images), images.shape)
    return np.where(apply, g, images)


def gaussian_blur(images, rng, sigma_range, p, radius: int = 2):
    n, _, h, w = images.shape
    apply = (rng.uniform(size=n) < p)[:, None, None, None]
    sigma = rng.uniform(sigma_range[0], sigma_range[1], n)
    offsets = np.arange(-radius, radius + 1)
    k = np.exp(-(offsets[None, :] ** 2) / (2 * sigma[:, None] ** 2))
    k /= k.sum(axis=1, keepdims=True)
    padded = np.pad(images, ((0, 0), (0, 0), (radius, radius), (radius, radius)), mode="reflect")
    rows = sum(k[:, i, None, None, None] * padded[:, :, i : i + h, :] for i in range(2 * radius + 1))
    out = sum(k[:, j, None, None, None] * rows[:, :, :, j : j + w] for j in range(2 * radius + 1))
    return np.where(apply, out, images)


def augment(images: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig, blur_p: float) -> np.ndarray:
    """One randomly sampled transformation chain per image; output in [0, 1]."""
    x = random_resized_crop(images, rng, cfg.resolution, cfg.crop_scale, cfg.crop_ratio, cfg.crop_p)
    flip = rng.uniform(size=x.shape[0]) < cfg.flip_p
    if flip.any():
        x[flip] = x[flip][..., ::-1]
    x = color_jitter(x, rng, cfg, cfg.jitter_p)
    x = random_greyscale(x, rng, cfg.grey_p)
    x = gaussian_blur(x, rng, cfg.blur_sigma, blur_p)
    return np.clip(x, 0.0, 1.0).astype(images.dtype, copy=False)


def augment_pair(batch: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig | None = None) -> AugmentedPair:
    cfg = cfg or AugmentConfig()
    batch = np.asarray(batch)
    return AugmentedPair(
        augment(batch, rng, cfg, cfg.blur_p_a),
        augment(batch, rng, cfg, cfg.blur_p_b),
        batch,
    )


# ------------------------------------------------------------------ objectives
def _standardize(z: Tensor, center: bool) -> Tensor:
    if center:
        z = z - z.mean(axis=0, keepdims=True).broadcast_to(z.shape)
    sq = (z * z).sum(axis=0, keepdims=True)
    zero = int((sq.data == 0).sum())
    if zero:
        diagnostics["zero_variance_dims"] += zero
    return z / (sq.sqrt() + CORR_EPS).broadcast_to(z.shape)


def cross_correlation(z_a: Tensor, z_b: Tensor, center: bool = True) -> Tensor:
    """D x D correlation between embedding dimensions over the batch."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError(f"embeddings must be equal [N, D], got {z_a.shape} and {z_b.shape}")
    if z_a.shape[0] < 2:
        raise ValueError("Barlow Twins needs a batch of at least 2")
    return _standardize(z_a, center).T @ _standardize(z_b, center)


def barlow_twins_loss(z_a: Tensor, z_b: Tensor, lambda_bt: float = 2e-3, center: bool = True) -> Tensor:
    """Invariance term on the diagonal plus ``lambda_bt`` times squared off-diagonals."""
    c = cross_correlation(z_a, z_b, center)
    d = c.shape[0]
    eye = np.eye(d, dtype=c.data.dtype)
    diag = (c * Tensor(eye)).sum(axis=1)
    on = ((1.0 - diag) ** 2).sum()
    off = ((c * Tensor(1.0 - eye)) ** 2).sum()
    return on + off * float(lambda_bt)


def simclr_loss(z_a: Tensor, z_b: Tensor, temperature: float = 0.5) -> Tensor:
    """NT-Xent over the 2N embeddings."""
    if z_a.shape != z_b.shape or z_a.ndim != 2:
        raise ValueError(f"embeddings must be equal [N, D], got {z_a.shape} and {z_b.shape}")
    n = z_a.shape[0]
    if n < 2:
        raise ValueError("SimCLR needs a batch of at least 2")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    z = concat([z_a, z_b], axis=0)
    norms = ((z * z).sum(axis=1, keepdims=True).sqrt() + CORR_EPS).broadcast_to(z.shape)
    zn = z / norms
    sim = (zn @ zn.T) * (1.0 / temperature)
    dtype = sim.data.dtype
    not_self = 1.0 - np.eye(2 * n, dtype=dtype)
    positive = np.zeros((2 * n, 2 * n), dtype=dtype)
    idx = np.arange(2 * n)
    positive[idx, (idx + n) % (2 * n)] = 1.0
    # cosine/temperature is bounded, so a fixed shift keeps exp() in range
    shift = 1.0 / temperature
    denom = ((sim - shift).exp() * Tensor(not_self)).sum(axis=1).log() + shift
    pos = (sim * Tensor(positive)).sum(axis=1)
    return (denom - pos).mean()


def classification_objective(slow_logits: Tensor, columns) -> Tensor:
    return cross_entropy(slow_logits, columns)
