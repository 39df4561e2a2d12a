"""Procedural labelled scenes: textured background plus coloured shapes.

Class ids: 0 background, 1 circle, 2 rectangle, 3 triangle, 4 stripe, 5 blob.
Each class has a prototype colour that is jittered per shape, so both colour
and geometry carry the label. Later shapes occlude earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..seeding import make_rng

CLASS_NAMES = ("background", "circle", "rectangle", "triangle", "stripe", "blob")

PROTOTYPES = np.array([
    [0.50, 0.50, 0.50],
    [0.85, 0.30, 0.25],
    [0.25, 0.40, 0.85],
    [0.30, 0.75, 0.30],
    [0.90, 0.85, 0.30],
    [0.65, 0.35, 0.75],
], dtype=np.float64)


@dataclass(frozen=True)
class SceneConfig:
    H: int = 64
    W: int = 64
    num_classes: int = 6
    min_shapes: int = 3
    max_shapes: int = 6
    color_jitter: float = 0.12
    seed: int = 0

    def validate(self, multiple: int = 1) -> "SceneConfig":
        if self.num_classes < 2 or self.num_classes > len(CLASS_NAMES):
            raise ConfigError(f"scene.num_classes must lie in [2, {len(CLASS_NAMES)}], got {self.num_classes}")
        if self.H < 8 or self.W < 8:
            raise ConfigError(f"scene size must be at least 8x8, got {self.H}x{self.W}")
        if self.H % multiple or self.W % multiple:
            raise ConfigError(f"scene size {self.H}x{self.W} must be divisible by {multiple}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError(f"scene shape range [{self.min_shapes}, {self.max_shapes}] is invalid")
        return self


def _smooth_noise(rng: np.random.Generator, H: int, W: int, cells: int = 8) -> np.ndarray:
    coarse = rng.standard_normal((cells + 1, cells + 1))
    ys = np.linspace(0, cells, H)
    xs = np.linspace(0, cells, W)
    y0 = np.minimum(ys.astype(int), cells - 1)
    x0 = np.minimum(xs.astype(int), cells - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    a = coarse[y0][:, x0]
    b = coarse[y0][:, x0 + 1]
    c = coarse[y0 + 1][:, x0]
    d = coarse[y0 + 1][:, x0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _shape_mask(kind: int, rng: np.random.Generator, yy: np.ndarray, xx: np.ndarray, H: int, W: int) -> np.ndarray:
    side = min(H, W)
    cy, cx = rng.uniform(0.1, 0.9) * H, rng.uniform(0.1, 0.9) * W
    r = rng.uniform(0.09, 0.2) * side
    if kind == 1:
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    if kind == 2:
        aspect = rng.uniform(0.5, 2.0)
        hh, hw = r * np.sqrt(aspect), r / np.sqrt(aspect)
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    if kind == 3:
        theta = rng.uniform(0, 2 * np.pi)
        angles = theta + np.array([0.0, 2 * np.pi / 3, 4 * np.pi / 3])
        vy, vx = cy + 1.3 * r * np.sin(angles), cx + 1.3 * r * np.cos(angles)
        signs = []
        for i in range(3):
            j = (i + 1) % 3
            signs.append((vx[j] - vx[i]) * (yy - vy[i]) - (vy[j] - vy[i]) * (xx - vx[i]))
        s = np.stack(signs)
        return (s >= 0).all(axis=0) | (s <= 0).all(axis=0)
    if kind == 4:
        phi = rng.uniform(0, np.pi)
        half = rng.uniform(1.5, 3.5)
        dist = np.abs((xx - cx) * np.sin(phi) - (yy - cy) * np.cos(phi))
        along = np.abs((xx - cx) * np.cos(phi) + (yy - cy) * np.sin(phi))
        return (dist <= half) & (along <= rng.uniform(0.35, 0.6) * side)
    # blob: union of a few overlapping gaussian bumps, thresholded
    field = np.zeros_like(yy)
    for _ in range(rng.integers(3, 6)):
        oy, ox = cy + rng.normal(0, 0.5 * r), cx + rng.normal(0, 0.5 * r)
        s = r * rng.uniform(0.35, 0.6)
        field += np.exp(-((yy - oy) ** 2 + (xx - ox) ** 2) / (2 * s * s))
    return field >= 0.5


def gen_scene(seed: int, cfg: SceneConfig) -> tuple[np.ndarray, np.ndarray]:
    """Clean ``3 x H x W`` image in [0, 1] and its ``H x W`` label map."""
    rng = make_rng(seed)
    H, W = cfg.H, cfg.W
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)

    base = rng.uniform(0.35, 0.6) + rng.uniform(-0.05, 0.05, size=3)
    img = base[:, None, None] + 0.05 * _smooth_noise(rng, H, W)[None] + 0.02 * rng.standard_normal((3, H, W))
    label = np.zeros((H, W), dtype=np.int64)

    for _ in range(rng.integers(cfg.min_shapes, cfg.max_shapes + 1)):
        kind = int(rng.integers(1, cfg.num_classes))
        mask = _shape_mask(kind, rng, yy, xx, H, W)
        if not mask.any():
            continue
        color = PROTOTYPES[kind] + rng.uniform(-cfg.color_jitter, cfg.color_jitter, size=3)
        color = color * rng.uniform(0.85, 1.1)
        texture = 0.03 * rng.standard_normal((3, H, W))
        img = np.where(mask[None], color[:, None, None] + texture, img)
        label[mask] = kind

    return np.clip(img, 0.0, 1.0).astype(np.float32), label
