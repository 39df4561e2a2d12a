"""Stylised weather corruptions with a severity knob in [0, 1].

Severity 0 returns the input unchanged for every kind; outputs are clamped to
[0, 1].

* fog   alpha-blend toward a light fog colour; alpha = severity at the top row
        and falls off linearly with image height (a crude depth ramp)
* night brightness scale-down, blue shift and additive sensor noise
* rain  oriented bright streaks over a slightly darkened, softened image
* snow  bright speckles, brightening and a light blur
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .scenes import _smooth_noise

KINDS = ("clear", "fog", "night", "rain", "snow")
FOG_COLOR = np.array([0.85, 0.86, 0.88], dtype=np.float32)
FOG_RAMP = 0.4
FOG_PATCH = 0.6


@dataclass(frozen=True)
class DomainSpec:
    kind: str
    severity: float

    def validate(self) -> "DomainSpec":
        if self.kind not in KINDS:
            raise ConfigError(f"unknown domain kind {self.kind!r}; expected one of {KINDS}")
        if not 0.0 <= self.severity <= 1.0:
            raise ConfigError(f"domain severity must lie in [0, 1], got {self.severity}")
        return self


def _box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    H, W = img.shape[1:]
    acc = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            acc += p[:, dy:dy + H, dx:dx + W]
    return acc / 9.0


def fog(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    rows = np.arange(H) / max(H - 1, 1)
    # Patchy density below the top row; the top row itself is pure ramp.
    patches = _smooth_noise(rng, H, W, cells=4) * rows[:, None]
    density = (1.0 - FOG_RAMP * rows)[:, None] + FOG_PATCH * patches
    a = np.clip(s * density, 0.0, 1.0)[None]
    hazy = (1.0 - 0.5 * s) * img + 0.5 * s * _box_blur(img)
    return (1.0 - a) * hazy + a * FOG_COLOR[:, None, None]


def night(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    gain = np.array([1.0 - 0.8 * s, 1.0 - 0.9 * s, 1.0 - 0.95 * s])[:, None, None]
    # Street-light cast: red leaks into green, blue is crushed.
    cast = np.array([[1.0, 0.0, 0.0], [0.35 * s, 1.0 - 0.35 * s, 0.0], [0.0, 0.3 * s, 1.0 - 0.3 * s]])
    out = np.einsum("ij,jhw->ihw", cast, img) * gain
    return out + rng.normal(0.0, 0.10 * s, size=img.shape)


def rain(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    out = (1.0 - 0.4 * s) * ((1.0 - 0.6 * s) * img + 0.6 * s * _box_blur(img))
    out = out + 0.25 * s * (np.array([0.45, 0.5, 0.55])[:, None, None] - out)
    streaks = np.zeros((H, W))
    n = int(round(s * H * W / 12))
    angle = rng.uniform(0.15, 0.4)
    dy, dx = np.cos(angle), np.sin(angle)
    for _ in range(n):
        y, x = rng.uniform(-8, H), rng.uniform(0, W)
        length = rng.integers(6, 15)
        t = np.arange(length)
        py = np.round(y + t * dy).astype(int)
        px = np.round(x + t * dx).astype(int)
        ok = (py >= 0) & (py < H) & (px >= 0) & (px < W)
        streaks[py[ok], px[ok]] = rng.uniform(0.5, 0.8)
    return out * (1 - streaks) + 0.8 * streaks


def snow(img: np.ndarray, s: float, rng: np.random.Generator) -> np.ndarray:
    _, H, W = img.shape
    out = (1.0 - 0.8 * s) * img + 0.8 * s * _box_blur(img)
    out = out + 0.45 * s * (0.9 - out)
    flakes = rng.random((H, W)) < 0.25 * s
    big = rng.random((H, W)) < 0.06 * s
    flakes |= big | np.roll(big, 1, axis=0) | np.roll(big, 1, axis=1) | np.roll(np.roll(big, 1, axis=0), 1, axis=1)
    flake_val = rng.uniform(0.85, 1.0, size=(H, W))
    return np.where(flakes[None], 0.15 * out + 0.85 * flake_val[None], out)


_KERNELS = {"fog": fog, "night": night, "rain": rain, "snow": snow}


def corrupt(image: np.ndarray, spec: DomainSpec, rng: np.random.Generator) -> np.ndarray:
    spec.validate()
    if spec.kind == "clear" or spec.severity == 0.0:
        return image.copy()
    out = _KERNELS[spec.kind](image.astype(np.float64), float(spec.severity), rng)
    return np.clip(out, 0.0, 1.0).astype(image.dtype)
