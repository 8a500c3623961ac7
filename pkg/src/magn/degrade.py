"""Synthetic degradations: additive white Gaussian noise and Bayer mosaicking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["DegradeSpec", "add_gaussian_noise", "bayer_mosaic", "degrade", "derive_seed"]

# channel kept at (row % 2, col % 2): R G / G B
RGGB = ((0, 1), (1, 2))


@dataclass(frozen=True)
class DegradeSpec:
    """``sigma`` is on the 0-255 scale, as noise levels are usually quoted."""

    kind: str = "gaussian"
    sigma: float = 25.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian", "mosaic"):
            raise ValueError(f"unknown degradation {self.kind!r}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")


def derive_seed(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for item ``keys`` of a run seeded with ``seed``."""
    return np.random.default_rng([seed, *keys])


def add_gaussian_noise(img: np.ndarray, sigma: float, rng: np.random.Generator | int = 0) -> np.ndarray:
    """``img + N(0, (sigma/255)^2)``, not clipped."""
    if sigma == 0:
        return np.array(img)
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    noise = rng.standard_normal(img.shape) * (sigma / 255.0)
    return (img + noise).astype(img.dtype if img.dtype.kind == "f" else np.float64)


def bayer_mosaic(img: np.ndarray) -> np.ndarray:
    """Keep one RGGB channel per pixel and zero the other two."""
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError(f"mosaicking needs an RGB image, got shape {img.shape}")
    H, W, _ = img.shape
    if H % 2 or W % 2:
        raise ValueError(f"mosaicking needs even dimensions, got {H}x{W}")
    out = np.zeros_like(img)
    for r in range(2):
        for c in range(2):
            ch = RGGB[r][c]
            out[r::2, c::2, ch] = img[r::2, c::2, ch]
    return out


def degrade(img: np.ndarray, spec: DegradeSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    if spec.kind == "mosaic":
        return bayer_mosaic(img)
    return add_gaussian_noise(img, spec.sigma, rng if rng is not None else spec.seed)
