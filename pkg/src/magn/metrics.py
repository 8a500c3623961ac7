"""PSNR and SSIM.

PSNR of colour images is computed over all channels jointly; SSIM is computed
on luminance (0.299 R + 0.587 G + 0.114 B) with the usual 11x11 Gaussian
window (sigma 1.5) and constants K1 = 0.01, K2 = 0.03, over valid window
positions only.  No border cropping is applied.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = ["psnr", "ssim", "luminance", "gaussian_window", "QualityReport"]

LUMA = np.array([0.299, 0.587, 0.114])


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical images."""
    a, b = _pair(a, b)
    err = np.mean((a - b) ** 2)
    if err == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[-1] == 3:
        return img @ LUMA
    if img.ndim == 3 and img.shape[-1] == 1:
        return img[..., 0]
    if img.ndim == 2:
        return img
    raise ValueError(f"expected a grayscale or RGB image, got shape {img.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(x, w.shape), w)


def ssim(a, b, peak: float = 1.0, size: int = 11, sigma: float = 1.5) -> float:
    """Mean structural similarity over all valid window positions."""
    a, b = _pair(a, b)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < size:
        raise ValueError(f"image {x.shape} is smaller than the {size}x{size} SSIM window")
    w = gaussian_window(size, sigma)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mx, my = _filter_valid(x, w), _filter_valid(y, w)
    vx = _filter_valid(x * x, w) - mx * mx
    vy = _filter_valid(y * y, w) - my * my
    cov = _filter_valid(x * y, w) - mx * my
    num = (2 * mx * my + c1) * (2 * cov + c2)
    den = (mx * mx + my * my + c1) * (vx + vy + c2)
    return float(np.mean(num / den))


@dataclass
class QualityReport:
    """Per-image PSNR/SSIM rows plus their means."""

    rows: list[tuple[str, float, float]] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)

    def add(self, name: str, clean, test, peak: float = 1.0) -> tuple[float, float]:
        p, s = psnr(clean, test, peak), ssim(clean, test, peak)
        self.rows.append((name, p, s))
        return p, s

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else math.nan

    def lines(self) -> list[str]:
        out = [f"{name}\tpsnr={_fmt(p)}\tssim={s:.4f}" for name, p, s in self.rows]
        out.append(f"mean\tpsnr={_fmt(self.mean_psnr)}\tssim={self.mean_ssim:.4f}")
        out.extend(f"skipped\t{name}" for name in self.skipped)
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["file", "psnr", "ssim"])
            for name, p, s in self.rows:
                w.writerow([name, _fmt(p, 6), f"{s:.6f}"])
            w.writerow(["mean", _fmt(self.mean_psnr, 6), f"{self.mean_ssim:.6f}"])

    @staticmethod
    def read_csv(path) -> "QualityReport":
        rep = QualityReport()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if row["file"] != "mean":
                    rep.rows.append((row["file"], float(row["psnr"]), float(row["ssim"])))
        return rep


def _fmt(v: float, digits: int = 2) -> str:
    return "inf" if math.isinf(v) else f"{v:.{digits}f}"
