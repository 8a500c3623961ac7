"""Figures written next to the text/CSV reports."""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}

golden = (math.sqrt(5) - 1.0) / 2.0
figsize_single = (4.5, 4.5 * golden)


def loss_curve(losses, path, window: int = 10) -> None:
    """Training loss per step, with a moving average."""
    losses = np.asarray(losses, dtype=float)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=figsize_single)
        steps = np.arange(1, len(losses) + 1)
        ax.plot(steps, losses, lw=0.6, alpha=0.5, color="C0", label="loss")
        if len(losses) >= window:
            smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
            ax.plot(steps[window - 1 :], smooth, lw=1.2, color="C1", label=f"{window}-step mean")
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_ylabel("MSE")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)


def quality_bars(report, path) -> None:
    """Per-image PSNR and SSIM side by side; infinite PSNR is drawn at the axis top."""
    names = [r[0] for r in report.rows]
    p = np.array([r[1] for r in report.rows], dtype=float)
    s = np.array([r[2] for r in report.rows], dtype=float)
    finite = p[np.isfinite(p)]
    cap = (finite.max() if finite.size else 50.0) + 5.0
    with plt.rc_context(STYLE):
        fig, (a1, a2) = plt.subplots(1, 2, figsize=(7.0, 2.8))
        x = np.arange(len(names))
        a1.bar(x, np.where(np.isfinite(p), p, cap), color="C0")
        a1.set_ylabel("PSNR (dB)")
        a2.bar(x, s, color="C2")
        a2.set_ylabel("SSIM")
        a2.set_ylim(min(0.0, s.min(initial=0.0)), 1.0)
        for ax in (a1, a2):
            ax.set_xticks(x)
            ax.set_xticklabels(names, rotation=60, ha="right")
        fig.savefig(path)
        plt.close(fig)
