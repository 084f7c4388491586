"""Figures for training logs, evaluation reports and reconstruction differences."""
from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .imaging import rgb_to_y, to_float  # noqa: E402
from .metrics import PairReport  # noqa: E402

_CURVES = ("loss_total", "loss_recon", "loss_guide", "loss_distr", "loss_disc")


def _smooth(values: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or values.size < window:
        return values
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


def plot_training_log(rows: list[dict], path, smooth: int = 25) -> None:
    """One panel per loss column over iterations; raw trace faint, moving average solid."""
    curves = [c for c in _CURVES if any(math.isfinite(r.get(c, math.nan)) for r in rows)]
    # finetuning is where the discriminator column starts; loss_distr changes meaning there
    joint = next((r["iter"] for r in rows if math.isfinite(r.get("loss_disc", math.nan))), None)
    fig, axes = plt.subplots(len(curves), 1, figsize=(7, 2.2 * len(curves)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], curves):
        pts = [(r["iter"], r[col]) for r in rows if math.isfinite(r.get(col, math.nan))]
        it = np.array([p[0] for p in pts])
        val = np.array([p[1] for p in pts])
        ax.plot(it, val, color="0.7", lw=0.6)
        s = _smooth(val, smooth)
        ax.plot(it[len(it) - len(s):], s, color="C0", lw=1.4)
        ax.set_ylabel(col.removeprefix("loss_"))
        if val.size and np.all(val > 0) and val.max() > 10 * val.min():
            ax.set_yscale("log")
        if joint is not None and joint > it.min():
            ax.axvline(joint, color="C3", lw=0.8, ls="--")
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_eval_report(report: PairReport, path) -> None:
    """Per-file PSNR and SSIM bars."""
    names = [r[0] for r in report.rows]
    ps = [min(r[1], 99.0) for r in report.rows]
    ss = [r[2] for r in report.rows]
    fig, (a1, a2) = plt.subplots(1, 2, figsize=(max(6, 0.6 * len(names) + 3), 3.4))
    x = np.arange(len(names))
    a1.bar(x, ps, color="C0")
    a1.set_ylabel("PSNR (dB)")
    a2.bar(x, ss, color="C1")
    a2.set_ylabel("SSIM")
    a2.set_ylim(min(ss + [1.0]) - 0.05, 1.0)
    for ax in (a1, a2):
        ax.set_xticks(x, names, rotation=45, ha="right", fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def plot_difference(reference: np.ndarray, candidates: dict[str, np.ndarray], path,
                    gain: float = 4.0) -> None:
    """Reference image, each candidate, and the amplified |Y difference| of each."""
    ref = to_float(reference)
    n = len(candidates)
    fig, axes = plt.subplots(2, n + 1, figsize=(3 * (n + 1), 6), squeeze=False)
    axes[0, 0].imshow(ref)
    axes[0, 0].set_title("reference")
    axes[1, 0].axis("off")
    for j, (label, img) in enumerate(candidates.items(), start=1):
        cand = to_float(img)
        axes[0, j].imshow(cand)
        axes[0, j].set_title(label)
        diff = np.abs(rgb_to_y(cand) - rgb_to_y(ref)) / 255
        axes[1, j].imshow(np.clip(diff * gain, 0, 1), cmap="magma", vmin=0, vmax=1)
        axes[1, j].set_title(f"|dY| x{gain:g}")
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
