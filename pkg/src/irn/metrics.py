"""PSNR / SSIM on the luma channel and directory-level evaluation reports."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .imaging import load_png, rgb_to_y, to_float
from .tensor import ShapeError

logger = logging.getLogger(__name__)


@dataclass
class MetricConfig:
    channel: str = "Y"
    border_crop: int = 0
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 255.0

    def __post_init__(self):
        self.channel = self.channel.upper()
        if self.channel not in ("Y", "RGB"):
            raise ValueError(f"channel must be Y or RGB, got {self.channel!r}")
        if self.border_crop < 0:
            raise ValueError("border_crop must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "MetricConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


def _planes(img: np.ndarray, cfg: MetricConfig) -> np.ndarray:
    """Evaluated channel(s) on the 0..255 scale, border-cropped, as C x H x W."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        planes = img[None] * 255
    elif cfg.channel == "Y":
        planes = rgb_to_y(img)[None]
    else:
        planes = img.transpose(2, 0, 1) * 255
    b = cfg.border_crop
    h, w = planes.shape[1:]
    if b and 2 * b >= min(h, w):
        raise ShapeError(f"border_crop {b} too large for a {h}x{w} image")
    if b:
        planes = planes[:, b:-b, b:-b]
    return planes


def _check_pair(a, b) -> None:
    if np.shape(a) != np.shape(b):
        raise ShapeError(f"image dimensions differ: {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray, cfg: MetricConfig | None = None) -> float:
    """PSNR in dB between two float images in [0, 1]; identical inputs give inf."""
    cfg = cfg or MetricConfig()
    _check_pair(a, b)
    mse = float(np.mean((_planes(a, cfg) - _planes(b, cfg)) ** 2))
    if mse == 0:
        return math.inf
    return 10 * math.log10(cfg.data_range ** 2 / mse)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-(t ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(plane: np.ndarray, g: np.ndarray) -> np.ndarray:
    k = g.size
    rows = sliding_window_view(plane, k, axis=0) @ g
    return sliding_window_view(rows, k, axis=1) @ g


def ssim(a: np.ndarray, b: np.ndarray, cfg: MetricConfig | None = None) -> float:
    """Mean structural similarity with a Gaussian window (valid region only)."""
    cfg = cfg or MetricConfig()
    _check_pair(a, b)
    pa, pb = _planes(a, cfg), _planes(b, cfg)
    if min(pa.shape[1:]) < cfg.window:
        raise ShapeError(f"SSIM needs images of at least {cfg.window}x{cfg.window}, got {pa.shape[1:]}")
    g = gaussian_window(cfg.window, cfg.sigma)
    c1 = (cfg.k1 * cfg.data_range) ** 2
    c2 = (cfg.k2 * cfg.data_range) ** 2
    scores = []
    for x, y in zip(pa, pb):
        mu_x, mu_y = _filter_valid(x, g), _filter_valid(y, g)
        sxx = _filter_valid(x * x, g) - mu_x ** 2
        syy = _filter_valid(y * y, g) - mu_y ** 2
        sxy = _filter_valid(x * y, g) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
        scores.append(float(np.mean(num / den)))
    return float(np.mean(scores))


@dataclass
class PairReport:
    rows: list = field(default_factory=list)
    missing: list = field(default_factory=list)
    warnings: int = 0

    @property
    def mean_psnr(self) -> float:
        if not self.rows:
            return math.nan
        return float(np.mean([r[1] for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        if not self.rows:
            return math.nan
        return float(np.mean([r[2] for r in self.rows]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["file", "psnr_db", "ssim"])
            for name, p, s in self.rows:
                writer.writerow([name, format_db(p), f"{s:.6f}"])

    def format_table(self) -> str:
        width = max([len(r[0]) for r in self.rows] + [4])
        lines = [f"{'file':<{width}}  {'PSNR (dB)':>10}  {'SSIM':>8}"]
        for name, p, s in self.rows:
            lines.append(f"{name:<{width}}  {format_db(p):>10}  {s:>8.4f}")
        lines.append(f"{'mean':<{width}}  {format_db(self.mean_psnr):>10}  {self.mean_ssim:>8.4f}")
        for name in self.missing:
            lines.append(f"warning: {name} has no counterpart")
        return "\n".join(lines)


def format_db(value: float) -> str:
    if math.isinf(value):
        return "inf"
    return f"{value:.4f}"


def evaluate_pair_set(dir_a, dir_b, cfg: MetricConfig | None = None,
                      pattern: str = "*.png") -> PairReport:
    """Compare same-named PNGs in two directories."""
    cfg = cfg or MetricConfig()
    files_a = {p.name: p for p in Path(dir_a).glob(pattern)}
    files_b = {p.name: p for p in Path(dir_b).glob(pattern)}
    report = PairReport()
    report.missing = sorted(set(files_a) ^ set(files_b))
    report.warnings = len(report.missing)
    common = sorted(set(files_a) & set(files_b))
    for name in common:
        a = to_float(load_png(files_a[name]))
        b = to_float(load_png(files_b[name]))
        if a.shape != b.shape:
            logger.warning("%s: size mismatch %s vs %s", name, a.shape, b.shape)
            report.missing.append(name)
            report.warnings += 1
            continue
        report.rows.append((name, psnr(a, b, cfg), ssim(a, b, cfg)))
    if not common:
        report.warnings += 1
        logger.warning("no matching file names between %s and %s", dir_a, dir_b)
    for name in report.missing:
        logger.warning("%s has no usable counterpart", name)
    return report
