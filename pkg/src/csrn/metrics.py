"""Reconstruction-quality metrics and the two-term training loss."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .tensor import DimensionError, Tensor, add, mse, scale

PSNR_CAP_DB = 99.0


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE) in dB, capped at 99 for exact matches."""
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    err = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if err == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * np.log10(peak * peak / err))


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _local_mean(img: np.ndarray, window: np.ndarray) -> np.ndarray:
    size = window.shape[0]
    view = np.lib.stride_tricks.sliding_window_view(img, (size, size))
    return np.tensordot(view, window, axes=([2, 3], [0, 1]))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5,
         k1: float = 0.01, k2: float = 0.03, peak: float = 1.0) -> float:
    """Mean local structural similarity with a Gaussian window (valid region)."""
    if a.shape != b.shape:
        raise DimensionError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise DimensionError(
            f"ssim needs a 2-d image at least {window}x{window}, got {a.shape}"
        )
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    win = _gaussian_window(window, sigma)
    c1 = (k1 * peak) ** 2
    c2 = (k2 * peak) ** 2
    mu_a = _local_mean(a, win)
    mu_b = _local_mean(b, win)
    var_a = _local_mean(a * a, win) - mu_a ** 2
    var_b = _local_mean(b * b, win) - mu_b ** 2
    cov = _local_mean(a * b, win) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def csrn_loss(x: Tensor, x_i: Tensor, x_f: Tensor) -> Tensor:
    """Two-term loss: (1/2M) sum ||x_i - x||^2 + (1/2M) sum ||x_f - x||^2.

    The per-image norm is the summed squared error; M is the batch count.
    Differentiable through the tape.
    """
    if x.shape != x_i.shape or x.shape != x_f.shape:
        raise DimensionError(
            f"loss shapes differ: target {x.shape}, initial {x_i.shape}, final {x_f.shape}"
        )
    m = x.shape[0]
    per_image = x.data.size // m  # mse averages over all elements; undo that
    half = per_image / 2.0
    return add(scale(mse(x_i, x), half), scale(mse(x_f, x), half))


@dataclass
class QualityReport:
    """Per-image PSNR/SSIM rows plus the dataset means."""

    rows: list[tuple[str, float, float]] = field(default_factory=list)

    def append(self, image: str, psnr_db: float, ssim_value: float) -> None:
        self.rows.append((image, psnr_db, ssim_value))

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r[1] for r in self.rows])) if self.rows else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r[2] for r in self.rows])) if self.rows else float("nan")

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image", "psnr_db", "ssim"])
        for name, p, s in self.rows:
            writer.writerow([name, f"{p:.4f}", f"{s:.6f}"])
        writer.writerow(["mean", f"{self.mean_psnr:.4f}", f"{self.mean_ssim:.6f}"])
        return buf.getvalue()

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())
