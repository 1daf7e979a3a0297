"""PSNR and SSIM against a reference image, plus aggregate reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import gaussian_filter

from .projector import Image2D

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _pair(f, ref) -> tuple[np.ndarray, np.ndarray]:
    a = f.values if isinstance(f, Image2D) else np.asarray(f, dtype=np.float64)
    b = ref.values if isinstance(ref, Image2D) else np.asarray(ref, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    if isinstance(f, Image2D) and isinstance(ref, Image2D) and f.pixel_size != ref.pixel_size:
        raise ValueError("image pixel sizes differ")
    return a, b


def psnr(f, ref) -> float:
    """``10 log10(max(ref)^2 / MSE)``; identical images give the 99 dB cap."""
    a, b = _pair(f, ref)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return PSNR_CAP
    peak = float(b.max())
    return min(PSNR_CAP, 10 * np.log10(peak * peak / mse))


def ssim(f, ref, data_range: float | None = None) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5).

    The dynamic range defaults to ``max(ref) - min(ref)``. Local statistics
    use reflected borders; the mean is taken over pixels whose window lies
    fully inside the image.
    """
    a, b = _pair(f, ref)
    if min(a.shape) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {a.shape}")
    L = float(b.max() - b.min()) if data_range is None else float(data_range)
    c1 = (SSIM_K1 * L) ** 2
    c2 = (SSIM_K2 * L) ** 2
    truncate = ((SSIM_WINDOW - 1) / 2) / SSIM_SIGMA

    def filt(x):
        return gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=truncate)

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    with np.errstate(invalid="ignore", divide="ignore"):
        smap = np.where(den == 0, 1.0, num / den)
    pad = (SSIM_WINDOW - 1) // 2
    return float(np.clip(smap[pad:-pad, pad:-pad].mean(), -1.0, 1.0))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM rows with mean +- std aggregates per (algo, counts)."""

    rows: list[tuple[str, str, float, float, float]]

    def __init__(self):
        self.rows = []

    def add(self, image_id, algo: str, counts: float, f, ref) -> tuple[float, float]:
        p, s = psnr(f, ref), ssim(f, ref)
        self.rows.append((str(image_id), algo, counts, p, s))
        return p, s

    def aggregate(self) -> dict[tuple[str, float], dict[str, float]]:
        groups: dict = {}
        for _, algo, counts, p, s in self.rows:
            groups.setdefault((algo, counts), []).append((p, s))
        out = {}
        for key, vals in groups.items():
            arr = np.asarray(vals)
            out[key] = {
                "psnr_mean": float(arr[:, 0].mean()),
                "psnr_std": float(arr[:, 0].std()),
                "ssim_mean": float(arr[:, 1].mean()),
                "ssim_std": float(arr[:, 1].std()),
                "n": len(vals),
            }
        return out

    def write_csv(self, path) -> None:
        """``image_id,algo,counts,psnr,ssim`` rows, then ``mean``/``std`` rows per group."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image_id", "algo", "counts", "psnr", "ssim"])
            for image_id, algo, counts, p, s in self.rows:
                w.writerow([image_id, algo, f"{counts:g}", f"{p:.6f}", f"{s:.6f}"])
            for (algo, counts), agg in self.aggregate().items():
                w.writerow(["mean", algo, f"{counts:g}", f"{agg['psnr_mean']:.6f}", f"{agg['ssim_mean']:.6f}"])
                w.writerow(["std", algo, f"{counts:g}", f"{agg['psnr_std']:.6f}", f"{agg['ssim_std']:.6f}"])
