"""PSNR and SSIM on the ``[0, 1]`` scale."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import correlate

__all__ = ["MetricReport", "mse", "psnr", "ssim", "ssim_window", "evaluate", "format_psnr"]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float
    mse: float

    def as_dict(self):
        return {"psnr_db": format_psnr(self.psnr_db), "ssim": self.ssim, "mse": self.mse}


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b) -> float:
    """PSNR in dB with peak value 1; ``inf`` for identical images."""
    err = mse(a, b)
    if err == 0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / err))


def format_psnr(value: float):
    return "inf" if np.isinf(value) else value


def ssim_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    c = (size - 1) / 2
    g = np.exp(-((np.arange(size) - c) ** 2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _ssim_channel(x, y, win, c1, c2):
    def filt(img):
        return correlate(img, win, mode="valid", method="direct")

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x * mu_x
    syy = filt(y * y) - mu_y * mu_y
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def ssim(a, b) -> float:
    """Mean SSIM over valid 11x11 Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise ValueError(f"image {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    win = ssim_window()
    c1, c2 = SSIM_K1**2, SSIM_K2**2
    vals = [_ssim_channel(a[:, :, ch], b[:, :, ch], win, c1, c2) for ch in range(a.shape[2])]
    return float(np.mean(vals))


def evaluate(restored, reference) -> MetricReport:
    return MetricReport(psnr_db=psnr(restored, reference), ssim=ssim(restored, reference),
                        mse=mse(restored, reference))
