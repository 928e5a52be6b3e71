"""Image-quality metrics for HU rasters: MAE, PSNR, SSIM, NCC, row-profile
Pearson correlation, and signed difference maps.

All metrics are computed in float64 on the HU window [-1000, 3071] with a
fixed data range of 4071, so values are comparable across runs. NCC is the
global (whole-image) form; SSIM uses the 11x11 Gaussian window with
sigma 1.5 and the standard stabilizing constants.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phantom import HU_MIN, HU_MAX, HU_SPAN, Raster

DATA_RANGE = HU_SPAN  # 4071


class MetricError(ValueError):
    """Shape mismatch or invalid metric configuration."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = a.hu if isinstance(a, Raster) else np.asarray(a)
    b = b.hu if isinstance(b, Raster) else np.asarray(b)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a.astype(np.float64), b.astype(np.float64)


def clip_window(a) -> np.ndarray:
    arr = a.hu if isinstance(a, Raster) else np.asarray(a)
    return np.clip(arr.astype(np.float64), HU_MIN, HU_MAX)


def mae_hu(a, b) -> float:
    """Mean absolute difference in HU."""
    a, b = _pair(a, b)
    return float(np.mean(np.abs(a - b)))


def psnr(a, b, data_range: float = DATA_RANGE) -> float:
    """Peak signal-to-noise ratio in dB; identical images give inf."""
    if data_range <= 0:
        raise MetricError(f"data_range must be > 0, got {data_range}")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(data_range * data_range / mse)


def _gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    w = np.outer(g, g)
    return w / w.sum()


def _windowed_mean(img: np.ndarray, g1d: np.ndarray) -> np.ndarray:
    """Separable valid-mode Gaussian filtering."""
    k = g1d.size
    rows = np.lib.stride_tricks.sliding_window_view(img, k, axis=1) @ g1d
    cols = np.lib.stride_tricks.sliding_window_view(rows, k, axis=0)
    return np.einsum("ijk,k->ij", cols, g1d)


def ssim(
    a,
    b,
    window: int = 11,
    sigma: float = 1.5,
    k1: float = 0.01,
    k2: float = 0.03,
    data_range: float = DATA_RANGE,
) -> float:
    """Mean structural similarity over valid window positions."""
    a, b = _pair(a, b)
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than the {window}x{window} window")
    r = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g1d = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g1d /= g1d.sum()
    mu_a = _windowed_mean(a, g1d)
    mu_b = _windowed_mean(b, g1d)
    var_a = _windowed_mean(a * a, g1d) - mu_a * mu_a
    var_b = _windowed_mean(b * b, g1d) - mu_b * mu_b
    cov = _windowed_mean(a * b, g1d) - mu_a * mu_b
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ncc(a, b) -> float:
    """Global normalized cross-correlation; 0 when either image is constant."""
    a, b = _pair(a, b)
    da = a - a.mean()
    db = b - b.mean()
    denom = math.sqrt(float(np.sum(da * da)) * float(np.sum(db * db)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(da * db) / denom)


def line_profile(img, row: int) -> np.ndarray:
    """One raw horizontal row of HU values."""
    arr = img.hu if isinstance(img, Raster) else np.asarray(img)
    if not 0 <= row < arr.shape[0]:
        raise MetricError(f"row {row} outside image of height {arr.shape[0]}")
    return arr[row].astype(np.float64)


def pearson(p, q) -> float:
    """Sample correlation; 0 with the degenerate flag for constant input."""
    return pearson_flagged(p, q)[0]


def pearson_flagged(p, q) -> tuple[float, bool]:
    p = np.asarray(p, dtype=np.float64).reshape(-1)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    if p.size != q.size:
        raise MetricError(f"length mismatch: {p.size} vs {q.size}")
    if p.size < 2:
        raise MetricError("need at least 2 points")
    dp = p - p.mean()
    dq = q - q.mean()
    denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dq * dq)))
    if denom == 0.0:
        return 0.0, True
    return float(np.sum(dp * dq) / denom), False


def diff_map(a, b) -> np.ndarray:
    """Signed per-pixel HU difference a - b."""
    a, b = _pair(a, b)
    return a - b


@dataclass
class SliceMetrics:
    ssim: float
    mae_hu: float
    psnr_db: float
    ncc: float
    pearson_profile: float
    profile_degenerate: bool = False


@dataclass
class MetricsReport:
    """Aggregate means plus the per-image values behind them."""

    ssim: float
    mae_hu: float
    psnr_db: float
    ncc: float
    pearson_profile: float
    per_slice: list[SliceMetrics] = field(default_factory=list)

    @property
    def std(self) -> dict[str, float]:
        return {
            name: float(np.std([getattr(s, name) for s in self.per_slice]))
            for name in ("ssim", "mae_hu", "psnr_db", "ncc")
        }


def evaluate_pair(pred, ref, profile_row: int | None = None) -> SliceMetrics:
    """All metrics for one (synthesized, reference) pair on the HU window."""
    p = clip_window(pred)
    r = clip_window(ref)
    row = r.shape[0] // 2 if profile_row is None else profile_row
    pr, deg = pearson_flagged(line_profile(p, row), line_profile(r, row))
    return SliceMetrics(
        ssim=ssim(p, r),
        mae_hu=mae_hu(p, r),
        psnr_db=psnr(p, r),
        ncc=ncc(p, r),
        pearson_profile=pr,
        profile_degenerate=deg,
    )


def evaluate_pairs(preds, refs, profile_row: int | None = None) -> MetricsReport:
    slices = [evaluate_pair(p, r, profile_row) for p, r in zip(preds, refs)]
    if not slices:
        raise MetricError("no image pairs to evaluate")

    def m(name):
        return float(np.mean([getattr(s, name) for s in slices]))

    return MetricsReport(
        ssim=m("ssim"),
        mae_hu=m("mae_hu"),
        psnr_db=m("psnr_db"),
        ncc=m("ncc"),
        pearson_profile=m("pearson_profile"),
        per_slice=slices,
    )


def mean_std_row(report: MetricsReport) -> dict[str, str]:
    """Table cells in 'mean±std' form for SSIM, MAE, PSNR, NCC."""
    std = report.std
    return {
        "SSIM": f"{report.ssim:.3f}±{std['ssim']:.2f}",
        "MAE(HU)": f"{report.mae_hu:.2f}±{std['mae_hu']:.2f}",
        "PSNR(dB)": f"{report.psnr_db:.2f}±{std['psnr_db']:.2f}",
        "NCC": f"{report.ncc:.3f}±{std['ncc']:.2f}",
    }
