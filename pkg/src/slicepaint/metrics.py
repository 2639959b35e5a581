"""Masked image-quality metrics and report assembly.

MSE and PSNR are computed over the masked voxels only.  SSIM builds the
standard local-statistics similarity map on 2D axial slices (Gaussian
window, 11 taps, sigma 1.5, C1=(0.01 R)^2, C2=(0.03 R)^2) and averages the
map over the masked voxels; a bounding-box variant crops to the mask's
extent first.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .tensor import ConfigError, DomainError, ShapeError
from .volumes import Volume

PSNR_CAP_DB = 100.0


def _check_triplet(pred: Volume, gt: Volume, mask: Volume) -> None:
    if not (pred.dims == gt.dims == mask.dims):
        raise ShapeError(
            f"dims disagree: pred {pred.dims}, gt {gt.dims}, mask {mask.dims}"
        )
    if not mask.data.any():
        raise DomainError("mask is empty; masked metrics are undefined")


def masked_mse(pred: Volume, gt: Volume, mask: Volume) -> float:
    """Mean squared error over voxels where the mask is 1."""
    _check_triplet(pred, gt, mask)
    sel = mask.data > 0
    diff = pred.data[sel].astype(np.float64) - gt.data[sel].astype(np.float64)
    return float(np.mean(diff * diff))


def masked_psnr(pred: Volume, gt: Volume, mask: Volume, data_range: float = 1.0) -> float:
    """10 log10(range^2 / masked MSE); exact matches report the 100 dB cap."""
    if data_range <= 0:
        raise ConfigError(f"data_range must be positive, got {data_range}")
    mse = masked_mse(pred, gt, mask)
    if mse == 0.0:
        return PSNR_CAP_DB
    return float(10.0 * math.log10(data_range * data_range / mse))


def _window_filter(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable in-plane correlation with renormalized truncation at edges."""
    out = correlate1d(img, kernel, axis=1, mode="constant", cval=0.0)
    out = correlate1d(out, kernel, axis=2, mode="constant", cval=0.0)
    for axis in (1, 2):
        mass = correlate1d(np.ones(img.shape[axis]), kernel, mode="constant", cval=0.0)
        shape = [1, 1, 1]
        shape[axis] = img.shape[axis]
        out = out / mass.reshape(shape)
    return out


def ssim_map(pred: Volume, gt: Volume, window: int = 11, sigma_w: float = 1.5,
             data_range: float = 1.0) -> np.ndarray:
    """Slice-wise SSIM map over the whole volume."""
    if window % 2 != 1:
        raise ConfigError(f"window must be odd, got {window}")
    radius = window // 2
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (x / sigma_w) ** 2)
    kernel /= kernel.sum()

    p = pred.data.astype(np.float64)
    g = gt.data.astype(np.float64)
    mu_p = _window_filter(p, kernel)
    mu_g = _window_filter(g, kernel)
    var_p = _window_filter(p * p, kernel) - mu_p * mu_p
    var_g = _window_filter(g * g, kernel) - mu_g * mu_g
    cov = _window_filter(p * g, kernel) - mu_p * mu_g
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    num = (2.0 * mu_p * mu_g + c1) * (2.0 * cov + c2)
    den = (mu_p * mu_p + mu_g * mu_g + c1) * (var_p + var_g + c2)
    return num / den


def masked_ssim(pred: Volume, gt: Volume, mask: Volume, window: int = 11,
                sigma_w: float = 1.5, data_range: float = 1.0,
                region: str = "map") -> float:
    """SSIM averaged over the masked voxels.

    region="map": average the full-volume SSIM map where mask is 1.
    region="bbox": crop all volumes to the mask's bounding box first, then
    average that map over the masked voxels (windows see only the box).
    """
    _check_triplet(pred, gt, mask)
    if region not in ("map", "bbox"):
        raise ConfigError(f"region must be 'map' or 'bbox', got {region!r}")
    if region == "bbox":
        idx = np.argwhere(mask.data > 0)
        lo = idx.min(axis=0)
        hi = idx.max(axis=0) + 1
        box = tuple(slice(a, b) for a, b in zip(lo, hi))
        pred = Volume(pred.data[box])
        gt = Volume(gt.data[box])
        mask = Volume(mask.data[box])
    smap = ssim_map(pred, gt, window=window, sigma_w=sigma_w, data_range=data_range)
    return float(smap[mask.data > 0].mean())


# --------------------------------------------------------------------------
# Reports


@dataclass(frozen=True)
class CaseMetrics:
    case_id: str
    ssim: float
    psnr: float
    mse: float


@dataclass
class MetricsReport:
    cases: list[CaseMetrics]

    def aggregate(self, metric: str) -> tuple[float, float]:
        """(mean, population std) of one metric across cases."""
        vals = np.array([getattr(c, metric) for c in self.cases], dtype=np.float64)
        return float(vals.mean()), float(vals.std(ddof=0))


def evaluate_case(case_id: str, pred: Volume, gt: Volume, mask: Volume,
                  data_range: float = 1.0, ssim_region: str = "map") -> CaseMetrics:
    return CaseMetrics(
        case_id=case_id,
        ssim=masked_ssim(pred, gt, mask, data_range=data_range, region=ssim_region),
        psnr=masked_psnr(pred, gt, mask, data_range=data_range),
        mse=masked_mse(pred, gt, mask),
    )


def make_report(cases: list[CaseMetrics]) -> MetricsReport:
    if not cases:
        raise ConfigError("report needs at least one case")
    return MetricsReport(cases=list(cases))


def format_aggregate(mean: float, std: float) -> str:
    return f"{mean:.4f} [±{std:.4f}]"


def render_table(report: MetricsReport) -> str:
    """Human-readable table with per-case rows and mean [±std] aggregates."""
    lines = [f"{'case':<16} {'ssim':>10} {'psnr':>10} {'mse':>10}"]
    for c in report.cases:
        lines.append(f"{c.case_id:<16} {c.ssim:>10.4f} {c.psnr:>10.4f} {c.mse:>10.4f}")
    parts = []
    for metric in ("ssim", "psnr", "mse"):
        mean, std = report.aggregate(metric)
        parts.append(format_aggregate(mean, std))
    lines.append(f"{'aggregate':<16} {parts[0]:>18} {parts[1]:>18} {parts[2]:>18}")
    return "\n".join(lines)


def render_csv(report: MetricsReport) -> str:
    lines = ["case_id,ssim,psnr,mse"]
    for c in report.cases:
        lines.append(f"{c.case_id},{c.ssim:.6f},{c.psnr:.6f},{c.mse:.6f}")
    return "\n".join(lines) + "\n"
