"""Image and parameter-map evaluation metrics."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError
from .uv_atlas import UVMap

PSNR_CAP = 100.0
MSE_FLOOR = 1e-10
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass
class MetricReport:
    l1: float
    psnr: float
    ssim: float
    mask_l1: float | None = None
    offset_norm: float | None = None
    lpips: str = "unavailable (requires pretrained network weights)"

    def to_dict(self) -> dict:
        return asdict(self)


def l1_error(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR in dB for images in ``[0, 1]``; capped at 100 dB."""
    mse = float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))
    if mse < MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def _gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    return correlate1d(correlate1d(img, g, axis=0, mode="reflect"), g, axis=1, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Colour images are scored per channel and averaged. Window statistics at
    the border (within 5 px) are excluded from the mean when the image is
    large enough.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 3:
        return float(np.mean([ssim(a[..., c], b[..., c], data_range) for c in range(a.shape[2])]))
    g = _gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = _filter(a, g), _filter(b, g)
    s_aa = _filter(a * a, g) - mu_a * mu_a
    s_bb = _filter(b * b, g) - mu_b * mu_b
    s_ab = _filter(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * s_ab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (s_aa + s_bb + c2)
    smap = num / den
    pad = SSIM_WINDOW // 2
    if min(a.shape) > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def offset_norm(offset: UVMap) -> float:
    return float(np.sqrt(np.sum(np.square(offset.data))))


def compute_metrics(
    rendered,
    reference: np.ndarray,
    mask: np.ndarray | None = None,
    offset: UVMap | None = None,
) -> MetricReport:
    """Photometric error, alpha-mask error and offset-map magnitude.

    ``rendered`` is a RenderedImage (or anything with ``rgb`` and ``alpha``).
    """
    ref = np.asarray(reference, dtype=np.float64)
    if rendered.rgb.shape != ref.shape:
        raise ValidationError(f"rendered {rendered.rgb.shape} vs reference {ref.shape}")
    mask_l1 = None
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != rendered.alpha.shape:
            raise ValidationError(f"mask {mask.shape} vs alpha {rendered.alpha.shape}")
        mask_l1 = l1_error(mask, rendered.alpha)
    return MetricReport(
        l1=l1_error(rendered.rgb, ref),
        psnr=psnr(rendered.rgb, ref),
        ssim=ssim(rendered.rgb, ref),
        mask_l1=mask_l1,
        offset_norm=None if offset is None else offset_norm(offset),
    )


def reports_to_json(reports: dict[str, MetricReport]) -> str:
    return json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2)


def reports_to_csv(reports: dict[str, MetricReport]) -> str:
    buf = io.StringIO()
    fields = ["frame", "l1", "psnr", "ssim", "mask_l1", "offset_norm"]
    w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore")
    w.writeheader()
    for k, r in reports.items():
        w.writerow({"frame": k, **r.to_dict()})
    return buf.getvalue()
