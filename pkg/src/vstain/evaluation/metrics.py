"""Pixel similarity metrics on [0, 1]-scaled images."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import correlate1d

from ..errors import DegenerateImageError, ImageTooSmallError
from ..harmonize import REC601
from ..ingest import CoreImage

PSNR_INF = float("inf")


def as_unit(image) -> np.ndarray:
    """Float64 array on [0, 1]; uint8 input is divided by 255, floats pass through."""
    if isinstance(image, CoreImage):
        return image.normalized
    arr = np.asarray(image)
    if arr.dtype == np.uint8:
        return arr.astype(np.float64) / 255.0
    return arr.astype(np.float64)


def unit_gray(image) -> np.ndarray:
    arr = as_unit(image)
    if arr.ndim == 3:
        return arr @ REC601
    return arr


def _same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")


def pcc(a, b) -> float:
    """Pearson correlation over every pixel and channel as one vector."""
    x, y = as_unit(a).ravel(), as_unit(b).ravel()
    _same_shape(x, y)
    x = x - x.mean()
    y = y - y.mean()
    nx, ny = math.sqrt(x @ x), math.sqrt(y @ y)
    if nx == 0 or ny == 0:
        raise DegenerateImageError("PCC undefined for a zero-variance image")
    return float(np.clip((x @ y) / (nx * ny), -1.0, 1.0))


def mse(a, b) -> float:
    x, y = as_unit(a), as_unit(b)
    _same_shape(x, y)
    d = x - y
    return float(np.mean(d * d))


def psnr_from_mse(m: float) -> float:
    if m == 0:
        return PSNR_INF
    return -10.0 * math.log10(m)


def psnr(a, b) -> float:
    """PSNR with peak 1.0; identical images give ``inf``."""
    return psnr_from_mse(mse(a, b))


@dataclass
class SsimParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03


def gaussian_window(size: int, sigma: float) -> np.ndarray:
    r = (size - 1) / 2.0
    x = np.arange(size) - r
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _valid_filter(img, g):
    r = len(g) // 2
    out = correlate1d(img, g, axis=0, mode="constant")
    out = correlate1d(out, g, axis=1, mode="constant")
    h, w = img.shape
    lo_r, lo_c = r, r
    hi_r, hi_c = h - (len(g) - 1 - r), w - (len(g) - 1 - r)
    return out[lo_r:hi_r, lo_c:hi_c]


def ssim(a, b, params: Optional[SsimParams] = None) -> float:
    """Single-scale Gaussian-weighted SSIM on luminance, averaged over valid windows."""
    p = params or SsimParams()
    x, y = unit_gray(a), unit_gray(b)
    _same_shape(x, y)
    if min(x.shape) < p.window:
        raise ImageTooSmallError(f"image {x.shape} smaller than the {p.window}px SSIM window")
    g = gaussian_window(p.window, p.sigma)
    c1, c2 = (p.k1 * 1.0) ** 2, (p.k2 * 1.0) ** 2
    mx, my = _valid_filter(x, g), _valid_filter(y, g)
    sxx = _valid_filter(x * x, g) - mx * mx
    syy = _valid_filter(y * y, g) - my * my
    sxy = _valid_filter(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(min(1.0, np.mean(num / den)))
