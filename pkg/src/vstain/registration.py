"""Rigid (rotation + translation) registration by ECC maximisation.

Conventions: coordinates are ``(x, y) = (column, row)`` pixel indices. A
transform maps an output pixel ``x`` to the source location
``[[cos, -sin], [sin, cos]] @ x + (tx, ty)``; :func:`warp` samples there.
:func:`ecc_align` returns the transform ``t`` for which
``warp(moving, t)`` best matches ``fixed``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateImageError
from .harmonize import REC601
from .ingest import WHITE, CoreImage

log = logging.getLogger(__name__)


@dataclass
class RigidTransform:
    theta: float = 0.0
    tx: float = 0.0
    ty: float = 0.0
    converged: bool = True
    iterations: int = 0
    final_ecc: float = float("nan")

    @property
    def matrix(self) -> np.ndarray:
        c, s = math.cos(self.theta), math.sin(self.theta)
        return np.array([[c, -s, self.tx], [s, c, self.ty]])

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta)

    def inverse(self) -> "RigidTransform":
        c, s = math.cos(self.theta), math.sin(self.theta)
        # x = R^T (y - t)
        tx = -(c * self.tx + s * self.ty)
        ty = -(-s * self.tx + c * self.ty)
        return RigidTransform(-self.theta, tx, ty)

    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.tx == 0.0 and self.ty == 0.0

    def summary(self) -> dict:
        return {
            "theta_deg": self.theta_deg,
            "tx": self.tx,
            "ty": self.ty,
            "ecc": self.final_ecc,
            "converged": self.converged,
            "iterations": self.iterations,
        }


@dataclass
class EccParams:
    max_iters: int = 200
    eps: float = 1e-6
    pyramid_levels: int = 3
    # an estimate whose final ECC is below this is treated as a failed alignment
    min_ecc: float = 0.3


def to_gray(image) -> np.ndarray:
    """Rec.601 luminance in 8-bit units as float64."""
    px = image.pixels if isinstance(image, CoreImage) else np.asarray(image)
    if px.ndim == 2:
        return px.astype(np.float64)
    return px.astype(np.float64) @ REC601


def ecc_value(a, b) -> float:
    """Zero-mean, unit-norm inner product of two equally sized images."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateImageError("image has zero intensity variance")
    return float(np.clip((a / na) @ (b / nb), -1.0, 1.0))


# --------------------------------------------------------------------------- #
# Sampling
# --------------------------------------------------------------------------- #

def bilinear_sample(img: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Bilinear lookup of a 2-D or 3-D array at float coordinates.

    Returns ``(values, valid)``; ``valid`` is False where the sample falls
    outside ``[0, W-1] x [0, H-1]`` (values there are undefined).
    """
    h, w = img.shape[:2]
    tol = 1e-9
    valid = (xs >= -tol) & (xs <= w - 1 + tol) & (ys >= -tol) & (ys <= h - 1 + tol)
    xc = np.clip(xs, 0, w - 1)
    yc = np.clip(ys, 0, h - 1)
    x0 = np.floor(xc).astype(np.intp)
    y0 = np.floor(yc).astype(np.intp)
    fx = xc - x0
    fy = yc - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy, valid


def _grid(h, w):
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    return xs, ys


def warp_array(img: np.ndarray, t: RigidTransform, fill=WHITE) -> np.ndarray:
    h, w = img.shape[:2]
    xs, ys = _grid(h, w)
    c, s = math.cos(t.theta), math.sin(t.theta)
    sx = c * xs - s * ys + t.tx
    sy = s * xs + c * ys + t.ty
    vals, valid = bilinear_sample(img.astype(np.float64), sx, sy)
    if img.ndim == 3:
        vals[~valid] = np.asarray(fill, dtype=np.float64)[: img.shape[2]]
    else:
        vals[~valid] = float(np.mean(fill))
    if img.dtype == np.uint8:
        return np.clip(np.rint(vals), 0, 255).astype(np.uint8)
    return vals


def warp(image: CoreImage, t: RigidTransform, fill=WHITE) -> CoreImage:
    """Inverse-mapped bilinear resampling; samples outside the source become ``fill``."""
    if t.is_identity():
        return image.with_pixels(image.pixels.copy())
    return image.with_pixels(warp_array(image.pixels, t, fill))


# --------------------------------------------------------------------------- #
# ECC
# --------------------------------------------------------------------------- #

def _downsample2(img):
    h, w = img.shape
    h2, w2 = h // 2, w // 2
    img = img[: 2 * h2, : 2 * w2]
    return 0.25 * (img[0::2, 0::2] + img[1::2, 0::2] + img[0::2, 1::2] + img[1::2, 1::2])


def _translation_init(fixed, moving):
    """Integer shift maximising the circular cross-correlation, as ``(u, v)``
    such that ``moving(x + (u, v)) ~ fixed(x)``."""
    f = fixed - fixed.mean()
    m = moving - moving.mean()
    h, w = f.shape
    # pad to avoid wrap-around matches
    shape = (2 * h, 2 * w)
    xc = np.fft.irfft2(np.conj(np.fft.rfft2(f, shape)) * np.fft.rfft2(m, shape), shape)
    iy, ix = np.unravel_index(int(np.argmax(xc)), shape)
    v = iy if iy < h else iy - shape[0]
    u = ix if ix < w else ix - shape[1]
    # implausible shifts (more than half the frame) are ignored
    if abs(u) > w // 2 or abs(v) > h // 2:
        return 0.0, 0.0
    return float(u), float(v)


def _ecc_level(fixed, moving, theta, u, v, params: EccParams):
    """Forward-additive ECC on one pyramid level in centre-relative coordinates.

    Returns ``(theta, u, v, converged, iterations, ok)``.
    """
    h, w = fixed.shape
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    xs, ys = _grid(h, w)
    dx, dy = xs - cx, ys - cy
    gy_img, gx_img = np.gradient(moving)
    stack = np.stack([moving, gx_img, gy_img], axis=-1)

    for it in range(1, params.max_iters + 1):
        c, s = math.cos(theta), math.sin(theta)
        sx = c * dx - s * dy + cx + u
        sy = s * dx + c * dy + cy + v
        vals, valid = bilinear_sample(stack, sx, sy)
        if np.count_nonzero(valid) < max(16, 0.1 * valid.size):
            return theta, u, v, False, it, False
        img = vals[..., 0][valid]
        gx = vals[..., 1][valid]
        gy = vals[..., 2][valid]
        tmp = fixed[valid]
        jtx = (-s * dx - c * dy)[valid]
        jty = (c * dx - s * dy)[valid]
        G = np.stack([gx * jtx + gy * jty, gx, gy], axis=1)

        img_zm = img - img.mean()
        tmp_zm = tmp - tmp.mean()
        img_norm = np.linalg.norm(img_zm)
        tmp_norm = np.linalg.norm(tmp_zm)
        if img_norm == 0 or tmp_norm == 0:
            return theta, u, v, False, it, False

        hess = G.T @ G
        try:
            hess_inv = np.linalg.inv(hess)
        except np.linalg.LinAlgError:
            return theta, u, v, False, it, False
        img_proj = G.T @ img_zm
        tmp_proj = G.T @ tmp_zm
        img_proj_h = hess_inv @ img_proj
        corr = img_zm @ tmp_zm
        tmp_proj_h = hess_inv @ tmp_proj
        lam_n = img_norm ** 2 - img_proj @ img_proj_h
        lam_d = corr - tmp_proj @ img_proj_h
        if lam_d > 0:
            lam = lam_n / lam_d
        else:
            # correlation too weak for the closed-form step; take the larger of
            # the two admissible scalings instead
            q = tmp_proj @ tmp_proj_h
            if q <= 0:
                return theta, u, v, False, it, False
            lam1 = math.sqrt(max(lam_n, 0.0) / q)
            lam2 = -lam_d / q
            lam = max(lam1, lam2)
        err = lam * tmp_zm - img_zm
        delta = hess_inv @ (G.T @ err)
        theta += delta[0]
        u += delta[1]
        v += delta[2]
        if not np.all(np.isfinite([theta, u, v])):
            return 0.0, 0.0, 0.0, False, it, False
        if np.linalg.norm(delta) < params.eps:
            return theta, u, v, True, it, True
    return theta, u, v, False, params.max_iters, True


def _masked_ecc(fixed, moving, t: RigidTransform):
    h, w = fixed.shape
    xs, ys = _grid(h, w)
    c, s = math.cos(t.theta), math.sin(t.theta)
    vals, valid = bilinear_sample(moving, c * xs - s * ys + t.tx, s * xs + c * ys + t.ty)
    if np.count_nonzero(valid) < 2:
        return float("nan")
    try:
        return ecc_value(vals[valid], fixed[valid])
    except DegenerateImageError:
        return float("nan")


def ecc_align(moving, fixed, params: Optional[EccParams] = None) -> RigidTransform:
    """Estimate the rigid transform aligning ``moving`` onto ``fixed``.

    Runs coarse-to-fine over a factor-2 box pyramid. If the finest level does
    not converge, or the resulting ECC is below ``params.min_ecc``, the
    identity is returned with ``converged=False``.
    """
    params = params or EccParams()
    fixed_g = to_gray(fixed)
    moving_g = to_gray(moving)
    if fixed_g.shape != moving_g.shape:
        raise ValueError(f"shape mismatch {moving_g.shape} vs {fixed_g.shape}; pad first")
    if fixed_g.std() == 0 or moving_g.std() == 0:
        raise DegenerateImageError("cannot align an image with zero intensity variance")

    pyr = [(fixed_g, moving_g)]
    for _ in range(max(0, params.pyramid_levels - 1)):
        f, m = pyr[-1]
        if min(f.shape) < 32:
            break
        pyr.append((_downsample2(f), _downsample2(m)))

    theta = 0.0
    u, v = _translation_init(*pyr[-1])
    total = 0
    converged = ok = False
    for level in range(len(pyr) - 1, -1, -1):
        f, m = pyr[level]
        theta, u, v, converged, its, ok = _ecc_level(f, m, theta, u, v, params)
        total += its
        if not ok:
            break
        if level > 0:
            u *= 2.0
            v *= 2.0

    if ok and converged:
        h, w = fixed_g.shape
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        c, s = math.cos(theta), math.sin(theta)
        t = RigidTransform(float(theta), float(cx - (c * cx - s * cy) + u),
                           float(cy - (s * cx + c * cy) + v),
                           converged=True, iterations=total)
        t.final_ecc = _masked_ecc(fixed_g, moving_g, t)
        if np.isfinite(t.final_ecc) and t.final_ecc >= params.min_ecc:
            return t
        log.info("ECC estimate rejected (ecc=%.4f < %.2f)", t.final_ecc, params.min_ecc)
    ident = RigidTransform(converged=False, iterations=total)
    ident.final_ecc = ecc_value(moving_g, fixed_g)
    return ident
