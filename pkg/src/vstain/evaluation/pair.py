"""Per-pair evaluation: optional ECC alignment followed by the four pixel metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import DegenerateImageError
from ..ingest import WHITE, CoreImage
from ..registration import EccParams, RigidTransform, ecc_align, warp
from .metrics import SsimParams, mse, pcc, psnr_from_mse, ssim

# comparison name -> (first role, second role, pixel metrics computed?)
COMPARISONS = {
    "GUS_vs_VDS": ("gus", "vds", True),
    "GHE_vs_VHER": ("ghe", "vher", True),
    "GHE_vs_VHE": ("ghe", "vhe", True),
    "VHE_vs_VHER": ("vhe", "vher", True),
    "RawGUS_vs_VDS": ("raw_gus", "vds", False),
    "RawGHE_vs_VHER": ("raw_ghe", "vher", False),
    "GHE_vs_VDS": ("ghe", "vds", False),
    "VHER_vs_VDS": ("vher", "vds", False),
}
METRIC_COMPARISONS = tuple(k for k, v in COMPARISONS.items() if v[2])


@dataclass
class MetricRecord:
    core_id: str
    comparison: str
    pcc: float
    ssim: float
    psnr: float
    mse: float
    alignment: RigidTransform = field(default_factory=lambda: RigidTransform(converged=False))
    aligned: bool = False

    def csv_row(self) -> dict:
        a = self.alignment
        return {
            "core_id": self.core_id,
            "comparison": self.comparison,
            "pcc": self.pcc,
            "ssim": self.ssim,
            "psnr_db": self.psnr,
            "mse": self.mse,
            "align_theta_deg": a.theta_deg,
            "align_tx": a.tx,
            "align_ty": a.ty,
            "align_ecc": a.final_ecc,
            "align_converged": a.converged,
        }


def pad_to_common(a: CoreImage, b: CoreImage, fill=WHITE):
    """Pad both images bottom/right with ``fill`` to the larger of their sizes."""
    h = max(a.height, b.height)
    w = max(a.width, b.width)

    def _pad(img):
        if (img.height, img.width) == (h, w):
            return img
        out = np.empty((h, w, 3), dtype=np.uint8)
        out[...] = np.asarray(fill, dtype=np.uint8)
        out[: img.height, : img.width] = img.pixels
        return img.with_pixels(out)

    return _pad(a), _pad(b)


def evaluate_pair(a: CoreImage, b: CoreImage, do_align: bool = True,
                  comparison: str = "custom", ecc_params: Optional[EccParams] = None,
                  ssim_params: Optional[SsimParams] = None, fill=WHITE) -> MetricRecord:
    """Align ``b`` onto ``a`` (if requested) and compute PCC, SSIM, PSNR and MSE.

    A failed alignment leaves ``b`` untouched and is visible as
    ``alignment.converged == False``.
    """
    if a.pixels.shape != b.pixels.shape:
        raise ValueError(f"pair dims differ: {a.pixels.shape} vs {b.pixels.shape}; pad first")
    t = RigidTransform(converged=False)
    aligned = False
    if do_align:
        try:
            t = ecc_align(b, a, ecc_params)
        except DegenerateImageError:
            t = RigidTransform(converged=False)
        if t.converged:
            b = warp(b, t, fill)
            aligned = True
    m = mse(a, b)
    return MetricRecord(a.core_id, comparison, pcc(a, b), ssim(a, b, ssim_params),
                        psnr_from_mse(m), m, t, aligned)
