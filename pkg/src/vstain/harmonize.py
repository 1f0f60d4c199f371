"""Domain harmonization: tissue masking, Macenko stain normalization and
tissue-masked CDF histogram matching.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np

from .errors import DegenerateStainError, InsufficientTissueError
from .ingest import CoreImage

REC601 = np.array([0.299, 0.587, 0.114])

DEFAULT_TISSUE_THRESHOLD = 0.88
DEFAULT_OD_BETA = 0.15
DEFAULT_ANGLE_ALPHA = 1.0
DEFAULT_CONC_PERCENTILE = 99.0
MIN_OD_PIXELS = 100
# smallest admissible ratio of the second to the first OD covariance eigenvalue
MIN_EIGEN_RATIO = 1e-3


def luminance(pixels: np.ndarray) -> np.ndarray:
    """Rec.601 luminance of an 8-bit RGB array, scaled to [0, 1]."""
    return (pixels.astype(np.float64) @ REC601) / 255.0


# --------------------------------------------------------------------------- #
# Tissue mask
# --------------------------------------------------------------------------- #

@dataclass
class TissueMask:
    bits: np.ndarray
    strategy: str = "luminance_threshold"
    threshold: Optional[float] = DEFAULT_TISSUE_THRESHOLD

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("mask must be 2-D")

    @property
    def tissue_fraction(self) -> float:
        return int(np.count_nonzero(self.bits)) / self.bits.size

    @property
    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    @classmethod
    def full(cls, shape) -> "TissueMask":
        return cls(np.ones(shape, dtype=bool), strategy="full", threshold=None)


def otsu_threshold(values: np.ndarray, bins: int = 256) -> float:
    """Otsu threshold of values in [0, 1], returned on the same scale."""
    hist, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    hist = hist.astype(np.float64)
    centers = (edges[:-1] + edges[1:]) / 2
    w0 = np.cumsum(hist)
    w1 = w0[-1] - w0
    m0 = np.cumsum(hist * centers)
    mt = m0[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        mu0 = m0 / w0
        mu1 = (mt - m0) / w1
        between = w0 * w1 * (mu0 - mu1) ** 2
    between[~np.isfinite(between)] = -1.0
    k = int(np.argmax(between))
    if between[k] <= 0:
        # flat histogram; nothing to separate
        return float(edges[-1])
    return float(edges[k + 1])


def tissue_mask(core: CoreImage, strategy: str = "luminance_threshold",
                threshold: Optional[float] = None) -> TissueMask:
    """Tissue is every pixel darker than the luminance threshold."""
    lum = luminance(core.pixels)
    if strategy == "luminance_threshold":
        t = DEFAULT_TISSUE_THRESHOLD if threshold is None else float(threshold)
    elif strategy == "otsu":
        t = otsu_threshold(lum)
    else:
        raise ValueError(f"unknown mask strategy {strategy!r}")
    return TissueMask(lum < t, strategy=strategy, threshold=t)


# --------------------------------------------------------------------------- #
# Macenko
# --------------------------------------------------------------------------- #

@dataclass
class StainProfile:
    """Stain vectors (hematoxylin, eosin columns) and reference concentrations."""

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray
    od_beta: float = DEFAULT_OD_BETA
    angle_alpha: float = DEFAULT_ANGLE_ALPHA

    def __post_init__(self):
        self.stain_matrix = np.asarray(self.stain_matrix, dtype=np.float64).reshape(3, 2)
        self.max_concentrations = np.asarray(self.max_concentrations, dtype=np.float64).reshape(2)

    def to_dict(self) -> dict:
        return {
            "stain_matrix": self.stain_matrix.tolist(),
            "max_concentrations": self.max_concentrations.tolist(),
            "od_beta": self.od_beta,
            "angle_alpha": self.angle_alpha,
        }

    @classmethod
    def from_dict(cls, d) -> "StainProfile":
        return cls(np.array(d["stain_matrix"]), np.array(d["max_concentrations"]),
                   d.get("od_beta", DEFAULT_OD_BETA), d.get("angle_alpha", DEFAULT_ANGLE_ALPHA))


def optical_density(pixels: np.ndarray) -> np.ndarray:
    return -np.log10((pixels.astype(np.float64) + 1.0) / 256.0)


def od_to_rgb(od: np.ndarray) -> np.ndarray:
    rgb = 256.0 * np.power(10.0, -od) - 1.0
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def _concentrations(od_flat, stain_matrix):
    conc, *_ = np.linalg.lstsq(stain_matrix, od_flat.T, rcond=None)
    return np.maximum(conc.T, 0.0)


def estimate_stain_profile(core: CoreImage, mask: Optional[TissueMask] = None,
                           od_beta: float = DEFAULT_OD_BETA,
                           angle_alpha: float = DEFAULT_ANGLE_ALPHA,
                           reject: str = "all",
                           conc_percentile: float = DEFAULT_CONC_PERCENTILE) -> StainProfile:
    """Estimate H&E stain vectors with the Macenko angle-percentile method.

    Args:
        core: stained image.
        mask: restricts estimation to tissue pixels; ``None`` uses every pixel.
        od_beta: OD transparency cutoff.
        angle_alpha: lower/upper angle percentile for the extreme stain directions.
        reject: ``"all"`` drops pixels whose three OD components are all below
            ``od_beta``; ``"any"`` drops pixels with any component below it.
        conc_percentile: percentile recorded as the per-stain reference concentration.
    """
    od = optical_density(core.pixels).reshape(-1, 3)
    sel = np.ones(od.shape[0], dtype=bool) if mask is None else mask.bits.reshape(-1)
    if reject == "all":
        keep = sel & np.any(od >= od_beta, axis=1)
    elif reject == "any":
        keep = sel & np.all(od >= od_beta, axis=1)
    else:
        raise ValueError(f"unknown reject mode {reject!r}")
    od_hat = od[keep]
    if od_hat.shape[0] < MIN_OD_PIXELS:
        raise InsufficientTissueError(
            f"{core.core_id}: only {od_hat.shape[0]} pixels above OD {od_beta}, need {MIN_OD_PIXELS}"
        )

    evals, evecs = np.linalg.eigh(np.cov(od_hat, rowvar=False))
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    if evals[0] <= 0 or evals[1] / evals[0] < MIN_EIGEN_RATIO:
        raise DegenerateStainError(
            f"{core.core_id}: OD covariance has rank < 2 "
            f"(eigenvalues {evals[0]:.3g}, {evals[1]:.3g})"
        )
    plane = evecs[:, :2].copy()
    # orient both axes into the positive OD octant
    for k in range(2):
        if plane[:, k].sum() < 0:
            plane[:, k] *= -1

    proj = od_hat @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [angle_alpha, 100.0 - angle_alpha])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])
    vecs = []
    for v in (v_lo, v_hi):
        if v.sum() < 0:
            v = -v
        v = np.maximum(v, 0.0)
        n = np.linalg.norm(v)
        if n == 0:
            raise DegenerateStainError(f"{core.core_id}: stain direction collapsed")
        vecs.append(v / n)
    # hematoxylin is the stain with the larger red-channel OD
    if vecs[0][0] < vecs[1][0]:
        vecs.reverse()
    stain_matrix = np.stack(vecs, axis=1)
    if abs(float(vecs[0] @ vecs[1])) > 1 - 1e-9:
        raise DegenerateStainError(f"{core.core_id}: stain directions coincide")

    conc = _concentrations(od[sel], stain_matrix)
    max_c = np.percentile(conc, conc_percentile, axis=0)
    if np.any(max_c <= 0):
        raise DegenerateStainError(f"{core.core_id}: a stain has zero reference concentration")
    return StainProfile(stain_matrix, max_c, od_beta=od_beta, angle_alpha=angle_alpha)


def normalize_stains(core: CoreImage, source: StainProfile, target: StainProfile) -> CoreImage:
    """Re-render ``core`` with the target stain vectors and concentration scale."""
    od = optical_density(core.pixels).reshape(-1, 3)
    conc = _concentrations(od, source.stain_matrix)
    conc *= target.max_concentrations / source.max_concentrations
    out = od_to_rgb(conc @ target.stain_matrix.T)
    return core.with_pixels(out.reshape(core.pixels.shape))


def angular_error_deg(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    c = float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))
    return float(np.degrees(np.arccos(np.clip(c, -1.0, 1.0))))


# --------------------------------------------------------------------------- #
# Histogram matching
# --------------------------------------------------------------------------- #

@dataclass
class ChannelCdf:
    """Per-channel 256-bin cumulative histograms of tissue pixels."""

    cdf: np.ndarray
    pixel_count: int

    def __post_init__(self):
        self.cdf = np.asarray(self.cdf, dtype=np.float64).reshape(3, 256)

    def to_dict(self) -> dict:
        return {"pixel_count": int(self.pixel_count), "cdf": self.cdf.tolist()}

    @classmethod
    def from_dict(cls, d) -> "ChannelCdf":
        return cls(np.array(d["cdf"]), int(d["pixel_count"]))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict()))
        return path

    @classmethod
    def load(cls, path) -> "ChannelCdf":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def max_gap(self, channel: Optional[int] = None) -> float:
        """Largest single-bin probability mass (per channel or over all)."""
        pmf = np.diff(self.cdf, axis=1, prepend=0.0)
        if channel is None:
            return float(pmf.max())
        return float(pmf[channel].max())


def _require_tissue(mask: TissueMask, who: str):
    if mask.count == 0:
        raise InsufficientTissueError(f"{who}: tissue mask is empty")


def compute_channel_cdf(core: CoreImage, mask: TissueMask) -> ChannelCdf:
    _require_tissue(mask, core.core_id)
    tissue = core.pixels[mask.bits]
    cdf = np.empty((3, 256))
    for c in range(3):
        counts = np.bincount(tissue[:, c], minlength=256).astype(np.float64)
        cdf[c] = np.cumsum(counts) / tissue.shape[0]
    cdf[:, -1] = 1.0
    return ChannelCdf(cdf, tissue.shape[0])


def histogram_lut(source: ChannelCdf, target: ChannelCdf) -> np.ndarray:
    """Monotone ``(3, 256)`` lookup table mapping source levels onto target levels.

    Levels inside the source's tissue support map to the smallest target level
    whose CDF reaches the source CDF. Levels outside that support are clamped
    against the nearest in-support entry so background keeps its own value
    unless that would break monotonicity.
    """
    lut = np.empty((3, 256), dtype=np.int64)
    levels = np.arange(256)
    for c in range(3):
        src, tgt = source.cdf[c], target.cdf[c]
        raw = np.searchsorted(tgt, src, side="left")
        raw = np.minimum(raw, 255)
        pmf = np.diff(src, prepend=0.0)
        occupied = np.nonzero(pmf > 0)[0]
        if occupied.size == 0:
            lut[c] = levels
            continue
        vmin, vmax = occupied[0], occupied[-1]
        row = raw.copy()
        row[:vmin] = np.minimum(levels[:vmin], raw[vmin])
        row[vmax + 1:] = np.maximum(levels[vmax + 1:], raw[vmax])
        lut[c] = row
    return lut.astype(np.uint8)


def apply_lut(pixels: np.ndarray, lut: np.ndarray) -> np.ndarray:
    out = np.empty_like(pixels)
    for c in range(3):
        out[..., c] = lut[c][pixels[..., c]]
    return out


def match_histogram(core: CoreImage, mask: TissueMask, target: ChannelCdf) -> CoreImage:
    """Map ``core`` onto the target CDF; the LUT is fitted on tissue, applied everywhere."""
    src = compute_channel_cdf(core, mask)
    lut = histogram_lut(src, target)
    return core.with_pixels(apply_lut(core.pixels, lut))


@dataclass
class ChannelWeights:
    w_r: float = 1.0
    w_g: float = 1.0
    w_b: float = 1.0

    def __post_init__(self):
        for name in ("w_r", "w_g", "w_b"):
            v = float(getattr(self, name))
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
            setattr(self, name, v)

    def as_array(self) -> np.ndarray:
        return np.array([self.w_r, self.w_g, self.w_b])


def calibrate_unstained(core: CoreImage, mask: TissueMask, target: ChannelCdf,
                        weights: Optional[ChannelWeights] = None) -> CoreImage:
    """Blend each channel between the input and its histogram-matched version."""
    weights = weights or ChannelWeights()
    matched = match_histogram(core, mask, target).pixels.astype(np.float64)
    w = weights.as_array()
    blended = w * matched + (1.0 - w) * core.pixels.astype(np.float64)
    out = np.clip(np.rint(blended), 0, 255).astype(np.uint8)
    return core.with_pixels(out)


@dataclass
class HarmonizeParams:
    mask_strategy: str = "luminance_threshold"
    mask_threshold: Optional[float] = DEFAULT_TISSUE_THRESHOLD
    od_beta: float = DEFAULT_OD_BETA
    angle_alpha: float = DEFAULT_ANGLE_ALPHA
    reject: str = "all"
    weights: ChannelWeights = field(default_factory=ChannelWeights)


@dataclass
class HarmonizeResult:
    image: CoreImage
    source_profile: StainProfile
    target_profile: StainProfile
    mask: TissueMask


def harmonize_he(core: CoreImage, reference: CoreImage,
                 params: Optional[HarmonizeParams] = None,
                 reference_cdf: Optional[ChannelCdf] = None,
                 reference_profile: Optional[StainProfile] = None,
                 return_details: bool = False):
    """Macenko-normalize ``core`` to the reference, then match its tissue CDF.

    The pre-computed ``reference_cdf``/``reference_profile`` may be passed in
    so a run estimates them once.
    """
    p = params or HarmonizeParams()
    mask = tissue_mask(core, p.mask_strategy, p.mask_threshold)
    src_profile = estimate_stain_profile(core, mask, p.od_beta, p.angle_alpha, p.reject)
    if reference_profile is None or reference_cdf is None:
        ref_mask = tissue_mask(reference, p.mask_strategy, p.mask_threshold)
        if reference_profile is None:
            reference_profile = estimate_stain_profile(reference, ref_mask, p.od_beta,
                                                       p.angle_alpha, p.reject)
        if reference_cdf is None:
            reference_cdf = compute_channel_cdf(reference, ref_mask)
    normalized = normalize_stains(core, src_profile, reference_profile)
    out = match_histogram(normalized, mask, reference_cdf)
    if return_details:
        return HarmonizeResult(out, src_profile, reference_profile, mask)
    return out
