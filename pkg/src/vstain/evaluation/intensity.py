"""Tissue-masked intensity statistics, domain-shift summaries and aggregation."""

from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np

from ..errors import InsufficientTissueError
from ..harmonize import TissueMask
from ..ingest import CoreImage


@dataclass
class IntensitySummary:
    core_id: str
    r: float
    g: float
    b: float
    tissue_fraction: float

    @property
    def overall(self) -> float:
        return (self.r + self.g + self.b) / 3.0

    def to_dict(self) -> dict:
        return {"core_id": self.core_id, "overall": self.overall, "r": self.r, "g": self.g,
                "b": self.b, "tissue_fraction": self.tissue_fraction}


@dataclass
class IntensityDiff:
    core_id: str
    overall: float
    r: float
    g: float
    b: float

    def to_dict(self) -> dict:
        return {"core_id": self.core_id, "overall": self.overall, "r": self.r, "g": self.g, "b": self.b}


def masked_intensity(core: CoreImage, mask: TissueMask) -> IntensitySummary:
    """Per-channel mean over tissue pixels, 8-bit units."""
    n = mask.count
    if n == 0:
        raise InsufficientTissueError(f"{core.core_id}: tissue mask is empty")
    if mask.bits.shape != core.pixels.shape[:2]:
        raise ValueError("mask and image dimensions differ")
    sums = core.pixels[mask.bits].sum(axis=0, dtype=np.int64)
    r, g, b = (float(s) / n for s in sums)
    return IntensitySummary(core.core_id, r, g, b, mask.tissue_fraction)


def intensity_difference(x: IntensitySummary, y: IntensitySummary) -> IntensityDiff:
    """``x - y`` per channel and overall (first image type minus second)."""
    return IntensityDiff(x.core_id, x.overall - y.overall, x.r - y.r, x.g - y.g, x.b - y.b)


@dataclass
class DomainShift:
    core_id: str
    mean_diff: float
    median_diff: float
    n_reference: int


def domain_shift_summary(core_summary: IntensitySummary,
                         reference: Sequence[IntensitySummary]) -> DomainShift:
    """Mean and median of ``core.overall - ref.overall`` over a reference set."""
    if not reference:
        raise ValueError("reference set is empty")
    diffs = [core_summary.overall - r.overall for r in reference]
    return DomainShift(core_summary.core_id, math.fsum(diffs) / len(diffs),
                       float(statistics.median(diffs)), len(diffs))


# --------------------------------------------------------------------------- #
# Aggregation
# --------------------------------------------------------------------------- #

@dataclass
class Stat:
    mean: float
    sd: float
    n: int

    def to_dict(self) -> dict:
        return {"mean": self.mean, "sd": self.sd, "n": self.n}


def mean_sd(values: Iterable[float]) -> Stat:
    """Mean and sample (n - 1) standard deviation; sd is 0 for a single value."""
    vals = [float(v) for v in values]
    n = len(vals)
    if n == 0:
        return Stat(float("nan"), float("nan"), 0)
    m = math.fsum(vals) / n
    if n == 1:
        return Stat(m, 0.0, 1)
    var = math.fsum((v - m) ** 2 for v in vals) / (n - 1)
    return Stat(m, math.sqrt(var), n)


@dataclass
class AggregateRow:
    comparison: str
    n: int
    stats: Dict[str, Stat]
    meta: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"comparison": self.comparison, "n": self.n,
                "stats": {k: v.to_dict() for k, v in self.stats.items()}, "meta": self.meta}


METRIC_FIELDS = ("pcc", "ssim", "psnr", "mse")
CHANNEL_FIELDS = ("overall", "r", "g", "b")


def aggregate(records: Sequence, comparison: str) -> AggregateRow:
    """Mean +/- SD per field over metric records or intensity differences.

    Infinite PSNR values are left out of the PSNR statistic and counted in
    ``meta["psnr_infinite"]``.
    """
    if not records:
        raise ValueError("nothing to aggregate")
    first = records[0]
    fields = METRIC_FIELDS if hasattr(first, "psnr") else CHANNEL_FIELDS
    stats, meta = {}, {}
    for name in fields:
        vals = [getattr(r, name) for r in records]
        if name == "psnr":
            finite = [v for v in vals if math.isfinite(v)]
            meta["psnr_infinite"] = len(vals) - len(finite)
            vals = finite
        stats[name] = mean_sd(vals)
    return AggregateRow(comparison, len(records), stats, meta)
