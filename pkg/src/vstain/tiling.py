"""Non-overlapping patch grids, patch extraction and reconstruction."""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, List, Optional

import numpy as np

from .errors import DuplicatePatchError, GridMismatchError, PatchRangeError
from .harmonize import TissueMask
from .ingest import WHITE, CoreImage, StainState

DEFAULT_PATCH_SIZE = 1024
DEFAULT_TISSUE_MIN = 0.05

PATCH_NAME_RE = re.compile(r"^(?P<core_id>.+)_r(?P<row>\d+)_c(?P<col>\d+)\.png$")


@dataclass
class GridCell:
    row: int
    col: int
    pad_bottom: int
    pad_right: int
    tissue_fraction: float
    kept: bool


@dataclass
class PatchGrid:
    core_dims: tuple
    patch_size: int
    rows: int
    cols: int
    cells: List[GridCell] = field(default_factory=list)
    tissue_min: float = DEFAULT_TISSUE_MIN

    def cell(self, row, col) -> GridCell:
        return self.cells[row * self.cols + col]

    @property
    def kept_cells(self) -> List[GridCell]:
        return [c for c in self.cells if c.kept]

    def to_dict(self) -> dict:
        return {
            "core_dims": list(self.core_dims),
            "patch_size": self.patch_size,
            "rows": self.rows,
            "cols": self.cols,
            "tissue_min": self.tissue_min,
            "cells": [asdict(c) for c in self.cells],
        }

    @classmethod
    def from_dict(cls, d) -> "PatchGrid":
        return cls(
            core_dims=tuple(d["core_dims"]),
            patch_size=int(d["patch_size"]),
            rows=int(d["rows"]),
            cols=int(d["cols"]),
            cells=[GridCell(**c) for c in d["cells"]],
            tissue_min=float(d.get("tissue_min", DEFAULT_TISSUE_MIN)),
        )

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> "PatchGrid":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class Patch:
    pixels: np.ndarray
    row: int
    col: int
    core_id: str = "core"

    @property
    def filename(self) -> str:
        return patch_filename(self.core_id, self.row, self.col)


def patch_filename(core_id, row, col) -> str:
    return f"{core_id}_r{row}_c{col}.png"


def parse_patch_filename(name):
    m = PATCH_NAME_RE.match(name)
    if not m:
        return None
    return m.group("core_id"), int(m.group("row")), int(m.group("col"))


def make_grid(core: CoreImage, mask: Optional[TissueMask], patch_size: int = DEFAULT_PATCH_SIZE,
              tissue_min: float = DEFAULT_TISSUE_MIN) -> PatchGrid:
    """Lay a ``patch_size`` grid over the core and flag low-tissue cells.

    Tissue fraction is measured over the un-padded part of each cell. A
    ``None`` mask counts every pixel as tissue.
    """
    if patch_size < 1:
        raise ValueError("patch_size must be >= 1")
    if not 0.0 <= tissue_min <= 1.0:
        raise ValueError("tissue_min must be in [0, 1]")
    h, w = core.height, core.width
    if mask is not None and mask.bits.shape != (h, w):
        raise GridMismatchError(f"mask shape {mask.bits.shape} != core shape {(h, w)}")
    rows, cols = math.ceil(h / patch_size), math.ceil(w / patch_size)
    cells = []
    for r in range(rows):
        y0, y1 = r * patch_size, min(h, (r + 1) * patch_size)
        for c in range(cols):
            x0, x1 = c * patch_size, min(w, (c + 1) * patch_size)
            if mask is None:
                frac = 1.0
            else:
                frac = int(np.count_nonzero(mask.bits[y0:y1, x0:x1])) / ((y1 - y0) * (x1 - x0))
            cells.append(GridCell(r, c, patch_size - (y1 - y0), patch_size - (x1 - x0),
                                  frac, frac >= tissue_min))
    return PatchGrid((h, w), patch_size, rows, cols, cells, tissue_min)


def _check_grid(core: CoreImage, grid: PatchGrid):
    if tuple(grid.core_dims) != (core.height, core.width):
        raise GridMismatchError(
            f"grid built for {tuple(grid.core_dims)} but core is {(core.height, core.width)}"
        )


def extract_patches(core: CoreImage, grid: PatchGrid) -> List[Patch]:
    """Kept cells as zero-padded square patches, row-major."""
    _check_grid(core, grid)
    ps = grid.patch_size
    out = []
    for cell in grid.cells:
        if not cell.kept:
            continue
        y0, x0 = cell.row * ps, cell.col * ps
        buf = np.zeros((ps, ps, 3), dtype=np.uint8)
        src = core.pixels[y0:y0 + ps, x0:x0 + ps]
        buf[: src.shape[0], : src.shape[1]] = src
        out.append(Patch(buf, cell.row, cell.col, core.core_id))
    return out


def reconstruct(patches: Iterable[Patch], grid: PatchGrid, fill=WHITE, mpp: float = 0.5,
                core_id: str = "core", stain_state=StainState.STAINED) -> CoreImage:
    """Paste patches back at their grid positions; empty cells stay ``fill``."""
    h, w = grid.core_dims
    ps = grid.patch_size
    canvas = np.empty((h, w, 3), dtype=np.uint8)
    canvas[...] = np.asarray(fill, dtype=np.uint8)
    seen = set()
    for p in patches:
        key = (p.row, p.col)
        if not (0 <= p.row < grid.rows and 0 <= p.col < grid.cols):
            raise PatchRangeError(f"patch at {key} outside {grid.rows}x{grid.cols} grid")
        if key in seen:
            raise DuplicatePatchError(f"patch at {key} supplied twice")
        seen.add(key)
        if p.pixels.shape != (ps, ps, 3):
            raise GridMismatchError(f"patch {key} has shape {p.pixels.shape}, expected {(ps, ps, 3)}")
        y0, x0 = p.row * ps, p.col * ps
        y1, x1 = min(h, y0 + ps), min(w, x0 + ps)
        canvas[y0:y1, x0:x1] = p.pixels[: y1 - y0, : x1 - x0]
    return CoreImage(canvas, mpp=mpp, core_id=core_id, stain_state=stain_state)
