"""Raster loading, GeoJSON ROI parsing, strip-based core extraction and
resolution matching.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import sparse

from .errors import (
    EmptyRoiError,
    ImageFormatError,
    RasterIOError,
    RoiParseError,
    UnsupportedGeometryError,
    UpsampleUnsupportedError,
)

WHITE = (255, 255, 255)
DEFAULT_STRIP_HEIGHT = 10_000

# Pillow refuses very large rasters by default; slide exports routinely exceed it.
Image.MAX_IMAGE_PIXELS = None


class StainState(str, enum.Enum):
    UNSTAINED = "unstained"
    STAINED = "stained"
    VIRTUAL_DESTAINED = "virtual_destained"
    VIRTUAL_STAINED = "virtual_stained"
    VIRTUAL_RESTAINED = "virtual_restained"


@dataclass
class CoreImage:
    """One biopsy core as an 8-bit RGB raster.

    Attributes:
        pixels: ``(H, W, 3)`` uint8 array.
        mpp: microns per pixel.
        core_id: identifier carried through every stage.
        stain_state: which image role this raster plays.
    """

    pixels: np.ndarray
    mpp: float
    core_id: str = "core"
    stain_state: StainState = StainState.STAINED

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"expected a non-empty HxWx3 array, got shape {px.shape}")
        if px.dtype != np.uint8:
            if np.issubdtype(px.dtype, np.floating) and not np.all(np.isfinite(px)):
                raise ValueError("pixel values must be finite")
            if px.size and (px.min() < 0 or px.max() > 255):
                raise ValueError("pixel values must lie in [0, 255]")
            px = np.rint(px).astype(np.uint8)
        self.pixels = px
        if not (self.mpp > 0):
            raise ValueError(f"mpp must be positive, got {self.mpp}")
        self.stain_state = StainState(self.stain_state)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def normalized(self) -> np.ndarray:
        """Float64 view of the pixels scaled to [0, 1]."""
        return self.pixels.astype(np.float64) / 255.0

    def with_pixels(self, pixels, stain_state=None, mpp=None) -> "CoreImage":
        return CoreImage(
            pixels=pixels,
            mpp=self.mpp if mpp is None else mpp,
            core_id=self.core_id,
            stain_state=self.stain_state if stain_state is None else stain_state,
        )


@dataclass
class RoiPolygon:
    exterior: List[Tuple[float, float]]
    label: str = ""
    holes: List[List[Tuple[float, float]]] = field(default_factory=list)

    def __post_init__(self):
        self.exterior = [(float(x), float(y)) for x, y in self.exterior]
        self.holes = [[(float(x), float(y)) for x, y in ring] for ring in self.holes]
        self.exterior = _open_ring(self.exterior)
        self.holes = [_open_ring(h) for h in self.holes]
        if len(self.exterior) < 3:
            raise ValueError("polygon exterior needs at least 3 vertices")
        for x, y in self.exterior + [p for h in self.holes for p in h]:
            if not (math.isfinite(x) and math.isfinite(y)) or x < 0 or y < 0:
                raise ValueError(f"invalid polygon coordinate ({x}, {y})")

    @property
    def rings(self) -> List[List[Tuple[float, float]]]:
        return [self.exterior] + self.holes

    def bounds(self) -> Tuple[float, float, float, float]:
        xs = [p[0] for p in self.exterior]
        ys = [p[1] for p in self.exterior]
        return min(xs), min(ys), max(xs), max(ys)

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "exterior": [list(p) for p in self.exterior],
            "holes": [[list(p) for p in h] for h in self.holes],
        }


def _open_ring(ring):
    # GeoJSON rings repeat the first vertex at the end; closure is implicit here.
    if len(ring) > 1 and ring[0] == ring[-1]:
        return ring[:-1]
    return ring


# --------------------------------------------------------------------------- #
# GeoJSON
# --------------------------------------------------------------------------- #

def _feature_label(props, index):
    if not isinstance(props, dict):
        return f"roi_{index}"
    if props.get("name"):
        return str(props["name"])
    cls = props.get("classification")
    if isinstance(cls, dict) and cls.get("name"):
        return str(cls["name"])
    if isinstance(cls, str) and cls:
        return cls
    return f"roi_{index}"


def _polygons_from_geometry(geom):
    if not isinstance(geom, dict) or "type" not in geom:
        raise RoiParseError("geometry object without a 'type' member")
    gtype = geom["type"]
    coords = geom.get("coordinates")
    if gtype == "Polygon":
        return [coords]
    if gtype == "MultiPolygon":
        return list(coords)
    raise UnsupportedGeometryError(gtype)


def parse_roi(geojson_bytes) -> List[RoiPolygon]:
    """Parse GeoJSON into ROI polygons.

    Accepts a bare geometry, a Feature or a FeatureCollection. Every polygon of
    a MultiPolygon becomes its own :class:`RoiPolygon`, suffixed ``_<k>``.
    """
    if isinstance(geojson_bytes, (bytes, bytearray)):
        try:
            text = bytes(geojson_bytes).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise RoiParseError("GeoJSON is not valid UTF-8", offset=exc.start) from exc
    else:
        text = str(geojson_bytes)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        offset = len(text[: exc.pos].encode("utf-8"))
        raise RoiParseError(f"malformed JSON: {exc.msg}", offset=offset) from exc

    if isinstance(doc, dict) and doc.get("type") == "FeatureCollection":
        features = doc.get("features", [])
    elif isinstance(doc, list):
        # QuPath exports a bare array of features.
        features = doc
    elif isinstance(doc, dict) and doc.get("type") == "Feature":
        features = [doc]
    elif isinstance(doc, dict):
        features = [{"type": "Feature", "geometry": doc, "properties": {}}]
    else:
        raise RoiParseError("top-level GeoJSON value must be an object or array")

    out = []
    for i, feat in enumerate(features):
        if not isinstance(feat, dict):
            raise RoiParseError(f"feature {i} is not an object")
        label = _feature_label(feat.get("properties"), i)
        polys = _polygons_from_geometry(feat.get("geometry"))
        for k, rings in enumerate(polys):
            if not rings:
                raise RoiParseError(f"feature {i} has an empty polygon")
            try:
                out.append(
                    RoiPolygon(
                        exterior=[tuple(p[:2]) for p in rings[0]],
                        label=label if len(polys) == 1 else f"{label}_{k}",
                        holes=[[tuple(p[:2]) for p in r] for r in rings[1:]],
                    )
                )
            except (TypeError, ValueError, IndexError) as exc:
                raise RoiParseError(f"feature {i}: {exc}") from exc
    return out


def load_roi(path) -> List[RoiPolygon]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise RasterIOError(f"cannot read ROI file {path}: {exc}") from exc
    return parse_roi(data)


# --------------------------------------------------------------------------- #
# Raster sources
# --------------------------------------------------------------------------- #

class RasterSource:
    """Row-addressable RGB raster.

    Wraps either an on-disk PNG/TIFF (decoded by Pillow) or an in-memory
    ``(H, W, 3)`` uint8 array. Only the requested rows are materialised per
    call to :meth:`read_region`.
    """

    def __init__(self, path=None, array=None, mpp=None):
        if (path is None) == (array is None):
            raise ValueError("give exactly one of path or array")
        self.path = Path(path) if path is not None else None
        self.mpp = mpp
        self._array = None
        self._image = None
        if array is not None:
            arr = np.asarray(array)
            if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
                raise ImageFormatError("in-memory raster must be HxWx3 uint8")
            self._array = arr
            self.height, self.width = arr.shape[:2]
        else:
            try:
                img = Image.open(self.path)
            except (OSError, ValueError) as exc:
                raise RasterIOError(f"cannot open raster {self.path}: {exc}") from exc
            _check_mode(img.mode, self.path)
            self._image = img
            self.width, self.height = img.size
            if self.mpp is None:
                self.mpp = _mpp_from_metadata(img)
        if self.width < 1 or self.height < 1:
            raise RasterIOError("raster has zero size")

    @classmethod
    def from_array(cls, array, mpp=None):
        return cls(array=array, mpp=mpp)

    def read_region(self, y0, y1, x0, x1) -> np.ndarray:
        """Return rows ``[y0, y1)`` and columns ``[x0, x1)`` as uint8 RGB."""
        if self._array is not None:
            return self._array[y0:y1, x0:x1]
        try:
            region = self._image.crop((x0, y0, x1, y1))
            return _to_rgb_array(region, self.path)
        except OSError as exc:
            raise RasterIOError(f"failed reading {self.path}: {exc}") from exc

    def close(self):
        if self._image is not None:
            self._image.close()


_ACCEPTED_MODES = {"RGB", "RGBA", "L", "LA", "P", "PA", "RGBX"}


def _check_mode(mode, path):
    if mode not in _ACCEPTED_MODES:
        raise ImageFormatError(
            f"{path}: unsupported color model / bit depth {mode!r}; "
            "expected 8-bit RGB, RGBA or grayscale"
        )


def _to_rgb_array(img, path=None):
    _check_mode(img.mode, path)
    if img.mode != "RGB":
        img = img.convert("RGB")
    return np.asarray(img, dtype=np.uint8)


def _mpp_from_metadata(img):
    dpi = img.info.get("dpi")
    if not dpi:
        return None
    try:
        res = float(dpi[0])
    except (TypeError, ValueError, IndexError):
        return None
    if res <= 1.0:
        # Pillow reports 72/1 dpi defaults for files with no real calibration.
        return None
    return 25400.0 / res


def load_core_image(path, mpp=None, core_id=None, stain_state=StainState.STAINED) -> CoreImage:
    """Read an 8-bit PNG/TIFF into a :class:`CoreImage`.

    RGBA inputs lose their alpha channel and grayscale inputs are expanded to
    three channels. 16-bit and float rasters are rejected.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            img.load()
            arr = _to_rgb_array(img, path)
            meta_mpp = _mpp_from_metadata(img)
    except ImageFormatError:
        raise
    except (OSError, ValueError) as exc:
        raise RasterIOError(f"cannot read image {path}: {exc}") from exc
    mpp = mpp if mpp is not None else meta_mpp
    if mpp is None:
        raise ImageFormatError(f"{path}: no resolution metadata; supply mpp explicitly")
    return CoreImage(arr, mpp=float(mpp), core_id=core_id or path.stem, stain_state=stain_state)


def save_core_image(core: CoreImage, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    dpi = 25400.0 / core.mpp
    Image.fromarray(core.pixels).save(path, dpi=(dpi, dpi))
    return path


# --------------------------------------------------------------------------- #
# Core extraction
# --------------------------------------------------------------------------- #

def _edge_arrays(roi: RoiPolygon):
    x0, y0, x1, y1 = [], [], [], []
    for ring in roi.rings:
        n = len(ring)
        for k in range(n):
            a, b = ring[k], ring[(k + 1) % n]
            x0.append(a[0])
            y0.append(a[1])
            x1.append(b[0])
            y1.append(b[1])
    return (np.array(x0), np.array(y0), np.array(x1), np.array(y1))


def polygon_mask(roi: RoiPolygon, row0: int, row1: int, col0: int, col1: int) -> np.ndarray:
    """Even-odd inside test for pixel centres ``(x + 0.5, y + 0.5)``.

    Returns a boolean array for rows ``[row0, row1)`` and columns ``[col0, col1)``
    in source pixel coordinates. Holes fall out of the even-odd rule.
    """
    ex0, ey0, ex1, ey1 = _edge_arrays(roi)
    xc = np.arange(col0, col1, dtype=np.float64) + 0.5
    mask = np.zeros((row1 - row0, col1 - col0), dtype=bool)
    for r, y in enumerate(range(row0, row1)):
        yc = y + 0.5
        crosses = (ey0 > yc) != (ey1 > yc)
        if not crosses.any():
            continue
        a0, b0, a1, b1 = ex0[crosses], ey0[crosses], ex1[crosses], ey1[crosses]
        xs = np.sort(a0 + (yc - b0) * (a1 - a0) / (b1 - b0))
        # number of crossings strictly to the right of each centre
        right = xs.size - np.searchsorted(xs, xc, side="right")
        mask[r] = (right & 1).astype(bool)
    return mask


def roi_window(roi: RoiPolygon, width: int, height: int) -> Tuple[int, int, int, int]:
    """Pixel bounding box ``(row0, row1, col0, col1)`` of the roi clipped to the raster."""
    minx, miny, maxx, maxy = roi.bounds()
    col0 = max(0, int(math.floor(minx)))
    row0 = max(0, int(math.floor(miny)))
    col1 = min(width, int(math.ceil(maxx)))
    row1 = min(height, int(math.ceil(maxy)))
    if col1 <= col0 or row1 <= row0:
        raise EmptyRoiError(
            f"roi {roi.label!r} with bounds {roi.bounds()} lies outside the "
            f"{width}x{height} raster"
        )
    return row0, row1, col0, col1


def extract_core(
    source: RasterSource,
    roi: RoiPolygon,
    fill=WHITE,
    strip_height: int = DEFAULT_STRIP_HEIGHT,
    core_id: Optional[str] = None,
    stain_state=StainState.STAINED,
    mpp: Optional[float] = None,
) -> CoreImage:
    """Crop the roi's bounding box and paint everything outside the polygon with ``fill``.

    The source is visited in horizontal strips of at most ``strip_height``
    rows so the working set stays proportional to ``strip_height * width``.
    Output does not depend on ``strip_height``.
    """
    if strip_height < 1:
        raise ValueError("strip_height must be >= 1")
    mpp = mpp if mpp is not None else source.mpp
    if mpp is None:
        raise ImageFormatError("source resolution unknown; supply mpp")
    row0, row1, col0, col1 = roi_window(roi, source.width, source.height)
    out = np.empty((row1 - row0, col1 - col0, 3), dtype=np.uint8)
    out[...] = np.asarray(fill, dtype=np.uint8)
    for s0 in range(row0, row1, strip_height):
        s1 = min(row1, s0 + strip_height)
        strip = source.read_region(s0, s1, col0, col1)
        inside = polygon_mask(roi, s0, s1, col0, col1)
        dst = out[s0 - row0 : s1 - row0]
        dst[inside] = strip[inside]
    return CoreImage(out, mpp=float(mpp), core_id=core_id or roi.label or "core",
                     stain_state=stain_state)


# --------------------------------------------------------------------------- #
# Resampling
# --------------------------------------------------------------------------- #

def _area_weights(n_in: int, n_out: int) -> sparse.csr_matrix:
    """Row-stochastic ``(n_out, n_in)`` box-filter matrix."""
    scale = n_in / n_out
    rows, cols, vals = [], [], []
    for i in range(n_out):
        lo, hi = i * scale, (i + 1) * scale
        j0, j1 = int(math.floor(lo)), min(n_in, int(math.ceil(hi)))
        for j in range(j0, j1):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                rows.append(i)
                cols.append(j)
                vals.append(overlap / scale)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n_out, n_in))


def area_resize(pixels: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = pixels.shape[:2]
    if (out_h, out_w) == (h, w):
        return pixels.copy()
    wy = _area_weights(h, out_h)
    wx = _area_weights(w, out_w)
    out = np.empty((out_h, out_w, pixels.shape[2]), dtype=np.float64)
    for c in range(pixels.shape[2]):
        tmp = wy @ pixels[..., c].astype(np.float64)
        out[..., c] = (wx @ tmp.T).T
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def downsample_to_mpp(core: CoreImage, target_mpp: float) -> CoreImage:
    """Box-filter downscale so the core sits at ``target_mpp``.

    Output size is ``round(H * s) x round(W * s)`` with ``s = mpp / target_mpp``
    (round half to even, floored at 1).
    """
    if target_mpp < core.mpp:
        raise UpsampleUnsupportedError(
            f"target {target_mpp} MPP is finer than source {core.mpp} MPP; only downscaling is supported"
        )
    s = core.mpp / target_mpp
    out_h = max(1, round(core.height * s))
    out_w = max(1, round(core.width * s))
    return core.with_pixels(area_resize(core.pixels, out_h, out_w), mpp=float(target_mpp))
