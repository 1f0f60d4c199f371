import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from PIL import Image

from conftest import brute_mask, core_of
from vstain.errors import (
    EmptyRoiError,
    ImageFormatError,
    RoiParseError,
    UnsupportedGeometryError,
    UpsampleUnsupportedError,
)
from vstain.ingest import (
    RasterSource,
    RoiPolygon,
    area_resize,
    downsample_to_mpp,
    extract_core,
    load_core_image,
    parse_roi,
    polygon_mask,
    save_core_image,
)

SQUARE = [[0, 0], [10, 0], [10, 10], [0, 10], [0, 0]]


def _poly(coords, name=None):
    props = {"name": name} if name else {}
    return {"type": "Feature", "properties": props,
            "geometry": {"type": "Polygon", "coordinates": coords}}


# --------------------------------------------------------------------------- #
# parse_roi
# --------------------------------------------------------------------------- #

def test_square_polygon():
    rois = parse_roi(json.dumps({"type": "Polygon", "coordinates": [SQUARE]}).encode())
    assert len(rois) == 1
    assert len(rois[0].exterior) == 4
    assert rois[0].holes == []


def test_feature_collection_order_and_labels():
    fc = {"type": "FeatureCollection",
          "features": [_poly([SQUARE], "core1"), _poly([[[20, 20], [30, 20], [30, 30]]], "core2")]}
    rois = parse_roi(json.dumps(fc))
    assert [r.label for r in rois] == ["core1", "core2"]


def test_multipolygon_parts_suffixed():
    geom = {"type": "MultiPolygon", "coordinates": [[SQUARE], [[[20, 20], [30, 20], [30, 30]]]]}
    rois = parse_roi(json.dumps({"type": "Feature", "properties": {"name": "c"}, "geometry": geom}))
    assert [r.label for r in rois] == ["c_0", "c_1"]


def test_hole_excluded_matches_brute_force():
    outer = [[1, 1], [19, 1], [19, 17], [1, 17], [1, 1]]
    hole = [[6, 5], [13, 5], [13, 12], [6, 12], [6, 5]]
    roi = parse_roi(json.dumps({"type": "Polygon", "coordinates": [outer, hole]}))[0]
    assert len(roi.holes) == 1
    got = polygon_mask(roi, 0, 20, 0, 22)
    assert np.array_equal(got, brute_mask(roi.rings, 20, 22))
    assert not got[8, 9]  # inside the hole
    assert got[3, 3]


@pytest.mark.parametrize("payload", [b"{not json", b"[1, 2", b'{"type": "Polygon"}',
                                     b'{"type": "Polygon", "coordinates": [[[0, 0], [1, 1]]]}'])
def test_malformed_roi(payload):
    with pytest.raises(RoiParseError):
        parse_roi(payload)


def test_malformed_error_has_offset():
    with pytest.raises(RoiParseError) as exc:
        parse_roi(b'{"type": "Polygon", "coordinates": [[[0,0],[1,0],[1,1]]]')
    assert exc.value.offset is not None


@pytest.mark.parametrize("geom", [{"type": "Point", "coordinates": [1, 2]},
                                  {"type": "LineString", "coordinates": [[0, 0], [1, 1]]}])
def test_unsupported_geometry(geom):
    with pytest.raises(UnsupportedGeometryError):
        parse_roi(json.dumps(geom))


# --------------------------------------------------------------------------- #
# extract_core
# --------------------------------------------------------------------------- #

def test_full_frame_roi_is_identity(rng):
    src = rng.integers(0, 256, (64, 64, 3), dtype=np.uint8)
    roi = RoiPolygon([(0, 0), (64, 0), (64, 64), (0, 64)])
    core = extract_core(RasterSource(array=src, mpp=0.25), roi)
    assert np.array_equal(core.pixels, src)


def test_strip_height_7_matches_single_pass(rng):
    src = rng.integers(0, 256, (100, 100, 3), dtype=np.uint8)
    roi = RoiPolygon([(40.3, 30.2), (60.1, 31.7), (59.4, 50.9), (41.2, 49.5)])
    a = extract_core(RasterSource(array=src, mpp=0.25), roi, strip_height=7)
    b = extract_core(RasterSource(array=src, mpp=0.25), roi, strip_height=10_000)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_triangle_inside_source_outside_fill(rng):
    src = rng.integers(0, 255, (40, 40, 3), dtype=np.uint8)
    tri = [(5.5, 3.0), (33.2, 12.7), (11.0, 36.4)]
    roi = RoiPolygon(tri)
    core = extract_core(RasterSource(array=src, mpp=0.25), roi)
    r0, c0 = 3, 5  # floor of the bounding box
    h, w = core.height, core.width
    inside = brute_mask([[(x - c0, y - r0) for x, y in tri]], h, w)
    window = src[r0:r0 + h, c0:c0 + w]
    assert np.array_equal(core.pixels[inside], window[inside])
    assert np.all(core.pixels[~inside] == 255)


def test_roi_outside_raster():
    src = np.zeros((10, 10, 3), dtype=np.uint8)
    with pytest.raises(EmptyRoiError):
        extract_core(RasterSource(array=src, mpp=1.0), RoiPolygon([(20, 20), (30, 20), (30, 30)]))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), strip=st.integers(1, 60), n=st.integers(3, 9))
def test_strip_invariance_property(seed, strip, n):
    r = np.random.default_rng(seed)
    src = r.integers(0, 256, (50, 45, 3), dtype=np.uint8)
    ang = np.sort(r.uniform(0, 2 * np.pi, n))
    rad = r.uniform(5, 20, n)
    pts = [(22 + rad[k] * np.cos(ang[k]), 25 + rad[k] * np.sin(ang[k])) for k in range(n)]
    roi = RoiPolygon(pts)
    a = extract_core(RasterSource(array=src, mpp=1.0), roi, strip_height=strip)
    b = extract_core(RasterSource(array=src, mpp=1.0), roi, strip_height=10_000)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_extract_from_png_file(tmp_path, rng):
    src = rng.integers(0, 256, (30, 40, 3), dtype=np.uint8)
    Image.fromarray(src).save(tmp_path / "s.png")
    roi = RoiPolygon([(2, 2), (30, 2), (30, 25), (2, 25)])
    from_file = extract_core(RasterSource(path=tmp_path / "s.png", mpp=0.25), roi, strip_height=4)
    in_mem = extract_core(RasterSource(array=src, mpp=0.25), roi)
    assert np.array_equal(from_file.pixels, in_mem.pixels)


# --------------------------------------------------------------------------- #
# downsample_to_mpp
# --------------------------------------------------------------------------- #

def test_same_mpp_unchanged(rng):
    core = core_of(rng.integers(0, 256, (17, 23, 3)), mpp=0.5)
    out = downsample_to_mpp(core, 0.5)
    assert out.pixels.shape == core.pixels.shape
    assert np.abs(out.pixels.astype(int) - core.pixels).max() <= 1


def test_native_to_half_micron_dims():
    core = core_of(np.zeros((1000, 1000, 3)), mpp=0.1377)
    out = downsample_to_mpp(core, 0.5)
    assert out.pixels.shape[:2] == (275, 275)
    assert out.mpp == 0.5


def test_two_by_two_box_average():
    px = np.zeros((2, 2, 3), dtype=np.uint8)
    px[1, :] = 255  # values {0, 0, 255, 255}
    out = downsample_to_mpp(core_of(px, mpp=0.25), 0.5)
    assert out.pixels.shape == (1, 1, 3)
    assert np.all(out.pixels == 128)  # 127.5 rounds half to even


def test_upsample_rejected():
    with pytest.raises(UpsampleUnsupportedError):
        downsample_to_mpp(core_of(np.zeros((4, 4, 3)), mpp=1.0), 0.5)


def test_area_resize_preserves_constant():
    px = np.full((37, 29, 3), 77, dtype=np.uint8)
    assert np.all(area_resize(px, 11, 8) == 77)


def test_area_resize_preserves_mean(rng):
    px = rng.integers(0, 256, (40, 60, 3), dtype=np.uint8)
    out = area_resize(px, 20, 30)  # exact factor 2: each output is a 2x2 mean
    ref = px.astype(float).reshape(20, 2, 30, 2, 3).mean(axis=(1, 3))
    assert np.array_equal(out, np.rint(ref).astype(np.uint8))


# --------------------------------------------------------------------------- #
# image I/O
# --------------------------------------------------------------------------- #

def test_load_rgb_png(tmp_path, rng):
    px = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    Image.fromarray(px).save(tmp_path / "a.png")
    core = load_core_image(tmp_path / "a.png", mpp=0.5)
    assert core.pixels.shape == (32, 32, 3)
    assert np.array_equal(core.pixels, px)


def test_rgba_alpha_discarded(tmp_path, rng):
    px = rng.integers(0, 256, (8, 8, 4), dtype=np.uint8)
    Image.fromarray(px).save(tmp_path / "a.png")
    core = load_core_image(tmp_path / "a.png", mpp=0.5)
    assert np.array_equal(core.pixels, px[..., :3])


def test_16bit_tiff_rejected(tmp_path):
    Image.fromarray(np.zeros((8, 8), dtype=np.uint16)).save(tmp_path / "a.tif")
    with pytest.raises(ImageFormatError):
        load_core_image(tmp_path / "a.tif", mpp=0.5)


def test_save_roundtrip_keeps_mpp(tmp_path, rng):
    core = core_of(rng.integers(0, 256, (9, 7, 3)), mpp=0.25)
    save_core_image(core, tmp_path / "c.png")
    back = load_core_image(tmp_path / "c.png")
    assert back.mpp == pytest.approx(0.25, rel=1e-6)
    assert np.array_equal(back.pixels, core.pixels)
