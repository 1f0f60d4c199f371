"""Deterministic synthetic slides, references and mock backends.

Used by the test-suite and by ``vstain synth`` to produce a small bundled
dataset that exercises every pipeline stage without real slides or model
weights.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import yaml
from PIL import Image
from scipy.ndimage import gaussian_filter

from .harmonize import od_to_rgb
from .registration import RigidTransform, warp_array

# Typical H&E optical-density directions (rows: R, G, B).
HEMATOXYLIN = np.array([0.650, 0.704, 0.286])
EOSIN = np.array([0.072, 0.990, 0.105])
UNSTAINED = np.array([0.45, 0.55, 0.70])


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def stain_matrix(h=HEMATOXYLIN, e=EOSIN) -> np.ndarray:
    return np.stack([unit(h), unit(e)], axis=1)


def perturbed_stain_matrix(rng, degrees=8.0) -> np.ndarray:
    """Reference stain vectors rotated by a few degrees, kept non-negative."""
    cols = []
    for v in (HEMATOXYLIN, EOSIN):
        while True:
            axis = unit(rng.normal(size=3))
            ang = math.radians(rng.uniform(0.5, 1.0) * degrees)
            k = np.cross(axis, v)
            w = v * math.cos(ang) + k * math.sin(ang) + axis * (axis @ v) * (1 - math.cos(ang))
            if np.all(w > 0.02):
                cols.append(unit(w))
                break
    return np.stack(cols, axis=1)


def render_od(conc: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """``(..., k)`` concentrations through a ``(3, k)`` stain matrix to uint8 RGB."""
    return od_to_rgb(conc @ np.asarray(matrix).T)


def two_stain_image(shape, matrix, rng, pure_fraction=0.3, c_max=(1.2, 1.0)) -> np.ndarray:
    """Pixels painted with two stains: some pure hematoxylin, some pure eosin, rest mixed."""
    h, w = shape
    n = h * w
    kind = rng.random(n)
    c = np.zeros((n, 2))
    pure_h = kind < pure_fraction
    pure_e = (kind >= pure_fraction) & (kind < 2 * pure_fraction)
    mixed = ~(pure_h | pure_e)
    c[pure_h, 0] = rng.uniform(0.35, c_max[0], pure_h.sum())
    c[pure_e, 1] = rng.uniform(0.3, c_max[1], pure_e.sum())
    c[mixed] = rng.uniform(0.1, 1.0, (mixed.sum(), 2)) * np.asarray(c_max)
    return render_od(c, matrix).reshape(h, w, 3)


def smooth_field(shape, sigma, rng) -> np.ndarray:
    f = gaussian_filter(rng.random(shape), sigma)
    f -= f.min()
    top = f.max()
    return f / top if top > 0 else f


def texture(shape, rng, sigma=3.0) -> np.ndarray:
    """Band-limited grayscale texture in roughly [20, 220]."""
    a = gaussian_filter(rng.random(shape), sigma) + 0.5 * gaussian_filter(rng.random(shape), sigma / 2)
    a = (a - a.min()) / (a.max() - a.min())
    return a * 200.0 + 20.0


def tissue_fields(shape, rng):
    """Tissue support and hematoxylin / eosin concentration maps for one core."""
    h, w = shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = h / 2.0, w / 2.0
    ry, rx = 0.36 * h, 0.40 * w
    wobble = 0.12 * (smooth_field(shape, max(h, w) / 10, rng) - 0.5)
    support = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1.0 + wobble
    nuclei = smooth_field(shape, 1.8, rng)
    nuclei = np.clip((nuclei - 0.55) * 4.0, 0, 1)
    glands = smooth_field(shape, 10.0, rng)
    c_h = (0.15 + 0.9 * nuclei + 0.25 * glands) * support
    c_e = (0.25 + 0.55 * smooth_field(shape, 4.0, rng) * (1 - nuclei)) * support
    return support, c_h, c_e


def render_he(c_h, c_e, matrix, brightness=1.0) -> np.ndarray:
    conc = np.stack([c_h, c_e], axis=-1) * brightness
    return render_od(conc, matrix)


def render_unstained(c_h, c_e, support, gain=0.22, tint=UNSTAINED) -> np.ndarray:
    density = (0.6 * c_h + 0.8 * c_e + 0.25) * support
    od = density[..., None] * gain * unit(tint)
    return od_to_rgb(od)


def roi_polygon_for(support, n_vertices=24, margin=6.0, offset=(0.0, 0.0)):
    """Polygon around the support's bounding ellipse, in slide coordinates."""
    ys, xs = np.nonzero(support)
    cy, cx = ys.mean(), xs.mean()
    ry = (ys.max() - ys.min()) / 2.0 + margin
    rx = (xs.max() - xs.min()) / 2.0 + margin
    pts = []
    for k in range(n_vertices):
        a = 2 * math.pi * k / n_vertices
        pts.append([round(cx + offset[0] + rx * math.cos(a), 2), round(cy + offset[1] + ry * math.sin(a), 2)])
    pts.append(pts[0])
    return pts


def geojson_for(rings, label) -> dict:
    return {
        "type": "FeatureCollection",
        "features": [{
            "type": "Feature",
            "properties": {"name": label, "classification": {"name": "Tissue"}},
            "geometry": {"type": "Polygon", "coordinates": [rings]},
        }],
    }


# Mock models: a destaining colour transform that pulls red and blue down and
# green up, and its exact inverse as the staining model.
DESTAIN_MATRIX = [[0.85, 0.0, 0.0], [0.0, 0.8, 0.0], [0.0, 0.0, 0.85]]
DESTAIN_OFFSET = [0.0, 48.0, 0.0]


def destain_backend() -> dict:
    return {"kind": "affine_color", "params": {"matrix": DESTAIN_MATRIX, "offset": DESTAIN_OFFSET}}


def stain_backend() -> dict:
    m = np.linalg.inv(np.array(DESTAIN_MATRIX))
    b = -m @ np.array(DESTAIN_OFFSET)
    return {"kind": "affine_color", "params": {"matrix": m.tolist(), "offset": b.tolist()}}


def _save(arr, path, mpp):
    dpi = 25400.0 / mpp
    Image.fromarray(arr).save(path, dpi=(dpi, dpi))


def make_dataset(out_dir, n_cores=6, seed=0, slide_size=(560, 520), source_mpp=0.25,
                 n_training_refs=4, patch_size=128) -> Path:
    """Write slides, ROIs, references, ``manifest.yaml`` and ``config.yaml``.

    Returns the manifest path. Each core gets an H&E scan and an unstained
    scan of the same tissue; the unstained scan is offset and slightly
    rotated, so the pair is unregistered.
    """
    out = Path(out_dir)
    (out / "slides").mkdir(parents=True, exist_ok=True)
    (out / "rois").mkdir(exist_ok=True)
    (out / "reference").mkdir(exist_ok=True)
    rng = np.random.default_rng(seed)
    site_matrix = perturbed_stain_matrix(rng, degrees=6.0)
    ref_matrix = stain_matrix()
    cores = []
    for i in range(n_cores):
        cid = f"core{i + 1:02d}"
        support, c_h, c_e = tissue_fields(slide_size, rng)
        he = render_he(c_h, c_e, site_matrix, brightness=rng.uniform(0.8, 1.0))
        t = RigidTransform(math.radians(rng.uniform(-2, 2)), rng.uniform(-6, 6), rng.uniform(-6, 6))
        moved = [warp_array(f, t, fill=(0, 0, 0)) for f in (c_h, c_e, support.astype(np.float64))]
        us_support = moved[2] > 0.5
        us = render_unstained(moved[0], moved[1], us_support)
        _save(he, out / "slides" / f"{cid}_he.png", source_mpp)
        _save(us, out / "slides" / f"{cid}_unstained.png", source_mpp)
        (out / "rois" / f"{cid}_he.geojson").write_text(
            json.dumps(geojson_for(roi_polygon_for(support), cid)))
        (out / "rois" / f"{cid}_unstained.geojson").write_text(
            json.dumps(geojson_for(roi_polygon_for(us_support), cid)))
        cores.append({
            "core_id": cid,
            "unstained_path": f"slides/{cid}_unstained.png",
            "stained_path": f"slides/{cid}_he.png",
            "roi_unstained": f"rois/{cid}_unstained.geojson",
            "roi_stained": f"rois/{cid}_he.geojson",
            "source_mpp": source_mpp,
        })

    ref_shape = (slide_size[0] // 2, slide_size[1] // 2)
    support, c_h, c_e = tissue_fields(ref_shape, rng)
    _save(render_he(c_h, c_e, ref_matrix), out / "reference" / "he_reference.png", 0.5)
    _save(render_unstained(c_h, c_e, support, gain=0.3, tint=[0.40, 0.50, 0.75]),
          out / "reference" / "unstained_reference.png", 0.5)
    training = []
    for k in range(n_training_refs):
        support, c_h, c_e = tissue_fields(ref_shape, rng)
        name = f"reference/he_train_{k + 1:02d}.png"
        _save(render_he(c_h, c_e, ref_matrix, brightness=rng.uniform(0.9, 1.1)), out / name, 0.5)
        training.append(name)

    manifest = {
        "cores": cores,
        "reference": {
            "he_reference_path": "reference/he_reference.png",
            "unstained_reference_path": "reference/unstained_reference.png",
            "reference_mpp": 0.5,
            "he_training_set": training,
        },
        "comparisons": list(_all_comparisons()),
    }
    config = {
        "target_mpp": 0.5,
        "patch_size": patch_size,
        "tissue_min": 0.05,
        "strip_height": 200,
        "backends": {"destain": destain_backend(), "stain": stain_backend()},
        "pathways": ["destain", "direct_stain", "destain_restain"],
        "align": True,
    }
    (out / "manifest.yaml").write_text(yaml.safe_dump(manifest, sort_keys=False))
    (out / "config.yaml").write_text(yaml.safe_dump(config, sort_keys=False))
    return out / "manifest.yaml"


def _all_comparisons():
    from .evaluation.pair import COMPARISONS
    return COMPARISONS.keys()
