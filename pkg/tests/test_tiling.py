import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import constant_core, core_of
from vstain.errors import DuplicatePatchError, GridMismatchError, PatchRangeError
from vstain.harmonize import TissueMask, tissue_mask
from vstain.tiling import (
    PatchGrid,
    extract_patches,
    make_grid,
    parse_patch_filename,
    patch_filename,
    reconstruct,
)


def _random_core(rng, h, w):
    return core_of(rng.integers(0, 256, (h, w, 3)))


def test_exact_fit_grid():
    g = make_grid(constant_core(0, (2048, 2048)), None, 1024)
    assert (g.rows, g.cols) == (2, 2)
    assert all(c.pad_bottom == 0 and c.pad_right == 0 for c in g.cells)


def test_non_divisible_grid_padding():
    g = make_grid(constant_core(0, (1500, 1000)), None, 1024)
    assert (g.rows, g.cols) == (2, 1)
    assert g.cell(0, 0).pad_bottom == 0
    assert g.cell(1, 0).pad_bottom == 548
    assert g.cell(0, 0).pad_right == g.cell(1, 0).pad_right == 24


def test_background_core_keeps_nothing():
    core = constant_core(255, (100, 100))
    g = make_grid(core, tissue_mask(core), 32, tissue_min=0.05)
    assert g.kept_cells == []


def test_tissue_fraction_on_unpadded_area():
    bits = np.zeros((10, 10), dtype=bool)
    bits[8:, :] = True  # bottom-right cell is 2x2 unpadded rows of tissue
    g = make_grid(constant_core(0, (10, 10)), TissueMask(bits), 8, tissue_min=0.5)
    assert g.cell(1, 0).tissue_fraction == 1.0
    assert g.cell(0, 0).tissue_fraction == 0.0
    assert [(c.row, c.col) for c in g.kept_cells] == [(1, 0), (1, 1)]


def test_exact_fit_patches_partition(rng):
    core = _random_core(rng, 64, 96)
    patches = extract_patches(core, make_grid(core, None, 32))
    assert len(patches) == 6
    rows = [np.concatenate([p.pixels for p in patches[r * 3:(r + 1) * 3]], axis=1) for r in range(2)]
    assert np.array_equal(np.concatenate(rows, axis=0), core.pixels)


def test_boundary_padding_is_zero(rng):
    core = core_of(rng.integers(1, 256, (40, 50, 3)))
    patches = extract_patches(core, make_grid(core, None, 32))
    last = patches[-1]
    assert (last.row, last.col) == (1, 1)
    assert np.all(last.pixels[8:] == 0) and np.all(last.pixels[:, 18:] == 0)


def test_dropped_cells_absent(rng):
    core = _random_core(rng, 64, 64)
    bits = np.zeros((64, 64), dtype=bool)
    bits[:32, :32] = True
    g = make_grid(core, TissueMask(bits), 32, tissue_min=0.5)
    patches = extract_patches(core, g)
    assert len(patches) == sum(c.kept for c in g.cells) == 1


def test_roundtrip_byte_identical(rng):
    core = _random_core(rng, 77, 130)
    g = make_grid(core, None, 32, tissue_min=0.0)
    out = reconstruct(extract_patches(core, g), g, mpp=core.mpp)
    assert out.pixels.tobytes() == core.pixels.tobytes()


def test_missing_cell_is_fill(rng):
    core = _random_core(rng, 64, 64)
    g = make_grid(core, None, 32)
    patches = extract_patches(core, g)[1:]
    out = reconstruct(patches, g, fill=(255, 255, 255))
    assert np.all(out.pixels[:32, :32] == 255)
    assert np.array_equal(out.pixels[32:], core.pixels[32:])


def test_shuffled_patches_same_output(rng):
    core = _random_core(rng, 90, 70)
    g = make_grid(core, None, 32)
    patches = extract_patches(core, g)
    order = rng.permutation(len(patches))
    a = reconstruct(patches, g)
    b = reconstruct([patches[i] for i in order], g)
    assert a.pixels.tobytes() == b.pixels.tobytes()


def test_duplicate_and_range_errors(rng):
    core = _random_core(rng, 64, 64)
    g = make_grid(core, None, 32)
    p = extract_patches(core, g)
    with pytest.raises(DuplicatePatchError):
        reconstruct(p + [p[0]], g)
    p[0].row = 5
    with pytest.raises(PatchRangeError):
        reconstruct(p, g)


def test_grid_mismatch(rng):
    g = make_grid(_random_core(rng, 64, 64), None, 32)
    with pytest.raises(GridMismatchError):
        extract_patches(_random_core(rng, 60, 64), g)


def test_grid_serialization(tmp_path, rng):
    core = _random_core(rng, 50, 70)
    g = make_grid(core, tissue_mask(core), 32)
    back = PatchGrid.load(g.save(tmp_path / "g.json"))
    assert back.to_dict() == g.to_dict()


def test_patch_filename_roundtrip():
    name = patch_filename("core_07", 3, 12)
    assert name == "core_07_r3_c12.png"
    assert parse_patch_filename(name) == ("core_07", 3, 12)
    assert parse_patch_filename("nope.png") is None


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 300), w=st.integers(1, 300), ps=st.sampled_from([1, 7, 64, 257]),
       seed=st.integers(0, 1000))
def test_roundtrip_property(h, w, ps, seed):
    core = _random_core(np.random.default_rng(seed), h, w)
    g = make_grid(core, None, ps, tissue_min=0.0)
    assert reconstruct(extract_patches(core, g), g).pixels.tobytes() == core.pixels.tobytes()
