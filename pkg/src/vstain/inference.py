"""Patchwise model backends and the destain / stain / destain-restain pathways."""

from __future__ import annotations

import logging
import os
import shlex
import subprocess
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
from PIL import Image

from .errors import BackendFailureError, ContractViolationError, IncompleteOutputError
from .harmonize import TissueMask
from .ingest import WHITE, CoreImage, StainState
from .tiling import (
    DEFAULT_PATCH_SIZE,
    DEFAULT_TISSUE_MIN,
    Patch,
    PatchGrid,
    extract_patches,
    make_grid,
    reconstruct,
)

log = logging.getLogger(__name__)

TIMEOUT_ENV = "VSTAIN_BACKEND_TIMEOUT"
BACKEND_KINDS = ("identity", "affine_color", "external_command", "precomputed_dir")


@dataclass
class BackendSpec:
    """How to turn a batch of patches into model outputs.

    ``params`` by kind:

    * ``affine_color``: ``matrix`` (3x3) and ``offset`` (3,), applied as
      ``clip(M @ rgb + b)`` in 8-bit units.
    * ``external_command``: ``command`` template containing ``{in_dir}`` and
      ``{out_dir}``; optional ``in_dir``/``out_dir`` exchange directories
      (temporary ones otherwise) and ``timeout`` seconds.
    * ``precomputed_dir``: ``directory`` holding ``{core_id}_r{row}_c{col}.png``.
    """

    kind: str = "identity"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in BACKEND_KINDS:
            raise ValueError(f"unknown backend kind {self.kind!r}")
        p = self.params
        if self.kind == "affine_color":
            m = np.asarray(p.get("matrix", np.eye(3)), dtype=np.float64)
            b = np.asarray(p.get("offset", np.zeros(3)), dtype=np.float64)
            if m.shape != (3, 3) or b.shape != (3,):
                raise ValueError("affine_color needs a 3x3 matrix and a 3-vector offset")
            if not (np.all(np.isfinite(m)) and np.all(np.isfinite(b))):
                raise ValueError("affine_color parameters must be finite")
            self.params = dict(p, matrix=m.tolist(), offset=b.tolist())
        elif self.kind == "external_command":
            cmd = p.get("command")
            text = cmd if isinstance(cmd, str) else " ".join(cmd or [])
            if "{in_dir}" not in text or "{out_dir}" not in text:
                raise ValueError("external_command template needs {in_dir} and {out_dir}")
        elif self.kind == "precomputed_dir":
            if not p.get("directory"):
                raise ValueError("precomputed_dir needs a directory")

    @classmethod
    def from_dict(cls, d) -> "BackendSpec":
        d = dict(d)
        kind = d.pop("kind", "identity")
        params = d.pop("params", None)
        if params is None:
            params = d
        return cls(kind, dict(params))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params}


PATHWAYS = {
    "destain": (1, StainState.VIRTUAL_DESTAINED),
    "direct_stain": (1, StainState.VIRTUAL_STAINED),
    "destain_restain": (2, StainState.VIRTUAL_RESTAINED),
}


@dataclass
class Pathway:
    name: str
    stages: List[BackendSpec]

    def __post_init__(self):
        if self.name not in PATHWAYS:
            raise ValueError(f"unknown pathway {self.name!r}")
        need = PATHWAYS[self.name][0]
        if len(self.stages) != need:
            raise ValueError(f"pathway {self.name} takes {need} stage(s), got {len(self.stages)}")


# --------------------------------------------------------------------------- #
# Backends
# --------------------------------------------------------------------------- #

def write_patches(patches, directory) -> List[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for p in patches:
        path = directory / p.filename
        Image.fromarray(p.pixels).save(path)
        paths.append(path)
    return paths


def _read_outputs(patches, directory, backend_name) -> List[Patch]:
    directory = Path(directory)
    out = []
    for p in patches:
        path = directory / p.filename
        if not path.is_file():
            raise IncompleteOutputError(f"{backend_name}: no output for patch {p.filename} in {directory}")
        with Image.open(path) as img:
            if img.mode not in ("RGB", "RGBA"):
                raise ContractViolationError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
        if arr.shape != p.pixels.shape:
            raise ContractViolationError(
                f"{path}: output shape {arr.shape} differs from input {p.pixels.shape}"
            )
        out.append(Patch(arr, p.row, p.col, p.core_id))
    return out


def affine_color(pixels: np.ndarray, matrix, offset) -> np.ndarray:
    m = np.asarray(matrix, dtype=np.float64)
    b = np.asarray(offset, dtype=np.float64)
    out = pixels.astype(np.float64) @ m.T + b
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def _command_args(template, in_dir, out_dir) -> List[str]:
    parts = shlex.split(template) if isinstance(template, str) else list(template)
    return [a.replace("{in_dir}", str(in_dir)).replace("{out_dir}", str(out_dir)) for a in parts]


def _run_external(patches, params) -> List[Patch]:
    timeout = params.get("timeout")
    if timeout is None and os.environ.get(TIMEOUT_ENV):
        timeout = float(os.environ[TIMEOUT_ENV])
    with tempfile.TemporaryDirectory(prefix="vstain_exchange_") as tmp:
        in_dir = Path(params.get("in_dir") or Path(tmp) / "in")
        out_dir = Path(params.get("out_dir") or Path(tmp) / "out")
        out_dir.mkdir(parents=True, exist_ok=True)
        write_patches(patches, in_dir)
        args = _command_args(params["command"], in_dir, out_dir)
        log.info("running backend: %s", " ".join(args))
        try:
            proc = subprocess.run(args, capture_output=True, text=True, timeout=timeout)
        except FileNotFoundError as exc:
            raise BackendFailureError(f"backend executable not found: {args[0]}") from exc
        except subprocess.TimeoutExpired as exc:
            raise BackendFailureError(f"backend timed out after {timeout}s",
                                      stderr=str(exc.stderr or "")) from exc
        if proc.stderr:
            log.info("backend stderr: %s", proc.stderr.strip())
        if proc.returncode != 0:
            raise BackendFailureError(
                f"backend exited with status {proc.returncode}: {proc.stderr.strip()[-2000:]}",
                returncode=proc.returncode, stderr=proc.stderr,
            )
        return _read_outputs(patches, out_dir, "external_command")


def transform_patches(patches: List[Patch], backend: BackendSpec) -> List[Patch]:
    """Run one backend over a core's patches; the (row, col) set is preserved."""
    if not patches:
        return []
    size = patches[0].pixels.shape
    for p in patches:
        if p.pixels.ndim != 3 or p.pixels.shape[0] != p.pixels.shape[1] or p.pixels.shape != size:
            raise ContractViolationError(f"patch {p.filename} is not a {size[0]}-square RGB patch")
    if backend.kind == "identity":
        return list(patches)
    if backend.kind == "affine_color":
        m, b = backend.params["matrix"], backend.params["offset"]
        return [Patch(affine_color(p.pixels, m, b), p.row, p.col, p.core_id) for p in patches]
    if backend.kind == "external_command":
        return _run_external(patches, backend.params)
    return _read_outputs(patches, backend.params["directory"], "precomputed_dir")


# --------------------------------------------------------------------------- #
# Pathways
# --------------------------------------------------------------------------- #

@dataclass
class PathwayResult:
    output: CoreImage
    intermediates: Dict[str, CoreImage]
    grid: PatchGrid
    warnings: List[str] = field(default_factory=list)


def run_pathway(core: CoreImage, mask: Optional[TissueMask], pathway: Pathway,
                patch_size: int = DEFAULT_PATCH_SIZE, tissue_min: float = DEFAULT_TISSUE_MIN,
                fill=WHITE) -> PathwayResult:
    """Tile, transform per stage, reconstruct.

    The destain-restain loop reconstructs the virtual destained core, then
    re-tiles it on the stage-1 grid (same cells, same kept flags) for the
    staining stage.
    """
    grid = make_grid(core, mask, patch_size, tissue_min)
    warnings = []
    if not grid.kept_cells:
        msg = f"{core.core_id}: no patch passes tissue_min={tissue_min}; output is background only"
        log.warning(msg)
        warnings.append(msg)

    def _assemble(patches, state):
        return reconstruct(patches, grid, fill=fill, mpp=core.mpp, core_id=core.core_id,
                           stain_state=state)

    intermediates = {}
    if pathway.name == "destain_restain":
        vds = _assemble(transform_patches(extract_patches(core, grid), pathway.stages[0]),
                        StainState.VIRTUAL_DESTAINED)
        intermediates[StainState.VIRTUAL_DESTAINED.value] = vds
        final = _assemble(transform_patches(extract_patches(vds, grid), pathway.stages[1]),
                          StainState.VIRTUAL_RESTAINED)
    else:
        state = PATHWAYS[pathway.name][1]
        final = _assemble(transform_patches(extract_patches(core, grid), pathway.stages[0]), state)
    intermediates[final.stain_state.value] = final
    return PathwayResult(final, intermediates, grid, warnings)
