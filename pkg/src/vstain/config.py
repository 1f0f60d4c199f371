"""Manifest and run-configuration files (YAML).

Manifest::

    cores:
      - core_id: core01
        unstained_path: slides/core01_unstained.png
        stained_path: slides/core01_he.png
        roi_unstained: rois/core01_unstained.geojson
        roi_stained: rois/core01_he.geojson
        source_mpp: 0.25
    reference:
      he_reference_path: reference/he_reference.png
      unstained_reference_path: reference/unstained_reference.png
      reference_mpp: 0.5                # optional, default target_mpp
      he_training_set: [reference/he_train_01.png]   # optional, domain shift
    comparisons: [GUS_vs_VDS, GHE_vs_VHER]          # optional, default all

Relative paths resolve against the manifest's directory. See README for the
configuration keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import yaml

from .errors import ConfigError
from .evaluation.pair import COMPARISONS
from .harmonize import ChannelWeights
from .inference import BackendSpec, PATHWAYS
from .registration import EccParams

PATHWAY_ROLES = {
    "destain": ("vds",),
    "direct_stain": ("vhe",),
    "destain_restain": ("vds", "vher"),
}
BASE_ROLES = ("raw_gus", "raw_ghe", "gus", "ghe")


@dataclass
class CoreEntry:
    core_id: str
    unstained_path: Path
    stained_path: Path
    roi_unstained: Path
    roi_stained: Path
    source_mpp: float


@dataclass
class Manifest:
    cores: List[CoreEntry]
    he_reference_path: Path
    unstained_reference_path: Path
    reference_mpp: Optional[float] = None
    he_training_set: List[Path] = field(default_factory=list)
    comparisons: List[str] = field(default_factory=lambda: list(COMPARISONS))
    base_dir: Path = Path(".")

    def relative(self, path) -> str:
        """Path as written relative to the manifest directory, for reports."""
        try:
            return Path(path).resolve().relative_to(self.base_dir.resolve()).as_posix()
        except ValueError:
            return str(path)


def _read_yaml(path) -> dict:
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return data


def load_manifest(path, check_files: bool = True) -> Manifest:
    path = Path(path)
    data = _read_yaml(path)
    base = path.parent

    def _p(value, what):
        if not value:
            raise ConfigError(f"manifest: missing {what}")
        p = Path(value)
        return p if p.is_absolute() else base / p

    cores = []
    seen = set()
    for i, c in enumerate(data.get("cores") or []):
        if not isinstance(c, dict):
            raise ConfigError(f"manifest: core entry {i} is not a mapping")
        cid = str(c.get("core_id", "")).strip()
        if not cid:
            raise ConfigError(f"manifest: core entry {i} has no core_id")
        if cid in seen:
            raise ConfigError(f"manifest: duplicate core_id {cid!r}")
        seen.add(cid)
        try:
            mpp = float(c.get("source_mpp"))
        except (TypeError, ValueError):
            raise ConfigError(f"manifest: core {cid} needs a numeric source_mpp") from None
        if mpp <= 0:
            raise ConfigError(f"manifest: core {cid} source_mpp must be positive")
        cores.append(CoreEntry(
            cid,
            _p(c.get("unstained_path"), f"unstained_path for {cid}"),
            _p(c.get("stained_path"), f"stained_path for {cid}"),
            _p(c.get("roi_unstained"), f"roi_unstained for {cid}"),
            _p(c.get("roi_stained"), f"roi_stained for {cid}"),
            mpp,
        ))
    if not cores:
        raise ConfigError("manifest: no cores listed")

    ref = data.get("reference") or {}
    comparisons = data.get("comparisons") or list(COMPARISONS)
    unknown = [c for c in comparisons if c not in COMPARISONS]
    if unknown:
        raise ConfigError(f"manifest: unknown comparisons {unknown}; choose from {list(COMPARISONS)}")
    m = Manifest(
        cores=cores,
        he_reference_path=_p(ref.get("he_reference_path"), "reference.he_reference_path"),
        unstained_reference_path=_p(ref.get("unstained_reference_path"),
                                    "reference.unstained_reference_path"),
        reference_mpp=float(ref["reference_mpp"]) if ref.get("reference_mpp") else None,
        he_training_set=[_p(p, "training image") for p in ref.get("he_training_set") or []],
        comparisons=list(comparisons),
        base_dir=base,
    )
    if check_files:
        # ROI and slide files are checked per core at extraction time, so a
        # single missing file only fails that core.
        for p in [m.he_reference_path, m.unstained_reference_path] + m.he_training_set:
            if not p.is_file():
                raise ConfigError(f"manifest: referenced file does not exist: {p}")
    return m


@dataclass
class RunConfig:
    target_mpp: float = 0.5
    patch_size: int = 1024
    tissue_min: float = 0.05
    strip_height: int = 10_000
    mask_strategy: str = "luminance_threshold"
    mask_threshold: float = 0.88
    od_beta: float = 0.15
    angle_alpha: float = 1.0
    od_reject: str = "all"
    channel_weights: ChannelWeights = field(default_factory=ChannelWeights)
    backends: Dict[str, BackendSpec] = field(default_factory=lambda: {
        "destain": BackendSpec("identity"), "stain": BackendSpec("identity")})
    pathways: List[str] = field(default_factory=lambda: list(PATHWAYS))
    ecc: EccParams = field(default_factory=EccParams)
    align: bool = True
    alpha: float = 0.05
    output_dir: Optional[Path] = None
    jobs: int = 1

    def validate(self):
        errs = []
        if not self.target_mpp > 0:
            errs.append("target_mpp must be > 0")
        if self.patch_size < 1:
            errs.append("patch_size must be >= 1")
        if not 0 <= self.tissue_min <= 1:
            errs.append("tissue_min must be in [0, 1]")
        if self.strip_height < 1:
            errs.append("strip_height must be >= 1")
        if self.mask_strategy not in ("luminance_threshold", "otsu"):
            errs.append("mask.strategy must be luminance_threshold or otsu")
        if not 0 <= self.mask_threshold <= 1:
            errs.append("mask.threshold must be in [0, 1]")
        if self.od_beta < 0:
            errs.append("macenko.od_beta must be >= 0")
        if not 0 <= self.angle_alpha < 50:
            errs.append("macenko.angle_alpha must be in [0, 50)")
        if self.od_reject not in ("all", "any"):
            errs.append("macenko.reject must be 'all' or 'any'")
        for p in self.pathways:
            if p not in PATHWAYS:
                errs.append(f"unknown pathway {p!r}")
        if self.ecc.max_iters < 1 or self.ecc.eps <= 0 or self.ecc.pyramid_levels < 1:
            errs.append("ecc parameters out of range")
        if not 0 < self.alpha < 1:
            errs.append("alpha must be in (0, 1)")
        if self.jobs < 1:
            errs.append("jobs must be >= 1")
        for role in ("destain", "stain"):
            if role not in self.backends:
                errs.append(f"backends.{role} missing")
        if errs:
            raise ConfigError("invalid configuration: " + "; ".join(errs))
        return self

    def produced_roles(self) -> set:
        roles = set(BASE_ROLES)
        for p in self.pathways:
            roles.update(PATHWAY_ROLES[p])
        return roles

    def to_dict(self) -> dict:
        d = {
            "target_mpp": self.target_mpp,
            "patch_size": self.patch_size,
            "tissue_min": self.tissue_min,
            "strip_height": self.strip_height,
            "mask": {"strategy": self.mask_strategy, "threshold": self.mask_threshold},
            "macenko": {"od_beta": self.od_beta, "angle_alpha": self.angle_alpha,
                        "reject": self.od_reject},
            "channel_weights": {"r": self.channel_weights.w_r, "g": self.channel_weights.w_g,
                                "b": self.channel_weights.w_b},
            "backends": {k: v.to_dict() for k, v in sorted(self.backends.items())},
            "pathways": list(self.pathways),
            "ecc": asdict(self.ecc),
            "align": self.align,
            "alpha": self.alpha,
        }
        return d


def config_from_dict(data: dict, base_dir=Path(".")) -> RunConfig:
    cfg = RunConfig()
    known = {"target_mpp", "patch_size", "tissue_min", "strip_height", "mask", "macenko",
             "channel_weights", "backends", "pathways", "ecc", "align", "alpha", "output_dir",
             "jobs"}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"config: unknown keys {sorted(extra)}")
    try:
        for key in ("target_mpp", "tissue_min", "alpha"):
            if key in data:
                setattr(cfg, key, float(data[key]))
        for key in ("patch_size", "strip_height", "jobs"):
            if key in data:
                setattr(cfg, key, int(data[key]))
        if "align" in data:
            cfg.align = bool(data["align"])
        mask = data.get("mask") or {}
        cfg.mask_strategy = mask.get("strategy", cfg.mask_strategy)
        cfg.mask_threshold = float(mask.get("threshold", cfg.mask_threshold))
        mac = data.get("macenko") or {}
        cfg.od_beta = float(mac.get("od_beta", cfg.od_beta))
        cfg.angle_alpha = float(mac.get("angle_alpha", cfg.angle_alpha))
        cfg.od_reject = mac.get("reject", cfg.od_reject)
        w = data.get("channel_weights") or {}
        cfg.channel_weights = ChannelWeights(float(w.get("r", 1.0)), float(w.get("g", 1.0)),
                                             float(w.get("b", 1.0)))
        for role, spec in (data.get("backends") or {}).items():
            spec = dict(spec)
            params = spec.get("params", {k: v for k, v in spec.items() if k != "kind"})
            if spec.get("kind") == "precomputed_dir" and params.get("directory"):
                d = Path(params["directory"])
                params = dict(params, directory=str(d if d.is_absolute() else base_dir / d))
            cfg.backends[role] = BackendSpec(spec.get("kind", "identity"), dict(params))
        if "pathways" in data:
            cfg.pathways = list(data["pathways"])
        ecc = data.get("ecc") or {}
        cfg.ecc = EccParams(
            max_iters=int(ecc.get("max_iters", cfg.ecc.max_iters)),
            eps=float(ecc.get("eps", cfg.ecc.eps)),
            pyramid_levels=int(ecc.get("pyramid_levels", cfg.ecc.pyramid_levels)),
            min_ecc=float(ecc.get("min_ecc", cfg.ecc.min_ecc)),
        )
        if data.get("output_dir"):
            cfg.output_dir = Path(data["output_dir"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config: {exc}") from exc
    return cfg.validate()


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    return config_from_dict(_read_yaml(path), path.parent)


def check_comparisons(manifest: Manifest, cfg: RunConfig) -> List[str]:
    """Comparisons whose image roles the configured pathways cannot produce."""
    roles = cfg.produced_roles()
    bad = []
    for name in manifest.comparisons:
        a, b, _ = COMPARISONS[name]
        if a not in roles or b not in roles:
            bad.append(name)
    return bad
