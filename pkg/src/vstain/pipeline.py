"""Stage drivers behind the CLI: extract, harmonize, infer, evaluate.

Every stage reads and writes inside one run directory::

    extract/    {core}_raw_gus.png, {core}_raw_ghe.png
    harmonize/  {core}_gus.png, {core}_ghe.png, reference/*.json
    infer/      {core}_vds.png, {core}_vhe.png, {core}_vher.png, *.grid.json
    evaluate/   metrics.csv, intensity.csv, intensity_diff.csv,
                aggregate.json, stats.json, domain_shift.json, skipped.json
    status/     {stage}.json   per-core outcome

Each image carries a ``.prov.json`` sidecar recording input checksums and
parameters; reruns skip outputs whose sidecar still matches.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional

from . import __version__
from .config import Manifest, RunConfig, check_comparisons
from .errors import ConfigError, VStainError
from .evaluation import (
    COMPARISONS,
    METRIC_COMPARISONS,
    aggregate,
    domain_shift_summary,
    evaluate_pair,
    fisher_lsd,
    intensity_difference,
    masked_intensity,
    mean_sd,
    pad_to_common,
)
from .harmonize import (
    ChannelCdf,
    HarmonizeParams,
    StainProfile,
    calibrate_unstained,
    compute_channel_cdf,
    estimate_stain_profile,
    harmonize_he,
    tissue_mask,
)
from .inference import Pathway, run_pathway
from .ingest import (
    CoreImage,
    RasterSource,
    StainState,
    downsample_to_mpp,
    extract_core,
    load_core_image,
    load_roi,
    save_core_image,
)

log = logging.getLogger(__name__)

EXIT_OK, EXIT_TOTAL_FAILURE, EXIT_PARTIAL = 0, 1, 2

ROLE_STAGE = {
    "raw_gus": "extract", "raw_ghe": "extract",
    "gus": "harmonize", "ghe": "harmonize",
    "vds": "infer", "vhe": "infer", "vher": "infer",
}
ROLE_STATE = {
    "raw_gus": StainState.UNSTAINED, "raw_ghe": StainState.STAINED,
    "gus": StainState.UNSTAINED, "ghe": StainState.STAINED,
    "vds": StainState.VIRTUAL_DESTAINED, "vhe": StainState.VIRTUAL_STAINED,
    "vher": StainState.VIRTUAL_RESTAINED,
}

METRICS_CSV_FIELDS = ["core_id", "comparison", "pcc", "ssim", "psnr_db", "mse", "align_theta_deg",
                      "align_tx", "align_ty", "align_ecc", "align_converged"]
INTENSITY_CSV_FIELDS = ["core_id", "role", "overall", "r", "g", "b", "tissue_fraction"]
DIFF_CSV_FIELDS = ["core_id", "comparison", "overall", "r", "g", "b"]

REQUIRED_EVAL_FILES = ("evaluate/aggregate.json", "evaluate/stats.json", "evaluate/metrics.csv",
                       "evaluate/intensity_diff.csv", "evaluate/skipped.json")


# --------------------------------------------------------------------------- #
# Helpers
# --------------------------------------------------------------------------- #

def role_path(run_dir, core_id, role) -> Path:
    return Path(run_dir) / ROLE_STAGE[role] / f"{core_id}_{role}.png"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v):
    if hasattr(v, "item"):  # numpy scalar
        v = v.item()
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _jsonable(obj):
    """Replace non-finite floats so output is strict JSON."""
    if isinstance(obj, float):
        if math.isnan(obj):
            return None
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        return obj
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n")
    return path


def write_csv(path, fields, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r[k]) for k in fields})
    path.write_text(buf.getvalue())
    return path


class Provenance:
    """Sidecar bookkeeping for one run directory."""

    def __init__(self, run_dir: Path, manifest: Manifest):
        self.run_dir = Path(run_dir)
        self.manifest = manifest

    def _rel(self, p) -> str:
        p = Path(p)
        try:
            return p.resolve().relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            return self.manifest.relative(p)

    def describe(self, inputs, params) -> dict:
        return {
            "inputs": [{"path": self._rel(p), "sha256": sha256_file(p)} for p in inputs],
            "params": _jsonable(params),
        }

    @staticmethod
    def sidecar(path) -> Path:
        return Path(str(path) + ".prov.json")

    def up_to_date(self, output, desc) -> bool:
        side = self.sidecar(output)
        if not (Path(output).is_file() and side.is_file()):
            return False
        try:
            old = json.loads(side.read_text())
        except (OSError, json.JSONDecodeError):
            return False
        return (old.get("inputs") == desc["inputs"] and old.get("params") == desc["params"]
                and old.get("output_sha256") == sha256_file(output))

    def record(self, output, stage, core_id, desc, extra=None):
        body = {
            "output": self._rel(output),
            "stage": stage,
            "core_id": core_id,
            **desc,
            "output_sha256": sha256_file(output),
            "tool": f"vstain {__version__}",
        }
        if extra:
            body.update(extra)
        write_json(self.sidecar(output), body)


@dataclass
class StageResult:
    stage: str
    status: Dict[str, dict] = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    def ok_cores(self) -> List[str]:
        return [c for c, s in self.status.items() if s["status"] == "ok"]

    @property
    def exit_code(self) -> int:
        states = [s["status"] for s in self.status.values()]
        if not states:
            return EXIT_TOTAL_FAILURE
        failed = sum(1 for s in states if s != "ok")
        if failed == 0:
            return EXIT_OK
        return EXIT_TOTAL_FAILURE if failed == len(states) else EXIT_PARTIAL

    def save(self, run_dir):
        write_json(Path(run_dir) / "status" / f"{self.stage}.json",
                   {"stage": self.stage, "cores": self.status, "warnings": self.warnings})


def load_status(run_dir, stage) -> Optional[dict]:
    p = Path(run_dir) / "status" / f"{stage}.json"
    if not p.is_file():
        return None
    return json.loads(p.read_text())


def _map(fn: Callable, items, jobs: int):
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _prior_failure(run_dir, stage, core_id) -> Optional[str]:
    st = load_status(run_dir, stage)
    if st is None:
        return None
    entry = st["cores"].get(core_id)
    if entry is None:
        return f"not processed by {stage}"
    if entry["status"] != "ok":
        return f"{stage} {entry['status']}: {entry.get('reason', '')}"
    return None


def _harmonize_params(cfg: RunConfig) -> HarmonizeParams:
    return HarmonizeParams(cfg.mask_strategy, cfg.mask_threshold, cfg.od_beta, cfg.angle_alpha,
                           cfg.od_reject, cfg.channel_weights)


def _mask(core: CoreImage, cfg: RunConfig):
    return tissue_mask(core, cfg.mask_strategy, cfg.mask_threshold)


# --------------------------------------------------------------------------- #
# extract
# --------------------------------------------------------------------------- #

def _pick_roi(rois, core_id):
    for r in rois:
        if r.label == core_id:
            return r
    return rois[0]


def cmd_extract(manifest: Manifest, cfg: RunConfig, run_dir, force=False, jobs=1) -> StageResult:
    """Cut every core out of its two scans and bring it to the target resolution."""
    run_dir = Path(run_dir)
    prov = Provenance(run_dir, manifest)
    res = StageResult("extract")

    def one(entry):
        outputs = []
        try:
            for role, src_path, roi_path, state in (
                ("raw_gus", entry.unstained_path, entry.roi_unstained, StainState.UNSTAINED),
                ("raw_ghe", entry.stained_path, entry.roi_stained, StainState.STAINED),
            ):
                out = role_path(run_dir, entry.core_id, role)
                for p in (src_path, roi_path):
                    if not Path(p).is_file():
                        raise FileNotFoundError(f"missing input file {manifest.relative(p)}")
                params = {"source_mpp": entry.source_mpp, "target_mpp": cfg.target_mpp,
                          "fill": [255, 255, 255], "strip_height": cfg.strip_height,
                          "resample": "area"}
                desc = prov.describe([src_path, roi_path], params)
                if not force and prov.up_to_date(out, desc):
                    outputs.append((role, "cached"))
                    continue
                roi = _pick_roi(load_roi(roi_path), entry.core_id)
                src = RasterSource(src_path, mpp=entry.source_mpp)
                try:
                    core = extract_core(src, roi, strip_height=cfg.strip_height,
                                        core_id=entry.core_id, stain_state=state,
                                        mpp=entry.source_mpp)
                finally:
                    src.close()
                core = downsample_to_mpp(core, cfg.target_mpp)
                save_core_image(core, out)
                prov.record(out, "extract", entry.core_id, desc,
                            {"roi": roi.to_dict(), "mpp_chain": [entry.source_mpp, cfg.target_mpp],
                             "dims": [core.height, core.width]})
                outputs.append((role, "written"))
            return entry.core_id, {"status": "ok", "outputs": dict(outputs)}
        except (VStainError, OSError, ValueError) as exc:
            log.error("extract %s failed: %s", entry.core_id, exc)
            return entry.core_id, {"status": "failed", "reason": str(exc)}

    for cid, st in _map(one, manifest.cores, jobs):
        res.status[cid] = st
    res.save(run_dir)
    return res


# --------------------------------------------------------------------------- #
# harmonize
# --------------------------------------------------------------------------- #

def _load_reference(path, manifest: Manifest, cfg: RunConfig, state) -> CoreImage:
    img = load_core_image(path, mpp=manifest.reference_mpp or cfg.target_mpp,
                          core_id=Path(path).stem, stain_state=state)
    if img.mpp < cfg.target_mpp:
        img = downsample_to_mpp(img, cfg.target_mpp)
    return img


def prepare_references(manifest: Manifest, cfg: RunConfig, run_dir):
    """Estimate (or reload) the H&E reference profile/CDF and the unstained reference CDF."""
    ref_dir = Path(run_dir) / "harmonize" / "reference"
    ref_dir.mkdir(parents=True, exist_ok=True)
    p = _harmonize_params(cfg)
    key = {
        "he_reference": sha256_file(manifest.he_reference_path),
        "unstained_reference": sha256_file(manifest.unstained_reference_path),
        "params": _jsonable({"mask": [cfg.mask_strategy, cfg.mask_threshold], "od_beta": cfg.od_beta,
                             "angle_alpha": cfg.angle_alpha, "reject": cfg.od_reject,
                             "target_mpp": cfg.target_mpp,
                             "reference_mpp": manifest.reference_mpp}),
    }
    key_path = ref_dir / "key.json"
    files = [ref_dir / n for n in ("he_profile.json", "he_cdf.json", "unstained_cdf.json")]
    if key_path.is_file() and all(f.is_file() for f in files):
        if json.loads(key_path.read_text()) == key:
            return (StainProfile.from_dict(json.loads(files[0].read_text())),
                    ChannelCdf.load(files[1]), ChannelCdf.load(files[2]))
    he = _load_reference(manifest.he_reference_path, manifest, cfg, StainState.STAINED)
    he_mask = _mask(he, cfg)
    profile = estimate_stain_profile(he, he_mask, p.od_beta, p.angle_alpha, p.reject)
    he_cdf = compute_channel_cdf(he, he_mask)
    us = _load_reference(manifest.unstained_reference_path, manifest, cfg, StainState.UNSTAINED)
    us_cdf = compute_channel_cdf(us, _mask(us, cfg))
    write_json(files[0], profile.to_dict())
    write_json(files[1], he_cdf.to_dict())
    write_json(files[2], us_cdf.to_dict())
    write_json(key_path, key)
    return profile, he_cdf, us_cdf


def cmd_harmonize(manifest: Manifest, cfg: RunConfig, run_dir, force=False, jobs=1) -> StageResult:
    """Stain-normalize + histogram-align H&E cores; calibrate unstained cores."""
    run_dir = Path(run_dir)
    prov = Provenance(run_dir, manifest)
    res = StageResult("harmonize")
    profile, he_cdf, us_cdf = prepare_references(manifest, cfg, run_dir)
    ref_files = [run_dir / "harmonize" / "reference" / n
                 for n in ("he_profile.json", "he_cdf.json", "unstained_cdf.json")]
    hp = _harmonize_params(cfg)
    params = {"mask": [cfg.mask_strategy, cfg.mask_threshold], "od_beta": cfg.od_beta,
              "angle_alpha": cfg.angle_alpha, "reject": cfg.od_reject,
              "channel_weights": hp.weights.as_array().tolist()}

    def one(entry):
        cid = entry.core_id
        why = _prior_failure(run_dir, "extract", cid)
        raw = {r: role_path(run_dir, cid, r) for r in ("raw_ghe", "raw_gus")}
        if why is None and not all(p.is_file() for p in raw.values()):
            why = "extracted images missing"
        if why:
            return cid, {"status": "skipped", "reason": why}
        try:
            out_ghe = role_path(run_dir, cid, "ghe")
            desc = prov.describe([raw["raw_ghe"], ref_files[0], ref_files[1]], params)
            if force or not prov.up_to_date(out_ghe, desc):
                core = load_core_image(raw["raw_ghe"], core_id=cid, stain_state=StainState.STAINED)
                hr = harmonize_he(core, None, hp, reference_cdf=he_cdf, reference_profile=profile,
                                  return_details=True)
                save_core_image(hr.image, out_ghe)
                write_json(out_ghe.with_suffix(".profile.json"), hr.source_profile.to_dict())
                prov.record(out_ghe, "harmonize", cid, desc,
                            {"tissue_fraction": hr.mask.tissue_fraction})
            out_gus = role_path(run_dir, cid, "gus")
            desc = prov.describe([raw["raw_gus"], ref_files[2]], params)
            if force or not prov.up_to_date(out_gus, desc):
                core = load_core_image(raw["raw_gus"], core_id=cid, stain_state=StainState.UNSTAINED)
                mask = _mask(core, cfg)
                out = calibrate_unstained(core, mask, us_cdf, hp.weights)
                save_core_image(out, out_gus)
                prov.record(out_gus, "harmonize", cid, desc, {"tissue_fraction": mask.tissue_fraction})
            return cid, {"status": "ok"}
        except (VStainError, OSError, ValueError) as exc:
            log.error("harmonize %s flagged: %s", cid, exc)
            return cid, {"status": "failed", "reason": f"{type(exc).__name__}: {exc}"}

    for cid, st in _map(one, manifest.cores, jobs):
        res.status[cid] = st
    res.save(run_dir)
    return res


# --------------------------------------------------------------------------- #
# infer
# --------------------------------------------------------------------------- #

def _pathway(name, cfg: RunConfig) -> Pathway:
    b = cfg.backends
    stages = {"destain": [b["destain"]], "direct_stain": [b["stain"]],
              "destain_restain": [b["destain"], b["stain"]]}[name]
    return Pathway(name, stages)


def cmd_infer(manifest: Manifest, cfg: RunConfig, run_dir, pathway: Optional[str] = None,
              force=False, jobs=1) -> StageResult:
    """Run the configured pathways (or only ``pathway``) on every harmonized core."""
    run_dir = Path(run_dir)
    prov = Provenance(run_dir, manifest)
    names = [pathway] if pathway else list(cfg.pathways)
    res = StageResult("infer")
    (run_dir / "infer").mkdir(parents=True, exist_ok=True)
    tiling = {"patch_size": cfg.patch_size, "tissue_min": cfg.tissue_min,
              "mask": [cfg.mask_strategy, cfg.mask_threshold]}

    def one(entry):
        cid = entry.core_id
        why = _prior_failure(run_dir, "harmonize", cid)
        if why:
            return cid, {"status": "skipped", "reason": why}, []
        warnings = []
        try:
            for name in names:
                pw = _pathway(name, cfg)
                in_role = "gus" if name == "direct_stain" else "ghe"
                src = role_path(run_dir, cid, in_role)
                if not src.is_file():
                    raise FileNotFoundError(f"harmonized input {src.name} missing")
                params = dict(tiling, pathway=name, stages=[s.to_dict() for s in pw.stages])
                desc = prov.describe([src], params)
                out_roles = {"destain": ["vds"], "direct_stain": ["vhe"],
                             "destain_restain": ["vds", "vher"]}[name]
                outs = [role_path(run_dir, cid, r) for r in out_roles]
                if name == "destain_restain":
                    # the loop's VDS is also written by the destain pathway; only the
                    # restained output decides freshness
                    fresh = prov.up_to_date(outs[-1], desc)
                else:
                    fresh = all(prov.up_to_date(o, desc) for o in outs)
                if not force and fresh:
                    continue
                core = load_core_image(src, core_id=cid, stain_state=ROLE_STATE[in_role])
                result = run_pathway(core, _mask(core, cfg), pw, cfg.patch_size, cfg.tissue_min)
                warnings.extend(result.warnings)
                result.grid.save(run_dir / "infer" / f"{cid}_{in_role}.grid.json")
                for role, out in zip(out_roles, outs):
                    img = result.intermediates[ROLE_STATE[role].value]
                    save_core_image(img, out)
                    prov.record(out, "infer", cid, desc, {"pathway": name,
                                                          "kept_patches": len(result.grid.kept_cells),
                                                          "grid_cells": len(result.grid.cells)})
            return cid, {"status": "ok"}, warnings
        except (VStainError, OSError, ValueError) as exc:
            log.error("infer %s failed: %s", cid, exc)
            return cid, {"status": "failed", "reason": f"{type(exc).__name__}: {exc}"}, warnings

    for cid, st, warns in _map(one, manifest.cores, jobs):
        res.status[cid] = st
        res.warnings.extend(warns)
    res.save(run_dir)
    return res


# --------------------------------------------------------------------------- #
# evaluate
# --------------------------------------------------------------------------- #

def _stats_block(groups: Dict[str, List[float]], alpha: float) -> dict:
    usable = {k: v for k, v in groups.items() if len(v) >= 2}
    if len(usable) < 2:
        return {"skipped": "need at least two comparisons with two or more cores each",
                "groups": {k: len(v) for k, v in groups.items()}}
    try:
        r = fisher_lsd(list(usable.values()), alpha, names=list(usable))
    except VStainError as exc:
        return {"skipped": str(exc), "groups": {k: len(v) for k, v in usable.items()}}
    return r.to_dict()


def _load_training_summaries(manifest: Manifest, cfg: RunConfig):
    out = []
    for p in manifest.he_training_set:
        img = _load_reference(p, manifest, cfg, StainState.STAINED)
        mask = _mask(img, cfg)
        if mask.count:
            out.append(masked_intensity(img, mask))
    return out


def cmd_evaluate(manifest: Manifest, cfg: RunConfig, run_dir, align: Optional[bool] = None,
                 jobs=1) -> StageResult:
    """Pixel metrics, masked intensities, aggregates, domain shift and statistics."""
    run_dir = Path(run_dir)
    do_align = cfg.align if align is None else align
    res = StageResult("evaluate")
    ev = run_dir / "evaluate"
    ev.mkdir(parents=True, exist_ok=True)
    comparisons = list(manifest.comparisons)
    skipped = []

    def one(entry):
        cid = entry.core_id
        excl = None
        for stage in ("extract", "harmonize", "infer"):
            excl = excl or _prior_failure(run_dir, stage, cid)
        if excl:
            return cid, None, [], {}, [], [{"core_id": cid, "comparison": "*", "reason": excl}]
        cache: Dict[str, CoreImage] = {}
        summaries = {}
        metrics, diffs, skips = [], [], []

        def get(role):
            if role not in cache:
                p = role_path(run_dir, cid, role)
                cache[role] = load_core_image(p, core_id=cid, stain_state=ROLE_STATE[role]) \
                    if p.is_file() else None
            return cache[role]

        def summary(role):
            if role not in summaries:
                img = get(role)
                summaries[role] = masked_intensity(img, _mask(img, cfg))
            return summaries[role]

        for comp in comparisons:
            ra, rb, has_metrics = COMPARISONS[comp]
            a, b = get(ra), get(rb)
            missing = [r for r, im in ((ra, a), (rb, b)) if im is None]
            if missing:
                skips.append({"core_id": cid, "comparison": comp,
                              "reason": "missing image role(s): " + ", ".join(missing)})
                continue
            try:
                if has_metrics:
                    pa, pb = pad_to_common(a, b)
                    metrics.append(evaluate_pair(pa, pb, do_align, comp, cfg.ecc))
                diffs.append((comp, intensity_difference(summary(ra), summary(rb))))
            except VStainError as exc:
                skips.append({"core_id": cid, "comparison": comp,
                              "reason": f"{type(exc).__name__}: {exc}"})
        return cid, "ok", metrics, summaries, diffs, skips

    per_core = _map(one, sorted(manifest.cores, key=lambda e: e.core_id), jobs)

    metric_rows, intensity_rows, diff_rows = [], [], []
    by_comp_metrics: Dict[str, list] = {c: [] for c in comparisons if COMPARISONS[c][2]}
    by_comp_diffs: Dict[str, list] = {c: [] for c in comparisons}
    ghe_summaries = {}
    for cid, state, metrics, summaries, diffs, skips in per_core:
        skipped.extend(skips)
        if state is None:
            res.status[cid] = {"status": "skipped", "reason": skips[0]["reason"]}
            continue
        res.status[cid] = {"status": "ok"} if not skips else {
            "status": "ok", "skipped_pairs": len(skips)}
        for m in metrics:
            metric_rows.append(m.csv_row())
            by_comp_metrics[m.comparison].append(m)
        for role in sorted(summaries):
            d = summaries[role].to_dict()
            d["role"] = role
            intensity_rows.append(d)
        if "ghe" in summaries:
            ghe_summaries[cid] = summaries["ghe"]
        for comp, d in diffs:
            row = d.to_dict()
            row["comparison"] = comp
            diff_rows.append(row)
            by_comp_diffs[comp].append(d)

    write_csv(ev / "metrics.csv", METRICS_CSV_FIELDS, metric_rows)
    write_csv(ev / "intensity.csv", INTENSITY_CSV_FIELDS, intensity_rows)
    write_csv(ev / "intensity_diff.csv", DIFF_CSV_FIELDS, diff_rows)

    agg_metrics, agg_intensity = [], []
    for comp in comparisons:
        if comp in by_comp_metrics and by_comp_metrics[comp]:
            recs = by_comp_metrics[comp]
            row = aggregate(recs, comp).to_dict()
            row["meta"]["alignment_failed"] = sum(1 for r in recs if do_align and not r.aligned)
            agg_metrics.append(row)
        if by_comp_diffs[comp]:
            agg_intensity.append(aggregate(by_comp_diffs[comp], comp).to_dict())
    write_json(ev / "aggregate.json", {
        "metrics": agg_metrics,
        "intensity": agg_intensity,
        "meta": {
            "metric_scale": "[0,1]; PSNR peak 1.0",
            "pcc": "joint over all pixels and channels",
            "ssim": "single-scale, Rec.601 luminance, Gaussian window 11, sigma 1.5",
            "intensity_units": "8-bit, tissue-masked, first minus second",
            "alignment": "ECC rigid" if do_align else "none",
            "excluded_patch_fill": "background (white)",
            "sd": "sample (n-1)",
        },
    })

    stats = {"alpha": cfg.alpha, "metrics": {}, "intensity": {}}
    for metric in ("pcc", "ssim", "psnr", "mse"):
        groups = {c: [getattr(r, metric) for r in recs if math.isfinite(getattr(r, metric))]
                  for c, recs in by_comp_metrics.items()}
        stats["metrics"][metric] = _stats_block(groups, cfg.alpha)
    for ch in ("overall", "r", "g", "b"):
        groups = {c: [getattr(d, ch) for d in v] for c, v in by_comp_diffs.items()}
        stats["intensity"][ch] = _stats_block(groups, cfg.alpha)
    write_json(ev / "stats.json", stats)

    if manifest.he_training_set:
        refs = _load_training_summaries(manifest, cfg)
        shifts = [domain_shift_summary(s, refs) for _, s in sorted(ghe_summaries.items())] if refs else []
        write_json(ev / "domain_shift.json", {
            "n_reference": len(refs),
            "cores": [s.__dict__ for s in shifts],
            "summary": {
                "mean_diff": mean_sd([s.mean_diff for s in shifts]).to_dict(),
                "median_diff": mean_sd([s.median_diff for s in shifts]).to_dict(),
            } if shifts else None,
        })
    write_json(ev / "skipped.json", {"skipped": skipped})
    res.save(run_dir)
    return res


def validate_comparisons(manifest: Manifest, cfg: RunConfig):
    bad = check_comparisons(manifest, cfg)
    if bad:
        raise ConfigError(
            f"comparisons {bad} need image roles the configured pathways {cfg.pathways} do not produce"
        )
