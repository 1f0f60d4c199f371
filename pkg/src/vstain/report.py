"""Human-readable run summary: markdown tables plus bar-chart figures."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import List

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .errors import MissingArtifactsError  # noqa: E402

REQUIRED = ("evaluate/aggregate.json", "evaluate/stats.json", "evaluate/metrics.csv",
            "evaluate/intensity_diff.csv", "evaluate/skipped.json")
STAGES = ("extract", "harmonize", "infer", "evaluate")
# deterministic PNG bytes: no software/date chunks
_PNG_META = {"Software": None}


def _num(v, digits=4):
    if v is None:
        return "n/a"
    if isinstance(v, str):
        return v
    if math.isinf(v):
        return "inf"
    return f"{v:.{digits}f}"


def _pm(stat, digits=4):
    if stat is None or stat.get("n", 0) == 0:
        return "n/a"
    return f"{_num(stat['mean'], digits)} ± {_num(stat['sd'], digits)}"


def _table(header: List[str], rows: List[List[str]]) -> List[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    out += ["| " + " | ".join(r) + " |" for r in rows]
    return out


def _bar_chart(path: Path, labels, means, sds, title, ylabel):
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=100)
    xs = range(len(labels))
    ax.bar(xs, means, yerr=sds, capsize=3, color="#7a8fb8", edgecolor="#33415c")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(labels, rotation=20, ha="right", fontsize=8)
    ax.set_title(title, fontsize=10)
    ax.set_ylabel(ylabel)
    ax.axhline(0, color="black", linewidth=0.6)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def _grouped_chart(path: Path, rows):
    fig, ax = plt.subplots(figsize=(6.4, 3.6), dpi=100)
    channels = ("overall", "r", "g", "b")
    colors = ("#777777", "#c0392b", "#27ae60", "#2e6bc0")
    width = 0.8 / len(channels)
    for k, (ch, col) in enumerate(zip(channels, colors)):
        xs = [i + (k - 1.5) * width for i in range(len(rows))]
        ax.bar(xs, [r["stats"][ch]["mean"] for r in rows], width,
               yerr=[r["stats"][ch]["sd"] for r in rows], capsize=2, color=col, label=ch.upper())
    ax.set_xticks(list(range(len(rows))))
    ax.set_xticklabels([r["comparison"] for r in rows], rotation=20, ha="right", fontsize=8)
    ax.axhline(0, color="black", linewidth=0.6)
    ax.set_ylabel("intensity difference (8-bit)")
    ax.set_title("Tissue-masked RGB intensity differences", fontsize=10)
    ax.legend(fontsize=7)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=_PNG_META)
    plt.close(fig)


def _stats_lines(block: dict, label: str) -> List[str]:
    if "skipped" in block:
        return [f"- {label}: not computed ({block['skipped']})"]
    lines = [f"- {label}: F({block['df_between']}, {block['df_within']}) = "
             f"{_num(block['f_stat'], 3)}, p = {block['p_value']:.3g}"]
    sig = [f"{p['group_a']} vs {p['group_b']}" for p in block.get("pairwise", []) if p["significant"]]
    lines.append(f"  - LSD significant pairs: {', '.join(sig) if sig else 'none'}")
    return lines


def render_report(run_dir) -> str:
    """Write ``report/report.md`` and ``report/figures/*.png``; return the markdown.

    Raises:
        MissingArtifactsError: if any evaluation output is absent.
    """
    run_dir = Path(run_dir)
    missing = [p for p in REQUIRED if not (run_dir / p).is_file()]
    if missing:
        raise MissingArtifactsError(missing)
    agg = json.loads((run_dir / "evaluate/aggregate.json").read_text())
    stats = json.loads((run_dir / "evaluate/stats.json").read_text())
    skipped = json.loads((run_dir / "evaluate/skipped.json").read_text())["skipped"]
    with open(run_dir / "evaluate/metrics.csv", newline="") as fh:
        metric_rows = list(csv.DictReader(fh))
    out_dir = run_dir / "report"
    fig_dir = out_dir / "figures"

    md = ["# vstain evaluation report", ""]

    md += ["## Pixel-level metrics", "",
           "Mean ± sample SD over cores. Metrics on the [0, 1] scale; PSNR in dB with peak 1.", ""]
    rows = []
    for r in agg["metrics"]:
        s = r["stats"]
        note = f" ({r['meta']['psnr_infinite']} inf excluded)" if r["meta"].get("psnr_infinite") else ""
        rows.append([r["comparison"], str(r["n"]), _pm(s["pcc"]), _pm(s["ssim"]),
                     _pm(s["psnr"], 2) + note, _pm(s["mse"])])
    md += _table(["Comparison", "n", "PCC", "SSIM", "PSNR (dB)", "MSE"], rows) if rows else \
        ["No metric comparisons were evaluated."]
    md.append("")

    md += ["## RGB intensity differences", "",
           "Tissue-masked channel means, first image minus second, 8-bit units.", ""]
    rows = [[r["comparison"], str(r["n"])] + [_pm(r["stats"][c], 2) for c in ("overall", "r", "g", "b")]
            for r in agg["intensity"]]
    md += _table(["Comparison", "n", "Overall", "R", "G", "B"], rows) if rows else \
        ["No intensity comparisons were evaluated."]
    md.append("")

    md += ["## Statistics", "", f"One-way ANOVA with Fisher LSD, alpha = {stats['alpha']}.", ""]
    for metric, block in stats["metrics"].items():
        md += _stats_lines(block, metric.upper())
    for ch, block in stats["intensity"].items():
        md += _stats_lines(block, f"intensity {ch}")
    md.append("")

    ds_path = run_dir / "evaluate/domain_shift.json"
    if ds_path.is_file():
        ds = json.loads(ds_path.read_text())
        md += ["## Domain shift", ""]
        if ds.get("summary"):
            md.append(f"Harmonized H&E cores against {ds['n_reference']} reference images: "
                      f"mean difference {_pm(ds['summary']['mean_diff'], 2)}, "
                      f"median difference {_pm(ds['summary']['median_diff'], 2)}.")
        else:
            md.append("No domain-shift summary (no usable cores or reference images).")
        md.append("")

    md += ["## Alignment", ""]
    bad = [r for r in metric_rows if r["align_converged"] != "true"]
    if not metric_rows:
        md.append("No aligned pairs.")
    elif bad:
        md.append("Pairs evaluated without a converged alignment (identity used):")
        md += [f"- {r['core_id']} {r['comparison']} (ecc {r['align_ecc']})" for r in bad]
    else:
        md.append(f"All {len(metric_rows)} pairs converged.")
    md.append("")

    excluded = []
    for stage in STAGES:
        p = run_dir / "status" / f"{stage}.json"
        if p.is_file():
            for cid, st in json.loads(p.read_text())["cores"].items():
                if st["status"] != "ok":
                    excluded.append(f"- {cid}: {stage} {st['status']}: {st.get('reason', '')}")
    listed = {line.split(":")[0][2:] for line in excluded}
    pair_skips = [s for s in skipped if s["comparison"] != "*" or s["core_id"] not in listed]
    if excluded or pair_skips:
        md += ["## Skipped cores and pairs", ""]
        md += excluded
        md += [f"- {s['core_id']} {'all pairs' if s['comparison'] == '*' else s['comparison']}: "
               f"{s['reason']}" for s in pair_skips]
        md.append("")

    md += ["## Figures", ""]
    if agg["metrics"]:
        for metric, label in (("pcc", "PCC"), ("ssim", "SSIM"), ("psnr", "PSNR (dB)"), ("mse", "MSE")):
            name = f"metric_{metric}.png"
            _bar_chart(fig_dir / name, [r["comparison"] for r in agg["metrics"]],
                       [r["stats"][metric]["mean"] or 0.0 for r in agg["metrics"]],
                       [r["stats"][metric]["sd"] or 0.0 for r in agg["metrics"]], label, label)
            md.append(f"![{label}](figures/{name})")
    if agg["intensity"]:
        _grouped_chart(fig_dir / "intensity.png", agg["intensity"])
        md.append("![intensity differences](figures/intensity.png)")
    md.append("")

    text = "\n".join(md)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.md").write_text(text)
    return text
