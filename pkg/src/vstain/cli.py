"""Command-line entry point: ``vstain <subcommand> [options]``.

Exit codes: 0 when every core succeeded, 2 on partial failure, 1 on total
failure or a configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import pipeline as P
from .config import load_config, load_manifest
from .errors import ConfigError, VStainError
from .inference import PATHWAYS, TIMEOUT_ENV
from .report import render_report

log = logging.getLogger("vstain")

STAGE_CMDS = ("extract", "harmonize", "infer", "evaluate", "all")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vstain",
        description="Core extraction, stain harmonization, virtual staining inference and evaluation.",
        epilog=f"Backend command timeout (seconds) is read from ${TIMEOUT_ENV}.",
    )
    parser.add_argument("--version", action="version", version=f"vstain {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--manifest", required=True, type=Path, help="manifest YAML")
        p.add_argument("--config", type=Path, help="run configuration YAML (defaults if omitted)")
        p.add_argument("--out", type=Path, help="run directory (overrides config output_dir)")
        p.add_argument("--jobs", type=int, help="cores processed in parallel")
        p.add_argument("--force", action="store_true", help="recompute even when checksums match")
        return p

    stage("extract", "cut cores from slides and downsample")
    stage("harmonize", "stain-normalize H&E cores, calibrate unstained cores")
    p = stage("infer", "run virtual staining pathways")
    p.add_argument("--pathway", choices=list(PATHWAYS), help="run only this pathway")
    p = stage("evaluate", "metrics, intensity differences and statistics")
    p.add_argument("--no-align", action="store_true", help="skip ECC alignment")
    p = stage("all", "extract, harmonize, infer, evaluate, report")
    p.add_argument("--pathway", choices=list(PATHWAYS), help="run only this pathway")
    p.add_argument("--no-align", action="store_true", help="skip ECC alignment")

    p = sub.add_parser("report", help="render report.md and figures from an evaluated run")
    p.add_argument("--out", required=True, type=Path, help="run directory")

    p = sub.add_parser("synth", help="write the bundled synthetic dataset")
    p.add_argument("--out", required=True, type=Path, help="dataset directory")
    p.add_argument("--cores", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _setup_logging(verbose: bool, run_dir: Path = None):
    root = logging.getLogger()
    root.setLevel(logging.DEBUG if verbose else logging.INFO)
    fmt = logging.Formatter("%(levelname)s %(name)s: %(message)s")
    if not any(isinstance(h, logging.StreamHandler) and not isinstance(h, logging.FileHandler)
               for h in root.handlers):
        sh = logging.StreamHandler(sys.stderr)
        sh.setLevel(logging.DEBUG if verbose else logging.WARNING)
        sh.setFormatter(fmt)
        root.addHandler(sh)
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        fh = logging.FileHandler(run_dir / "run.log")
        fh.setFormatter(fmt)
        root.addHandler(fh)
        return fh
    return None


def _combine(codes):
    if P.EXIT_TOTAL_FAILURE in codes:
        return P.EXIT_TOTAL_FAILURE
    if P.EXIT_PARTIAL in codes:
        return P.EXIT_PARTIAL
    return P.EXIT_OK


def _run_stages(args) -> int:
    manifest = load_manifest(args.manifest)
    cfg = load_config(args.config)
    run_dir = args.out or cfg.output_dir
    if run_dir is None:
        raise ConfigError("no run directory: pass --out or set output_dir in the config")
    run_dir = Path(run_dir)
    jobs = args.jobs or cfg.jobs
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    if getattr(args, "pathway", None):
        cfg.pathways = [args.pathway]
    if args.command in ("evaluate", "all"):
        P.validate_comparisons(manifest, cfg)
    align = False if getattr(args, "no_align", False) else None

    handler = _setup_logging(args.verbose, run_dir)
    try:
        cmd = args.command
        codes = []
        if cmd in ("extract", "all"):
            codes.append(_report_stage(P.cmd_extract(manifest, cfg, run_dir, args.force, jobs)))
        if cmd in ("harmonize", "all") and P.EXIT_TOTAL_FAILURE not in codes:
            codes.append(_report_stage(P.cmd_harmonize(manifest, cfg, run_dir, args.force, jobs)))
        if cmd in ("infer", "all") and P.EXIT_TOTAL_FAILURE not in codes:
            codes.append(_report_stage(P.cmd_infer(manifest, cfg, run_dir, getattr(args, "pathway", None),
                                                   args.force, jobs)))
        if cmd in ("evaluate", "all") and P.EXIT_TOTAL_FAILURE not in codes:
            codes.append(_report_stage(P.cmd_evaluate(manifest, cfg, run_dir, align, jobs)))
        if cmd == "all" and P.EXIT_TOTAL_FAILURE not in codes:
            render_report(run_dir)
            print(f"report: {run_dir / 'report' / 'report.md'}")
        return _combine(codes)
    finally:
        if handler is not None:
            logging.getLogger().removeHandler(handler)
            handler.close()


def _report_stage(res: P.StageResult) -> int:
    ok = len(res.ok_cores())
    print(f"{res.stage}: {ok}/{len(res.status)} cores ok")
    for cid, st in res.status.items():
        if st["status"] != "ok":
            print(f"  {cid}: {st['status']}: {st.get('reason', '')}")
    for w in res.warnings:
        print(f"  warning: {w}")
    return res.exit_code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command in STAGE_CMDS:
            return _run_stages(args)
        _setup_logging(args.verbose)
        if args.command == "report":
            render_report(args.out)
            print(f"report: {args.out / 'report' / 'report.md'}")
            return P.EXIT_OK
        if args.command == "synth":
            from .synthetic import make_dataset
            path = make_dataset(args.out, n_cores=args.cores, seed=args.seed)
            print(f"manifest: {path}")
            return P.EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return P.EXIT_TOTAL_FAILURE
    except VStainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return P.EXIT_TOTAL_FAILURE
    return P.EXIT_TOTAL_FAILURE


if __name__ == "__main__":
    sys.exit(main())
