"""Command-line front end: ``run``, ``quality`` and ``tags``.

The output directory comes from the config's ``output_dir`` unless
``--output-dir`` or the ``FEATURESPH_OUTPUT_DIR`` environment variable is set.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, parse_config
from .controller import EXIT_FAILURE, run_pipeline

__all__ = ["main", "run", "parse_config", "RunConfig"]

log = logging.getLogger("featuresph")


def _output_dir(cfg: RunConfig, override: str | None) -> Path:
    return Path(override) if override else cfg.resolved_output_dir()


def _ensure_writable(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)
    probe = path / ".write_probe"
    probe.write_text("")
    probe.unlink()


def run(cfg: RunConfig, out_dir: Path | None = None, verbose: bool = False) -> int:
    """Execute the pipeline for ``cfg``; returns the process exit status."""
    out = _output_dir(cfg, str(out_dir) if out_dir else None)
    try:
        _ensure_writable(out)
    except OSError as exc:
        log.error("output directory %s is not writable: %s", out, exc)
        return EXIT_FAILURE

    def progress(row: dict) -> None:
        if verbose:
            log.info("step %d feature %d phase %s dt %.3g E_sys %.3g", row["step"], row["feature_index"],
                     row["phase"], row["dt"], row["E_sys"])

    res = run_pipeline(cfg, out, on_sample=progress)
    if res.error:
        log.error("%s", res.error)
    if res.report is not None:
        print(res.report.summary())
    rel = res.relaxation
    if rel is not None:
        print(f"exit {res.exit_code}: {rel.steps} steps, phase one {rel.phase_one_steps}, "
              f"repairs {rel.repair_events}, output {out}")
    return res.exit_code


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    return run(cfg, Path(args.output_dir) if args.output_dir else None, args.verbose)


def _cmd_quality(args) -> int:
    from .meshquality import quality_report, read_mesh, write_report
    report = quality_report(read_mesh(args.mesh))
    print(report.summary())
    if args.csv:
        write_report(args.csv, report)
    return 0


def _cmd_tags(args) -> int:
    from .case import build_primitive, build_tags
    from .features import write_tag_vtk
    from .geometry import build_levelset
    cfg = parse_config(args.config)
    out = _output_dir(cfg, args.output_dir)
    try:
        _ensure_writable(out)
    except OSError as exc:
        log.error("output directory %s is not writable: %s", out, exc)
        return EXIT_FAILURE
    prim = build_primitive(cfg)
    grid = build_levelset(prim, cfg.grid_spacing, ghost=cfg.ghost or None)
    tags = build_tags(cfg, prim, grid)
    write_tag_vtk(out / "tags.vtk", grid, tags)
    print(f"{tags.n_features} features written to {out / 'tags.vtk'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="featuresph", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log every convergence sample")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", help="relax particles and mesh the result")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_run)
    p = sub.add_parser("quality", help="quality report of a VTK or OBJ mesh")
    p.add_argument("mesh")
    p.add_argument("--csv", help="also write the report as CSV")
    p.set_defaults(func=_cmd_quality)
    p = sub.add_parser("tags", help="write the feature tag map as VTK")
    p.add_argument("config")
    p.add_argument("--output-dir")
    p.set_defaults(func=_cmd_tags)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        log.error("%s", exc)
        return EXIT_FAILURE
    except (OSError, ValueError) as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
