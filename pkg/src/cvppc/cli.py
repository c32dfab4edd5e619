"""Command-line entry point: ``cvppc check|calibrate|validate --config FILE``.

Exit codes: 0 success, 1 usage or configuration error, 2 data validation
error (including posterior-propriety violations), 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
from pathlib import Path

from . import __version__
from .calibration import calibration_run, summarize, write_matrix
from .checks import MIN_CV_GROUPS, CheckReport, cv_ppc_report, ppc_report
from .config import ConfigError, config_kind, load_calibration_run, load_check_run
from .loo import cv_ppc_fast
from .model import DataError, read_dataset
from .sampler import DegenerateDataError, ProprietyError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3

log = logging.getLogger("cvppc")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def render_report(report: CheckReport) -> str:
    text = report.render_table()
    if report.p_adjusted is not None:
        text += "\n# bonferroni-adjusted\n" + report.render_table(adjusted=True)
    return text


def _write_all(files: dict[Path, str]) -> None:
    """Write every file or none: stage to temporaries, then rename into place."""
    staged = []
    try:
        for path, text in files.items():
            path.parent.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
            staged.append((tmp, path))
            with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as handle:
                handle.write(text)
    except BaseException:
        for tmp, _ in staged:
            try:
                os.unlink(tmp)
            except FileNotFoundError:
                pass
        raise
    for tmp, path in staged:
        os.replace(tmp, path)


def _check_files(run) -> dict[Path, str]:
    dataset = read_dataset(run.data_path)
    if run.method == "ppc":
        report = ppc_report(dataset, run.spec, run.check)
    elif run.method == "cv":
        report = cv_ppc_report(dataset, run.spec, run.check, workers=run.workers)
    else:
        report = cv_ppc_fast(dataset, run.spec, run.check, ess_threshold=run.ess_threshold, k=run.mc_points)
    out = run.output_path
    if run.output_format == "table":
        return {out: render_report(report)}
    if run.output_format == "structured":
        return {out: report.to_json()}
    return {out.with_suffix(".tsv"): render_report(report), out.with_suffix(".json"): report.to_json()}


def cmd_check(args) -> int:
    run = load_check_run(args.config)
    files = _check_files(run)
    _write_all(files)
    for path in files:
        log.info("wrote %s", path)
    table = next((text for path, text in files.items() if not path.suffix == ".json"), None)
    if table is not None and not args.quiet:
        sys.stdout.write(table)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    run = load_calibration_run(args.config)
    sample = calibration_run(run.scenario, run.n_reps, run.method, run.spec, run.check, workers=run.workers)
    summary = {
        "method": run.method,
        "n_reps": run.n_reps,
        "alpha": run.alpha,
        "scenario": run.scenario.to_dict(),
        "model": run.spec.to_dict(),
        "config": run.check.to_dict(),
        "failures": {str(r): msg for r, msg in sorted(sample.failures.items())},
        "cells": summarize(sample, run.alpha),
    }
    _write_all({run.matrix_path: write_matrix(sample), run.summary_path: json.dumps(summary, indent=2) + "\n"})
    if sample.failures:
        log.warning("%d of %d replicates failed", len(sample.failures), run.n_reps)
    log.info("wrote %s and %s", run.matrix_path, run.summary_path)
    return EXIT_OK


def cmd_validate(args) -> int:
    kind = config_kind(args.config)
    if kind == "calibrate":
        run = load_calibration_run(args.config)
        print(f"ok: calibration config, method={run.method}, n_reps={run.n_reps}")
        return EXIT_OK
    run = load_check_run(args.config)
    dataset = read_dataset(run.data_path)
    need = 3 if run.method == "ppc" else MIN_CV_GROUPS
    if dataset.n_groups < need:
        if run.method == "ppc":
            raise ProprietyError(f"posterior predictive checks require >= 3 groups (got {dataset.n_groups})")
        raise ProprietyError(
            f"cross-validated checks require >= {MIN_CV_GROUPS} groups under default priors (got {dataset.n_groups})"
        )
    values = [x for g in dataset for x in g.values]
    if len(set(values)) == 1:
        raise DegenerateDataError("all observations are identical")
    sizes = ",".join(str(n) for n in dataset.sizes)
    print(f"ok: {dataset.n_groups} groups (n = {sizes}), method={run.method}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cvppc", description="Cross-validated posterior predictive checks for two-level models.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, func, text in (
        ("check", cmd_check, "run a check on a data file and write the report"),
        ("calibrate", cmd_calibrate, "run a simulation study of p-value distributions and power"),
        ("validate", cmd_validate, "lint a config file and its data without running"),
    ):
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path, help="INI run configuration")
        if name == "check":
            p.add_argument("-q", "--quiet", action="store_true", help="do not echo the table to stdout")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ProprietyError, DegenerateDataError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
