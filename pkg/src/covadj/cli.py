"""Command-line entry point: ``covadj analyze | simulate | validate``.

Exit codes: 0 success, 1 configuration, 2 data, 3 estimation, 4 inference.
Failures print a JSON error payload on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import __version__, errors
from .config import load_analysis_config, load_simulation_config
from .data import load_dataset
from .errors import CovAdjError
from .report import (
    build_analysis_report,
    collect_findings,
    dumps,
    summary_text,
    write_estimates_csv,
)
from .simulation import run_monte_carlo


def _emit(text: str, out: str | None):
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def cmd_analyze(args) -> int:
    config = load_analysis_config(args.config)
    data = load_dataset(args.data, config.schema)
    report = build_analysis_report(data, config, data_source=Path(args.data).name)
    out = args.out or config.output
    _emit(dumps(report), out)
    csv_path = args.csv or config.csv
    if csv_path:
        write_estimates_csv(report, csv_path)
    if out:
        print(summary_text(report))
        print(f"\nreport written to {out}")
    return 0


def cmd_simulate(args) -> int:
    config = load_simulation_config(args.config)
    inf = config.inference
    start = time.perf_counter()
    report = run_monte_carlo(config.dgp, list(config.estimators), config.replicates, config.seed,
                             estimand=config.estimand, variance_method=inf.variance_method,
                             B=inf.bootstrap_replicates, level=inf.ci_level, alpha=inf.alpha,
                             plan=config.imputation, jobs=args.jobs,
                             keep_replicates=bool(args.csv or config.csv))
    elapsed = time.perf_counter() - start
    out = args.out or config.output
    _emit(dumps(report.to_dict()), out)
    csv_path = args.csv or config.csv
    if csv_path:
        report.write_csv(csv_path)
    if out:
        print(f"{config.replicates} replicates in {elapsed:.1f} s; report written to {out}",
              file=sys.stderr)
    return 0


def cmd_validate(args) -> int:
    config = load_analysis_config(args.config)
    try:
        data = load_dataset(args.data, config.schema)
    except CovAdjError as exc:
        findings = [{"level": "error", "code": type(exc).__name__, "message": exc.message,
                     "hint": exc.hint}]
        code = exc.exit_code
    else:
        findings = collect_findings(data, config)
        code = 0
        for f in findings:
            if f["level"] == "error":
                code = _exit_code_for(f["code"])
                break
    sys.stdout.write(dumps({"schema_version": "1.0", "kind": "validation_findings",
                            "findings": findings}))
    return code


def _exit_code_for(name: str) -> int:
    cls = getattr(errors, name, None)
    return cls.exit_code if isinstance(cls, type) and issubclass(cls, CovAdjError) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="covadj",
        description="Covariate-adjusted marginal treatment effects for two-arm randomized trials.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("analyze", help="run the configured analysis on a CSV file")
    p.add_argument("--config", required=True, help="analysis config (.json or .toml)")
    p.add_argument("--data", required=True, help="trial CSV with a header row")
    p.add_argument("--out", help="JSON report path (default: config output.path, else stdout)")
    p.add_argument("--csv", help="optional CSV sidecar with one row per estimator and scale")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("simulate", help="run a Monte-Carlo study")
    p.add_argument("--config", required=True, help="simulation config (.json or .toml)")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker processes; results do not depend on this")
    p.add_argument("--out", help="JSON report path (default: config output.path, else stdout)")
    p.add_argument("--csv", help="optional CSV of per-replicate estimates")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="check config and data without estimating")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "jobs", 1) < 1:
        print(json.dumps({"error": "InvalidConfig", "message": "--jobs must be >= 1"}),
              file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except CovAdjError as exc:
        print(json.dumps(exc.to_dict(), sort_keys=True), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
