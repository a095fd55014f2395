"""Command-line entry point: ``pipeline run|stage|report|bench``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path

from .benchmark import BenchmarkConfig, write_benchmark
from .errors import ConfigError, PipelineError
from .metrics import compare_report, read_report
from .pipeline import MODES, STAGES, load_config, run_pipeline, run_stage


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's exit 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    return {"mode": args.mode, "seed": args.seed, "output_dir": args.out}


def cmd_run(args) -> int:
    config = load_config(args.config, _overrides(args))
    report = run_pipeline(config, overwrite=args.overwrite)
    print(f"{report.method}: AUC {100 * report.auc:.2f}%  sensitivity {100 * report.sensitivity:.2f}%  FN {report.fn}")
    print(f"artifacts in {config.output_dir}")
    return 0


def cmd_stage(args) -> int:
    config = load_config(args.config, _overrides(args))
    result = run_stage(args.name, config)
    print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return 0


def cmd_report(args) -> int:
    reports = []
    for d in args.experiments:
        path = Path(d) / "report" / "eval_report.json"
        if not path.exists():
            raise ConfigError(f"no evaluation report under {d}")
        reports.append(read_report(path))
    table = compare_report(reports, include_reference=args.reference)
    print(table.render())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "comparison.csv").write_text(table.to_csv())
        (out / "roc_overlay.csv").write_text(table.roc_csv())
        print(f"tables written to {out}")
    return 0


def cmd_bench(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read benchmark config {args.config}: {exc}") from exc
    data = data.get("dataset", {}).get("synthetic", data)
    try:
        config = BenchmarkConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"benchmark config: {exc}") from exc
    train, test = write_benchmark(config, args.out)
    print(json.dumps({"train": str(train), "test": str(test), "config": asdict(config)}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pipeline", description="Synthesis-balanced lesion classification experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def experiment_args(p):
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--mode", choices=MODES)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (overrides output_dir)")

    run = sub.add_parser("run", help="run every stage of one experiment")
    experiment_args(run)
    run.add_argument("--overwrite", action="store_true", help="allow reusing an existing experiment directory")
    run.set_defaults(func=cmd_run)

    stage = sub.add_parser("stage", help="run a single stage")
    stage.add_argument("name", choices=STAGES)
    experiment_args(stage)
    stage.set_defaults(func=cmd_stage)

    report = sub.add_parser("report", help="comparison table and ROC overlay data")
    report.add_argument("--experiments", nargs="+", required=True, metavar="DIR")
    report.add_argument("--reference", action="store_true", help="append the published reference rows")
    report.add_argument("--out", help="directory for comparison.csv and roc_overlay.csv")
    report.set_defaults(func=cmd_report)

    bench = sub.add_parser("bench", help="synthetic benchmark utilities")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True, parser_class=_Parser)
    gen = bench_sub.add_parser("generate", help="write the synthetic benchmark as train/test snapshots")
    gen.add_argument("--config", required=True, help="BenchmarkConfig JSON, or an experiment config")
    gen.add_argument("--out", default="benchmark")
    gen.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
