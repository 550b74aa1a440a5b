#!/usr/bin/env python3

import argparse
import logging
import sys
from pathlib import Path

import typed_argparse as tap

from nfkam.core.pipeline import STAGE_CHAINS, VERSION, PipelineRun, Subcommand
from nfkam.utils.artifact_store import ArtifactStore, SnapshotMismatch
from nfkam.utils.config import BUILTIN_MODELS, ConfigValidationError, apply_overrides, load_config
from nfkam.utils.report_generators import ReportFormat, generate_reports, render_trajectory_csv

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


class CliArgs(tap.TypedArgs):
    subcommand: str
    config: str | None
    out: str
    verbose: bool
    quiet: bool
    steps: int | None
    mode: str | None
    profile: str | None
    strict: bool
    seed: int | None
    delta_grid: str | None
    order_cap: int | None
    force: bool
    fmt: str


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _ = common.add_argument('--config', type=str, default=None,
                            help=f"Model config file or built-in name ({', '.join(BUILTIN_MODELS)}); default ./config.json")
    _ = common.add_argument('--out', type=str, default="out", help='Output directory for the run artifact and reports')
    _ = common.add_argument('--verbose', action='store_true', help='Debug logging')
    _ = common.add_argument('--quiet', action='store_true', help='Warnings and errors only')

    run = argparse.ArgumentParser(add_help=False)
    _ = run.add_argument('--steps', type=int, help='Number of KAM steps')
    _ = run.add_argument('--mode', choices=['plain', 'partial', 'isoenergetic'], help='KAM step mode')
    _ = run.add_argument('--profile', choices=['paper', 'analytic', 'practical'], help='Schedule profile (analytic is an alias of paper)')
    _ = run.add_argument('--strict', action='store_true', help='Fail the run on any gate (conditions, H-flags, regressions)')
    _ = run.add_argument('--seed', type=int, help='Seed for sampled checks')
    _ = run.add_argument('--delta-grid', type=str, help='Comma-separated delta values for the degeneracy order fit')
    _ = run.add_argument('--order-cap', type=int, help='Largest degeneracy order accepted')
    _ = run.add_argument('--force', action='store_true', help='Overwrite a run of a different config in --out')

    parser = argparse.ArgumentParser(prog='nfkam', description='Normal forms and KAM steps for resonant invariant tori')
    _ = parser.add_argument('--version', action='version', version=f'%(prog)s {VERSION}')
    parser.set_defaults(steps=None, mode=None, profile=None, strict=False, seed=None, delta_grid=None,
                        order_cap=None, force=False, fmt="table")
    sub = parser.add_subparsers(dest='subcommand', required=True)
    for name in Subcommand:
        stages = " -> ".join(STAGE_CHAINS[name])
        _ = sub.add_parser(str(name), parents=[common, run], help=f'Run {stages}')
    report = sub.add_parser('report', parents=[common], help='Render tables, CSV or plot data from a stored artifact')
    _ = report.add_argument('--format', dest='fmt', choices=[str(f) for f in ReportFormat], default="table",
                            help='Report format')
    return parser


def parse_cli_args(argv: list[str] | None = None) -> CliArgs:
    """Parse and validate command line arguments."""
    parser = build_parser()
    inargs = parser.parse_args(argv)
    args = CliArgs.from_argparse(inargs)
    if args.verbose and args.quiet:
        parser.error("--verbose and --quiet are mutually exclusive")
    return args


def configure_logging(args: CliArgs) -> None:
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def parse_delta_grid(text: str | None) -> list[float] | None:
    if text is None:
        return None
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigValidationError(f"--delta-grid: {e}") from e


def run_report(args: CliArgs) -> int:
    store = ArtifactStore(Path(args.out))
    stored = store.load()
    if stored is None:
        print(f"Error: no run artifact in {store.output_dir}")
        return EXIT_USAGE
    written = generate_reports(stored.data, store.output_dir / "reports", args.fmt)
    for path in written:
        print(f"Wrote {path}")
    return EXIT_OK


def run_stages(args: CliArgs) -> int:
    try:
        cfg = apply_overrides(
            load_config(args.config),
            steps=args.steps,
            mode=args.mode,
            profile=args.profile,
            strict=args.strict,
            seed=args.seed,
            delta_grid=parse_delta_grid(args.delta_grid),
            order_cap=args.order_cap,
        )
    except ConfigValidationError as e:
        print(f"Error in config file: {str(e)}")
        return EXIT_USAGE

    store = ArtifactStore(Path(args.out))
    snapshot = cfg.model_dump(mode="json", by_alias=True)
    try:
        store.check_snapshot(snapshot, force=args.force)
    except SnapshotMismatch as e:
        print(e.report)
        print("Error: config differs from the run stored in the output directory (use --force to overwrite)")
        return EXIT_USAGE

    print(f"nfkam {VERSION}: {args.subcommand} on model '{cfg.name}'")
    run = PipelineRun(cfg, Subcommand(args.subcommand), cfg.engine.strict)
    artifact = run.run()
    store.write_snapshot(snapshot)
    print(f"Wrote {store.save(artifact)}")
    for i, trajectory in enumerate(run.trajectories):
        path = store.output_dir / f"trajectory_{i}.csv"
        _ = path.write_text(render_trajectory_csv(trajectory), encoding="utf-8")

    for stage in artifact.deterministic.stages:
        print(f"  {stage.name:<10} {stage.status}{': ' + stage.message if stage.message else ''}")
    for gate in artifact.gate_failures:
        print(f"  gate: {gate}")
    return EXIT_FAILED if artifact.failed else EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = parse_cli_args(argv)
    configure_logging(args)
    if args.subcommand == "report":
        return run_report(args)
    return run_stages(args)


if __name__ == "__main__":
    sys.exit(main())
