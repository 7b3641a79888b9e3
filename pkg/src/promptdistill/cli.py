"""Command-line surface.

Subcommands: ``convert`` (public dataset adapters), the per-phase commands
``extract`` / ``cluster`` / ``synthesize`` / ``resolve`` / ``evaluate``,
``run`` (all phases in order), and ``report`` (render stored reports).

Every flag has a config-file equivalent and flag overrides win; the effective
configuration is persisted in the run directory. Exit codes: 0 success,
2 config error, 3 phase failure, 4 backend/transport failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import converters, pipeline, reporting
from .corpus import Dataset, load_dataset
from .errors import (
    ConfigError,
    GatewayError,
    NoReports,
    PhaseError,
    PipelineError,
)
from .figures import render_report_figures
from .runstore import (
    PHASES,
    PipelineConfig,
    RunManifest,
    derive_run_id,
    init_run,
    load_config_file,
    load_manifest,
    manifest_path,
    resume,
    run_dir,
    run_lock,
)

logger = logging.getLogger("promptdistill.cli")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PHASE = 3
EXIT_BACKEND = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="promptdistill",
        description="Mine, consolidate, repair, and evaluate distilled reasoning prompts.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    convert = sub.add_parser("convert", help="convert a public dataset distribution to JSONL")
    convert_sub = convert.add_subparsers(dest="dataset_kind", required=True)
    c_nli = convert_sub.add_parser("contract-nli", help="train/dev/test JSON directory")
    c_nli.add_argument("--input", required=True, type=Path, help="directory with train/dev/test.json")
    c_nli.add_argument("--output", required=True, type=Path, help="output JSONL path")
    c_ss = convert_sub.add_parser("stereoset", help="dev.json with intrasentence entries")
    c_ss.add_argument("--input", required=True, type=Path, help="path to dev.json")
    c_ss.add_argument("--output", required=True, type=Path, help="output JSONL path")
    c_ss.add_argument("--seed", type=int, default=0, help="split-assignment shuffle seed")
    c_ss.add_argument(
        "--counts",
        default=",".join(str(c) for c in converters.DEFAULT_STEREOSET_COUNTS),
        help="train,validation,test counts (must sum to the file's entry count)",
    )

    def add_run_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", type=Path, help="pipeline config JSON")
        p.add_argument("--dataset", type=Path, help="dataset JSONL (required for a new run)")
        p.add_argument("--run-root", type=Path, help="directory holding run directories")
        p.add_argument("--run-id", help="run identifier (default: content-derived)")
        p.add_argument("--epsilon", type=float, help="clustering neighborhood radius")
        p.add_argument("--min-samples", type=int, help="clustering core-point threshold")
        p.add_argument("--k-shots", type=int, help="few-shot exemplar count")
        p.add_argument("--max-rounds", type=int, help="conflict-resolution round cap")
        p.add_argument("--limit", type=int, help="extract at most this many train examples")
        p.add_argument("--regimes", help="comma list of baseline regimes: zero_shot,few_shot")
        p.add_argument("--seed", type=int, help="global sampling seed")

    for name, help_text in [
        ("run", "execute all pipeline phases in order"),
        ("extract", "phase 1: mine micro-instructions from the train split"),
        ("cluster", "phase 2a: cluster micro-instruction embeddings"),
        ("synthesize", "phase 2b: consolidate clusters into instruction set v0"),
        ("resolve", "phase 3: conflict-resolution loop"),
        ("evaluate", "phase 4: score the student across regimes"),
    ]:
        p = sub.add_parser(name, help=help_text)
        add_run_flags(p)

    report = sub.add_parser("report", help="render stored evaluation reports")
    report.add_argument("--run-root", type=Path, required=True)
    report.add_argument("--run-id", required=True)
    report.add_argument("--format", choices=("text_table", "records"), default="text_table")
    report.add_argument(
        "--no-figures", action="store_true", help="skip rendering figure files"
    )
    return parser


def _apply_overrides(config: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    d = config.to_dict()
    if args.epsilon is not None:
        d["clustering"]["epsilon"] = args.epsilon
    if args.min_samples is not None:
        d["clustering"]["min_samples"] = args.min_samples
    if args.k_shots is not None:
        d["evaluation"]["k_shots"] = args.k_shots
    if args.max_rounds is not None:
        d["resolution"]["max_rounds"] = args.max_rounds
    if args.limit is not None:
        d["limits"]["extraction_limit"] = args.limit
    if args.regimes is not None:
        d["evaluation"]["regimes"] = [r for r in args.regimes.split(",") if r]
    if args.seed is not None:
        d["seed"] = args.seed
        d["resolution"]["seed"] = args.seed
    if args.run_root is not None:
        d["run_root"] = str(args.run_root)
    return PipelineConfig.from_dict(d)


def _prepare_context(args: argparse.Namespace) -> pipeline.RunContext:
    """Load or initialize the run this command operates on."""
    file_config = load_config_file(args.config) if args.config else None
    run_root = args.run_root or (Path(file_config.run_root) if file_config else None)

    manifest: RunManifest | None = None
    if args.run_id and run_root is not None and manifest_path(run_root, args.run_id).is_file():
        manifest, warnings = resume(run_root, args.run_id)
        for w in warnings:
            logger.warning("%s", w)

    if manifest is None and file_config is None:
        raise ConfigError("--config is required for a new run")

    if file_config is not None:
        config = _apply_overrides(file_config, args)
        config.validate()
    else:
        config = None  # filled from the stored run below

    if manifest is None and config is not None:
        if args.dataset is None:
            raise ConfigError("--dataset is required for a new run")
        dataset = load_dataset(args.dataset, config.task)
        root = Path(run_root) if run_root is not None else Path(config.run_root)
        rid = args.run_id or derive_run_id(config, dataset)
        if manifest_path(root, rid).is_file():
            manifest, warnings = resume(root, rid)
            for w in warnings:
                logger.warning("%s", w)
        else:
            manifest = init_run(config, dataset, args.dataset, root, rid)
        run_root = root

    assert manifest is not None and run_root is not None
    stored = _load_run_config(run_root, manifest.run_id)
    if config is not None and config.digest() != manifest.config_digest:
        raise ConfigError(
            "supplied config (with overrides) differs from the run's stored config; "
            "pick a new --run-id to start a fresh run"
        )
    config = config or stored
    dataset = load_dataset(Path(manifest.dataset_path), config.task)
    return pipeline.RunContext(
        config=config, dataset=dataset, run_root=Path(run_root), manifest=manifest
    )


def _load_run_config(run_root: Path, run_id: str) -> PipelineConfig:
    path = run_dir(run_root, run_id) / "config.json"
    if not path.is_file():
        raise ConfigError(f"run {run_id!r} has no stored config at {path}")
    return PipelineConfig.from_dict(json.loads(path.read_text(encoding="utf-8")))


def _load_reports(ctx_root: Path, manifest: RunManifest) -> dict[str, dict]:
    reports: dict[str, dict] = {}
    directory = run_dir(ctx_root, manifest.run_id)
    for kind, rel in manifest.artifact_paths.items():
        if kind.startswith("report_"):
            path = directory / rel
            if path.is_file():
                reports[kind.removeprefix("report_")] = json.loads(
                    path.read_text(encoding="utf-8")
                )
    if not reports:
        raise NoReports("no evaluation reports stored for this run")
    return reports


def cmd_convert(args: argparse.Namespace) -> int:
    if args.dataset_kind == "contract-nli":
        counts = converters.convert_contract_nli(args.input, args.output)
    else:
        parts = tuple(int(c) for c in args.counts.split(","))
        if len(parts) != 3:
            raise ConfigError("--counts must be three comma-separated integers")
        counts = converters.convert_stereoset(args.input, args.output, args.seed, parts)
    print(f"wrote {args.output} with splits train={counts[0]} validation={counts[1]} test={counts[2]}")
    return EXIT_OK


def cmd_phases(args: argparse.Namespace, only: list[str] | None) -> int:
    ctx = _prepare_context(args)
    with run_lock(ctx.run_root, ctx.manifest.run_id):
        executed = pipeline.execute_phases(ctx, only)
    if executed:
        logger.info("executed phases: %s", ", ".join(executed))
    if only is None or "evaluate" in (only or []):
        if ctx.manifest.phase_status.get("evaluate") == "complete":
            reports = _load_reports(ctx.run_root, ctx.manifest)
            print(f"run: {ctx.manifest.run_id}")
            print(reporting.summary_table(reports))
    else:
        print(f"run: {ctx.manifest.run_id} ({', '.join(executed) or 'nothing to do'})")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    manifest = load_manifest(args.run_root, args.run_id)
    reports = _load_reports(args.run_root, manifest)
    if args.format == "records":
        for line in reporting.summary_records(reports):
            print(line)
    else:
        print(reporting.summary_table(reports))
    if not args.no_figures:
        figures_dir = run_dir(args.run_root, args.run_id) / "phases" / "evaluate" / "figures"
        rendered = render_report_figures(reports, figures_dir)
        logger.info("figures under %s: %s", figures_dir, ", ".join(sorted(rendered.values())))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "convert":
            return cmd_convert(args)
        if args.command == "report":
            return cmd_report(args)
        if args.command == "run":
            return cmd_phases(args, None)
        if args.command in PHASES:
            return cmd_phases(args, [args.command])
        raise ConfigError(f"unknown command {args.command!r}")
    except PhaseError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND if isinstance(e.cause, GatewayError) else EXIT_PHASE
    except GatewayError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_BACKEND
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except PipelineError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_PHASE


if __name__ == "__main__":
    raise SystemExit(main())
