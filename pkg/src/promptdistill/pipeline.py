"""Phase driver: executes extract -> cluster -> synthesize -> resolve ->
evaluate against a run directory, skipping phases whose artifacts already
verify, so a rerun of a finished run performs zero backend calls.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

from . import clustering, corpus, evaluation, extraction, figures, reporting, resolution, synthesis
from .clustering import Cluster, medoid_instruction_id
from .corpus import Dataset
from .errors import PhaseError, PipelineError
from .evaluation import EvalConfig, FEW_SHOT, PLD, ZERO_SHOT
from .extraction import MicroInstruction
from .gateway import BackendConfig
from .runstore import (
    CACHED_ROLES,
    COMPLETE,
    PHASES,
    PipelineConfig,
    RunManifest,
    mark_phase_complete,
    mark_phase_failed,
    run_dir,
    save_manifest,
    upstream_incomplete,
)
from .synthesis import InstructionSet, render_system_prompt, render_task_preamble
from .templates import load_template
from .util import atomic_write_json, atomic_write_text, read_jsonl, write_jsonl

logger = logging.getLogger("promptdistill.pipeline")

ROW_ZERO_SHOT = "zero_shot"
ROW_FEW_SHOT = "few_shot"
ROW_CLUSTERED = "clustered_instructions"
ROW_POST_RESOLUTION = "post_resolution"


@dataclass
class RunContext:
    config: PipelineConfig
    dataset: Dataset
    run_root: Path
    manifest: RunManifest

    @property
    def directory(self) -> Path:
        return run_dir(self.run_root, self.manifest.run_id)

    def phase_dir(self, phase: str) -> Path:
        d = self.directory / "phases" / phase
        d.mkdir(parents=True, exist_ok=True)
        return d

    def backend(self, role: str) -> BackendConfig:
        """Role backend with the default cache policy applied: responses for
        the idempotent offline roles are cached under the run directory unless
        the config pins a cache_dir; the student stays uncached by default."""
        cfg = self.config.backends[role]
        if cfg.cache_dir is None and role in CACHED_ROLES:
            return replace(cfg, cache_dir=str(self.directory / "cache" / role))
        return cfg

    def template(self, phase: str):
        return load_template(self.config.template_id(phase), self.config.template_dir)


def phase_extract(ctx: RunContext) -> dict[str, str]:
    train = ctx.dataset.split_examples("train")
    limit = ctx.config.limits.extraction_limit
    if limit is not None:
        train = train[:limit]
    instructions, failures = extraction.extract_all(
        train,
        ctx.template("extraction"),
        ctx.backend("teacher"),
        failure_ceiling=ctx.config.limits.extraction_failure_ceiling,
    )
    out = ctx.phase_dir("extract")
    write_jsonl(out / "instructions.jsonl", (i.to_record() for i in instructions))
    write_jsonl(
        out / "failures.jsonl",
        ({"example_id": eid, "error": err} for eid, err in failures),
    )
    return {
        "instructions": "phases/extract/instructions.jsonl",
        "extraction_failures": "phases/extract/failures.jsonl",
    }


def _load_instructions(ctx: RunContext) -> list[MicroInstruction]:
    path = ctx.directory / ctx.manifest.artifact_paths["instructions"]
    return [MicroInstruction.from_record(r) for r in read_jsonl(path)]


def phase_cluster(ctx: RunContext) -> dict[str, str]:
    instructions = _load_instructions(ctx)
    clusters, noise_ids, points = clustering.cluster_instructions_detailed(
        instructions, ctx.backend("embedder"), ctx.config.clustering
    )
    by_id = {i.instruction_id: i for i in instructions}
    points_by_id = {p.instruction_id: p for p in points}
    assignment_of = {i: clustering.NOISE for i in noise_ids}
    for cluster in clusters:
        for member in cluster.member_ids:
            assignment_of[member] = cluster.cluster_id
    out = ctx.phase_dir("cluster")
    write_jsonl(
        out / "assignments.jsonl",
        (
            {"instruction_id": i.instruction_id, "cluster_id": assignment_of[i.instruction_id]}
            for i in instructions
        ),
    )
    summaries = []
    for cluster in clusters:
        medoid = medoid_instruction_id(cluster, points_by_id)
        summaries.append(
            {
                "cluster_id": cluster.cluster_id,
                "size": len(cluster.member_ids),
                "member_ids": cluster.member_ids,
                "label_histogram": cluster.label_histogram,
                "medoid_instruction_id": medoid,
                "medoid_text": by_id[medoid].executable_rule,
            }
        )
    write_jsonl(out / "clusters.jsonl", summaries)
    # Discarded outliers go to a diagnostics file only; they never reach prompts.
    write_jsonl(out / "noise.jsonl", (by_id[i].to_record() for i in noise_ids))
    return {
        "cluster_assignments": "phases/cluster/assignments.jsonl",
        "cluster_summary": "phases/cluster/clusters.jsonl",
        "cluster_noise": "phases/cluster/noise.jsonl",
    }


def _load_clusters(ctx: RunContext) -> list[Cluster]:
    path = ctx.directory / ctx.manifest.artifact_paths["cluster_summary"]
    return [
        Cluster(
            cluster_id=int(r["cluster_id"]),
            member_ids=list(r["member_ids"]),
            label_histogram=dict(r["label_histogram"]),
        )
        for r in read_jsonl(path)
    ]


def phase_synthesize(ctx: RunContext) -> dict[str, str]:
    clusters = _load_clusters(ctx)
    if not clusters:
        raise PipelineError(
            "clustering produced no clusters; cannot synthesize an instruction set "
            "(try a larger epsilon or smaller min_samples)"
        )
    instructions = _load_instructions(ctx)
    set0 = synthesis.synthesize_all(
        clusters,
        instructions,
        ctx.backend("synthesizer"),
        ctx.config.task,
        ctx.template("synthesis"),
    )
    out = ctx.phase_dir("synthesize")
    atomic_write_json(out / "instruction_set_v0.json", set0.to_dict())
    prompt = render_system_prompt(set0, ctx.config.task, ctx.template("system"))
    atomic_write_text(out / "system_prompt_v0.txt", prompt + "\n")
    return {
        "instruction_set_v0": "phases/synthesize/instruction_set_v0.json",
        "system_prompt_v0": "phases/synthesize/system_prompt_v0.txt",
    }


def _load_instruction_set(ctx: RunContext, kind: str) -> InstructionSet:
    path = ctx.directory / ctx.manifest.artifact_paths[kind]
    return InstructionSet.from_dict(json.loads(path.read_text(encoding="utf-8")))


def phase_resolve(ctx: RunContext) -> dict[str, str]:
    set0 = _load_instruction_set(ctx, "instruction_set_v0")
    out = ctx.phase_dir("resolve")
    final, state = resolution.run_resolution_loop(
        ctx.dataset.split_examples("train"),
        ctx.dataset.split_examples("validation"),
        set0,
        ctx.backend("student"),
        ctx.backend("resolver"),
        ctx.config.resolution,
        ctx.config.task,
        template=ctx.template("resolution"),
        artifact_dir=out,
        train_eval_cap=ctx.config.limits.train_eval_cap,
    )
    atomic_write_json(out / "instruction_set_final.json", final.to_dict())
    atomic_write_text(
        out / "system_prompt_final.txt",
        render_system_prompt(final, ctx.config.task, ctx.template("system")) + "\n",
    )
    artifacts = {
        "convergence": "phases/resolve/convergence.json",
        "instruction_set_final": "phases/resolve/instruction_set_final.json",
        "system_prompt_final": "phases/resolve/system_prompt_final.txt",
    }
    for round_record in state.rounds:
        version = round_record.output_version
        artifacts[f"instruction_set_v{version}"] = f"phases/resolve/instruction_set_v{version}.json"
        artifacts[f"system_prompt_v{version}"] = f"phases/resolve/system_prompt_v{version}.txt"
    return artifacts


def phase_evaluate(ctx: RunContext) -> dict[str, str]:
    schema = ctx.config.task
    split_name = ctx.config.evaluation.split
    split = ctx.dataset.split_examples(split_name)
    student = ctx.backend("student")
    preamble = render_task_preamble(schema, ctx.template("system"))
    set0 = _load_instruction_set(ctx, "instruction_set_v0")
    final = _load_instruction_set(ctx, "instruction_set_final")
    out = ctx.phase_dir("evaluate")

    rows: dict[str, tuple] = {}
    if ZERO_SHOT in ctx.config.evaluation.regimes:
        rows[ROW_ZERO_SHOT] = evaluation.evaluate(
            split,
            preamble,
            EvalConfig(regime=ZERO_SHOT, student=student, seed=ctx.config.seed),
            schema,
            split_name=split_name,
        )
    if FEW_SHOT in ctx.config.evaluation.regimes:
        exemplars = corpus.sample_few_shot(
            ctx.dataset, ctx.config.evaluation.k_shots, ctx.config.seed
        )
        rows[ROW_FEW_SHOT] = evaluation.evaluate(
            split,
            preamble,
            EvalConfig(
                regime=FEW_SHOT,
                student=student,
                k_shots=ctx.config.evaluation.k_shots,
                seed=ctx.config.seed,
            ),
            schema,
            few_shot_exemplars=exemplars,
            split_name=split_name,
            block_template=ctx.template("few_shot"),
        )
    rows[ROW_CLUSTERED] = evaluation.evaluate(
        split,
        render_system_prompt(set0, schema, ctx.template("system")),
        EvalConfig(regime=PLD, student=student, seed=ctx.config.seed),
        schema,
        instruction_set_version=set0.version,
        split_name=split_name,
    )
    if final.version == set0.version:
        rows[ROW_POST_RESOLUTION] = rows[ROW_CLUSTERED]
    else:
        rows[ROW_POST_RESOLUTION] = evaluation.evaluate(
            split,
            render_system_prompt(final, schema, ctx.template("system")),
            EvalConfig(regime=PLD, student=student, seed=ctx.config.seed),
            schema,
            instruction_set_version=final.version,
            split_name=split_name,
        )

    artifacts: dict[str, str] = {}
    report_dicts: dict[str, dict] = {}
    for row, (report, predictions) in rows.items():
        atomic_write_json(out / f"report_{row}.json", report.to_dict())
        write_jsonl(out / f"predictions_{row}.jsonl", (p.to_record() for p in predictions))
        # Latency stays out of the report artifact so reports are byte-stable.
        atomic_write_json(
            out / f"latency_{row}.json", evaluation.latency_summary(predictions)
        )
        artifacts[f"report_{row}"] = f"phases/evaluate/report_{row}.json"
        artifacts[f"predictions_{row}"] = f"phases/evaluate/predictions_{row}.jsonl"
        report_dicts[row] = report.to_dict()

    atomic_write_text(out / "summary.txt", reporting.summary_table(report_dicts) + "\n")
    atomic_write_text(
        out / "records.jsonl", "".join(line + "\n" for line in reporting.summary_records(report_dicts))
    )
    artifacts["summary_table"] = "phases/evaluate/summary.txt"
    artifacts["summary_records"] = "phases/evaluate/records.jsonl"
    for name, rel in figures.render_report_figures(report_dicts, out / "figures").items():
        artifacts[name] = f"phases/evaluate/figures/{rel}"
    return artifacts


_PHASE_FUNCTIONS = {
    "extract": phase_extract,
    "cluster": phase_cluster,
    "synthesize": phase_synthesize,
    "resolve": phase_resolve,
    "evaluate": phase_evaluate,
}


def execute_phases(ctx: RunContext, only: list[str] | None = None) -> list[str]:
    """Run the requested (default: all) phases that are still pending, in DAG
    order. Returns the list of phases actually executed. A failing phase is
    marked failed in the manifest - partial artifacts stay on disk for resume -
    and surfaces as PhaseError."""
    wanted = list(only) if only is not None else list(PHASES)
    for phase in wanted:
        if phase not in PHASES:
            raise PipelineError(f"unknown phase {phase!r}")
    executed: list[str] = []
    for phase in PHASES:
        if phase not in wanted:
            continue
        if ctx.manifest.phase_status.get(phase) == COMPLETE:
            logger.info("phase %s already complete; skipping", phase)
            continue
        missing = upstream_incomplete(ctx.manifest, phase)
        if missing:
            raise PipelineError(
                f"cannot run phase {phase!r}: upstream phases incomplete: {missing}"
            )
        logger.info("running phase %s", phase)
        try:
            artifacts = _PHASE_FUNCTIONS[phase](ctx)
        except Exception as e:
            mark_phase_failed(ctx.run_root, ctx.manifest, phase)
            raise PhaseError(phase, e) from e
        mark_phase_complete(ctx.run_root, ctx.manifest, phase, artifacts)
        executed.append(phase)
    save_manifest(ctx.run_root, ctx.manifest)
    return executed
