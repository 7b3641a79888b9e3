"""Closed-loop conflict resolution.

Each round: evaluate the student on train with the best rule set so far, stop
if nothing fails, otherwise sample failure and success exhibits (failures
stratified by gold label so minority constraints stay covered), ask the
resolver for a complete revised rule set, and score the revision on
validation.

Loop policy, pinned:

- Convergence means a non-negative validation improvement below
  min_improvement. A regression (negative improvement) does not converge the
  loop; the round is recorded, best does not advance, and the next round
  prompts from the best set again, up to max_rounds.
- Version numbers grow by one per applied revision regardless of which set
  the prompt content came from, so every run's versions form the chain
  0 -> 1 -> ... -> k and every version's artifacts exist on disk.
- The final result is always the best-validation version, ties to the
  earliest; the loop can never return a set worse than its input.
- A resolver output that fails to parse is retried once with a format
  reminder; a second failure terminates the loop with the best set so far and
  a recorded warning (stop_reason "resolver_error").
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from . import gateway
from .corpus import LabeledExample, TaskSchema
from .errors import (
    ConfigError,
    EmptyRuleSet,
    MissingKey,
    NoFailures,
    NoJsonFound,
    UnknownBranchLabel,
)
from .evaluation import EvalConfig, EvalReport, PLD, Prediction, evaluate
from .extraction import RETRY_REMINDER, scan_json_values
from .gateway import BackendConfig, ChatRequest
from .synthesis import (
    PHASE_RESOLUTION,
    ConsolidatedRule,
    InstructionSet,
    NO_CLUSTER,
    parse_rule_object,
    render_system_prompt,
)
from .templates import PromptTemplate, load_template, render
from .util import atomic_write_json, atomic_write_text, stable_rng, write_jsonl

logger = logging.getLogger("promptdistill.resolution")

STOP_CONVERGED = "converged"
STOP_MAX_ROUNDS = "max_rounds"
STOP_NO_FAILURES = "no_failures"
STOP_RESOLVER_ERROR = "resolver_error"


@dataclass(frozen=True)
class ResolutionConfig:
    max_rounds: int = 5
    min_improvement: float = 0.005
    n_failures: int = 20
    n_successes: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.max_rounds < 1 or self.n_failures < 1 or self.n_successes < 1:
            raise ConfigError("max_rounds, n_failures and n_successes must be >= 1")
        if self.min_improvement < 0:
            raise ConfigError("min_improvement must be >= 0")


@dataclass
class ResolutionRound:
    round_index: int
    input_version: int
    output_version: int
    train_macro_f1_before: float
    val_macro_f1_before: float
    val_macro_f1_after: float
    failure_sample_ids: list[str]
    success_sample_ids: list[str]

    def __post_init__(self):
        if self.output_version != self.input_version + 1:
            raise ConfigError("output_version must be input_version + 1")
        if set(self.failure_sample_ids) & set(self.success_sample_ids):
            raise ConfigError("failure and success samples must be disjoint")

    def to_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "input_version": self.input_version,
            "output_version": self.output_version,
            "train_macro_f1_before": self.train_macro_f1_before,
            "val_macro_f1_before": self.val_macro_f1_before,
            "val_macro_f1_after": self.val_macro_f1_after,
            "failure_sample_ids": self.failure_sample_ids,
            "success_sample_ids": self.success_sample_ids,
        }


@dataclass
class ConvergenceState:
    rounds: list[ResolutionRound] = field(default_factory=list)
    best_version: int = 0
    stop_reason: str = STOP_NO_FAILURES
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rounds": [r.to_dict() for r in self.rounds],
            "best_version": self.best_version,
            "stop_reason": self.stop_reason,
            "warnings": self.warnings,
        }


def partition_errors(
    predictions: Sequence[Prediction], gold: Mapping[str, str]
) -> tuple[list[str], list[str]]:
    """Split prediction ids into (failures, successes); ABSTAIN is a failure."""
    failures: list[str] = []
    successes: list[str] = []
    for p in predictions:
        if p.parsed_label == gold[p.example_id]:
            successes.append(p.example_id)
        else:
            failures.append(p.example_id)
    return failures, successes


def sample_exhibits(
    failures: Sequence[str],
    successes: Sequence[str],
    gold: Mapping[str, str],
    cfg: ResolutionConfig,
    round_index: int,
) -> tuple[list[str], list[str]]:
    """Deterministic exhibit sampling, salted by round.

    Failures are stratified by gold label (proportional, at least one per
    failing label when the budget allows) so that a dominant failing class
    cannot crowd the minority constraints out of the resolver prompt.
    """
    rng = stable_rng("exhibits", cfg.seed, round_index)
    failure_sample = _stratified_sample(list(failures), gold, cfg.n_failures, rng)
    success_pool = list(successes)
    take = min(cfg.n_successes, len(success_pool))
    success_sample = rng.sample(success_pool, take) if take else []
    return failure_sample, success_sample


def _stratified_sample(ids: list[str], gold: Mapping[str, str], budget: int, rng) -> list[str]:
    if len(ids) <= budget:
        return list(ids)
    strata: dict[str, list[str]] = {}
    for example_id in ids:
        strata.setdefault(gold[example_id], []).append(example_id)
    labels = sorted(strata)
    if len(labels) > budget:
        # Cannot honor one-per-label; fall back to uniform.
        return rng.sample(ids, budget)
    quotas = {label: 1 for label in labels}
    remaining = budget - len(labels)
    total = len(ids)
    fractions = []
    for label in labels:
        share = remaining * len(strata[label]) / total
        quotas[label] += int(share)
        fractions.append((share - int(share), label))
    leftover = budget - sum(quotas.values())
    for _, label in sorted(fractions, key=lambda t: (-t[0], t[1])):
        if leftover <= 0:
            break
        if quotas[label] < len(strata[label]):
            quotas[label] += 1
            leftover -= 1
    sample: list[str] = []
    for label in labels:
        pool = strata[label]
        take = min(quotas[label], len(pool))
        sample.extend(rng.sample(pool, take))
    # Quota rounding can undershoot when small strata saturate; top up uniformly.
    if len(sample) < budget:
        rest = [i for i in ids if i not in set(sample)]
        sample.extend(rng.sample(rest, budget - len(sample)))
    return sample


def _render_exhibit(example: LabeledExample, prediction: Prediction) -> str:
    lines = [f"- example_id: {example.example_id}"]
    for name, value in example.inputs.items():
        lines.append(f"  {name}: {value}")
    lines.append(f"  gold_label: {example.gold_label}")
    lines.append(f"  model_answer: {prediction.parsed_label}")
    return "\n".join(lines)


def render_resolution_prompt(
    instruction_set: InstructionSet,
    failures: Sequence[tuple[LabeledExample, Prediction]],
    successes: Sequence[tuple[LabeledExample, Prediction]],
    schema: TaskSchema,
    template: PromptTemplate | None = None,
) -> str:
    """Current rules, then failure exhibits, then success exhibits, then the
    revise-and-return-everything directive. Deterministic bytes."""
    if not failures:
        raise NoFailures("resolution prompt requires at least one failure exhibit")
    template = template or load_template("conflict_resolution")
    return render(
        template,
        {
            "label_list": ", ".join(schema.label_set),
            "current_rules": instruction_set.rules_json(),
            "failure_exhibits": "\n".join(_render_exhibit(e, p) for e, p in failures),
            "success_exhibits": "\n".join(_render_exhibit(e, p) for e, p in successes)
            or "(none sampled)",
        },
    )


def parse_revision_rules(raw: str) -> list[dict]:
    """Locate the revised rule list in raw resolver output.

    Accepts a JSON array of rule objects, an object with a "rules" array, or a
    single rule object. The first candidate actually shaped like rules (some
    entry carries a "topic") wins, so stray JSON noise around the payload is
    harmless.
    """
    candidates: list[list] = []
    for value in scan_json_values(raw):
        if isinstance(value, dict) and isinstance(value.get("rules"), list):
            candidates.append(value["rules"])
        elif isinstance(value, list):
            candidates.append(value)
        elif isinstance(value, dict):
            candidates.append([value])
    if not candidates:
        raise NoJsonFound("no JSON found in resolver output")
    chosen = next(
        (
            c
            for c in candidates
            if any(isinstance(obj, dict) and "topic" in obj for obj in c)
        ),
        candidates[0],
    )
    rules = [dict(obj) for obj in chosen if isinstance(obj, dict)]
    if not rules:
        raise EmptyRuleSet("resolver returned no rule objects")
    return rules


def apply_revision(raw: str, parent: InstructionSet, label_set: Sequence[str]) -> InstructionSet:
    """Parse a full revised rule set and chain it onto parent.

    Rules keep cluster provenance when their topic matches a parent rule
    (case-insensitive); resolver-authored rules get provenance -1.
    """
    rule_objects = parse_revision_rules(raw)
    parent_by_topic = {r.topic.casefold(): r for r in parent.rules}
    rules = []
    for obj in rule_objects:
        topic, logic, instruction = parse_rule_object(obj, label_set)
        ancestor = parent_by_topic.get(topic.casefold())
        rules.append(
            ConsolidatedRule(
                topic=topic,
                logic=logic,
                instruction=instruction,
                provenance_cluster_id=ancestor.provenance_cluster_id if ancestor else NO_CLUSTER,
                member_count=ancestor.member_count if ancestor else 0,
            )
        )
    if not rules:
        raise EmptyRuleSet("revision produced no rules")
    return InstructionSet(
        version=parent.version + 1,
        task_id=parent.task_id,
        rules=tuple(rules),
        parent_version=parent.version,
        created_by_phase=PHASE_RESOLUTION,
    )


def _resolver_call(prompt: str, resolver: BackendConfig) -> str:
    response = gateway.complete(
        ChatRequest(
            system_text="",
            user_text=prompt,
            temperature=resolver.temperature,
            max_output_tokens=resolver.max_output_tokens,
            backend_role="resolver",
        ),
        resolver,
    )
    return response.text


def run_resolution_loop(
    train: Sequence[LabeledExample],
    validation: Sequence[LabeledExample],
    set0: InstructionSet,
    student: BackendConfig,
    resolver: BackendConfig,
    cfg: ResolutionConfig,
    schema: TaskSchema,
    template: PromptTemplate | None = None,
    artifact_dir: Path | None = None,
    train_eval_cap: int | None = None,
) -> tuple[InstructionSet, ConvergenceState]:
    """Iterate evaluate -> sample -> resolve -> score until convergence,
    max_rounds, a clean train pass, or a resolver breakdown."""
    if not train or not validation:
        raise ConfigError("resolution needs non-empty train and validation splits")
    train_pool = list(train)
    if train_eval_cap is not None and len(train_pool) > train_eval_cap:
        train_pool = stable_rng("train-cap", cfg.seed).sample(train_pool, train_eval_cap)
    train_by_id = {e.example_id: e for e in train_pool}
    train_gold = {e.example_id: e.gold_label for e in train_pool}

    state = ConvergenceState(best_version=set0.version)
    best = set0
    best_val: float | None = None
    latest = set0
    val_f1_cache: dict[int, float] = {}

    def _val_f1(instruction_set: InstructionSet) -> float:
        if instruction_set.version not in val_f1_cache:
            report, _ = evaluate(
                validation,
                render_system_prompt(instruction_set, schema),
                EvalConfig(regime=PLD, student=student, seed=cfg.seed),
                schema,
                instruction_set_version=instruction_set.version,
                split_name="validation",
            )
            val_f1_cache[instruction_set.version] = report.macro_f1
        return val_f1_cache[instruction_set.version]

    def _persist_set(instruction_set: InstructionSet) -> None:
        if artifact_dir is None:
            return
        atomic_write_json(
            artifact_dir / f"instruction_set_v{instruction_set.version}.json",
            instruction_set.to_dict(),
        )
        atomic_write_text(
            artifact_dir / f"system_prompt_v{instruction_set.version}.txt",
            render_system_prompt(instruction_set, schema) + "\n",
        )

    for round_index in range(1, cfg.max_rounds + 1):
        train_report, train_preds = evaluate(
            train_pool,
            render_system_prompt(best, schema),
            EvalConfig(regime=PLD, student=student, seed=cfg.seed),
            schema,
            instruction_set_version=best.version,
            split_name="train",
        )
        round_dir = artifact_dir / f"round_{round_index:03d}" if artifact_dir else None
        if round_dir is not None:
            write_jsonl(round_dir / "train_predictions.jsonl", (p.to_record() for p in train_preds))
        failures, successes = partition_errors(train_preds, train_gold)
        if not failures:
            state.stop_reason = STOP_NO_FAILURES
            break

        val_before = _val_f1(best)
        if best_val is None:
            best_val = val_before
        failure_ids, success_ids = sample_exhibits(
            failures, successes, train_gold, cfg, round_index
        )
        preds_by_id = {p.example_id: p for p in train_preds}
        prompt = render_resolution_prompt(
            best,
            [(train_by_id[i], preds_by_id[i]) for i in failure_ids],
            [(train_by_id[i], preds_by_id[i]) for i in success_ids],
            schema,
            template,
        )

        raw = _resolver_call(prompt, resolver)
        try:
            revised = apply_revision(raw, latest, schema.label_set)
        except (NoJsonFound, MissingKey, EmptyRuleSet, UnknownBranchLabel) as first:
            logger.warning("round %d: revision did not parse (%s); retrying once", round_index, first)
            raw = _resolver_call(prompt + "\n\n" + RETRY_REMINDER, resolver)
            try:
                revised = apply_revision(raw, latest, schema.label_set)
            except (NoJsonFound, MissingKey, EmptyRuleSet, UnknownBranchLabel) as second:
                state.warnings.append(
                    f"round {round_index}: resolver output unusable twice "
                    f"({type(second).__name__}: {second}); keeping version {best.version}"
                )
                state.stop_reason = STOP_RESOLVER_ERROR
                break

        if round_dir is not None:
            atomic_write_json(
                round_dir / "exhibits.json",
                {"failure_sample_ids": failure_ids, "success_sample_ids": success_ids},
            )
            atomic_write_text(round_dir / "resolver_prompt.txt", prompt + "\n")
            atomic_write_text(round_dir / "resolver_raw.txt", raw + "\n")

        latest = revised
        _persist_set(revised)
        val_after = _val_f1(revised)
        state.rounds.append(
            ResolutionRound(
                round_index=round_index,
                input_version=revised.version - 1,
                output_version=revised.version,
                train_macro_f1_before=train_report.macro_f1,
                val_macro_f1_before=val_before,
                val_macro_f1_after=val_after,
                failure_sample_ids=failure_ids,
                success_sample_ids=success_ids,
            )
        )
        if val_after > best_val:
            best = revised
            best_val = val_after
            state.best_version = revised.version
        improvement = val_after - val_before
        if 0 <= improvement < cfg.min_improvement:
            state.stop_reason = STOP_CONVERGED
            break
        if improvement < 0:
            logger.info(
                "round %d regressed validation macro-F1 by %.4f; continuing from version %d",
                round_index,
                -improvement,
                best.version,
            )
    else:
        state.stop_reason = STOP_MAX_ROUNDS

    if artifact_dir is not None:
        atomic_write_json(artifact_dir / "convergence.json", state.to_dict())
    return best, state
