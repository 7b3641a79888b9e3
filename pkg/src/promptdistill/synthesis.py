"""Consolidating clustered micro-instructions into a versioned rule set and
rendering it as the student's system prompt.

The synthesizer model is allowed two output shapes, both observed in practice,
and the parser accepts either rather than betting on one:

- flat: {"topic": "...", "instruction": "..."} - a free-text master rule;
- structured: {"topic": "...", "logic": [{"condition": "...", "label": "..."}]}.

Rule order in the prompt is by descending cluster size then cluster id:
most-supported heuristics first, and deterministic.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Sequence

from . import gateway
from .clustering import Cluster
from .corpus import TaskSchema
from .errors import (
    ConfigError,
    EmptyCluster,
    EmptyRuleSet,
    MissingKey,
    NoJsonFound,
    UnknownBranchLabel,
)
from .extraction import MicroInstruction, scan_json_values
from .gateway import BackendConfig, ChatRequest
from .templates import PromptTemplate, load_template, render

logger = logging.getLogger("promptdistill.synthesis")

SYNTHESIZER_SYSTEM_TEXT = "You are an expert Logic Synthesizer."

PHASE_SYNTHESIS = "synthesis"
PHASE_RESOLUTION = "resolution"

# Provenance value for rules that were authored by the resolver rather than
# consolidated from a cluster.
NO_CLUSTER = -1


@dataclass(frozen=True)
class RuleBranch:
    condition: str
    label: str


@dataclass(frozen=True)
class ConsolidatedRule:
    topic: str
    logic: tuple[RuleBranch, ...] | None  # None => free-text rule
    instruction: str | None  # free-text body, None for structured rules
    provenance_cluster_id: int
    member_count: int

    def __post_init__(self):
        if not self.topic.strip():
            raise ConfigError("rule topic must be non-empty")
        if (self.logic is None) == (self.instruction is None):
            raise ConfigError("rule must carry exactly one of logic / instruction")
        if self.logic is not None and len(self.logic) == 0:
            raise ConfigError("structured rule needs at least one branch")

    def to_record(self) -> dict:
        return {
            "topic": self.topic,
            "logic": [{"condition": b.condition, "label": b.label} for b in self.logic]
            if self.logic is not None
            else None,
            "instruction": self.instruction,
            "provenance_cluster_id": self.provenance_cluster_id,
            "member_count": self.member_count,
        }

    @staticmethod
    def from_record(d: dict) -> "ConsolidatedRule":
        logic = d.get("logic")
        return ConsolidatedRule(
            topic=str(d["topic"]),
            logic=tuple(RuleBranch(str(b["condition"]), str(b["label"])) for b in logic)
            if logic is not None
            else None,
            instruction=d.get("instruction"),
            provenance_cluster_id=int(d.get("provenance_cluster_id", NO_CLUSTER)),
            member_count=int(d.get("member_count", 0)),
        )


@dataclass(frozen=True)
class InstructionSet:
    version: int
    task_id: str
    rules: tuple[ConsolidatedRule, ...]
    parent_version: int | None
    created_by_phase: str

    def __post_init__(self):
        if self.version < 0:
            raise ConfigError("version must be >= 0")
        if self.version == 0 and self.parent_version is not None:
            raise ConfigError("version 0 has no parent")
        if not self.rules:
            raise ConfigError("instruction set needs at least one rule")
        if self.created_by_phase not in (PHASE_SYNTHESIS, PHASE_RESOLUTION):
            raise ConfigError(f"unknown created_by_phase {self.created_by_phase!r}")

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "task_id": self.task_id,
            "parent_version": self.parent_version,
            "created_by_phase": self.created_by_phase,
            "rules": [r.to_record() for r in self.rules],
        }

    @staticmethod
    def from_dict(d: dict) -> "InstructionSet":
        return InstructionSet(
            version=int(d["version"]),
            task_id=str(d["task_id"]),
            rules=tuple(ConsolidatedRule.from_record(r) for r in d["rules"]),
            parent_version=d.get("parent_version"),
            created_by_phase=str(d["created_by_phase"]),
        )

    def rules_json(self) -> str:
        """The rule list in the learned-instruction schema (topic + logic or
        instruction), used inside resolver prompts and human-facing artifacts."""
        rows = []
        for r in self.rules:
            row: dict = {"topic": r.topic}
            if r.logic is not None:
                row["logic"] = [{"condition": b.condition, "label": b.label} for b in r.logic]
            else:
                row["instruction"] = r.instruction
            rows.append(row)
        return json.dumps(rows, indent=2, ensure_ascii=False)


def render_synthesis_prompt(
    cluster: Cluster,
    instructions: Sequence[MicroInstruction],
    template: PromptTemplate | None = None,
) -> str:
    """Fill the synthesis template with the cluster's raw executable rules.

    The instructions must be exactly the cluster's members, in member order.
    """
    if not cluster.member_ids:
        raise EmptyCluster(f"cluster {cluster.cluster_id} has no members")
    by_id = {ins.instruction_id: ins for ins in instructions}
    if set(by_id) != set(cluster.member_ids) or len(instructions) != len(cluster.member_ids):
        raise ConfigError(
            f"instructions do not match cluster {cluster.cluster_id} members exactly"
        )
    rule_texts = [by_id[i].executable_rule for i in cluster.member_ids]
    template = template or load_template("logic_synthesis")
    return render(template, {"raw_instructions": json.dumps(rule_texts, indent=2, ensure_ascii=False)})


def parse_rule_object(obj: dict, label_set: Sequence[str]) -> tuple[str, tuple[RuleBranch, ...] | None, str | None]:
    """Normalize one rule object of either schema into (topic, logic, instruction)."""
    topic = obj.get("topic")
    if not isinstance(topic, str) or not topic.strip():
        raise MissingKey("topic")
    logic = obj.get("logic")
    if logic is not None:
        if not isinstance(logic, list) or not logic:
            raise MissingKey("logic")
        branches = []
        allowed = set(label_set)
        for branch in logic:
            if not isinstance(branch, dict) or "condition" not in branch:
                raise MissingKey("condition")
            if "label" not in branch:
                raise MissingKey("label")
            label = str(branch["label"])
            if label not in allowed:
                raise UnknownBranchLabel(label)
            branches.append(RuleBranch(condition=str(branch["condition"]), label=label))
        return topic, tuple(branches), None
    instruction = obj.get("instruction")
    if not isinstance(instruction, str) or not instruction.strip():
        raise MissingKey("instruction")
    return topic, None, instruction


def parse_synthesis_output(
    raw: str,
    label_set: Sequence[str],
    cluster_id: int = NO_CLUSTER,
    member_count: int = 0,
) -> ConsolidatedRule:
    """Parse one consolidated rule in either the flat or the structured schema."""
    dicts = [v for v in scan_json_values(raw) if isinstance(v, dict)]
    if not dicts:
        raise NoJsonFound("no JSON object found in synthesizer output")
    first_error: Exception | None = None
    for d in dicts:
        try:
            topic, logic, instruction = parse_rule_object(d, label_set)
        except (MissingKey, UnknownBranchLabel) as e:
            first_error = first_error or e
            continue
        return ConsolidatedRule(
            topic=topic,
            logic=logic,
            instruction=instruction,
            provenance_cluster_id=cluster_id,
            member_count=member_count,
        )
    raise first_error  # type: ignore[misc]


def synthesize_all(
    clusters: Sequence[Cluster],
    instructions: Sequence[MicroInstruction],
    synthesizer: BackendConfig,
    schema: TaskSchema,
    template: PromptTemplate | None = None,
) -> InstructionSet:
    """One synthesizer call per cluster; rules ordered by descending member
    count then cluster id. Any parse failure aborts with the offending cluster
    id - synthesis is small, so failing fast beats limping on.
    """
    if not clusters:
        raise ConfigError("synthesize_all requires at least one cluster")
    by_id = {ins.instruction_id: ins for ins in instructions}

    def _one(cluster: Cluster) -> ConsolidatedRule:
        members = [by_id[i] for i in cluster.member_ids]
        prompt = render_synthesis_prompt(cluster, members, template)
        response = gateway.complete(
            ChatRequest(
                system_text=SYNTHESIZER_SYSTEM_TEXT,
                user_text=prompt,
                temperature=synthesizer.temperature,
                max_output_tokens=synthesizer.max_output_tokens,
                backend_role="synthesizer",
            ),
            synthesizer,
        )
        return parse_synthesis_output(
            response.text,
            schema.label_set,
            cluster_id=cluster.cluster_id,
            member_count=len(cluster.member_ids),
        )

    results = gateway.map_with_backend(_one, list(clusters), synthesizer)
    rules = []
    for cluster, outcome in zip(clusters, results):
        if isinstance(outcome, Exception):
            raise ConfigError(
                f"synthesis failed for cluster {cluster.cluster_id}: {outcome}"
            ) from outcome
        rules.append(outcome)
    rules.sort(key=lambda r: (-r.member_count, r.provenance_cluster_id))
    return InstructionSet(
        version=0,
        task_id=schema.task_id,
        rules=tuple(rules),
        parent_version=None,
        created_by_phase=PHASE_SYNTHESIS,
    )


def render_task_preamble(schema: TaskSchema, template: PromptTemplate | None = None) -> str:
    template = template or load_template("system_preamble")
    return render(
        template,
        {"task_id": schema.task_id, "label_list": ", ".join(schema.label_set)},
    )


def render_system_prompt(
    instruction_set: InstructionSet,
    schema: TaskSchema,
    preamble_template: PromptTemplate | None = None,
) -> str:
    """Deterministic student system prompt: task preamble, then numbered rules.

    Free-text rules appear verbatim; structured rules render as a topic line
    followed by one "If <condition> → <label>" line per branch.
    """
    lines = [render_task_preamble(instruction_set_schema_check(instruction_set, schema), preamble_template)]
    lines.append("")
    lines.append("Apply the following rules, in order, to the input:")
    lines.append("")
    for i, rule in enumerate(instruction_set.rules, start=1):
        if rule.logic is None:
            lines.append(f"{i}. {rule.instruction}")
        else:
            lines.append(f"{i}. Topic: {rule.topic}")
            for branch in rule.logic:
                lines.append(f"   If {branch.condition} → {branch.label}")
    return "\n".join(lines)


def instruction_set_schema_check(instruction_set: InstructionSet, schema: TaskSchema) -> TaskSchema:
    if instruction_set.task_id != schema.task_id:
        raise ConfigError(
            f"instruction set belongs to task {instruction_set.task_id!r}, "
            f"not {schema.task_id!r}"
        )
    return schema
