"""Instruction mining: one teacher call per training example produces one
micro-instruction (reasoning trace + executable rule).

Teacher output is expected to carry a JSON object with ``reasoning_trace`` and
``executable_rule`` string fields; the parser tolerates code fences and
surrounding prose. A single retry with an appended "Return only the JSON
object." reminder recovers from sloppy formatting; a second failure records
the example in the failure list instead of raising, and the whole run aborts
only when the failure fraction exceeds a ceiling (default 20%), because a
quietly partial instruction set degrades clustering downstream.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from typing import Sequence

from . import gateway
from .corpus import LabeledExample
from .errors import (
    AbortedTooManyFailures,
    EmptyRule,
    MissingKey,
    NoJsonFound,
    PipelineError,
)
from .gateway import BackendConfig, ChatRequest
from .templates import PromptTemplate, render

logger = logging.getLogger("promptdistill.extraction")

RETRY_REMINDER = "Return only the JSON object."

_FENCE = re.compile(r"^```[^\n]*$", re.MULTILINE)


@dataclass(frozen=True)
class MicroInstruction:
    instruction_id: str
    source_example_id: str
    reasoning_trace: str
    executable_rule: str
    gold_label: str

    def to_record(self) -> dict:
        return {
            "instruction_id": self.instruction_id,
            "source_example_id": self.source_example_id,
            "reasoning_trace": self.reasoning_trace,
            "executable_rule": self.executable_rule,
            "gold_label": self.gold_label,
        }

    @staticmethod
    def from_record(d: dict) -> "MicroInstruction":
        return MicroInstruction(
            instruction_id=str(d["instruction_id"]),
            source_example_id=str(d["source_example_id"]),
            reasoning_trace=str(d["reasoning_trace"]),
            executable_rule=str(d["executable_rule"]),
            gold_label=str(d["gold_label"]),
        )


def render_extraction_prompt(example: LabeledExample, template: PromptTemplate) -> str:
    """Byte-exact placeholder substitution; the value map is the example's
    inputs plus the gold label under the name ``gold_label``."""
    values = dict(example.inputs)
    values["gold_label"] = example.gold_label
    return render(template, values)


def scan_json_values(raw: str) -> list:
    """All top-level JSON objects/arrays found in raw, in order, after
    stripping code fences. Non-JSON brace noise is skipped."""
    text = _FENCE.sub("", raw)
    decoder = json.JSONDecoder()
    values = []
    i = 0
    while i < len(text):
        ch = text[i]
        if ch not in "{[":
            i += 1
            continue
        try:
            value, end = decoder.raw_decode(text, i)
        except json.JSONDecodeError:
            i += 1
            continue
        values.append(value)
        i = end
    return values


def parse_teacher_output(raw: str) -> tuple[str, str]:
    """Extract (reasoning_trace, executable_rule) from the first well-formed
    JSON object carrying both keys; values are returned verbatim."""
    keys = ("reasoning_trace", "executable_rule")
    dicts = [v for v in scan_json_values(raw) if isinstance(v, dict)]
    if not dicts:
        raise NoJsonFound("no JSON object found in teacher output")
    for d in dicts:
        if all(isinstance(d.get(k), str) for k in keys):
            rule = d["executable_rule"]
            if not rule.strip():
                raise EmptyRule("executable_rule is empty")
            return d["reasoning_trace"], rule
    # No object carried both keys: report the closest candidate's first gap.
    best = max(dicts, key=lambda d: sum(isinstance(d.get(k), str) for k in keys))
    for k in keys:
        if not isinstance(best.get(k), str):
            raise MissingKey(k)
    raise NoJsonFound("no usable JSON object found in teacher output")


def extract_all(
    train: Sequence[LabeledExample],
    template: PromptTemplate,
    teacher: BackendConfig,
    failure_ceiling: float = 0.2,
) -> tuple[list[MicroInstruction], list[tuple[str, str]]]:
    """Run the teacher over every train example.

    Returns (micro_instructions, failures); each example lands in exactly one
    list and instruction order follows input order regardless of the fan-out
    interleaving.
    """
    if not train:
        raise PipelineError("train split is empty; nothing to extract")

    def _one(example: LabeledExample) -> MicroInstruction:
        prompt = render_extraction_prompt(example, template)
        request = ChatRequest(
            system_text="",
            user_text=prompt,
            temperature=teacher.temperature,
            max_output_tokens=teacher.max_output_tokens,
            backend_role="teacher",
        )
        response = gateway.complete(request, teacher)
        try:
            trace, rule = parse_teacher_output(response.text)
        except (NoJsonFound, MissingKey, EmptyRule):
            retry = ChatRequest(
                system_text="",
                user_text=prompt + "\n\n" + RETRY_REMINDER,
                temperature=teacher.temperature,
                max_output_tokens=teacher.max_output_tokens,
                backend_role="teacher",
            )
            response = gateway.complete(retry, teacher)
            trace, rule = parse_teacher_output(response.text)
        return MicroInstruction(
            instruction_id="",  # assigned after gather so ids follow input order
            source_example_id=example.example_id,
            reasoning_trace=trace,
            executable_rule=rule,
            gold_label=example.gold_label,
        )

    results = gateway.map_with_backend(_one, list(train), teacher)
    instructions: list[MicroInstruction] = []
    failures: list[tuple[str, str]] = []
    for example, outcome in zip(train, results):
        if isinstance(outcome, Exception):
            failures.append((example.example_id, f"{type(outcome).__name__}: {outcome}"))
        else:
            instructions.append(
                MicroInstruction(
                    instruction_id=f"mi-{len(instructions):06d}",
                    source_example_id=outcome.source_example_id,
                    reasoning_trace=outcome.reasoning_trace,
                    executable_rule=outcome.executable_rule,
                    gold_label=outcome.gold_label,
                )
            )
    if failures and len(failures) / len(train) > failure_ceiling:
        raise AbortedTooManyFailures(len(failures), len(train), failure_ceiling)
    if failures:
        logger.warning("extraction failed on %d/%d examples", len(failures), len(train))
    return instructions, failures
