"""Student evaluation: label parsing, macro-F1 reports, and split runs.

Scoring conventions, pinned here because they move the headline number:

- Output that cannot be parsed into exactly one label scores as ABSTAIN,
  which is wrong for every gold label; abstentions are also surfaced
  separately in the report.
- Per-class precision/recall with a zero denominator score 0, the dominant
  evaluation-tool convention.
- macro-F1 is the unweighted mean of per-class F1 over the task's label set;
  ABSTAIN is never a class.
"""

from __future__ import annotations

import logging
import string
import re
import time
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import gateway
from .corpus import LabeledExample, TaskSchema
from .errors import ConfigError, DuplicatePrediction, GatewayError, UnknownExampleId
from .gateway import BackendConfig, ChatRequest
from .templates import PromptTemplate, load_template, render

logger = logging.getLogger("promptdistill.evaluation")

ABSTAIN = "ABSTAIN"

ZERO_SHOT = "zero_shot"
FEW_SHOT = "few_shot"
PLD = "pld"
REGIMES = (ZERO_SHOT, FEW_SHOT, PLD)

_STRIP_CHARS = string.whitespace + string.punctuation + "“”‘’"


@dataclass(frozen=True)
class Prediction:
    example_id: str
    raw_text: str
    parsed_label: str
    latency_ms: float
    error: str | None = None

    def to_record(self) -> dict:
        return {
            "example_id": self.example_id,
            "raw_text": self.raw_text,
            "parsed_label": self.parsed_label,
            "latency_ms": self.latency_ms,
            "error": self.error,
        }

    @staticmethod
    def from_record(d: dict) -> "Prediction":
        return Prediction(
            example_id=str(d["example_id"]),
            raw_text=str(d["raw_text"]),
            parsed_label=str(d["parsed_label"]),
            latency_ms=float(d["latency_ms"]),
            error=d.get("error"),
        )


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float


@dataclass
class EvalReport:
    regime: str
    per_class: dict[str, ClassMetrics]
    macro_f1: float
    confusion: list[list[int]]  # rows/cols over label_set + ABSTAIN
    confusion_labels: list[str]
    n: int
    abstain_count: int
    split: str | None = None
    instruction_set_version: int | None = None

    def to_dict(self) -> dict:
        return {
            "regime": self.regime,
            "split": self.split,
            "instruction_set_version": self.instruction_set_version,
            "n": self.n,
            "macro_f1": self.macro_f1,
            "abstain_count": self.abstain_count,
            "per_class": {
                label: {"precision": m.precision, "recall": m.recall, "f1": m.f1}
                for label, m in self.per_class.items()
            },
            "confusion_labels": self.confusion_labels,
            "confusion": self.confusion,
        }

    @staticmethod
    def from_dict(d: dict) -> "EvalReport":
        return EvalReport(
            regime=str(d["regime"]),
            per_class={
                label: ClassMetrics(m["precision"], m["recall"], m["f1"])
                for label, m in d["per_class"].items()
            },
            macro_f1=float(d["macro_f1"]),
            confusion=[list(map(int, row)) for row in d["confusion"]],
            confusion_labels=list(d["confusion_labels"]),
            n=int(d["n"]),
            abstain_count=int(d["abstain_count"]),
            split=d.get("split"),
            instruction_set_version=d.get("instruction_set_version"),
        )


@dataclass
class EvalConfig:
    regime: str
    student: BackendConfig
    k_shots: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"regime must be one of {REGIMES}")
        if self.regime == FEW_SHOT and self.k_shots < 1:
            raise ConfigError("few_shot regime needs k_shots >= 1")


def parse_label(raw: str, label_set: Sequence[str]) -> str:
    """Map raw model output to a label or ABSTAIN.

    Preference order: (1) the whole string equals a label after trimming and
    punctuation stripping, case-insensitively; (2) exactly one label occurs as
    a whole word anywhere in the output; (3) ABSTAIN.
    """
    trimmed = raw.strip(_STRIP_CHARS).casefold()
    for label in label_set:
        if trimmed == label.casefold():
            return label
    hits = []
    for label in label_set:
        if re.search(rf"\b{re.escape(label)}\b", raw, flags=re.IGNORECASE):
            hits.append(label)
    if len(hits) == 1:
        return hits[0]
    return ABSTAIN


def macro_f1(
    predictions: Sequence[Prediction],
    gold: Mapping[str, str],
    label_set: Sequence[str],
    regime: str = PLD,
    split: str | None = None,
    instruction_set_version: int | None = None,
) -> EvalReport:
    """Confusion matrix and per-class P/R/F1 over the task label set.

    Order-independent: the report depends only on the prediction set.
    """
    seen: set[str] = set()
    for p in predictions:
        if p.example_id not in gold:
            raise UnknownExampleId(p.example_id)
        if p.example_id in seen:
            raise DuplicatePrediction(p.example_id)
        seen.add(p.example_id)

    labels = list(label_set)
    confusion_labels = labels + [ABSTAIN]
    index = {label: i for i, label in enumerate(confusion_labels)}
    confusion = [[0] * len(confusion_labels) for _ in confusion_labels]
    for p in predictions:
        g = gold[p.example_id]
        predicted = p.parsed_label if p.parsed_label in index else ABSTAIN
        confusion[index[g]][index[predicted]] += 1

    per_class: dict[str, ClassMetrics] = {}
    for label in labels:
        i = index[label]
        tp = confusion[i][i]
        fp = sum(confusion[r][i] for r in range(len(confusion_labels)) if r != i)
        fn = sum(confusion[i][c] for c in range(len(confusion_labels)) if c != i)
        precision = tp / (tp + fp) if (tp + fp) else 0.0
        recall = tp / (tp + fn) if (tp + fn) else 0.0
        f1 = 2 * precision * recall / (precision + recall) if (precision + recall) else 0.0
        per_class[label] = ClassMetrics(precision=precision, recall=recall, f1=f1)

    abstain_count = sum(confusion[index[g]][index[ABSTAIN]] for g in labels)
    return EvalReport(
        regime=regime,
        per_class=per_class,
        macro_f1=sum(m.f1 for m in per_class.values()) / len(labels),
        confusion=confusion,
        confusion_labels=confusion_labels,
        n=len(predictions),
        abstain_count=abstain_count,
        split=split,
        instruction_set_version=instruction_set_version,
    )


def render_input(example: LabeledExample, schema: TaskSchema) -> str:
    return "\n".join(f"{name}: {example.inputs[name]}" for name in schema.input_fields)


def render_few_shot_prefix(
    exemplars: Sequence[LabeledExample],
    schema: TaskSchema,
    block_template: PromptTemplate | None = None,
) -> str:
    """Exemplars as "Input: ... / Label: ..." blocks, in sample order."""
    block_template = block_template or load_template("few_shot_block")
    blocks = [
        render(block_template, {"input": render_input(e, schema), "label": e.gold_label})
        for e in exemplars
    ]
    return "\n\n".join(blocks)


def evaluate(
    split: Sequence[LabeledExample],
    system_prompt: str,
    config: EvalConfig,
    schema: TaskSchema,
    few_shot_exemplars: Sequence[LabeledExample] | None = None,
    instruction_set_version: int | None = None,
    split_name: str | None = None,
    block_template: PromptTemplate | None = None,
) -> tuple[EvalReport, list[Prediction]]:
    """One student call per split example, never aborting mid-split: transport
    failures score as ABSTAIN with the error noted on the prediction."""
    if not split:
        raise ConfigError("evaluation split is empty")
    prefix = ""
    if config.regime == FEW_SHOT:
        if not few_shot_exemplars:
            raise ConfigError("few_shot regime requires exemplars")
        prefix = render_few_shot_prefix(few_shot_exemplars, schema, block_template) + "\n\n"

    def _one(example: LabeledExample) -> Prediction:
        user_text = prefix + render_input(example, schema)
        request = ChatRequest(
            system_text=system_prompt,
            user_text=user_text,
            temperature=config.student.temperature,
            max_output_tokens=config.student.max_output_tokens,
            backend_role="student",
        )
        start = time.perf_counter()
        try:
            response = gateway.complete(request, config.student)
        except GatewayError as e:
            elapsed = (time.perf_counter() - start) * 1000.0
            return Prediction(
                example_id=example.example_id,
                raw_text="",
                parsed_label=ABSTAIN,
                latency_ms=elapsed,
                error=f"{type(e).__name__}: {e}",
            )
        elapsed = (time.perf_counter() - start) * 1000.0
        return Prediction(
            example_id=example.example_id,
            raw_text=response.text,
            parsed_label=parse_label(response.text, schema.label_set),
            latency_ms=elapsed,
        )

    results = gateway.map_with_backend(_one, list(split), config.student)
    predictions: list[Prediction] = []
    for example, outcome in zip(split, results):
        if isinstance(outcome, Exception):
            # Non-gateway bug: still never abort the split, but make it loud.
            logger.error("prediction for %s raised %s", example.example_id, outcome)
            predictions.append(
                Prediction(
                    example_id=example.example_id,
                    raw_text="",
                    parsed_label=ABSTAIN,
                    latency_ms=0.0,
                    error=f"{type(outcome).__name__}: {outcome}",
                )
            )
        else:
            predictions.append(outcome)
    gold = {e.example_id: e.gold_label for e in split}
    report = macro_f1(
        predictions,
        gold,
        schema.label_set,
        regime=config.regime,
        split=split_name,
        instruction_set_version=instruction_set_version,
    )
    return report, predictions


def latency_summary(predictions: Sequence[Prediction]) -> dict:
    """Mean/p50/p95 wall-clock latency; kept out of EvalReport so report
    artifacts stay byte-stable across reruns."""
    values = sorted(p.latency_ms for p in predictions)
    if not values:
        return {"mean_ms": 0.0, "p50_ms": 0.0, "p95_ms": 0.0}

    def _pct(q: float) -> float:
        idx = min(len(values) - 1, max(0, int(round(q * (len(values) - 1)))))
        return values[idx]

    return {
        "mean_ms": sum(values) / len(values),
        "p50_ms": _pct(0.50),
        "p95_ms": _pct(0.95),
    }
