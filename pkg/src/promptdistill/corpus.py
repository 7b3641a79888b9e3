"""Labeled classification datasets: loading, validation, splits, and few-shot sampling.

The on-disk format is UTF-8 JSONL, one record per line:

    {"example_id": "...", "inputs": {"field": "text", ...},
     "gold_label": "...", "split": "train"|"validation"|"test"}

Splits are read from the file and never re-randomized here, so externally
fixed splits survive round trips exactly. Label strings are matched
case-sensitively at load time; only prediction parsing (evaluation module)
normalizes case, because model output is noisy while dataset files are not.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path

from .errors import (
    ConfigError,
    DuplicateId,
    InsufficientExamples,
    MalformedRecord,
    MissingField,
    UnknownLabel,
)
from .util import atomic_write_text, sha256_file

SPLITS = ("train", "validation", "test")


@dataclass(frozen=True)
class TaskSchema:
    """Shape of one classification task: input fields, label set, and which
    prompt templates each pipeline phase uses."""

    task_id: str
    input_fields: tuple[str, ...]
    label_set: tuple[str, ...]
    prompt_template_ids: dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.task_id:
            raise ConfigError("task_id must be non-empty")
        if not self.input_fields:
            raise ConfigError("input_fields must be non-empty")
        if len(set(self.input_fields)) != len(self.input_fields):
            raise ConfigError("input_fields contains duplicates")
        if len(set(self.label_set)) < 2:
            raise ConfigError("label_set needs at least 2 distinct labels")

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "input_fields": list(self.input_fields),
            "label_set": list(self.label_set),
            "prompt_template_ids": dict(self.prompt_template_ids),
        }

    @staticmethod
    def from_dict(d: dict) -> "TaskSchema":
        return TaskSchema(
            task_id=str(d["task_id"]),
            input_fields=tuple(d["input_fields"]),
            label_set=tuple(d["label_set"]),
            prompt_template_ids=dict(d.get("prompt_template_ids") or {}),
        )


@dataclass(frozen=True)
class LabeledExample:
    example_id: str
    inputs: dict[str, str]
    gold_label: str
    split: str

    def to_record(self, schema: TaskSchema | None = None) -> dict:
        # Canonical key order; inputs follow schema field order with extras sorted last.
        if schema is not None:
            ordered = {f: self.inputs[f] for f in schema.input_fields if f in self.inputs}
            for k in sorted(self.inputs):
                ordered.setdefault(k, self.inputs[k])
        else:
            ordered = dict(self.inputs)
        return {
            "example_id": self.example_id,
            "inputs": ordered,
            "gold_label": self.gold_label,
            "split": self.split,
        }


@dataclass(frozen=True)
class Dataset:
    schema: TaskSchema
    examples: tuple[LabeledExample, ...]
    source_digest: str

    def split_examples(self, split: str) -> list[LabeledExample]:
        if split not in SPLITS:
            raise ConfigError(f"unknown split {split!r}")
        return [e for e in self.examples if e.split == split]


def _require(record: dict, key: str, line_no: int):
    if key not in record:
        raise MalformedRecord(line_no, f"missing key {key!r}")
    return record[key]


def load_dataset(path: Path, schema: TaskSchema) -> Dataset:
    """Load and fully validate a JSONL dataset file.

    Any record violating an invariant raises; nothing is silently dropped.
    File ordering is preserved.
    """
    path = Path(path)
    label_set = set(schema.label_set)
    examples: list[LabeledExample] = []
    seen_ids: set[str] = set()
    with path.open("r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedRecord(line_no, f"invalid JSON: {e.msg}") from e
            if not isinstance(record, dict):
                raise MalformedRecord(line_no, "record is not an object")
            example_id = _require(record, "example_id", line_no)
            if not isinstance(example_id, str) or not example_id:
                raise MalformedRecord(line_no, "example_id must be a non-empty string")
            inputs = _require(record, "inputs", line_no)
            if not isinstance(inputs, dict):
                raise MalformedRecord(line_no, "inputs must be an object")
            gold_label = _require(record, "gold_label", line_no)
            split = _require(record, "split", line_no)
            if split not in SPLITS:
                raise MalformedRecord(line_no, f"split must be one of {SPLITS}, got {split!r}")
            if example_id in seen_ids:
                raise DuplicateId(example_id)
            seen_ids.add(example_id)
            if gold_label not in label_set:
                raise UnknownLabel(example_id, str(gold_label))
            for fname in schema.input_fields:
                value = inputs.get(fname)
                if not isinstance(value, str) or not value:
                    raise MissingField(example_id, fname)
            examples.append(
                LabeledExample(
                    example_id=example_id,
                    inputs={str(k): str(v) for k, v in inputs.items()},
                    gold_label=gold_label,
                    split=split,
                )
            )
    return Dataset(schema=schema, examples=tuple(examples), source_digest=sha256_file(path))


def save_dataset(dataset: Dataset, path: Path) -> None:
    """Write the canonical JSONL form; loading it back reproduces the dataset
    field-for-field (including the digest, since the bytes are canonical)."""
    lines = [
        json.dumps(e.to_record(dataset.schema), ensure_ascii=False) for e in dataset.examples
    ]
    atomic_write_text(Path(path), "".join(line + "\n" for line in lines))


def split_counts(dataset: Dataset) -> tuple[int, int, int]:
    counts = {s: 0 for s in SPLITS}
    for e in dataset.examples:
        counts[e.split] += 1
    return counts["train"], counts["validation"], counts["test"]


def sample_few_shot(dataset: Dataset, k: int, seed: int) -> list[LabeledExample]:
    """k distinct train-split examples; identical (dataset, k, seed) gives an
    identical selection in identical order."""
    if k < 0:
        raise ConfigError("k must be >= 0")
    train = dataset.split_examples("train")
    if k > len(train):
        raise InsufficientExamples(k, len(train))
    rng = random.Random(seed)
    return rng.sample(train, k)
