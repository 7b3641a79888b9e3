"""Adapters from the public Contract-NLI and StereoSet distributions into the
engine's JSONL record format.

Contract-NLI ships as train.json / dev.json / test.json, each holding
``documents`` (with per-hypothesis ``annotation_sets``) and a ``labels`` map of
hypothesis keys to hypothesis text. One engine example is one
(document, hypothesis) pair: sentence1 = contract text, sentence2 = hypothesis
text, gold label = the annotation choice. The distribution's own file split is
kept verbatim (dev maps to validation).

StereoSet ships one dev.json whose intrasentence entries carry a context
sentence and a bias_type; the engine example is context -> bias_type. The
distribution has no train/validation/test partition for this task, so the
converter assigns one deterministically: seeded shuffle, then slice to the
requested exact counts (default 842/211/1053). Pass a different --seed to
study split sensitivity; there is no canonical assignment to recover.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .corpus import TaskSchema
from .errors import ConfigError
from .util import atomic_write_text, stable_rng

logger = logging.getLogger("promptdistill.converters")

CONTRACT_NLI_LABELS = ("Entailment", "Contradiction", "NotMentioned")
STEREOSET_LABELS = ("gender", "profession", "race", "religion")

DEFAULT_STEREOSET_COUNTS = (842, 211, 1053)


def contract_nli_schema() -> TaskSchema:
    return TaskSchema(
        task_id="contract-nli",
        input_fields=("sentence1", "sentence2"),
        label_set=CONTRACT_NLI_LABELS,
        prompt_template_ids={
            "extraction": "contract_nli_extraction",
            "synthesis": "logic_synthesis",
            "resolution": "conflict_resolution",
            "system": "system_preamble",
            "few_shot": "few_shot_block",
        },
    )


def stereoset_schema() -> TaskSchema:
    return TaskSchema(
        task_id="stereoset",
        input_fields=("context",),
        label_set=STEREOSET_LABELS,
        prompt_template_ids={
            "extraction": "stereoset_extraction",
            "synthesis": "logic_synthesis",
            "resolution": "conflict_resolution",
            "system": "system_preamble",
            "few_shot": "few_shot_block",
        },
    )


_CONTRACT_SPLIT_FILES = (("train.json", "train"), ("dev.json", "validation"), ("test.json", "test"))


def convert_contract_nli(input_dir: Path, output_path: Path) -> tuple[int, int, int]:
    """Flatten the three distribution files into one JSONL dataset.

    Returns (train, validation, test) record counts.
    """
    input_dir = Path(input_dir)
    counts = {"train": 0, "validation": 0, "test": 0}
    lines: list[str] = []
    for filename, split in _CONTRACT_SPLIT_FILES:
        path = input_dir / filename
        if not path.is_file():
            raise ConfigError(f"expected Contract-NLI file {path} not found")
        payload = json.loads(path.read_text(encoding="utf-8"))
        hypotheses = {
            key: spec["hypothesis"] for key, spec in (payload.get("labels") or {}).items()
        }
        if not hypotheses:
            raise ConfigError(f"{path} has no labels/hypothesis map")
        for document in payload.get("documents") or []:
            doc_id = document.get("id", document.get("file_name"))
            annotations = (document.get("annotation_sets") or [{}])[0].get("annotations") or {}
            for key in sorted(hypotheses):
                annotation = annotations.get(key)
                if annotation is None:
                    continue
                choice = annotation.get("choice")
                if choice not in CONTRACT_NLI_LABELS:
                    raise ConfigError(
                        f"document {doc_id} hypothesis {key}: unexpected choice {choice!r}"
                    )
                record = {
                    "example_id": f"{doc_id}:{key}",
                    "inputs": {
                        "sentence1": document["text"],
                        "sentence2": hypotheses[key],
                    },
                    "gold_label": choice,
                    "split": split,
                }
                lines.append(json.dumps(record, ensure_ascii=False))
                counts[split] += 1
    atomic_write_text(Path(output_path), "".join(line + "\n" for line in lines))
    logger.info("contract-nli: wrote %s records to %s", sum(counts.values()), output_path)
    return counts["train"], counts["validation"], counts["test"]


def convert_stereoset(
    input_path: Path,
    output_path: Path,
    seed: int = 0,
    counts: tuple[int, int, int] = DEFAULT_STEREOSET_COUNTS,
) -> tuple[int, int, int]:
    """Convert intrasentence entries and assign splits by seeded shuffle with
    exact counts. Returns the (train, validation, test) counts written."""
    payload = json.loads(Path(input_path).read_text(encoding="utf-8"))
    entries = (payload.get("data") or {}).get("intrasentence")
    if entries is None:
        raise ConfigError(f"{input_path} has no data.intrasentence array")
    examples = []
    for entry in entries:
        bias_type = entry.get("bias_type")
        if bias_type not in STEREOSET_LABELS:
            raise ConfigError(f"entry {entry.get('id')!r}: unexpected bias_type {bias_type!r}")
        examples.append((str(entry["id"]), str(entry["context"]), bias_type))
    if sum(counts) != len(examples):
        raise ConfigError(
            f"split counts {counts} sum to {sum(counts)} but the file holds {len(examples)} entries"
        )
    order = list(range(len(examples)))
    stable_rng("stereoset-split", seed).shuffle(order)
    split_of: dict[int, str] = {}
    cursor = 0
    for split, quota in zip(("train", "validation", "test"), counts):
        for index in order[cursor : cursor + quota]:
            split_of[index] = split
        cursor += quota
    lines = []
    for i, (entry_id, context, bias_type) in enumerate(examples):
        record = {
            "example_id": entry_id,
            "inputs": {"context": context},
            "gold_label": bias_type,
            "split": split_of[i],
        }
        lines.append(json.dumps(record, ensure_ascii=False))
    atomic_write_text(Path(output_path), "".join(line + "\n" for line in lines))
    logger.info("stereoset: wrote %s records to %s", len(lines), output_path)
    return counts
