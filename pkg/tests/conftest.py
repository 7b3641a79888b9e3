from __future__ import annotations

import json
from pathlib import Path

import pytest

from promptdistill import gateway
from promptdistill.corpus import TaskSchema, load_dataset

BUNDLED = Path(__file__).resolve().parents[1] / "src" / "promptdistill" / "bundled"
GOLDEN = Path(__file__).resolve().parent / "golden"

DEFAULT_TEMPLATES = {
    "extraction": "synthetic_extraction",
    "synthesis": "logic_synthesis",
    "resolution": "conflict_resolution",
    "system": "system_preamble",
    "few_shot": "few_shot_block",
}


@pytest.fixture(autouse=True)
def _fresh_gateway_state():
    gateway.reset_gateway_state()
    yield
    gateway.reset_gateway_state()


@pytest.fixture
def ab_schema() -> TaskSchema:
    return TaskSchema(
        task_id="toy-ab",
        input_fields=("text",),
        label_set=("A", "B"),
        prompt_template_ids=dict(DEFAULT_TEMPLATES),
    )


@pytest.fixture
def nli_schema() -> TaskSchema:
    return TaskSchema(
        task_id="contract-nli",
        input_fields=("sentence1", "sentence2"),
        label_set=("Entailment", "Contradiction", "NotMentioned"),
        prompt_template_ids={**DEFAULT_TEMPLATES, "extraction": "contract_nli_extraction"},
    )


@pytest.fixture
def stereoset_schema() -> TaskSchema:
    return TaskSchema(
        task_id="stereoset",
        input_fields=("context",),
        label_set=("gender", "profession", "race", "religion"),
        prompt_template_ids={**DEFAULT_TEMPLATES, "extraction": "stereoset_extraction"},
    )


def write_records(path: Path, records: list[dict]) -> Path:
    path.write_text(
        "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in records), encoding="utf-8"
    )
    return path


def make_example_record(example_id: str, text: str, label: str, split: str) -> dict:
    return {
        "example_id": example_id,
        "inputs": {"text": text},
        "gold_label": label,
        "split": split,
    }


@pytest.fixture
def toy_dataset(tmp_path, ab_schema):
    records = [
        make_example_record(f"tr-{i}", f"train text {i} kind-{'A' if i % 2 else 'B'}", "A" if i % 2 else "B", "train")
        for i in range(10)
    ]
    records += [
        make_example_record(f"va-{i}", f"val text {i}", "A" if i % 2 else "B", "validation")
        for i in range(4)
    ]
    records += [
        make_example_record(f"te-{i}", f"test text {i}", "A" if i % 2 else "B", "test")
        for i in range(6)
    ]
    path = write_records(tmp_path / "toy.jsonl", records)
    return load_dataset(path, ab_schema)


@pytest.fixture
def bundled_config_path() -> Path:
    return BUNDLED / "synthetic_config.json"


@pytest.fixture
def bundled_dataset_path() -> Path:
    return BUNDLED / "synthetic_dataset.jsonl"
