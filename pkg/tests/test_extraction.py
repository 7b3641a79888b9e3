from __future__ import annotations

import json
import random

import pytest

from promptdistill.corpus import LabeledExample
from promptdistill.errors import (
    AbortedTooManyFailures,
    EmptyRule,
    MissingKey,
    MissingPlaceholderValue,
    NoJsonFound,
)
from promptdistill.extraction import (
    MicroInstruction,
    extract_all,
    parse_teacher_output,
    render_extraction_prompt,
)
from promptdistill.gateway import scripted_chat_backend
from promptdistill.templates import load_template, template_from_text


PAYLOAD = {"reasoning_trace": "because X", "executable_rule": "If Y then label Z"}


def _example(example_id="e1", **inputs):
    inputs = inputs or {"text": "some text"}
    return LabeledExample(example_id=example_id, inputs=inputs, gold_label="A", split="train")


# --- prompt rendering ----------------------------------------------------------

def test_contract_nli_prompt_sentinels():
    template = load_template("contract_nli_extraction")
    example = LabeledExample(
        example_id="c1",
        inputs={"sentence1": "S1", "sentence2": "H1"},
        gold_label="Entailment",
        split="train",
    )
    text = render_extraction_prompt(example, template)
    assert "<contract_begin>S1<contract_end>" in text
    assert "<hypothesis_begin>H1<hypothesis_end>" in text
    assert "gold_label: Entailment" in text
    assert 'You are the "Teacher"' in text


def test_stereoset_prompt_ends_with_context_and_gold_label():
    template = load_template("stereoset_extraction")
    example = LabeledExample(
        example_id="s1", inputs={"context": "C"}, gold_label="gender", split="train"
    )
    text = render_extraction_prompt(example, template)
    lines = text.splitlines()
    assert lines[-2] == "Context: C"
    assert lines[-1] == "Gold Label: gender"


def test_missing_placeholder_value():
    template = template_from_text("t", "needs {missing} and {text}")
    with pytest.raises(MissingPlaceholderValue) as exc:
        render_extraction_prompt(_example(), template)
    assert exc.value.name == "missing"


def test_rendering_is_byte_exact_substitution():
    template = template_from_text("t", "A{text}B {gold_label} {not_a_placeholder}")
    example = LabeledExample(
        example_id="e",
        inputs={"text": "X", "not_a_placeholder": "Y"},
        gold_label="A",
        split="train",
    )
    assert render_extraction_prompt(example, template) == "AXB A Y"


def test_literal_json_braces_pass_through():
    template = template_from_text("t", 'schema {"topic": "x"} then {text}')
    assert render_extraction_prompt(_example(), template) == 'schema {"topic": "x"} then some text'


# --- teacher output parsing ----------------------------------------------------

def test_parse_fenced_json():
    raw = "```json\n" + json.dumps(PAYLOAD) + "\n```"
    assert parse_teacher_output(raw) == ("because X", "If Y then label Z")


def test_parse_with_prose_wrappers_fuzz():
    rng = random.Random(20260810)
    fragments = [
        "Sure, here is the result.",
        "Let me think { about it",
        "```",
        "```json",
        "{} ",
        '{"note": "not the payload"}',
        "[1, 2, 3]",
        "trailing thoughts } here",
        "",
    ]
    payload_text = json.dumps(PAYLOAD)
    for _ in range(200):
        prefix = "\n".join(rng.choice(fragments) for _ in range(rng.randint(0, 4)))
        suffix = "\n".join(rng.choice(fragments) for _ in range(rng.randint(0, 4)))
        raw = f"{prefix}\n{payload_text}\n{suffix}"
        assert parse_teacher_output(raw) == ("because X", "If Y then label Z")


def test_parse_missing_key():
    with pytest.raises(MissingKey) as exc:
        parse_teacher_output('{"reasoning_trace": "r"}')
    assert exc.value.name == "executable_rule"


def test_parse_no_json():
    with pytest.raises(NoJsonFound):
        parse_teacher_output("no structured content here")


def test_parse_empty_rule():
    with pytest.raises(EmptyRule):
        parse_teacher_output('{"reasoning_trace": "r", "executable_rule": "  "}')


def test_parse_returns_values_verbatim():
    raw = json.dumps({"reasoning_trace": "  keep  spaces  ", "executable_rule": " rule "})
    assert parse_teacher_output(raw) == ("  keep  spaces  ", " rule ")


# --- extract_all ---------------------------------------------------------------

def _teacher_for(markers_to_rules: dict[str, str], **kw):
    script = [
        (marker, json.dumps({"reasoning_trace": f"saw {marker}", "executable_rule": rule}))
        for marker, rule in markers_to_rules.items()
    ]
    return scripted_chat_backend(script, **kw)


def _train(texts_labels):
    return [
        LabeledExample(example_id=f"t{i}", inputs={"text": t}, gold_label=g, split="train")
        for i, (t, g) in enumerate(texts_labels)
    ]


@pytest.fixture
def simple_template():
    return template_from_text("x", "classify: {text} as {gold_label}")


def test_extract_all_happy_path(simple_template):
    train = _train([("one red", "A"), ("two red", "A"), ("three red", "A")])
    teacher = _teacher_for({"red": "rule about red"})
    instructions, failures = extract_all(train, simple_template, teacher)
    assert len(instructions) == 3 and failures == []
    assert [i.source_example_id for i in instructions] == ["t0", "t1", "t2"]
    assert [i.instruction_id for i in instructions] == ["mi-000000", "mi-000001", "mi-000002"]
    assert all(i.gold_label == train[k].gold_label for k, i in enumerate(instructions))


def test_extract_all_records_failures_by_example(simple_template):
    train = _train([("good x", "A"), ("bad y", "B"), ("good z", "A"), ("good w", "B")])
    teacher = _teacher_for({"bad": "unused"})
    # overwrite the 'bad' response with junk; others valid
    teacher.script[0].response = "not json"
    teacher.script.append(
        type(teacher.script[0])("good", json.dumps(PAYLOAD))
    )
    instructions, failures = extract_all(train, simple_template, teacher, failure_ceiling=0.5)
    assert len(instructions) == 3
    assert len(failures) == 1 and failures[0][0] == "t1"
    assert len(instructions) + len(failures) == len(train)


def test_extract_all_retry_reminder_recovers(simple_template):
    # First render gets junk; the retry prompt (with the reminder) matches first.
    teacher = scripted_chat_backend(
        [
            ("Return only the JSON object.", json.dumps(PAYLOAD)),
            ("classify", "garbled"),
        ]
    )
    train = _train([("anything", "A")])
    instructions, failures = extract_all(train, simple_template, teacher)
    assert failures == []
    assert instructions[0].executable_rule == "If Y then label Z"


def test_extract_all_aborts_over_failure_ceiling(simple_template):
    train = _train([("junk a", "A"), ("junk b", "B"), ("ok red", "A")])
    teacher = _teacher_for({"red": "rule"})
    with pytest.raises(AbortedTooManyFailures):
        extract_all(train, simple_template, teacher, failure_ceiling=0.2)


def test_extract_all_order_independent_of_parallelism(simple_template):
    texts = [(f"word{i} red", "A" if i % 2 else "B") for i in range(40)]
    train = _train(texts)
    sequential = extract_all(
        train, simple_template, _teacher_for({"red": "r"}, max_parallel=1)
    )[0]
    parallel = extract_all(
        train, simple_template, _teacher_for({"red": "r"}, max_parallel=8)
    )[0]
    assert [i.to_record() for i in sequential] == [i.to_record() for i in parallel]


def test_extract_all_deterministic_with_cache(simple_template, tmp_path):
    train = _train([(f"item {i} red", "A") for i in range(5)])
    teacher = _teacher_for({"red": "rule"}, cache_dir=str(tmp_path / "cache"))
    first = [i.to_record() for i in extract_all(train, simple_template, teacher)[0]]
    second = [i.to_record() for i in extract_all(train, simple_template, teacher)[0]]
    assert json.dumps(first) == json.dumps(second)


def test_micro_instruction_record_round_trip():
    instruction = MicroInstruction(
        instruction_id="mi-000001",
        source_example_id="e9",
        reasoning_trace="trace",
        executable_rule="rule",
        gold_label="A",
    )
    assert MicroInstruction.from_record(instruction.to_record()) == instruction
