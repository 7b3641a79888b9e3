from __future__ import annotations

import random

import pytest

from promptdistill.corpus import LabeledExample, TaskSchema
from promptdistill.errors import ConfigError, DuplicatePrediction, UnknownExampleId
from promptdistill.evaluation import (
    ABSTAIN,
    EvalConfig,
    Prediction,
    evaluate,
    latency_summary,
    macro_f1,
    parse_label,
    render_few_shot_prefix,
)
from promptdistill.gateway import scripted_chat_backend

from oracles import oracle_macro_f1

NLI = ("Entailment", "Contradiction", "NotMentioned")


def _prediction(example_id, label, raw=None):
    return Prediction(example_id=example_id, raw_text=raw or label, parsed_label=label, latency_ms=0.0)


# --- parse_label -----------------------------------------------------------------

@pytest.mark.parametrize(
    "raw,expected",
    [
        ("Entailment", "Entailment"),
        ("  contradiction.  ", "Contradiction"),
        ("**NotMentioned**", "NotMentioned"),
        ("The answer is: contradiction.", "Contradiction"),
        ("I believe this is an Entailment case", "Entailment"),
        ("Entailment or maybe Contradiction", ABSTAIN),
        ("no label here", ABSTAIN),
        ("", ABSTAIN),
        ("NotMentioned", "NotMentioned"),
    ],
)
def test_parse_label_cases(raw, expected):
    assert parse_label(raw, NLI) == expected


def test_parse_label_whole_word_not_substring():
    # "profession" inside "professional" must not count as a whole-word hit
    assert parse_label("she is a professional", ("profession", "race")) == ABSTAIN
    assert parse_label("the profession is clear", ("profession", "race")) == "profession"


def test_parse_label_exact_match_beats_mention_ambiguity():
    # rule 1 applies before the unique-mention rule
    assert parse_label("Entailment", ("Entailment", "Contradiction")) == "Entailment"


# --- macro_f1 ----------------------------------------------------------------------

def test_macro_f1_all_correct():
    gold = {f"e{i}": NLI[i % 3] for i in range(9)}
    predictions = [_prediction(k, v) for k, v in gold.items()]
    report = macro_f1(predictions, gold, NLI)
    assert report.macro_f1 == pytest.approx(1.0)
    assert report.abstain_count == 0


def test_macro_f1_hand_computed_case():
    gold = {"e1": "A", "e2": "A", "e3": "B", "e4": "B"}
    predicted = {"e1": "A", "e2": "B", "e3": "B", "e4": "B"}
    predictions = [_prediction(k, v) for k, v in predicted.items()]
    report = macro_f1(predictions, gold, ("A", "B"))
    a = report.per_class["A"]
    b = report.per_class["B"]
    assert (a.precision, a.recall) == (1.0, 0.5)
    assert a.f1 == pytest.approx(2 / 3, abs=1e-12)
    assert b.precision == pytest.approx(2 / 3, abs=1e-12)
    assert b.recall == 1.0
    assert b.f1 == pytest.approx(0.8, abs=1e-12)
    assert report.macro_f1 == pytest.approx(0.7333333333333334, abs=1e-12)


def test_macro_f1_all_abstain_is_zero():
    gold = {"e1": "A", "e2": "B"}
    predictions = [_prediction(k, ABSTAIN, raw="???") for k in gold]
    report = macro_f1(predictions, gold, ("A", "B"))
    assert report.macro_f1 == 0.0
    assert report.abstain_count == 2
    assert all(m.f1 == 0.0 for m in report.per_class.values())


def test_macro_f1_confusion_rows_sum_to_gold_counts():
    gold = {"e1": "A", "e2": "A", "e3": "B"}
    predictions = [_prediction("e1", "B"), _prediction("e2", ABSTAIN), _prediction("e3", "B")]
    report = macro_f1(predictions, gold, ("A", "B"))
    index = {label: i for i, label in enumerate(report.confusion_labels)}
    assert sum(report.confusion[index["A"]]) == 2
    assert sum(report.confusion[index["B"]]) == 1
    assert sum(report.confusion[index[ABSTAIN]]) == 0  # gold is never ABSTAIN


def test_macro_f1_permutation_invariant():
    rng = random.Random(5)
    gold = {f"e{i}": ("A", "B", "C")[i % 3] for i in range(30)}
    predictions = [_prediction(k, rng.choice(("A", "B", "C", ABSTAIN))) for k in gold]
    base = macro_f1(predictions, gold, ("A", "B", "C"))
    for _ in range(10):
        shuffled = predictions[:]
        rng.shuffle(shuffled)
        report = macro_f1(shuffled, gold, ("A", "B", "C"))
        assert report.macro_f1 == base.macro_f1
        assert report.confusion == base.confusion


def test_macro_f1_bounds_property():
    rng = random.Random(17)
    labels = ("A", "B", "C")
    for _ in range(200):
        n = rng.randint(1, 40)
        gold = {f"e{i}": rng.choice(labels) for i in range(n)}
        predictions = [_prediction(k, rng.choice(labels + (ABSTAIN,))) for k in gold]
        report = macro_f1(predictions, gold, labels)
        f1s = [m.f1 for m in report.per_class.values()]
        assert all(0.0 <= f <= 1.0 for f in f1s)
        assert min(f1s) - 1e-12 <= report.macro_f1 <= max(f1s) + 1e-12


def test_macro_f1_matches_rational_oracle_on_random_fixtures():
    rng = random.Random(2026)
    for _ in range(300):
        k = rng.randint(2, 4)
        labels = tuple(f"L{j}" for j in range(k))
        n = rng.randint(1, 50)
        gold = {f"e{i}": rng.choice(labels) for i in range(n)}
        predicted = {
            k_: (ABSTAIN if rng.random() < 0.1 else rng.choice(labels)) for k_ in gold
        }
        predictions = [_prediction(k_, v) for k_, v in predicted.items()]
        engine = macro_f1(predictions, gold, labels).macro_f1
        oracle = float(oracle_macro_f1(gold, predicted, list(labels)))
        assert abs(engine - oracle) <= 1e-12


def test_macro_f1_rejects_unknown_and_duplicate_ids():
    gold = {"e1": "A"}
    with pytest.raises(UnknownExampleId):
        macro_f1([_prediction("ghost", "A")], gold, ("A", "B"))
    with pytest.raises(DuplicatePrediction):
        macro_f1([_prediction("e1", "A"), _prediction("e1", "B")], gold, ("A", "B"))


# --- evaluate -----------------------------------------------------------------------

def _schema():
    return TaskSchema(task_id="toy-ab", input_fields=("text",), label_set=("A", "B"))


def _split(n=6):
    return [
        LabeledExample(f"e{i}", {"text": f"sample {i} is kind-{'A' if i % 2 else 'B'}"}, "A" if i % 2 else "B", "test")
        for i in range(n)
    ]


def test_evaluate_echo_student_scores_one():
    schema = _schema()
    split = _split()
    student = scripted_chat_backend(
        [("kind-A", "A"), ("kind-B", "B")], backend_id="echo-student"
    )
    report, predictions = evaluate(
        split, "be exact", EvalConfig(regime="pld", student=student), schema, split_name="test"
    )
    assert report.macro_f1 == pytest.approx(1.0)
    assert len(predictions) == len(split)
    assert report.n == len(split)
    assert report.split == "test"


def test_evaluate_fixed_wrong_label_matches_oracle():
    schema = _schema()
    split = _split(8)  # balanced 2-class fixture
    student = scripted_chat_backend([("sample", "A")], backend_id="stubborn")
    report, predictions = evaluate(
        split, "sys", EvalConfig(regime="pld", student=student), schema
    )
    gold = {e.example_id: e.gold_label for e in split}
    predicted = {p.example_id: p.parsed_label for p in predictions}
    assert report.macro_f1 == pytest.approx(float(oracle_macro_f1(gold, predicted, ["A", "B"])), abs=1e-12)


def test_evaluate_transport_error_becomes_abstain_with_note():
    schema = _schema()
    split = _split(4)
    student = scripted_chat_backend([("kind-A", "A")])  # kind-B inputs exhaust the script
    report, predictions = evaluate(
        split, "sys", EvalConfig(regime="pld", student=student), schema
    )
    failed = [p for p in predictions if p.error]
    assert len(failed) == 2
    assert all(p.parsed_label == ABSTAIN for p in failed)
    assert all("ScriptExhausted" in p.error for p in failed)
    assert report.n == 4  # evaluation never aborts mid-split


def test_evaluate_rejects_empty_split():
    student = scripted_chat_backend([("x", "A")])
    with pytest.raises(ConfigError):
        evaluate([], "sys", EvalConfig(regime="pld", student=student), _schema())


def test_evaluate_reproducible_with_deterministic_backend():
    schema = _schema()
    split = _split()
    student = scripted_chat_backend([("kind-A", "A"), ("kind-B", "B")])
    results = [
        evaluate(split, "sys", EvalConfig(regime="pld", student=student), schema)
        for _ in range(2)
    ]
    assert results[0][0].to_dict() == results[1][0].to_dict()
    assert [p.parsed_label for p in results[0][1]] == [p.parsed_label for p in results[1][1]]


def test_few_shot_prefix_format_and_usage():
    schema = _schema()
    exemplars = [
        LabeledExample("x1", {"text": "alpha sample"}, "A", "train"),
        LabeledExample("x2", {"text": "beta sample"}, "B", "train"),
    ]
    prefix = render_few_shot_prefix(exemplars, schema)
    assert prefix == "Input:\ntext: alpha sample\nLabel: A\n\nInput:\ntext: beta sample\nLabel: B"

    # the prefix lands in the user prompt ahead of the example input
    student = scripted_chat_backend([("alpha sample", "A")])
    split = [_split(2)[0]]
    _, predictions = evaluate(
        split,
        "sys",
        EvalConfig(regime="few_shot", student=student, k_shots=2),
        schema,
        few_shot_exemplars=exemplars,
    )
    assert predictions[0].parsed_label == "A"


def test_few_shot_requires_exemplars():
    student = scripted_chat_backend([("", "A")])
    with pytest.raises(ConfigError):
        evaluate(
            _split(2), "sys", EvalConfig(regime="few_shot", student=student), _schema()
        )


def test_latency_summary_outside_report():
    predictions = [
        Prediction(f"e{i}", "A", "A", latency_ms=float(i)) for i in range(10)
    ]
    summary = latency_summary(predictions)
    assert summary["mean_ms"] == pytest.approx(4.5)
    assert summary["p50_ms"] in (4.0, 5.0)
    assert summary["p95_ms"] == 9.0
    gold = {f"e{i}": "A" for i in range(10)}
    assert "latency" not in str(macro_f1(predictions, gold, ("A", "B")).to_dict())
