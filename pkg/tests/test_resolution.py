from __future__ import annotations

import json

import pytest

from promptdistill.corpus import LabeledExample, TaskSchema
from promptdistill.errors import NoFailures, UnknownBranchLabel
from promptdistill.evaluation import ABSTAIN, Prediction
from promptdistill.gateway import scripted_chat_backend
from promptdistill.resolution import (
    STOP_CONVERGED,
    STOP_MAX_ROUNDS,
    STOP_NO_FAILURES,
    STOP_RESOLVER_ERROR,
    ConvergenceState,
    ResolutionConfig,
    apply_revision,
    partition_errors,
    render_resolution_prompt,
    run_resolution_loop,
    sample_exhibits,
)
from promptdistill.synthesis import ConsolidatedRule, InstructionSet, RuleBranch

from conftest import GOLDEN

NLI = ("Entailment", "Contradiction", "NotMentioned")


def _prediction(example_id, label):
    return Prediction(example_id, label, label, 0.0)


def _rule(topic, branches, cluster_id=0, member_count=1):
    return ConsolidatedRule(
        topic=topic,
        logic=tuple(RuleBranch(c, l) for c, l in branches),
        instruction=None,
        provenance_cluster_id=cluster_id,
        member_count=member_count,
    )


def _set(rules, version=0, parent=None, phase="synthesis", task_id="toy-ab"):
    return InstructionSet(
        version=version, task_id=task_id, rules=tuple(rules), parent_version=parent, created_by_phase=phase
    )


# --- partition_errors -------------------------------------------------------------

def test_partition_all_correct():
    gold = {"a": "A", "b": "B"}
    failures, successes = partition_errors([_prediction("a", "A"), _prediction("b", "B")], gold)
    assert failures == [] and set(successes) == {"a", "b"}


def test_partition_all_abstain():
    gold = {"a": "A", "b": "B"}
    failures, successes = partition_errors(
        [_prediction("a", ABSTAIN), _prediction("b", ABSTAIN)], gold
    )
    assert set(failures) == {"a", "b"} and successes == []


def test_partition_mixed_with_known_answer_key():
    gold = {f"e{i}": "A" for i in range(10)}
    wrong = {"e2", "e5", "e7"}
    predictions = [_prediction(k, "B" if k in wrong else "A") for k in gold]
    failures, successes = partition_errors(predictions, gold)
    assert set(failures) == wrong
    assert set(successes) == set(gold) - wrong


# --- exhibit sampling ---------------------------------------------------------------

def test_sample_exhibits_deterministic_per_round():
    gold = {f"e{i}": ("A", "B")[i % 2] for i in range(40)}
    failures = [f"e{i}" for i in range(0, 30)]
    successes = [f"e{i}" for i in range(30, 40)]
    cfg = ResolutionConfig(n_failures=8, n_successes=4, seed=3)
    a = sample_exhibits(failures, successes, gold, cfg, round_index=1)
    b = sample_exhibits(failures, successes, gold, cfg, round_index=1)
    c = sample_exhibits(failures, successes, gold, cfg, round_index=2)
    assert a == b
    assert a != c  # round-salted


def test_sample_exhibits_stratified_keeps_minority_label():
    # 27 failures of label A, 3 of label B; budget 10 must include some B
    gold = {f"a{i}": "A" for i in range(27)} | {f"b{i}": "B" for i in range(3)}
    failures = list(gold)
    cfg = ResolutionConfig(n_failures=10, n_successes=1, seed=0)
    sample, _ = sample_exhibits(failures, [], gold, cfg, 1)
    assert len(sample) == 10
    labels = {gold[i] for i in sample}
    assert labels == {"A", "B"}


def test_sample_exhibits_takes_all_when_under_budget():
    gold = {"a": "A", "b": "B"}
    cfg = ResolutionConfig(n_failures=20, n_successes=10, seed=0)
    sample, _ = sample_exhibits(["a", "b"], [], gold, cfg, 1)
    assert sorted(sample) == ["a", "b"]


# --- prompt rendering -----------------------------------------------------------------

GOLDEN_SET = _set(
    [
        ConsolidatedRule(
            topic="Deadlines",
            logic=(
                RuleBranch("the text names an explicit deadline", "A"),
                RuleBranch("no deadline wording is present", "B"),
            ),
            instruction=None,
            provenance_cluster_id=2,
            member_count=3,
        ),
        ConsolidatedRule(
            topic="Fallback",
            logic=None,
            instruction="When unsure, weigh whether the request is time-boxed before answering.",
            provenance_cluster_id=0,
            member_count=2,
        ),
    ]
)

AB_SCHEMA = TaskSchema(task_id="toy-ab", input_fields=("text",), label_set=("A", "B"))


def _exhibit(example_id, text, gold, answer):
    return (
        LabeledExample(example_id, {"text": text}, gold, "train"),
        _prediction(example_id, answer),
    )


def test_resolution_prompt_block_order_and_content():
    prompt = render_resolution_prompt(
        GOLDEN_SET,
        [_exhibit("e7", "finish by Friday", "A", "B")],
        [_exhibit("e2", "no rush at all", "B", "B")],
        AB_SCHEMA,
    )
    rules_at = prompt.index("Current rule set:")
    failures_at = prompt.index("Failure examples")
    successes_at = prompt.index("Success examples")
    directive_at = prompt.index("return the complete revised rule set")
    assert rules_at < failures_at < successes_at < directive_at
    assert "finish by Friday" in prompt and "no rush at all" in prompt


def test_resolution_prompt_byte_deterministic_and_golden():
    args = (
        GOLDEN_SET,
        [_exhibit("e7", "finish by Friday", "A", "B")],
        [_exhibit("e2", "no rush at all", "B", "B")],
        AB_SCHEMA,
    )
    first = render_resolution_prompt(*args)
    second = render_resolution_prompt(*args)
    assert first == second
    assert first == (GOLDEN / "resolution_prompt.txt").read_text(encoding="utf-8")


def test_resolution_prompt_requires_failures():
    with pytest.raises(NoFailures):
        render_resolution_prompt(GOLDEN_SET, [], [_exhibit("e2", "x", "B", "B")], AB_SCHEMA)


# --- apply_revision ---------------------------------------------------------------------

def test_apply_revision_expands_two_branch_rule_to_three():
    parent = _set(
        [
            _rule(
                "Retaining Copies (Archival)",
                [
                    ("the text mandates return of all copies and lists no exceptions", "Contradiction"),
                    ("an exception clause allows retention for archival purposes", "Entailment"),
                ],
                cluster_id=5,
                member_count=12,
            )
        ],
        task_id="contract-nli",
    )
    revised_rules = [
        {
            "topic": "Retaining Copies (Archival)",
            "logic": [
                {"condition": "the text explicitly permits the receiving party to retain or keep copies", "label": "Entailment"},
                {"condition": "the text mandates destruction of all copies with no exceptions", "label": "Contradiction"},
                {"condition": "the text is silent about retention of copies", "label": "NotMentioned"},
            ],
        }
    ]
    child = apply_revision(json.dumps(revised_rules), parent, NLI)
    assert child.version == 1 and child.parent_version == 0
    assert child.created_by_phase == "resolution"
    assert len(child.rules[0].logic) == 3
    assert {b.label for b in child.rules[0].logic} == set(NLI)
    # topic matched, so cluster provenance carries over
    assert child.rules[0].provenance_cluster_id == 5
    assert child.rules[0].member_count == 12


def test_apply_revision_fixed_point_keeps_rules():
    parent = GOLDEN_SET
    child = apply_revision(json.dumps(parent.to_dict()), parent, ("A", "B"))
    assert child.version == parent.version + 1
    assert child.parent_version == parent.version
    assert [r.to_record() for r in child.rules] == [r.to_record() for r in parent.rules]


def test_apply_revision_rejects_unknown_branch_label():
    parent = GOLDEN_SET
    bad = [{"topic": "T", "logic": [{"condition": "c", "label": "C"}]}]
    with pytest.raises(UnknownBranchLabel):
        apply_revision(json.dumps(bad), parent, ("A", "B"))


# --- the loop ----------------------------------------------------------------------------

RIGHT_RULES = [
    {"topic": "Kind A", "logic": [{"condition": "the text contains 'kind-A'", "label": "A"}]},
    {"topic": "Kind B", "logic": [{"condition": "the text contains 'kind-B'", "label": "B"}]},
]
WRONG_SET = _set(
    [
        _rule("Kind A", [("the text contains 'kind-A'", "A")], 0, 8),
        _rule("Kind B", [("the text contains 'kind-B'", "A")], 1, 8),  # wrong: says A
    ]
)


def _examples(split, n=8):
    # alternating kind-A / kind-B marker texts
    out = []
    for i in range(n):
        kind = "A" if i % 2 == 0 else "B"
        out.append(
            LabeledExample(f"{split}-{i}", {"text": f"{split} item {i} kind-{kind} marker"}, kind, split)
        )
    return out


def _rule_student():
    from promptdistill.gateway import BackendConfig

    return BackendConfig(backend_id="loop-student", kind="rule_chat", fallback_text="UNSURE")


def test_loop_stops_immediately_when_train_is_clean(tmp_path):
    right = _set(
        [
            _rule("Kind A", [("the text contains 'kind-A'", "A")], 0, 8),
            _rule("Kind B", [("the text contains 'kind-B'", "B")], 1, 8),
        ]
    )
    resolver = scripted_chat_backend([])  # must never be called
    final, state = run_resolution_loop(
        _examples("train"),
        _examples("validation", 4),
        right,
        _rule_student(),
        resolver,
        ResolutionConfig(seed=1),
        AB_SCHEMA,
        artifact_dir=tmp_path,
    )
    assert state.stop_reason == STOP_NO_FAILURES
    assert state.rounds == []
    assert final is right
    assert state.best_version == 0


def test_loop_repairs_wrong_rule_then_converges(tmp_path):
    resolver = scripted_chat_backend([("kind-B", json.dumps(RIGHT_RULES))])
    final, state = run_resolution_loop(
        _examples("train"),
        _examples("validation", 4),
        WRONG_SET,
        _rule_student(),
        resolver,
        ResolutionConfig(seed=2),
        AB_SCHEMA,
        artifact_dir=tmp_path,
    )
    # round 1 repairs to validation macro-F1 1.0; round 2 finds a clean train split
    assert state.stop_reason == STOP_NO_FAILURES
    assert len(state.rounds) == 1
    round1 = state.rounds[0]
    assert (round1.input_version, round1.output_version) == (0, 1)
    assert round1.val_macro_f1_after == pytest.approx(1.0)
    # fixture answer key: with 'kind-B' mislabeled, B recall is 0 -> macro-F1 = 1/3
    assert round1.val_macro_f1_before == pytest.approx(1 / 3, abs=1e-12)
    assert final.version == 1 and state.best_version == 1
    assert (tmp_path / "instruction_set_v1.json").is_file()
    assert (tmp_path / "system_prompt_v1.txt").is_file()
    assert (tmp_path / "convergence.json").is_file()


def test_loop_adversarial_resolver_halts_at_max_rounds_best_is_v0(tmp_path):
    # strictly worse: the revised rule never fires, so the student abstains on
    # everything and validation macro-F1 drops from 1/3 to 0
    worse = [{"topic": "Void", "logic": [{"condition": "the text contains 'zzz-never-present'", "label": "A"}]}]
    resolver = scripted_chat_backend([("", json.dumps(worse))])
    cfg = ResolutionConfig(max_rounds=3, seed=4)
    final, state = run_resolution_loop(
        _examples("train"),
        _examples("validation", 4),
        WRONG_SET,
        _rule_student(),
        resolver,
        cfg,
        AB_SCHEMA,
        artifact_dir=tmp_path,
    )
    assert state.stop_reason == STOP_MAX_ROUNDS
    assert len(state.rounds) == cfg.max_rounds
    assert state.best_version == 0
    assert final.version == 0
    assert [r.output_version for r in state.rounds] == [1, 2, 3]  # version chain
    # monotone best: the loop never returns a regressed set
    assert all(r.val_macro_f1_after <= r.val_macro_f1_before for r in state.rounds)


def test_loop_noop_resolver_converges_after_round_one():
    # the resolver echoes the parent set unchanged
    parent_rules = json.dumps(
        [
            {"topic": "Kind A", "logic": [{"condition": "the text contains 'kind-A'", "label": "A"}]},
            {"topic": "Kind B", "logic": [{"condition": "the text contains 'kind-B'", "label": "A"}]},
        ]
    )
    noop = scripted_chat_backend([("", parent_rules)])
    final, state = run_resolution_loop(
        _examples("train"),
        _examples("validation", 4),
        WRONG_SET,
        _rule_student(),
        noop,
        ResolutionConfig(seed=5),
        AB_SCHEMA,
    )
    assert state.stop_reason == STOP_CONVERGED
    assert len(state.rounds) == 1
    assert state.rounds[0].val_macro_f1_after == pytest.approx(state.rounds[0].val_macro_f1_before)
    assert final.version == 0  # ties go to the earliest version
    assert state.best_version == 0


def test_loop_resolver_breakdown_keeps_best_and_warns():
    broken = scripted_chat_backend([("", "utter nonsense, no json")])
    final, state = run_resolution_loop(
        _examples("train"),
        _examples("validation", 4),
        WRONG_SET,
        _rule_student(),
        broken,
        ResolutionConfig(seed=6),
        AB_SCHEMA,
    )
    assert state.stop_reason == STOP_RESOLVER_ERROR
    assert state.warnings and "unusable twice" in state.warnings[0]
    assert final.version == 0


def test_loop_sampling_determinism_across_runs(tmp_path):
    resolver = scripted_chat_backend([("kind-B", json.dumps(RIGHT_RULES))])

    def run_once(where):
        return run_resolution_loop(
            _examples("train", 16),
            _examples("validation", 4),
            WRONG_SET,
            _rule_student(),
            resolver,
            ResolutionConfig(seed=9),
            AB_SCHEMA,
            artifact_dir=where,
        )[1]

    a = run_once(tmp_path / "a")
    b = run_once(tmp_path / "b")
    assert [r.failure_sample_ids for r in a.rounds] == [r.failure_sample_ids for r in b.rounds]
    assert [r.success_sample_ids for r in a.rounds] == [r.success_sample_ids for r in b.rounds]


def test_convergence_state_serializes():
    state = ConvergenceState(best_version=1, stop_reason=STOP_CONVERGED)
    d = state.to_dict()
    assert d["best_version"] == 1 and d["stop_reason"] == "converged"
