from dataclasses import replace
from datetime import timedelta

import pytest

from digiworld.backend import build_registry
from digiworld.catalog import DEFAULT_SCHEMAS
from digiworld.generator import GeneratorSchemaError, StubGenerator
from digiworld.grader import RubricItem, VerifierCompileError
from digiworld.harness import NoopAdapter
from digiworld.taskgen import (
    REJECT_REASONS,
    ReferenceStep,
    ScoringPolicy,
    TaskInstance,
    auto_filter,
    build_task_set,
    build_verifier,
    default_task_rounds,
    make_instance,
    parse_query,
    parse_reference,
    validate_by_execution,
)

REG = build_registry(DEFAULT_SCHEMAS)


def outcome(check=None, **kw):
    return {"item_id": "o", "kind": "outcome", "check": check or {"type": "text", "contains": ["done"]}, **kw}


def process(i, **kw):
    return {"item_id": f"p{i}", "kind": "process", "check": {"type": "call", "tool": "gmail_list_messages"}, **kw}


@pytest.fixture(scope="module")
def sample(bundle):
    instances, snaps = bundle
    inst = next(i for i in instances if i.state_change)
    return inst, snaps[inst.snapshot_digest]


def test_default_task_rounds():
    assert default_task_rounds(50) == [20, 30, 40, 50]
    assert default_task_rounds(15) == []


def test_policy_invariant():
    ScoringPolicy(0.6, 0.7)
    with pytest.raises(ValueError):
        ScoringPolicy(0.6, 0.5)
    with pytest.raises(ValueError):
        ScoringPolicy(0.2, 0.7)


def test_default_weights_split():
    v = build_verifier({"rubric": [outcome(), process(1), process(2), process(3)]}, ScoringPolicy(), REG)
    w = {i.item_id: i.weight for i in v.rubric}
    assert w["o"] == 0.7
    assert all(abs(w[f"p{i}"] - 0.1) < 1e-12 for i in (1, 2, 3))
    assert abs(sum(w.values()) - 1.0) < 1e-9
    assert not v.problems()


def test_outcome_folds_required_and_forbidden():
    raw = {"rubric": [outcome()],
           "required_final_state": [{"type": "state", "service": "notes", "where": {"title": "x"}, "expect": "exists"}],
           "forbidden_actions": [{"type": "call", "tool": "gmail_delete_message"}]}
    v = build_verifier(raw, ScoringPolicy(), REG)
    check = v.outcome_item.check
    assert check["type"] == "all"
    assert [c["type"] for c in check["checks"]] == ["state", "none", "text"]
    assert v.outcome_item.weight == 1.0


def test_unknown_tool_in_rubric_rejected():
    with pytest.raises(VerifierCompileError, match="fax_send"):
        build_verifier({"rubric": [outcome({"type": "call", "tool": "fax_send"})]}, ScoringPolicy(), REG)


def test_unknown_tool_in_reference_rejected():
    with pytest.raises(VerifierCompileError):
        parse_reference({"steps": [{"tool": "fax_send", "args": {}}]}, REG)


def test_rubric_needs_one_outcome():
    with pytest.raises(GeneratorSchemaError):
        build_verifier({"rubric": [process(1)]}, ScoringPolicy(), REG)


def test_heartbeat_query_rules():
    base = {"task_date": "2026-03-01", "difficulty": "medium"}
    assert parse_query({**base, "trigger": "heartbeat", "text": ""}, "full").trigger == "heartbeat"
    with pytest.raises(GeneratorSchemaError):
        parse_query({**base, "trigger": "heartbeat", "text": "do a thing"}, "full")
    with pytest.raises(GeneratorSchemaError):
        parse_query({**base, "trigger": "user_request", "text": "  "}, "full")


def test_bundle_accepted(bundle):
    instances, _ = bundle
    assert len(instances) >= 10
    for inst in instances:
        assert inst.filter_report.accepted and not inst.filter_report.reasons
        assert not inst.verifier.problems()
    assert len({i.instance_id for i in instances}) == len(instances)


def test_instance_roundtrip(sample):
    inst, _ = sample
    assert TaskInstance.from_dict(inst.to_dict()) == inst


def _codes(inst, snap, gen=None):
    return auto_filter(inst, snap, gen).codes


def test_reject_dangling_id(sample):
    inst, snap = sample
    bad = replace(inst, query=replace(inst.query, text=inst.query.text + " See CON-99999."))
    assert _codes(bad, snap) == ["dangling-ref"]


def test_reject_unknown_conflict(sample):
    inst, snap = sample
    bad = replace(inst, verifier=replace(inst.verifier, conflict_refs=("C-404",)))
    assert _codes(bad, snap) == ["dangling-ref"]


def test_reject_unknown_tool(sample):
    inst, snap = sample
    steps = inst.reference.steps + (ReferenceStep("fax_send", {}),)
    bad = replace(inst, reference=replace(inst.reference, steps=steps))
    assert "unknown-tool" in _codes(bad, snap)


def test_reject_weights(sample):
    inst, snap = sample
    skewed = tuple(replace(i, weight=0.5) if i.kind == "outcome" else i for i in inst.verifier.rubric)
    bad = replace(inst, verifier=replace(inst.verifier, rubric=skewed, outcome_weight=0.5))
    assert "weight-invariant" in _codes(bad, snap)


def test_reject_dates(sample):
    inst, snap = sample
    world = snap.world()
    early = replace(inst, query=replace(inst.query, task_date=world.clock.date() - timedelta(days=1)))
    late = replace(inst, query=replace(inst.query, task_date=world.time_window[1] + timedelta(days=1)))
    assert _codes(early, snap) == ["date-insane"]
    assert _codes(late, snap) == ["date-insane"]


def test_judge_rejection_and_unavailable(sample):
    inst, snap = sample
    rep = auto_filter(inst, snap, StubGenerator(judge_verdict=False))
    assert not rep.accepted and set(rep.codes) <= set(REJECT_REASONS) and rep.codes
    rep = auto_filter(inst, snap, StubGenerator(judge_available=False))
    assert rep.accepted and rep.warnings


def test_validation_reference_and_noop(sample):
    inst, snap = sample
    assert validate_by_execution(inst, snap).status == "pass"
    v = validate_by_execution(inst, snap, adapter=NoopAdapter())
    assert v.status == "fail" and v.flag_for_review


def test_empty_task_rounds(rollout30):
    instances, statuses = build_task_set(rollout30.snapshots, [], StubGenerator(0), history=rollout30.history)
    assert instances == [] and statuses == []


def test_missing_snapshot_round(rollout30):
    _, statuses = build_task_set(rollout30.snapshots, [25], StubGenerator(0))
    assert statuses[0].status == "missing"


def test_instance_id_stable(snap30):
    a = make_instance(snap30, StubGenerator(1))
    b = make_instance(snap30, StubGenerator(1))
    assert a == b
    assert a.instance_id == f"{a.provenance['persona_id']}-r030-{snap30.digest[:8]}"


def test_generator_retry_feedback(snap30):
    class Bad(StubGenerator):
        def __init__(self):
            super().__init__(1)
            self.summaries = []

        def generate_task(self, summary):
            self.summaries.append(dict(summary))
            if len(self.summaries) == 1:
                return {"query": "nope"}
            return super().generate_task(summary)

    g = Bad()
    make_instance(snap30, g)
    assert len(g.summaries) == 2 and "feedback" in g.summaries[1]


def test_rubric_item_roundtrip():
    item = RubricItem("x", "process", 0.1, {"type": "call", "tool": "notes_list_notes"})
    assert RubricItem.from_dict(item.to_dict()) == item
