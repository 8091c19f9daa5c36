from dataclasses import replace
from datetime import timedelta

import pytest
from hypothesis import given, settings, strategies as st

from digiworld.catalog import DEFAULT_SCHEMAS, UnknownServiceError
from digiworld.worldio import load_world, save_world
from digiworld.worldstate import (
    ClockRegressionError,
    DoubleDeleteError,
    EventLogEntry,
    FixtureBank,
    IntegrityViolationError,
    RecordNotFoundError,
    RoundMismatchError,
    ServiceRecord,
    WorldDelta,
    allocate_id,
    apply_delta,
    compute_context_stats,
    render_service_log,
    snapshot,
    tombstone_record,
    validate_integrity,
    word_count,
)


def contact(rid="CON-201", **kw):
    return ServiceRecord("contacts", rid, {"name": "Ada Park", "email": "ada@example.com", **kw})


def email(rid, contact_ref):
    return ServiceRecord("gmail", rid, {"subject": "hi", "sender": "ada@example.com",
                                        "date": "2026-01-01T09:00:00", "contact_ref": contact_ref})


def seeded(world, *records):
    return apply_delta(world, WorldDelta(new_records=list(records)))


# -- allocate_id --------------------------------------------------------------

def test_allocate_after_existing_suffixes(fresh_world):
    w = seeded(fresh_world, contact())
    w = seeded(w, email("MSG-5001", "CON-201"), email("MSG-5002", "CON-201"))
    # oracle: max suffix + 1
    suffixes = [r.suffix for r in w.fixtures.records["gmail"]]
    assert allocate_id(w, "gmail") == f"MSG-{max(suffixes) + 1}" == "MSG-5003"


def test_allocate_fresh_service_uses_start(fresh_world):
    assert allocate_id(fresh_world, "notes") == "NOTE-101"
    assert allocate_id(fresh_world, "notes") == "NOTE-102"


def test_allocate_unknown_service(fresh_world):
    with pytest.raises(UnknownServiceError, match="fax"):
        allocate_id(fresh_world, "fax")


def test_every_service_has_distinct_prefix():
    assert len(DEFAULT_SCHEMAS) == 35
    assert len({s.prefix for s in DEFAULT_SCHEMAS.values()}) == 35
    assert {s: DEFAULT_SCHEMAS[s].prefix for s in ("gmail", "calendar", "contacts", "todo", "kb", "finance", "notes")} \
        == {"gmail": "MSG", "calendar": "EVT", "contacts": "CON", "todo": "TODO", "kb": "KB", "finance": "TXN",
            "notes": "NOTE"}


# -- apply_delta --------------------------------------------------------------

def test_apply_delta_accepts_resolving_ref(fresh_world):
    w = seeded(fresh_world, contact())
    w2 = seeded(w, email("MSG-5003", "CON-201"))
    assert w2.fixtures.count() == w.fixtures.count() + 1
    assert validate_integrity(w2).ok


def test_apply_delta_rejects_dangling_ref_atomically(fresh_world):
    w = seeded(fresh_world, contact())
    before = w.digest()
    with pytest.raises(IntegrityViolationError) as exc:
        seeded(w, email("MSG-5003", "CON-999"))
    assert "dangling-ref" in {v.kind for v in exc.value.violations}
    assert w.digest() == before


def test_empty_delta_only_bookkeeping(fresh_world):
    w = apply_delta(fresh_world, WorldDelta(round=1))
    assert w.round == 1
    assert w.fixtures == fresh_world.fixtures and w.log == fresh_world.log and w.clock == fresh_world.clock


def test_clock_regression(fresh_world):
    late = EventLogEntry(fresh_world.clock + timedelta(days=2), "system", "task_event", "later")
    w = apply_delta(fresh_world, WorldDelta(log_entries=[late]))
    assert w.clock == late.timestamp
    early = EventLogEntry(fresh_world.clock, "system", "task_event", "earlier")
    with pytest.raises(ClockRegressionError):
        apply_delta(w, WorldDelta(log_entries=[early]))
    assert apply_delta(w, WorldDelta(log_entries=[early]), max_skew=timedelta(days=3)).clock == w.clock


def test_delta_round_must_be_current_or_next(fresh_world):
    with pytest.raises(RoundMismatchError):
        apply_delta(fresh_world, WorldDelta(round=2))


# -- tombstones ---------------------------------------------------------------

def _with_note(world):
    note = ServiceRecord("notes", "NOTE-101", {"title": "groceries", "created": "2026-01-01T09:00:00"})
    return seeded(world, note)


def test_tombstone_with_trace(fresh_world):
    w = _with_note(fresh_world)
    w2 = tombstone_record(w, "notes", "NOTE-101", True)
    assert w2.fixtures.get("notes", "NOTE-101").tombstoned
    assert len(w2.log) == len(w.log) + 1
    assert w2.log[-1].kind == "noise_trace_leaving" and w2.log[-1].refs == ("NOTE-101",)
    assert validate_integrity(w2).ok


def test_tombstone_without_trace_and_double_delete(fresh_world):
    w = tombstone_record(_with_note(fresh_world), "notes", "NOTE-101", False)
    assert len(w.log) == 0
    with pytest.raises(DoubleDeleteError):
        tombstone_record(w, "notes", "NOTE-101", True)
    with pytest.raises(RecordNotFoundError):
        tombstone_record(w, "notes", "NOTE-999", True)


# -- snapshots ----------------------------------------------------------------

def test_snapshot_isolated_from_later_mutation(fresh_world):
    w = seeded(fresh_world, contact())
    snap = snapshot(w, 0)
    digest = snap.digest
    w.fixtures.add(contact("CON-202"))
    w.persona.traits.append("new trait")
    assert snap.digest == digest and snap.verify()
    assert snap.world().fixtures.get("contacts", "CON-202") is None


def test_snapshot_equal_worlds_equal_digest(fresh_world):
    assert snapshot(fresh_world, 0).digest == snapshot(fresh_world.copy(), 0).digest


def test_snapshot_round_mismatch(fresh_world):
    with pytest.raises(RoundMismatchError):
        snapshot(fresh_world, fresh_world.round + 1)


def test_snapshot_roundtrip_digest_stable(snap30):
    assert snap30.world().digest() == snap30.digest


# -- integrity ----------------------------------------------------------------

def test_fresh_world_is_clean(fresh_world):
    assert validate_integrity(fresh_world).ok


def test_ref_to_tombstoned_is_dangling(fresh_world):
    w = seeded(fresh_world, contact("CON-202"))
    w = seeded(w, ServiceRecord("crm", "CUS-801", {"name": "Acme", "owner": "CON-202"}))
    # bypass apply_delta to build the bad state directly
    w.fixtures.replace_record(replace(w.fixtures.get("contacts", "CON-202"), tombstoned=True))
    report = validate_integrity(w)
    # oracle: scan every declared reference field
    bank = w.fixtures
    expected = [r.record_id for r in bank.iter_records(False)
                for f, t in bank.schemas[r.service].ref_fields.items()
                if r.payload.get(f) and (bank.get(t, r.payload[f]) is None or bank.get(t, r.payload[f]).tombstoned)]
    assert expected == ["CUS-801"]
    assert [v.subject for v in report.violations if v.kind == "dangling-ref"] == expected


def test_duplicate_ids_reported():
    bank = FixtureBank()
    rec = ServiceRecord("finance", "TXN-6001", {"description": "x", "amount": 1.0, "date": "2026-01-01T00:00:00"})
    bank.records["finance"] = [rec, rec]
    bank.id_counters["finance"] = 6002
    from digiworld.worldstate import Persona, WorldState
    from datetime import date, datetime
    w = WorldState(Persona("p", "P"), [], bank, [], datetime(2026, 1, 1), 0, 0, (date(2026, 1, 1), date(2026, 2, 1)))
    kinds = validate_integrity(w).kinds()
    assert "duplicate-id" in kinds


def test_prefix_and_window_violations(fresh_world):
    w = fresh_world.copy()
    w.fixtures.add(ServiceRecord("gmail", "EVT-1", {"subject": "s", "sender": "x", "date": "2026-01-01T00:00:00"}))
    w.log.append(EventLogEntry(w.window_end + timedelta(days=1), "system", "task_event", "too late"))
    assert {"prefix-mismatch", "out-of-window"} <= validate_integrity(w).kinds()


# -- serialization and stats --------------------------------------------------

def test_save_load_roundtrip(tmp_path, rollout30):
    save_world(rollout30.world, tmp_path / "w")
    assert load_world(tmp_path / "w").digest() == rollout30.world.digest()
    assert (tmp_path / "w" / "manifest.yaml").exists()


def test_empty_world_stats_zero(fresh_world):
    s = compute_context_stats(fresh_world)
    assert (s.fixture_words, s.log_words, s.services_touched) == (0, 0, 0)


def test_stats_match_recount(rollout30):
    w = rollout30.world
    s = compute_context_stats(w)
    for svc, n in s.log_words_per_service.items():
        assert n == word_count(render_service_log(w, svc))
    assert s.records_per_service == {k: len(v) for k, v in w.fixtures.records.items() if v}


@settings(max_examples=30, deadline=None)
@given(st.lists(st.sampled_from(["contacts", "notes", "kb"]), min_size=1, max_size=12))
def test_id_soundness_under_random_adds(services):
    from digiworld.demo import persona_path
    from digiworld.worldio import load_persona_file
    from digiworld.worldstate import new_world

    w = new_world(load_persona_file(persona_path("p03")), seed=0)
    payloads = {"contacts": {"name": "n", "email": "e"}, "notes": {"title": "t", "created": "2026-01-01T00:00:00"},
                "kb": {"title": "t", "body": "b"}}
    last = {}
    for svc in services:
        rid = allocate_id(w, svc)
        suffix = int(rid.split("-")[1])
        assert suffix > last.get(svc, 0)
        last[svc] = suffix
        w = seeded(w, ServiceRecord(svc, rid, payloads[svc]))
    assert validate_integrity(w).ok
