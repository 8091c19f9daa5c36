"""Acceptance criteria 1-10.

Each test records PASS/FAIL under its criterion number; the terminal summary
(see conftest.py) prints one line per criterion. Run directly with
``python tests/test_acceptance.py`` for the same summary.
"""

import functools
import random
import re
import threading
import time
from fractions import Fraction

import pytest
import yaml

from helpers import full_payload
from digiworld.backend import build_registry, start_run
from digiworld.catalog import DEFAULT_SCHEMAS
from digiworld.cli import main
from digiworld.demo import demo_rollout
from digiworld.generator import StubGenerator
from digiworld.grader import aggregate, score_from_satisfaction
from digiworld.harness import NoopAdapter, ReferenceAdapter, RunConfig, build_system_prompt, execute, load_skill
from digiworld.seedpool import SamplerConfig, Sampler
from digiworld.taskgen import ScoringPolicy, build_task_set, build_verifier, validate_by_execution
from digiworld.worldstate import compute_context_stats, validate_integrity

RESULTS: dict[int, tuple[str, str]] = {}


def criterion(n: int, title: str):
    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                fn(*args, **kwargs)
            except BaseException:
                RESULTS[n] = ("FAIL", title)
                raise
            RESULTS[n] = ("PASS", title)
        return run
    return wrap


def summary_lines() -> list[str]:
    return [f"criterion {n:>2}: {RESULTS[n][0]}  {RESULTS[n][1]}" for n in sorted(RESULTS)]


# -- 1 ---------------------------------------------------------------------------

@criterion(1, "determinism: two seeded 30-round simulations give identical digests")
def test_c1_determinism(tmp_path):
    cfg = {"seed": 17, "personas": ["p01"], "rounds": 30, "task_rounds": list(range(1, 31)), "jobs": 1}
    suite = tmp_path / "suite.yaml"
    suite.write_text(yaml.safe_dump(cfg))
    t0 = time.perf_counter()
    digests = []
    for name in ("a", "b"):
        assert main(["simulate", "--suite", str(suite), "--out", str(tmp_path / name)]) == 0
        digests.append(yaml.safe_load((tmp_path / name / "simulate.yaml").read_text())["worlds"]["p01"])
    elapsed = time.perf_counter() - t0
    a, b = digests
    assert sorted(a["snapshots"]) == list(range(1, 31))
    for r in range(1, 31):
        assert a["snapshots"][r] == b["snapshots"][r], f"round {r} differs"
    assert a["final_digest"] == b["final_digest"]
    assert elapsed < 30


# -- 2 ---------------------------------------------------------------------------

@criterion(2, "integrity: 100 randomized 30-round rollouts have zero violations")
def test_c2_integrity():
    rng = random.Random(2024)
    for i in range(100):
        seed = rng.randrange(10**6)
        ratio = (0.0, 0.5, 1.0)[i % 3]
        persona = ("p01", "p02", "p03")[rng.randrange(3)]
        ro = demo_rollout(seed=seed, rounds=30, persona_id=persona, noise_ratio=ratio, task_rounds=[10, 20, 30])
        report = validate_integrity(ro.world)
        assert report.ok, (seed, ratio, persona, report.violations[:3])
        for snap in ro.snapshots.values():
            assert validate_integrity(snap.world()).ok


# -- 3 ---------------------------------------------------------------------------

@criterion(3, "noise-ratio law: 10,000 draws at 0.5 within 0.015; 0 and 1 exact")
def test_c3_noise_ratio(pools):
    def fraction(ratio, seed):
        s = Sampler(pools, SamplerConfig(noise_ratio=ratio, seed=seed))
        return sum(s.sample(r).is_noise for r in range(1, 10_001)) / 10_000

    for seed in (0, 1, 2):
        assert abs(fraction(0.5, seed) - 0.5) <= 0.015
    assert fraction(0.0, 0) == 0.0
    assert fraction(1.0, 0) == 1.0


# -- 4 ---------------------------------------------------------------------------

@criterion(4, "context growth: word counts non-decreasing over R in {10,20,30,40}")
def test_c4_context_growth():
    for seed in range(10):
        ro = demo_rollout(seed=seed, rounds=40, task_rounds=[10, 20, 30, 40])
        stats = [compute_context_stats(ro.snapshots[r].world()) for r in (10, 20, 30, 40)]
        totals = [s.fixture_words + s.log_words for s in stats]
        logs = [s.log_words for s in stats]
        assert totals == sorted(totals), (seed, totals)
        assert logs == sorted(logs), (seed, logs)


# -- 5 ---------------------------------------------------------------------------

_PROCESS_CHECKS = [
    {"type": "call", "tool": "gmail_list_messages"},
    {"type": "text", "any_of": ["done", "moved"]},
    {"type": "state", "service": "notes", "where": {"title": {"contains": "plan"}}},
    {"type": "judge", "prompt": "Did the reply name the record?"},
]


def _random_raw_verifier(rng: random.Random) -> dict:
    n = rng.randint(0, 6)
    items = [{"item_id": "outcome", "kind": "outcome", "check": {"type": "text", "all_of": ["ok"]}}]
    items += [{"item_id": f"p{i}", "kind": "process", "check": rng.choice(_PROCESS_CHECKS)} for i in range(n)]
    raw = {"rubric": items}
    if rng.random() < 0.5:
        raw["required_final_state"] = [{"type": "state", "service": "calendar", "where": {"title": {"contains": "x"}}}]
    if rng.random() < 0.5:
        raw["forbidden_actions"] = [{"type": "call", "tool": "gmail_delete_message"}]
    return raw


@criterion(5, "decisive scoring: outcome_correct <=> pass for 1,000 verifiers x 1,000 vectors")
def test_c5_decisive():
    rng = random.Random(5)
    reg = build_registry(DEFAULT_SCHEMAS)
    verifiers = []
    while len(verifiers) < 1000:
        policy = rng.choice([ScoringPolicy(), ScoringPolicy(0.55, 0.6), ScoringPolicy(0.7, 0.8)])
        v = build_verifier(_random_raw_verifier(rng), policy, reg)
        assert not v.problems()
        verifiers.append(v)
    vectors = [[rng.random() < 0.5 for _ in range(7)] for _ in range(1000)]
    for v in verifiers:
        ids = [i.item_id for i in v.rubric]
        for vec in vectors:
            sat = dict(zip(ids, vec))
            _, outcome_correct, passed = score_from_satisfaction(v.rubric, v.pass_threshold, sat)
            assert outcome_correct == passed


# -- 6 ---------------------------------------------------------------------------

def _brute(rows: dict, k: int):
    n = len(rows)
    passes = any_ = all_ = 0
    for runs in rows.values():
        c = 0
        for x in runs:
            if x:
                c += 1
        passes += c
        any_ += 1 if c > 0 else 0
        all_ += 1 if c == k else 0
    return float(Fraction(passes, n * k)), float(Fraction(any_, n)), float(Fraction(all_, n))


@criterion(6, "metric oracle: aggregate == brute force on 1,000 matrices; ordering; 69/200 -> 34.5%")
def test_c6_metrics():
    rng = random.Random(6)
    for _ in range(1000):
        p = rng.random()
        rows = {f"t{i}": [rng.random() < p for _ in range(3)] for i in range(50)}
        m = aggregate(rows, 3)
        assert (m.pass_at_1, m.pass_at_k, m.pass_hat_k) == _brute(rows, 3)
        assert m.pass_hat_k <= m.pass_at_1 <= m.pass_at_k
    single = {f"t{i}": [i < 69] for i in range(200)}
    assert f"{100 * aggregate(single, 1).pass_at_1:.1f}" == "34.5"


# -- 7 ---------------------------------------------------------------------------

@criterion(7, "backend conformance: round trip, not-found shape, 32 concurrent callers")
def test_c7_backend(snap30):
    run = start_run(snap30)
    try:
        for service, schema in sorted(DEFAULT_SCHEMAS.items()):
            payload = full_payload(run, service)
            created = run.handle_call(f"{service}_create_{schema.entity}", payload)
            assert "error" not in created, (service, created)
            got = run.handle_call(f"{service}_get_{schema.entity}", {schema.id_field: created[schema.id_field]})
            assert {k: got[k] for k in payload} == payload, service
        assert run.handle_call("helpdesk_get_ticket", {"ticket_id": "T-1"}) == {"error": "Ticket T-1 not found"}
        for service, schema in DEFAULT_SCHEMAS.items():
            resp = run.handle_call(f"{service}_get_{schema.entity}", {schema.id_field: "T-1"})
            assert re.fullmatch(r"[A-Z][a-z ]+ T-1 not found", resp["error"]), resp
    finally:
        run.finish()

    run = start_run(snap30)
    issued = [0] * 32
    barrier = threading.Barrier(32)

    def caller(i):
        r = random.Random(i)
        barrier.wait()
        for _ in range(25):
            name = r.choice(["notes_list_notes", "gmail_list_messages", "notes_get_note", "fax_send"])
            run.handle_call(name, {"query": "a"} if "list" in name else {"note_id": "NOTE-1"})
            issued[i] += 1

    threads = [threading.Thread(target=caller, args=(i,)) for i in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    run.finish()
    assert len(run.call_log()) == sum(issued) == 32 * 25


# -- 8 ---------------------------------------------------------------------------

def _full_blocks(prompt: str) -> dict[str, str]:
    section = prompt.split("Tool names are case-sensitive; call them exactly as written.\n\n", 1)[1]
    section = section.split("\n\n## Activity logs", 1)[0] + "\n"
    chunks = re.split(r"(?m)^(?=- name: )", section)
    return {re.match(r"- name: (\S+)", c).group(1): c for c in chunks if c}


@criterion(8, "lazy/full equivalence: load_skill output byte-identical to the full-mode block")
def test_c8_lazy_full(snap30, bundle):
    instances, _ = bundle
    inst = instances[0]
    world = snap30.world()
    reg = build_registry(world.fixtures.schemas)
    assert len(reg.services()) == 35
    full = build_system_prompt(inst, RunConfig(loading_mode="full"), reg, [])
    lazy = build_system_prompt(inst, RunConfig(loading_mode="lazy"), reg, [])
    blocks = _full_blocks(full)
    assert sorted(blocks) == sorted(reg.names())
    for name in reg.names():
        assert load_skill(name, reg).encode() == blocks[name].encode(), name
    assert "input_schema" not in lazy and "properties" not in lazy


# -- 9 ---------------------------------------------------------------------------

@criterion(9, "validation closure: reference adapter 100%, no-op 0% on state-change tasks")
def test_c9_closure():
    t0 = time.perf_counter()
    instances, snaps, gens = [], {}, {}
    for i, pid in enumerate(["p01", "p02", "p03"]):
        gen = StubGenerator(100 + i)
        ro = demo_rollout(seed=100 + i, rounds=50, persona_id=pid, task_rounds=[20, 30, 40, 50], gen=gen)
        accepted, _ = build_task_set(ro.snapshots, [20, 30, 40, 50], gen, history=ro.history)
        for inst in accepted:
            snap = ro.snapshots[inst.provenance["round"]]
            if validate_by_execution(inst, snap, gen).status == "pass":
                instances.append(inst)
                snaps[inst.instance_id] = snap
                gens[inst.instance_id] = gen
    assert len(instances) >= 10

    ref, noop = {}, {}
    for inst in instances:
        snap, gen = snaps[inst.instance_id], gens[inst.instance_id]
        ref[inst.instance_id] = [execute(inst, snap, ReferenceAdapter(inst), gen=gen).score.passed is True]
        if inst.state_change:
            noop[inst.instance_id] = [execute(inst, snap, NoopAdapter(), gen=gen).score.passed is True]
    assert noop
    assert aggregate(ref, 1).pass_at_1 == 1.0
    assert aggregate(noop, 1).pass_at_1 == 0.0
    assert time.perf_counter() - t0 < 120


# -- 10 --------------------------------------------------------------------------

@criterion(10, "date injection: exactly one Date: line equal to task_date")
def test_c10_date(bundle):
    instances, snaps = bundle
    reg = build_registry(DEFAULT_SCHEMAS)
    for inst in instances:
        for mode in ("full", "lazy"):
            prompt = build_system_prompt(inst, RunConfig(loading_mode=mode), reg, [])
            lines = [ln for ln in prompt.splitlines() if ln.startswith("Date:")]
            assert lines == [f"Date: {inst.query.task_date.isoformat()}"]
        # the prompt an episode actually sees
        adapter = NoopAdapter()
        execute(inst, snaps[inst.snapshot_digest], adapter, grade_it=False)
        assert adapter.system_prompt.count("\nDate: ") == 1
        assert f"\nDate: {inst.query.task_date.isoformat()}\n" in adapter.system_prompt


if __name__ == "__main__":
    import sys

    code = pytest.main([__file__, "-q", "-p", "no:cacheprovider"])
    sys.exit(code)
