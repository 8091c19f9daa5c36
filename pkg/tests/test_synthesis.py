import pytest

from digiworld.demo import demo_rollout
from digiworld.generator import StubGenerator
from digiworld.seedpool import NoiseTemplate, SamplerConfig, Sampler
from digiworld.synthesis import (
    InsufficientCandidatesError,
    SchemaViolationError,
    adapt_to_env,
    conflict_candidates,
    inject_conflicts,
    materialize_event,
    run_round,
    summarize_world,
)
from digiworld.worldstate import RoundMismatchError, apply_delta, validate_integrity


class Flaky:
    """Wraps a generator and returns garbage for the first ``bad`` calls of one method."""

    def __init__(self, inner, method, bad):
        self.inner, self.method, self.bad = inner, method, bad
        self.calls = 0
        self.feedback = []

    def __getattr__(self, name):
        real = getattr(self.inner, name)
        if name != self.method:
            return real

        def wrapped(*args, **kw):
            self.calls += 1
            if name == "adapt_event":
                self.feedback.append(args[3] if len(args) > 3 else kw.get("feedback"))
            if self.calls <= self.bad:
                return {"nonsense": True}
            return real(*args, **kw)

        return wrapped


def test_adapt_retries_with_feedback(fresh_world, pools):
    gen = Flaky(StubGenerator(0), "adapt_event", 1)
    adapted = adapt_to_env(pools.tasks[0], fresh_world, gen)
    assert gen.calls == 2
    assert gen.feedback[0] is None and gen.feedback[1]
    assert set(adapted.involved_services) <= set(pools.tasks[0].services)


def test_adapt_gives_up(fresh_world, pools):
    gen = Flaky(StubGenerator(0), "adapt_event", 99)
    with pytest.raises(SchemaViolationError):
        adapt_to_env(pools.tasks[0], fresh_world, gen, retries=3)
    assert gen.calls == 3


def test_materialize_rejects_then_recovers(fresh_world, pools):
    base = StubGenerator(0)
    adapted = adapt_to_env(pools.tasks[0], fresh_world, base)
    gen = Flaky(base, "generate_records", 2)
    delta = materialize_event(adapted, fresh_world, gen, round=1)
    assert gen.calls == 3
    w = apply_delta(fresh_world, delta)
    assert validate_integrity(w).ok
    assert len(w.persona.threads) == len(fresh_world.persona.threads) + 1


def test_ephemeral_noise_leaves_no_records(fresh_world, pools):
    gen = StubGenerator(0)
    eph = next(n for n in pools.noise if n.trace_mode == "ephemeral")
    delta = materialize_event(adapt_to_env(eph, fresh_world, gen), fresh_world, gen, round=1)
    assert delta.new_records == [] and not delta.new_threads and not delta.new_traits
    assert delta.log_entries


def test_trace_leaving_noise_only_tombstones(fresh_world, pools):
    gen = StubGenerator(0)
    tl = next(n for n in pools.noise if n.noise_id == "N002")
    delta = materialize_event(adapt_to_env(tl, fresh_world, gen), fresh_world, gen, round=1)
    assert delta.new_records and all(r.tombstoned for r in delta.new_records)
    w = apply_delta(fresh_world, delta)
    assert not w.fixtures.live("notes")


def test_run_round_mismatch(fresh_world, pools):
    with pytest.raises(RoundMismatchError):
        run_round(fresh_world, pools, SamplerConfig(), StubGenerator(0), 2)


def test_run_round_leaves_input_untouched(fresh_world, pools):
    before = fresh_world.digest()
    w = run_round(fresh_world, pools, SamplerConfig(seed=3), StubGenerator(3), 1)
    assert fresh_world.digest() == before and w.round == 1


def test_task_rounds_add_one_thread_each():
    from digiworld.worldio import load_persona_file
    from digiworld.demo import persona_path

    initial = len(load_persona_file(persona_path("p01")).threads)
    ro = demo_rollout(seed=2, rounds=25, noise_ratio=0.5)
    task_rounds = sum(1 for _, kind, _ in ro.history if kind == "task")
    assert len(ro.world.persona.threads) == initial + task_rounds


def test_noise_only_rollout_adds_no_threads_or_traits():
    ro = demo_rollout(seed=4, rounds=20, noise_ratio=1.0, conflict_count=0)
    from digiworld.worldio import load_persona_file
    from digiworld.demo import persona_path

    p = load_persona_file(persona_path("p01"))
    assert ro.world.persona.threads == p.threads and ro.world.persona.traits == p.traits


def test_summary_is_bounded(rollout30):
    s = summarize_world(rollout30.world, limit=3)
    assert all(len(v) <= 3 for v in s["fixtures"].values())
    assert len(s["recent_log"]) <= 3


def test_inject_conflicts_ledger(rollout30):
    w = rollout30.world
    cands = conflict_candidates(w)
    assert cands
    w2 = inject_conflicts(w, 1)
    c = w2.conflicts[-1]
    assert len(w2.conflicts) == len(w.conflicts) + 1
    src = w2.fixtures.get(c.source_service, c.source_id)
    echo = w2.fixtures.get(c.echo_service, c.echo_id)
    assert src.payload[c.source_field] == c.source_value
    assert echo.payload[c.echo_field] == c.echo_value != c.source_value
    # nothing else changed
    assert w2.fixtures.count() == w.fixtures.count() and w2.log == w.log
    assert validate_integrity(w2).ok


def test_inject_zero_is_identity(rollout30):
    assert inject_conflicts(rollout30.world, 0) is rollout30.world


def test_insufficient_candidates(fresh_world):
    with pytest.raises(InsufficientCandidatesError):
        inject_conflicts(fresh_world, 1)


def test_snapshot_rounds_carry_conflicts(rollout30):
    for r, snap in rollout30.snapshots.items():
        assert snap.round == r
        assert snap.world().conflicts


def test_unknown_noise_service_filtered(fresh_world):
    n = NoiseTemplate("Z", "x", "ephemeral", ("notes", "fax"))
    adapted = adapt_to_env(n, fresh_world, StubGenerator(0))
    assert "fax" not in adapted.involved_services


def test_sampler_shared_across_rounds(pools):
    cfg = SamplerConfig(seed=8)
    s = Sampler(pools, cfg)
    seq = [s.sample(r).kind for r in range(1, 30)]
    assert seq == [Sampler(pools, cfg).sample(r).kind for r in range(1, 30)]
