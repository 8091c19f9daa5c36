"""One simulation round: sample, ground in the world, materialize, apply.

Also hosts fixture-level conflict injection and the full rollout loop that
captures snapshots at task rounds.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from datetime import datetime, time, timedelta
from typing import Iterable

from .catalog import FACT_LINKS, format_datetime, parse_datetime, referenced_ids
from .generator import Generator, GeneratorSchemaError, GeneratorUnavailable
from .seedpool import NoiseTemplate, Pools, SamplerConfig, Sampler, SeedTask, derive_rng
from .worldstate import (
    DIFFICULTIES,
    LOG_KINDS,
    ActivityThread,
    ConflictPair,
    EventLogEntry,
    IntegrityViolationError,
    RoundMismatchError,
    ServiceRecord,
    Snapshot,
    WorldDelta,
    WorldError,
    WorldState,
    allocate_id,
    apply_delta,
    snapshot,
)

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
DEFAULT_SUMMARY_LIMIT = 20


class SchemaViolationError(WorldError):
    def __init__(self, message: str, raw=None, problems: list[str] | None = None):
        super().__init__(message)
        self.raw = raw
        self.problems = problems or []


class InsufficientCandidatesError(WorldError):
    pass


@dataclass(frozen=True)
class AdaptedEvent:
    adapted_name: str
    adapted_description: str
    adapted_category: str
    adapted_difficulty: str
    involved_services: tuple[str, ...]
    planned_records: dict
    conflict_axes: tuple[str, ...] = ()
    source_kind: str = "task"
    source_id: str = ""
    trace_mode: str | None = None

    def to_dict(self) -> dict:
        return {
            "adapted_name": self.adapted_name,
            "adapted_description": self.adapted_description,
            "adapted_category": self.adapted_category,
            "adapted_difficulty": self.adapted_difficulty,
            "involved_services": list(self.involved_services),
            "planned_records": dict(self.planned_records),
            "conflict_axes": list(self.conflict_axes),
        }


# ---------------------------------------------------------------------------
# world summaries


def summarize_world(world: WorldState, limit: int = DEFAULT_SUMMARY_LIMIT) -> dict:
    """Bounded digest of the world handed to generators."""
    bank = world.fixtures
    fixtures = {}
    counts = {}
    for service in sorted(bank.records):
        live = bank.live(service)
        if not live:
            continue
        counts[service] = len(live)
        fixtures[service] = [{"record_id": r.record_id, **r.payload} for r in live[-limit:]]
    referenced = set()
    for rec in bank.iter_records(include_tombstoned=False):
        referenced.update(rid for _, _, rid in referenced_ids(bank.schemas[rec.service], rec.payload))
    entities = {}
    if "contacts" in fixtures:
        entities["contacts"] = [f"{c['record_id']} {c.get('name', '')}" for c in fixtures["contacts"]]
    if "calendar" in fixtures:
        entities["events"] = [f"{e['record_id']} {e.get('title', '')}" for e in fixtures["calendar"]]
    p = world.persona
    return {
        "persona": {
            "persona_id": p.persona_id,
            "persona_name": p.persona_name,
            "role": p.role,
            "company": p.company,
            "industry": p.industry,
            "seniority": p.seniority,
            "traits": list(p.traits),
            "threads": [t.name for t in p.threads[-limit:]],
        },
        "round": world.round,
        "clock": format_datetime(world.clock),
        "time_window": [world.time_window[0].isoformat(), world.time_window[1].isoformat()],
        "fixtures": fixtures,
        "counts": counts,
        "entities": entities,
        "devices": [d.to_dict() for d in world.devices],
        "conflicts": [c.to_dict() for c in world.conflicts],
        "recent_log": [e.to_dict() for e in world.log[-limit:]],
        "referenced": sorted(referenced),
    }


# ---------------------------------------------------------------------------
# adaptation


def allowed_services_for(event, catalog) -> list[str]:
    if isinstance(event, SeedTask):
        services = list(event.services)
    else:
        services = list(dict.fromkeys(list(event.services) + list(event.residual_record_kinds)))
    return [s for s in services if s in catalog]


def parse_adapted(raw, event, allowed: list[str]) -> tuple[AdaptedEvent | None, list[str]]:
    problems = []
    if not isinstance(raw, dict):
        return None, ["output is not an object"]
    for key in ("adapted_name", "adapted_description", "adapted_category", "adapted_difficulty"):
        if not isinstance(raw.get(key), str) or not raw.get(key):
            problems.append(f"{key}: missing or not a string")
    if raw.get("adapted_difficulty") not in DIFFICULTIES:
        problems.append(f"adapted_difficulty: must be one of {', '.join(DIFFICULTIES)}")
    services = raw.get("involved_services")
    if not isinstance(services, list) or not all(isinstance(s, str) for s in services):
        problems.append("involved_services: expected list of service names")
        services = []
    for s in services:
        if s not in allowed:
            problems.append(f"involved_services: {s!r} is not one of {', '.join(allowed)}")
    planned = raw.get("planned_records") or {}
    if not isinstance(planned, dict):
        problems.append("planned_records: expected object")
        planned = {}
    for s, n in planned.items():
        if s not in allowed:
            problems.append(f"planned_records: service {s!r} not allowed")
        if not isinstance(n, int) or isinstance(n, bool) or n < 0:
            problems.append(f"planned_records[{s}]: expected non-negative integer")
    is_noise = isinstance(event, NoiseTemplate)
    if is_noise and event.trace_mode == "ephemeral" and any(planned.values()):
        problems.append("planned_records: ephemeral noise cannot create records")
    axes = raw.get("conflict_axes") or []
    if not isinstance(axes, list):
        problems.append("conflict_axes: expected list")
        axes = []
    if problems:
        return None, problems
    return AdaptedEvent(
        adapted_name=raw["adapted_name"],
        adapted_description=raw["adapted_description"],
        adapted_category=raw["adapted_category"],
        adapted_difficulty=raw["adapted_difficulty"],
        involved_services=tuple(services),
        planned_records={s: n for s, n in planned.items() if n},
        conflict_axes=tuple(str(a) for a in axes),
        source_kind="noise" if is_noise else "task",
        source_id=event.noise_id if is_noise else event.seed_id,
        trace_mode=event.trace_mode if is_noise else None,
    ), []


def adapt_to_env(
    event: SeedTask | NoiseTemplate,
    world: WorldState,
    gen: Generator,
    *,
    retries: int = DEFAULT_RETRIES,
    summary: dict | None = None,
) -> AdaptedEvent:
    """Ground a sampled seed or noise template in the current world.

    The generator gets up to ``retries`` attempts; each retry carries the
    previous schema problems as feedback.
    """
    allowed = allowed_services_for(event, world.fixtures.schemas)
    summary = summary if summary is not None else summarize_world(world)
    feedback = None
    raw = None
    problems: list[str] = []
    for _ in range(max(1, retries)):
        try:
            raw = gen.adapt_event(event, summary, allowed, feedback)
        except GeneratorSchemaError as exc:
            raw, problems = exc.raw, [str(exc)]
        else:
            adapted, problems = parse_adapted(raw, event, allowed)
            if adapted is not None:
                return adapted
        feedback = "; ".join(problems)
    raise SchemaViolationError(f"adapt_event output invalid after {retries} attempts: {feedback}", raw, problems)


# ---------------------------------------------------------------------------
# materialization


def _parse_delta(raw, world: WorldState, adapted: AdaptedEvent, reservations, r: int) -> tuple[WorldDelta, list[str]]:
    problems = []
    if not isinstance(raw, dict):
        return WorldDelta(round=r), ["output is not an object"]
    bank = world.fixtures
    reserved = {rid for ids in reservations.values() for rid in ids}
    records = []
    for service, recs in (raw.get("records") or {}).items():
        if service not in bank.schemas:
            problems.append(f"records: unknown service {service!r}")
            continue
        schema = bank.schemas[service]
        for rec in recs or []:
            if not isinstance(rec, dict):
                problems.append(f"records[{service}]: expected objects")
                continue
            rec = dict(rec)
            rid = rec.pop(schema.id_field, None) or rec.pop("record_id", None)
            deleted = bool(rec.pop("deleted", False))
            if rid not in reserved or rid not in reservations.get(service, []):
                problems.append(f"records[{service}]: id {rid!r} was not reserved")
                continue
            records.append(ServiceRecord(service, rid, rec, created_round=r, tombstoned=deleted))

    entries = []
    for e in raw.get("log_entries") or []:
        try:
            entry = EventLogEntry(
                timestamp=parse_datetime(e["timestamp"]),
                origin=str(e.get("origin") or "system"),
                kind=str(e["kind"]),
                text=str(e["text"]),
                refs=tuple(e.get("refs") or ()),
            )
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"log_entries: malformed entry ({exc})")
            continue
        if entry.kind not in LOG_KINDS:
            problems.append(f"log_entries: unknown kind {entry.kind!r}")
        entries.append(entry)

    updates = raw.get("persona_updates") or {}
    traits = [str(t) for t in updates.get("new_traits") or []]
    threads = []
    for t in updates.get("new_threads") or []:
        try:
            threads.append(ActivityThread.from_dict(t))
        except (KeyError, TypeError, ValueError) as exc:
            problems.append(f"persona_updates: malformed thread ({exc})")
    mapping = raw.get("thread_record_mapping") or {}
    if not isinstance(mapping, dict):
        problems.append("thread_record_mapping: expected object")
        mapping = {}

    if adapted.source_kind == "task" and any(adapted.planned_records.values()) and not records:
        problems.append("records: none of the reserved ids were used")
    if not entries:
        problems.append("log_entries: at least one entry required")
    if adapted.source_kind == "noise":
        if traits or threads:
            problems.append("noise events cannot update the persona")
        if adapted.trace_mode == "ephemeral" and records:
            problems.append("ephemeral noise produced records")
        if adapted.trace_mode == "trace_leaving" and any(not rec.tombstoned for rec in records):
            problems.append("trace-leaving noise must leave only deleted residual records")
        mapping = {}
    elif len(threads) != 1:
        # exactly one activity thread per task event
        if not threads:
            threads = [ActivityThread(
                name=adapted.adapted_name,
                description=adapted.adapted_description,
                involved_services=list(adapted.involved_services),
                difficulty=adapted.adapted_difficulty,
                category=adapted.adapted_category,
            )]
        else:
            problems.append(f"task event produced {len(threads)} threads, expected 1")
    if threads and adapted.source_kind == "task":
        th = threads[0]
        if th.name in {t.name for t in world.persona.threads}:
            problems.append(f"thread name {th.name!r} already used")
        if not th.involved_records and th.name not in mapping:
            by_service: dict[str, list[str]] = {}
            for rec in records:
                by_service.setdefault(rec.service, []).append(rec.record_id)
            threads[0] = replace(th, involved_records=by_service)
    return WorldDelta(records, entries, traits, threads, mapping, round=r), problems


def materialize_event(
    adapted: AdaptedEvent,
    world: WorldState,
    gen: Generator,
    *,
    round: int | None = None,
    start: datetime | None = None,
    retries: int = DEFAULT_RETRIES,
    summary: dict | None = None,
) -> WorldDelta:
    """Ask the generator for records and log lines, then dry-run the delta."""
    r = world.round + 1 if round is None else round
    start = start or world.clock
    scratch = world.copy()
    reservations = {s: [allocate_id(scratch, s) for _ in range(n)] for s, n in sorted(adapted.planned_records.items())}
    summary = summary if summary is not None else summarize_world(world)
    summary = {**summary, "schemas": {s: world.fixtures.schemas[s].to_dict() for s in adapted.involved_services}}
    cli = next((d.device_id for d in world.devices if d.kind == "cli_workspace"), "workspace")
    context = {
        "round": r,
        "kind": adapted.source_kind,
        "trace_mode": adapted.trace_mode,
        "start": format_datetime(start),
        "window_end": format_datetime(world.window_end),
        "device_id": cli,
    }
    problems: list[str] = []
    raw = None
    for _ in range(max(1, retries)):
        try:
            raw = gen.generate_records(adapted.to_dict(), summary, reservations, context)
        except GeneratorSchemaError as exc:
            raw, problems = exc.raw, [str(exc)]
            continue
        delta, problems = _parse_delta(raw, world, adapted, reservations, r)
        if problems:
            continue
        try:
            apply_delta(world, delta)
        except IntegrityViolationError as exc:
            problems = [str(v) for v in exc.violations]
            continue
        return delta
    raise SchemaViolationError(f"generate_records output invalid: {'; '.join(problems[:5])}", raw, problems)


# ---------------------------------------------------------------------------
# conflicts


def conflict_candidates(world: WorldState) -> list[tuple]:
    """(link, source record, echo record) triples eligible for a new conflict."""
    bank = world.fixtures
    used = {(c.echo_service, c.echo_id, c.echo_field) for c in world.conflicts}
    used_sources = {(c.source_service, c.source_id) for c in world.conflicts}
    out = []
    for link in FACT_LINKS:
        for echo in bank.live(link.echo_service):
            ref = echo.payload.get(link.echo_ref)
            if not ref or (link.echo_service, echo.record_id, link.echo_field) in used:
                continue
            src = bank.get(link.source_service, ref)
            if src is None or src.tombstoned or (src.service, src.record_id) in used_sources:
                continue
            value = src.payload.get(link.source_field)
            if value is None or echo.payload.get(link.echo_field) != value:
                continue
            out.append((link, src, echo))
    out.sort(key=lambda t: (t[0].echo_service, t[2].record_id, t[0].echo_field))
    return out


def _perturb(value, rng):
    if isinstance(value, str):
        try:
            dt = parse_datetime(value)
        except ValueError:
            from .generator import LOCATIONS

            return rng.choice([loc for loc in LOCATIONS if loc != value])
        shift = timedelta(hours=rng.choice([-3, -2, -1, 1, 2, 3, 24, -24]))
        return format_datetime(dt + shift)
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        factor = rng.choice([0.8, 0.85, 0.9, 1.1, 1.15, 1.25])
        return round(value * factor, 2)
    raise TypeError(f"cannot perturb {type(value).__name__}")


def inject_conflicts(world: WorldState, k: int) -> WorldState:
    """Make ``k`` echo records disagree with their source across services.

    Only scalar fields of existing records change; each pair lands in the
    world's conflict ledger.
    """
    if k < 0:
        raise ValueError("k must be non-negative")
    if k == 0:
        return world
    candidates = conflict_candidates(world)
    # at most one conflict per source record
    distinct, seen = [], set()
    for cand in candidates:
        key = (cand[1].service, cand[1].record_id)
        if key not in seen:
            seen.add(key)
            distinct.append(cand)
    if len(distinct) < k:
        raise InsufficientCandidatesError(f"need {k} conflict candidates, world has {len(distinct)}")
    rng = derive_rng(world.rng_seed, "conflicts", world.round, len(world.conflicts))
    chosen = rng.sample(distinct, k)
    new = world.copy()
    for link, src, echo in chosen:
        source_value = src.payload[link.source_field]
        mutated = _perturb(source_value, rng)
        current = new.fixtures.get(echo.service, echo.record_id)
        new.fixtures.replace_record(replace(current, payload={**current.payload, link.echo_field: mutated}))
        new.conflicts.append(ConflictPair(
            conflict_id=f"C-{len(new.conflicts) + 1}",
            source_service=src.service,
            source_id=src.record_id,
            source_field=link.source_field,
            source_value=source_value,
            echo_service=echo.service,
            echo_id=echo.record_id,
            echo_field=link.echo_field,
            echo_value=mutated,
            round=world.round,
        ))
    return new


# ---------------------------------------------------------------------------
# rounds and rollouts


def round_start(world: WorldState, r: int) -> datetime:
    """Seeded 0-3 day clock advance for round ``r``, clamped to the window."""
    rng = derive_rng(world.rng_seed, "clock", r)
    days = rng.randint(0, 3)
    if days == 0:
        start = world.clock + timedelta(minutes=rng.randint(5, 120))
    else:
        day = world.clock.date() + timedelta(days=days)
        start = datetime.combine(day, time(8, 0)) + timedelta(minutes=rng.randint(0, 240))
    return min(max(start, world.clock), world.window_end)


def run_round(
    world: WorldState,
    pools: Pools,
    config: SamplerConfig,
    gen: Generator,
    r: int,
    *,
    sampler: Sampler | None = None,
    retries: int = DEFAULT_RETRIES,
    summary_limit: int = DEFAULT_SUMMARY_LIMIT,
) -> WorldState:
    """sample -> adapt -> materialize -> apply. The input world is never modified."""
    if r != world.round + 1:
        raise RoundMismatchError(f"round {r} requested but world is at round {world.round}")
    sampler = sampler or Sampler(pools, config)
    event = sampler.sample(r)
    summary = summarize_world(world, summary_limit)
    adapted = adapt_to_env(event.item, world, gen, retries=retries, summary=summary)
    start = round_start(world, r)
    delta = materialize_event(adapted, world, gen, round=r, start=start, retries=retries, summary=summary)
    return apply_delta(world, delta)


@dataclass
class Rollout:
    world: WorldState
    snapshots: dict[int, Snapshot] = field(default_factory=dict)
    history: list[tuple[int, str, str]] = field(default_factory=list)  # (round, kind, source id)

    def digests(self) -> dict[int, str]:
        return {r: s.digest for r, s in sorted(self.snapshots.items())}


def rollout(
    world: WorldState,
    pools: Pools,
    config: SamplerConfig,
    gen: Generator,
    rounds: int,
    task_rounds: Iterable[int] = (),
    *,
    retries: int = DEFAULT_RETRIES,
    summary_limit: int = DEFAULT_SUMMARY_LIMIT,
    on_round=None,
) -> Rollout:
    """Run rounds ``world.round+1 .. rounds`` and snapshot each task round.

    At every task round up to ``config.conflict_count`` fresh conflicts are
    injected before the snapshot is taken (fewer if the world lacks
    candidates).
    """
    task_rounds = set(task_rounds)
    sampler = Sampler(pools, config)
    result = Rollout(world)
    for r in range(world.round + 1, rounds + 1):
        event = sampler.sample(r)
        world = run_round(world, pools, config, gen, r, sampler=sampler, retries=retries,
                          summary_limit=summary_limit)
        result.history.append((r, event.kind, getattr(event.item, "seed_id", None) or event.item.noise_id))
        if r in task_rounds:
            if config.conflict_count:
                k = min(config.conflict_count, len({(c[1].service, c[1].record_id) for c in conflict_candidates(world)}))
                if k < config.conflict_count:
                    log.warning("round %d: only %d of %d conflicts injectable", r, k, config.conflict_count)
                world = inject_conflicts(world, k)
            result.snapshots[r] = snapshot(world, r)
        if on_round is not None:
            on_round(r, world)
    result.world = world
    return result


__all__ = [
    "AdaptedEvent",
    "GeneratorUnavailable",
    "InsufficientCandidatesError",
    "Rollout",
    "SchemaViolationError",
    "WorldDelta",
    "adapt_to_env",
    "conflict_candidates",
    "inject_conflicts",
    "materialize_event",
    "rollout",
    "run_round",
    "summarize_world",
]
