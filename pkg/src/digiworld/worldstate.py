"""The evolving digital world: persona, devices, fixture bank and activity log.

A :class:`WorldState` is treated as a value. Operations that change it return
a new world that shares unchanged records with the old one; records are
frozen and replaced rather than edited, so sharing is safe.
"""

from __future__ import annotations

import bisect
import copy
import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field, replace
from datetime import date, datetime, time, timedelta
from typing import Iterable, Iterator

from .catalog import (
    RECORD_ID_RE,
    RecordSchema,
    UnknownServiceError,  # re-exported: allocate_id raises it
    default_schemas,
    format_datetime,
    parse_datetime,
    parse_record_id,
    referenced_ids,
    schema_for,
    validate_payload,
)

DIFFICULTIES = ("simple", "medium", "hard")
LOG_KINDS = ("task_event", "noise_ephemeral", "noise_trace_leaving")
DEVICE_KINDS = ("cli_workspace", "gui_mobile")
SYSTEM_ORIGIN = "system"


class WorldError(Exception):
    pass


class IntegrityViolationError(WorldError):
    def __init__(self, violations: list[Violation]):
        self.violations = list(violations)
        lines = "; ".join(str(v) for v in self.violations[:5])
        more = f" (+{len(self.violations) - 5} more)" if len(self.violations) > 5 else ""
        super().__init__(f"integrity violation: {lines}{more}")


class ClockRegressionError(WorldError):
    pass


class RecordNotFoundError(WorldError):
    pass


class DoubleDeleteError(WorldError):
    pass


class RoundMismatchError(WorldError):
    pass


# ---------------------------------------------------------------------------
# domain types


@dataclass
class ActivityThread:
    name: str
    description: str = ""
    involved_services: list[str] = field(default_factory=list)
    involved_records: dict[str, list[str]] = field(default_factory=dict)
    signal_density: float = 0.0
    difficulty: str = "medium"
    category: str = ""
    thread_type: str = "standard"
    patrol_signals: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "description": self.description,
            "involved_services": list(self.involved_services),
            "involved_records": {k: list(v) for k, v in self.involved_records.items()},
            "signal_density": self.signal_density,
            "difficulty": self.difficulty,
            "category": self.category,
            "thread_type": self.thread_type,
            "patrol_signals": list(self.patrol_signals),
        }

    @classmethod
    def from_dict(cls, d: dict) -> ActivityThread:
        return cls(
            name=d["name"],
            description=d.get("description", "") or "",
            involved_services=list(d.get("involved_services") or []),
            involved_records={k: list(v or []) for k, v in (d.get("involved_records") or {}).items()},
            signal_density=float(d.get("signal_density", 0.0) or 0.0),
            difficulty=d.get("difficulty", "medium"),
            category=d.get("category", "") or "",
            thread_type=d.get("thread_type", "standard") or "standard",
            patrol_signals=list(d.get("patrol_signals") or []),
        )


@dataclass
class Persona:
    persona_id: str
    persona_name: str
    language: str = "en"
    role: str = ""
    company: str = ""
    industry: str = ""
    seniority: str = ""
    traits: list[str] = field(default_factory=list)
    threads: list[ActivityThread] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "persona_id": self.persona_id,
            "persona_name": self.persona_name,
            "language": self.language,
            "role": self.role,
            "company": self.company,
            "industry": self.industry,
            "seniority": self.seniority,
            "traits": list(self.traits),
            "threads": [t.to_dict() for t in self.threads],
        }

    @classmethod
    def from_dict(cls, d: dict) -> Persona:
        if not d.get("persona_id"):
            raise ValueError("persona_id must be non-empty")
        return cls(
            persona_id=str(d["persona_id"]),
            persona_name=str(d.get("persona_name", "")),
            language=str(d.get("language", "en")),
            role=str(d.get("role", "")),
            company=str(d.get("company", "")),
            industry=str(d.get("industry", "")),
            seniority=str(d.get("seniority", "")),
            traits=[str(t) for t in d.get("traits") or []],
            threads=[ActivityThread.from_dict(t) for t in d.get("threads") or []],
        )

    def copy(self) -> Persona:
        # threads are append-only, so sharing the thread objects is fine
        return replace(self, traits=list(self.traits), threads=list(self.threads))


@dataclass(frozen=True)
class ServiceRecord:
    service: str
    record_id: str
    payload: dict
    created_round: int = 0
    tombstoned: bool = False

    @property
    def suffix(self) -> int:
        return parse_record_id(self.record_id)[1]

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "record_id": self.record_id,
            "payload": copy.deepcopy(self.payload),
            "created_round": self.created_round,
            "tombstoned": self.tombstoned,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ServiceRecord:
        return cls(
            service=d["service"],
            record_id=d["record_id"],
            payload=copy.deepcopy(d.get("payload") or {}),
            created_round=int(d.get("created_round", 0)),
            tombstoned=bool(d.get("tombstoned", False)),
        )


@dataclass(frozen=True)
class EventLogEntry:
    timestamp: datetime
    origin: str
    kind: str
    text: str
    refs: tuple[str, ...] = ()

    @property
    def service(self) -> str | None:
        if self.origin.startswith("service:"):
            return self.origin.split(":", 1)[1]
        return None

    def to_dict(self) -> dict:
        return {
            "timestamp": format_datetime(self.timestamp),
            "origin": self.origin,
            "kind": self.kind,
            "text": self.text,
            "refs": list(self.refs),
        }

    @classmethod
    def from_dict(cls, d: dict) -> EventLogEntry:
        return cls(
            timestamp=parse_datetime(d["timestamp"]),
            origin=d["origin"],
            kind=d["kind"],
            text=d["text"],
            refs=tuple(d.get("refs") or ()),
        )


@dataclass(frozen=True)
class DeviceSpec:
    device_id: str
    kind: str
    interface_note: str = ""

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "kind": self.kind, "interface_note": self.interface_note}

    @classmethod
    def from_dict(cls, d: dict) -> DeviceSpec:
        return cls(d["device_id"], d["kind"], d.get("interface_note", ""))


DEFAULT_DEVICES = (DeviceSpec("laptop", "cli_workspace", "Linux shell with /workspace"),)


@dataclass(frozen=True)
class ConflictPair:
    """Two records across services that disagree on one scalar fact."""

    conflict_id: str
    source_service: str
    source_id: str
    source_field: str
    source_value: object
    echo_service: str
    echo_id: str
    echo_field: str
    echo_value: object
    round: int

    def to_dict(self) -> dict:
        return {
            "conflict_id": self.conflict_id,
            "source_service": self.source_service,
            "source_id": self.source_id,
            "source_field": self.source_field,
            "source_value": self.source_value,
            "echo_service": self.echo_service,
            "echo_id": self.echo_id,
            "echo_field": self.echo_field,
            "echo_value": self.echo_value,
            "round": self.round,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ConflictPair:
        return cls(**d)


class FixtureBank:
    """Persistent per-service records plus the ID counters."""

    def __init__(
        self,
        schemas: dict[str, RecordSchema] | None = None,
        records: dict[str, list[ServiceRecord]] | None = None,
        id_counters: dict[str, int] | None = None,
    ):
        self.schemas = dict(schemas) if schemas is not None else default_schemas()
        self.records: dict[str, list[ServiceRecord]] = {s: [] for s in self.schemas}
        for service, recs in (records or {}).items():
            self.records[service] = list(recs)
        self.id_counters = {s: sc.id_start for s, sc in self.schemas.items()}
        if id_counters:
            self.id_counters.update(id_counters)
        self._index: dict[str, dict[str, int]] = {}
        self._reindex()

    def _reindex(self) -> None:
        self._index = {}
        for service, recs in self.records.items():
            idx: dict[str, int] = {}
            for i, rec in enumerate(recs):
                idx.setdefault(rec.record_id, i)
            self._index[service] = idx

    def copy(self) -> FixtureBank:
        new = FixtureBank.__new__(FixtureBank)
        new.schemas = self.schemas
        new.records = {s: list(r) for s, r in self.records.items()}
        new.id_counters = dict(self.id_counters)
        new._index = {s: dict(i) for s, i in self._index.items()}
        return new

    def deepcopy(self) -> FixtureBank:
        new = self.copy()
        new.records = {
            s: [replace(r, payload=copy.deepcopy(r.payload)) for r in recs] for s, recs in self.records.items()
        }
        return new

    def schema(self, service: str) -> RecordSchema:
        return schema_for(self.schemas, service)

    def allocate_id(self, service: str) -> str:
        sc = self.schema(service)
        n = self.id_counters.get(service, sc.id_start)
        while f"{sc.prefix}-{n}" in self._index.get(service, {}):
            n += 1
        self.id_counters[service] = n + 1
        return f"{sc.prefix}-{n}"

    def get(self, service: str, record_id: str) -> ServiceRecord | None:
        i = self._index.get(service, {}).get(record_id)
        return None if i is None else self.records[service][i]

    def find(self, record_id: str) -> ServiceRecord | None:
        """Look a record up by id alone, using the prefix to pick the service."""
        m = RECORD_ID_RE.match(record_id or "")
        if not m:
            return None
        for service, sc in self.schemas.items():
            if sc.prefix == m.group(1):
                return self.get(service, record_id)
        return None

    def add(self, record: ServiceRecord) -> None:
        self.schema(record.service)
        recs = self.records.setdefault(record.service, [])
        idx = self._index.setdefault(record.service, {})
        idx.setdefault(record.record_id, len(recs))
        recs.append(record)
        m = RECORD_ID_RE.match(record.record_id)
        if m:
            n = int(m.group(2))
            if self.id_counters.get(record.service, 0) <= n:
                self.id_counters[record.service] = n + 1

    def replace_record(self, record: ServiceRecord) -> None:
        i = self._index.get(record.service, {}).get(record.record_id)
        if i is None:
            raise RecordNotFoundError(f"{record.service} record {record.record_id} not found")
        self.records[record.service][i] = record

    def iter_records(self, include_tombstoned: bool = True) -> Iterator[ServiceRecord]:
        for service in sorted(self.records):
            for rec in self.records[service]:
                if include_tombstoned or not rec.tombstoned:
                    yield rec

    def live(self, service: str) -> list[ServiceRecord]:
        return [r for r in self.records.get(service, []) if not r.tombstoned]

    def count(self, include_tombstoned: bool = True) -> int:
        return sum(1 for _ in self.iter_records(include_tombstoned))

    def to_dict(self) -> dict:
        records = {}
        for service in sorted(self.records):
            recs = sorted(self.records[service], key=_record_sort_key)
            records[service] = [r.to_dict() for r in recs]
        return {
            "schemas": {s: self.schemas[s].to_dict() for s in sorted(self.schemas)},
            "records": records,
            "id_counters": {s: self.id_counters[s] for s in sorted(self.id_counters)},
        }

    @classmethod
    def from_dict(cls, d: dict) -> FixtureBank:
        schemas = {s: RecordSchema.from_dict(v) for s, v in d["schemas"].items()}
        records = {s: [ServiceRecord.from_dict(r) for r in recs] for s, recs in d.get("records", {}).items()}
        bank = cls(schemas, records)
        bank.id_counters = {s: int(n) for s, n in d.get("id_counters", {}).items()}
        for s, sc in schemas.items():
            bank.id_counters.setdefault(s, sc.id_start)
        return bank

    def __eq__(self, other) -> bool:
        return isinstance(other, FixtureBank) and self.to_dict() == other.to_dict()


def _record_sort_key(rec: ServiceRecord):
    m = RECORD_ID_RE.match(rec.record_id)
    return (rec.service, int(m.group(2)) if m else -1, rec.record_id)


@dataclass
class WorldState:
    persona: Persona
    devices: list[DeviceSpec]
    fixtures: FixtureBank
    log: list[EventLogEntry]
    clock: datetime
    round: int
    rng_seed: int
    time_window: tuple[date, date]
    conflicts: list[ConflictPair] = field(default_factory=list)

    @property
    def window_start(self) -> datetime:
        return datetime.combine(self.time_window[0], time(0, 0))

    @property
    def window_end(self) -> datetime:
        return datetime.combine(self.time_window[1], time(23, 59, 59))

    def copy(self) -> WorldState:
        """Structural copy; records and log entries are shared (both immutable)."""
        return WorldState(
            persona=self.persona.copy(),
            devices=list(self.devices),
            fixtures=self.fixtures.copy(),
            log=list(self.log),
            clock=self.clock,
            round=self.round,
            rng_seed=self.rng_seed,
            time_window=self.time_window,
            conflicts=list(self.conflicts),
        )

    def to_dict(self) -> dict:
        return {
            "persona": self.persona.to_dict(),
            "devices": [d.to_dict() for d in self.devices],
            "fixtures": self.fixtures.to_dict(),
            "log": [e.to_dict() for e in self.log],
            "clock": format_datetime(self.clock),
            "round": self.round,
            "rng_seed": self.rng_seed,
            "time_window": [self.time_window[0].isoformat(), self.time_window[1].isoformat()],
            "conflicts": [c.to_dict() for c in self.conflicts],
        }

    @classmethod
    def from_dict(cls, d: dict) -> WorldState:
        return cls(
            persona=Persona.from_dict(d["persona"]),
            devices=[DeviceSpec.from_dict(x) for x in d["devices"]],
            fixtures=FixtureBank.from_dict(d["fixtures"]),
            log=[EventLogEntry.from_dict(e) for e in d["log"]],
            clock=parse_datetime(d["clock"]),
            round=int(d["round"]),
            rng_seed=int(d["rng_seed"]),
            time_window=(date.fromisoformat(d["time_window"][0]), date.fromisoformat(d["time_window"][1])),
            conflicts=[ConflictPair.from_dict(c) for c in d.get("conflicts", [])],
        )

    def canonical_json(self) -> str:
        return canonical_json(self.to_dict())

    def digest(self) -> str:
        return sha256_hex(self.canonical_json())


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def sha256_hex(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def new_world(
    persona: Persona,
    *,
    seed: int,
    task_date: date = date(2026, 4, 1),
    window_days: int = 100,
    devices: Iterable[DeviceSpec] | None = None,
    schemas: dict[str, RecordSchema] | None = None,
) -> WorldState:
    """A fresh world at round 0 whose window ends on ``task_date``."""
    start = task_date - timedelta(days=window_days - 1)
    devs = list(devices) if devices is not None else list(DEFAULT_DEVICES)
    return WorldState(
        persona=persona.copy(),
        devices=devs,
        fixtures=FixtureBank(schemas),
        log=[],
        clock=datetime.combine(start, time(8, 0)),
        round=0,
        rng_seed=seed,
        time_window=(start, task_date),
    )


# ---------------------------------------------------------------------------
# deltas


@dataclass
class WorldDelta:
    new_records: list[ServiceRecord] = field(default_factory=list)
    log_entries: list[EventLogEntry] = field(default_factory=list)
    new_traits: list[str] = field(default_factory=list)
    new_threads: list[ActivityThread] = field(default_factory=list)
    thread_record_mapping: dict[str, dict[str, list[str]]] = field(default_factory=dict)
    round: int | None = None

    @property
    def is_empty(self) -> bool:
        return not (
            self.new_records or self.log_entries or self.new_traits or self.new_threads or self.thread_record_mapping
        )

    def to_dict(self) -> dict:
        return {
            "new_records": [r.to_dict() for r in self.new_records],
            "log_entries": [e.to_dict() for e in self.log_entries],
            "persona_updates": {
                "new_traits": list(self.new_traits),
                "new_threads": [t.to_dict() for t in self.new_threads],
            },
            "thread_record_mapping": self.thread_record_mapping,
            "round": self.round,
        }


def allocate_id(world_or_bank: WorldState | FixtureBank, service: str) -> str:
    """Next unused id for ``service``; raises :class:`UnknownServiceError`."""
    bank = world_or_bank.fixtures if isinstance(world_or_bank, WorldState) else world_or_bank
    return bank.allocate_id(service)


def apply_delta(world: WorldState, delta: WorldDelta, *, max_skew: timedelta = timedelta(0)) -> WorldState:
    """Apply ``delta`` atomically and return the new world.

    The input world is never modified. Raises IntegrityViolationError or
    ClockRegressionError with nothing applied.
    """
    if delta.round is not None and delta.round not in (world.round, world.round + 1):
        raise RoundMismatchError(f"delta for round {delta.round} applied to world at round {world.round}")

    for entry in delta.log_entries:
        if entry.timestamp < world.clock - max_skew:
            raise ClockRegressionError(
                f"log entry at {format_datetime(entry.timestamp)} predates clock {format_datetime(world.clock)}"
            )

    new = world.copy()
    bank = new.fixtures
    for rec in delta.new_records:
        if rec.service not in bank.schemas:
            raise IntegrityViolationError([Violation("unknown-service", rec.record_id, rec.service)])
        bank.add(rec)

    for entry in delta.log_entries:
        # skew-tolerated entries land in chronological position
        if new.log and entry.timestamp < new.log[-1].timestamp:
            bisect.insort_right(new.log, entry, key=lambda e: e.timestamp)
        else:
            new.log.append(entry)

    persona = new.persona
    persona.traits.extend(delta.new_traits)
    mapping = {k: {s: list(v) for s, v in m.items()} for k, m in delta.thread_record_mapping.items()}
    threads = []
    for th in delta.new_threads:
        extra = mapping.pop(th.name, None)
        if extra:
            merged = {s: list(v) for s, v in th.involved_records.items()}
            for s, ids in extra.items():
                merged.setdefault(s, [])
                merged[s].extend(i for i in ids if i not in merged[s])
            th = replace(th, involved_records=merged)
        threads.append(th)
    persona.threads.extend(threads)

    problems = _delta_violations(world, new, delta, threads, mapping)
    if problems:
        raise IntegrityViolationError(problems)

    if delta.log_entries:
        latest = max(e.timestamp for e in delta.log_entries)
        if latest > new.clock:
            new.clock = latest
    if delta.round is not None:
        new.round = delta.round
    return new


def _delta_violations(old, new, delta, threads, leftover_mapping) -> list[Violation]:
    bank = new.fixtures
    out = []
    seen = set()
    for rec in delta.new_records:
        key = (rec.service, rec.record_id)
        if key in seen or old.fixtures.get(rec.service, rec.record_id) is not None:
            out.append(Violation("duplicate-id", rec.record_id, f"{rec.service} id already in use"))
        seen.add(key)
        out.extend(_record_violations(bank, rec))
    for e in delta.log_entries:
        out.extend(_entry_violations(new, e, None))
    for th in threads:
        out.extend(_thread_violations(bank, th))
    for name, m in leftover_mapping.items():
        target = next((t for t in new.persona.threads if t.name == name), None)
        if target is None:
            out.append(Violation("dangling-ref", name, "thread_record_mapping names an unknown thread"))
            continue
        for service, ids in m.items():
            for rid in ids:
                if bank.get(service, rid) is None:
                    out.append(Violation("dangling-ref", rid, f"thread {name!r} maps missing {service} record"))
    return out


def tombstone_record(
    world: WorldState,
    service: str,
    record_id: str,
    leave_trace: bool,
    *,
    timestamp: datetime | None = None,
) -> WorldState:
    """Mark a record deleted; optionally log a residual trace of the deletion."""
    schema = world.fixtures.schema(service)
    rec = world.fixtures.get(service, record_id)
    if rec is None:
        raise RecordNotFoundError(f"{service} record {record_id} not found")
    if rec.tombstoned:
        raise DoubleDeleteError(f"{service} record {record_id} already deleted")
    new = world.copy()
    new.fixtures.replace_record(replace(rec, tombstoned=True))
    if leave_trace:
        ts = max(timestamp or world.clock, world.clock)
        new.log.append(
            EventLogEntry(ts, f"service:{service}", "noise_trace_leaving", f"Deleted {schema.entity} {record_id}",
                          (record_id,))
        )
        new.clock = ts
    return new


# ---------------------------------------------------------------------------
# snapshots


@dataclass(frozen=True)
class Snapshot:
    round: int
    data: str
    digest: str

    def world(self) -> WorldState:
        """A fresh, independent WorldState materialized from the frozen copy."""
        return WorldState.from_dict(json.loads(self.data))

    def verify(self) -> bool:
        return sha256_hex(self.data) == self.digest

    def to_dict(self) -> dict:
        return {"round": self.round, "digest": self.digest, "world": json.loads(self.data)}

    @classmethod
    def from_dict(cls, d: dict) -> Snapshot:
        data = canonical_json(d["world"])
        return cls(int(d["round"]), data, d.get("digest") or sha256_hex(data))


def snapshot(world: WorldState, r: int) -> Snapshot:
    if r != world.round:
        raise RoundMismatchError(f"snapshot requested for round {r}, world is at round {world.round}")
    data = world.canonical_json()
    return Snapshot(r, data, sha256_hex(data))


# ---------------------------------------------------------------------------
# integrity


@dataclass(frozen=True)
class Violation:
    kind: str
    subject: str
    detail: str

    def __str__(self) -> str:
        return f"[{self.kind}] {self.subject}: {self.detail}"


@dataclass
class IntegrityReport:
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def kinds(self) -> set[str]:
        return {v.kind for v in self.violations}

    def __bool__(self) -> bool:
        return self.ok


def _record_violations(bank: FixtureBank, rec: ServiceRecord) -> list[Violation]:
    out = []
    schema = bank.schemas.get(rec.service)
    if schema is None:
        return [Violation("unknown-service", rec.record_id, rec.service)]
    m = RECORD_ID_RE.match(rec.record_id)
    if not m or m.group(1) != schema.prefix:
        out.append(Violation("prefix-mismatch", rec.record_id, f"{rec.service} ids use prefix {schema.prefix}"))
    for problem in validate_payload(schema, rec.payload, bank.schemas):
        out.append(Violation("schema", rec.record_id, problem))
    if rec.tombstoned:
        return out
    for fname, target, rid in referenced_ids(schema, rec.payload):
        ref = bank.get(target, rid) if target in bank.schemas else None
        if ref is None:
            out.append(Violation("dangling-ref", rec.record_id, f"{fname} -> {rid} does not exist"))
        elif ref.tombstoned:
            out.append(Violation("dangling-ref", rec.record_id, f"{fname} -> {rid} is deleted"))
    return out


record_violations = _record_violations


def referencing_records(bank: FixtureBank, service: str, record_id: str) -> list[str]:
    """Ids of live records whose reference fields point at ``record_id``."""
    out = []
    for rec in bank.iter_records(include_tombstoned=False):
        schema = bank.schemas.get(rec.service)
        if schema is None:
            continue
        if any(t == service and rid == record_id for _, t, rid in referenced_ids(schema, rec.payload)):
            out.append(rec.record_id)
    return out


def _entry_violations(world: WorldState, e: EventLogEntry, prev: datetime | None) -> list[Violation]:
    out = []
    subj = format_datetime(e.timestamp)
    if prev is not None and e.timestamp < prev:
        out.append(Violation("timestamp-regression", subj, f"earlier than preceding entry {format_datetime(prev)}"))
    if not (world.window_start <= e.timestamp <= world.window_end):
        out.append(Violation("out-of-window", subj, "log entry outside the world's time window"))
    if e.kind not in LOG_KINDS:
        out.append(Violation("schema", subj, f"unknown log kind {e.kind!r}"))
    if e.origin != SYSTEM_ORIGIN:
        svc = e.service
        if svc is None or svc not in world.fixtures.schemas:
            out.append(Violation("unknown-service", subj, f"log origin {e.origin!r}"))
    for rid in e.refs:
        if world.fixtures.find(rid) is None:
            out.append(Violation("dangling-ref", subj, f"log refers to missing record {rid}"))
    return out


def _thread_violations(bank: FixtureBank, th: ActivityThread) -> list[Violation]:
    out = []
    for svc in th.involved_services:
        if svc not in bank.schemas:
            out.append(Violation("unknown-service", th.name, f"thread involves unknown service {svc!r}"))
    for svc, ids in th.involved_records.items():
        for rid in ids:
            if svc not in bank.schemas or bank.get(svc, rid) is None:
                out.append(Violation("dangling-ref", th.name, f"thread refers to missing {svc} record {rid}"))
    return out


def validate_integrity(world: WorldState) -> IntegrityReport:
    """Scan the whole world; an empty report means every invariant holds."""
    out: list[Violation] = []
    bank = world.fixtures
    for service, recs in bank.records.items():
        counts = Counter(r.record_id for r in recs)
        for rid, n in sorted(counts.items()):
            if n > 1:
                out.append(Violation("duplicate-id", rid, f"{n} {service} records share this id"))
        suffixes = [int(m.group(2)) for r in recs if (m := RECORD_ID_RE.match(r.record_id))]
        if suffixes and service in bank.id_counters and bank.id_counters[service] <= max(suffixes):
            out.append(Violation("id-counter", service, "counter does not exceed every allocated suffix"))
        for rec in recs:
            if rec.service != service:
                out.append(Violation("schema", rec.record_id, f"stored under {service} but claims {rec.service}"))
            out.extend(_record_violations(bank, rec))

    prev = None
    for e in world.log:
        out.extend(_entry_violations(world, e, prev))
        prev = e.timestamp

    if not world.persona.persona_id:
        out.append(Violation("schema", "persona", "persona_id empty"))
    for th in world.persona.threads:
        out.extend(_thread_violations(bank, th))

    ids = Counter(d.device_id for d in world.devices)
    for did, n in ids.items():
        if n > 1:
            out.append(Violation("duplicate-id", did, "device id repeated"))
    for d in world.devices:
        if d.kind not in DEVICE_KINDS:
            out.append(Violation("schema", d.device_id, f"unknown device kind {d.kind!r}"))
    if not any(d.kind == "cli_workspace" for d in world.devices):
        out.append(Violation("schema", "devices", "no cli_workspace device"))

    if not (world.window_start <= world.clock <= world.window_end):
        out.append(Violation("out-of-window", "clock", format_datetime(world.clock)))
    if world.round < 0:
        out.append(Violation("schema", "round", "negative round"))

    for c in world.conflicts:
        for svc, rid in ((c.source_service, c.source_id), (c.echo_service, c.echo_id)):
            if bank.get(svc, rid) is None:
                out.append(Violation("dangling-ref", c.conflict_id, f"conflict refers to missing {svc} record {rid}"))
    return IntegrityReport(out)


# ---------------------------------------------------------------------------
# textualization and context statistics


def render_record(rec: ServiceRecord, schema: RecordSchema) -> str:
    lines = [f"- {schema.id_field}: {rec.record_id}"]
    for name in schema.fields:
        value = rec.payload.get(name)
        if value is None:
            continue
        if isinstance(value, list):
            value = ", ".join(str(v) for v in value)
        lines.append(f"  {name}: {value}")
    if rec.tombstoned:
        lines.append("  deleted: true")
    return "\n".join(lines)


def render_fixture(world: WorldState, service: str) -> str:
    schema = world.fixtures.schema(service)
    recs = sorted(world.fixtures.records.get(service, []), key=_record_sort_key)
    if not recs:
        return ""
    body = "\n".join(render_record(r, schema) for r in recs)
    return f"# {service} {schema.resource}\n\n{body}\n"


def _render_entries(title: str, entries: list[EventLogEntry]) -> str:
    if not entries:
        return ""
    lines = [f"# {title}", ""]
    for e in entries:
        refs = f" (refs: {', '.join(e.refs)})" if e.refs else ""
        lines.append(f"- {format_datetime(e.timestamp)} {e.text}{refs}")
    return "\n".join(lines) + "\n"


def render_service_log(world: WorldState, service: str) -> str:
    """Markdown activity log for one service; empty string when it has no entries."""
    return _render_entries(f"{service} activity", [e for e in world.log if e.service == service])


def render_system_log(world: WorldState) -> str:
    return _render_entries("system activity", [e for e in world.log if e.origin == SYSTEM_ORIGIN])


def logged_services(world: WorldState) -> list[str]:
    return sorted({e.service for e in world.log if e.service is not None})


def word_count(text: str) -> int:
    return len(text.split())


@dataclass
class ContextStats:
    fixture_words: int
    log_words: int
    records_per_service: dict[str, int]
    log_words_per_service: dict[str, int]
    services_touched: int

    def to_dict(self) -> dict:
        return {
            "fixture_words": self.fixture_words,
            "log_words": self.log_words,
            "records_per_service": dict(self.records_per_service),
            "log_words_per_service": dict(self.log_words_per_service),
            "services_touched": self.services_touched,
        }


def compute_context_stats(world: WorldState) -> ContextStats:
    per_service = {s: len(r) for s, r in sorted(world.fixtures.records.items()) if r}
    fixture_words = sum(word_count(render_fixture(world, s)) for s in per_service)
    log_per_service = {s: word_count(render_service_log(world, s)) for s in logged_services(world)}
    log_words = sum(log_per_service.values()) + word_count(render_system_log(world))
    touched = set(per_service) | set(log_per_service)
    return ContextStats(fixture_words, log_words, per_service, log_per_service, len(touched))
