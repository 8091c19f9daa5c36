"""Snapshot -> task instance: query, executable verifier and reference solution, plus filtering and validation."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from datetime import date
from typing import Iterable, Mapping

from .backend import ToolRegistry, build_registry
from .generator import GeneratorSchemaError, GeneratorUnavailable, parse_date
from .grader import RubricItem, VerifierCompileError, compile_check, weights_problems
from .synthesis import summarize_world
from .worldstate import Snapshot, WorldState

log = logging.getLogger(__name__)

DEFAULT_RETRIES = 3
REJECT_REASONS = ("dangling-ref", "unknown-tool", "weight-invariant", "date-insane",
                  "judge-unsolvable", "judge-inconsistent")
TRIGGERS = ("user_request", "heartbeat")
DIFFICULTIES = ("simple", "medium", "hard")


def default_task_rounds(rounds: int, warmup: int = 20, every: int = 10) -> list[int]:
    return list(range(warmup, rounds + 1, every))


@dataclass(frozen=True)
class ScoringPolicy:
    pass_threshold: float = 0.6
    outcome_weight: float = 0.7

    def __post_init__(self):
        if not (self.outcome_weight > self.pass_threshold > 1 - self.outcome_weight):
            raise ValueError("need outcome_weight > pass_threshold > 1 - outcome_weight")
        if not (0 < self.outcome_weight <= 1):
            raise ValueError("outcome_weight must be in (0, 1]")


@dataclass(frozen=True)
class TaskQuery:
    text: str
    trigger: str
    task_date: date
    loading_mode: str
    device_requirements: tuple[str, ...]
    category: str
    difficulty: str

    def to_dict(self) -> dict:
        return {"text": self.text, "trigger": self.trigger, "task_date": self.task_date.isoformat(),
                "loading_mode": self.loading_mode, "device_requirements": list(self.device_requirements),
                "category": self.category, "difficulty": self.difficulty}

    @classmethod
    def from_dict(cls, d: dict) -> TaskQuery:
        return cls(d.get("text") or "", d["trigger"], parse_date(d["task_date"]), d.get("loading_mode", "full"),
                   tuple(d.get("device_requirements") or ("cli_workspace",)), d.get("category", "general"),
                   d.get("difficulty", "medium"))


@dataclass(frozen=True)
class VerifierSpec:
    rubric: tuple[RubricItem, ...]
    pass_threshold: float
    outcome_weight: float
    conflict_refs: tuple[str, ...] = ()
    required_final_state: tuple[dict, ...] = ()
    forbidden_actions: tuple[dict, ...] = ()

    @property
    def outcome_item(self) -> RubricItem:
        return next(i for i in self.rubric if i.kind == "outcome")

    def problems(self) -> list[str]:
        return weights_problems(self.rubric, self.pass_threshold, self.outcome_weight)

    def to_dict(self) -> dict:
        return {"rubric": [i.to_dict() for i in self.rubric], "pass_threshold": self.pass_threshold,
                "outcome_weight": self.outcome_weight, "conflict_refs": list(self.conflict_refs),
                "required_final_state": list(self.required_final_state),
                "forbidden_actions": list(self.forbidden_actions)}

    @classmethod
    def from_dict(cls, d: dict) -> VerifierSpec:
        return cls(tuple(RubricItem.from_dict(i) for i in d["rubric"]), float(d["pass_threshold"]),
                   float(d["outcome_weight"]), tuple(d.get("conflict_refs") or ()),
                   tuple(d.get("required_final_state") or ()), tuple(d.get("forbidden_actions") or ()))


@dataclass(frozen=True)
class ReferenceStep:
    tool: str
    args: dict
    rationale: str = ""

    def to_dict(self) -> dict:
        return {"tool": self.tool, "args": self.args, "rationale": self.rationale}


@dataclass(frozen=True)
class ReferenceSolution:
    steps: tuple[ReferenceStep, ...]
    expected_text: str
    expected_predicates: tuple[dict, ...] = ()

    def to_dict(self) -> dict:
        return {"steps": [s.to_dict() for s in self.steps],
                "expected_outcome": {"text": self.expected_text, "predicates": list(self.expected_predicates)}}

    @classmethod
    def from_dict(cls, d: dict) -> ReferenceSolution:
        exp = d.get("expected_outcome") or {}
        return cls(tuple(ReferenceStep(s["tool"], dict(s.get("args") or {}), s.get("rationale", ""))
                         for s in d.get("steps") or ()),
                   exp.get("text", ""), tuple(exp.get("predicates") or ()))


@dataclass
class FilterReport:
    accepted: bool
    reasons: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)
    judge_used: bool = False

    @property
    def codes(self) -> list[str]:
        return sorted({r["code"] for r in self.reasons})

    def to_dict(self) -> dict:
        return {"accepted": self.accepted, "reasons": list(self.reasons), "warnings": list(self.warnings),
                "judge_used": self.judge_used}

    @classmethod
    def from_dict(cls, d: dict | None) -> FilterReport | None:
        if not d:
            return None
        return cls(bool(d["accepted"]), list(d.get("reasons") or []), list(d.get("warnings") or []),
                   bool(d.get("judge_used")))


@dataclass
class TaskInstance:
    instance_id: str
    snapshot_digest: str
    query: TaskQuery
    verifier: VerifierSpec
    reference: ReferenceSolution
    provenance: dict
    state_change: bool = True
    filter_report: FilterReport | None = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "snapshot_digest": self.snapshot_digest,
            "provenance": dict(self.provenance),
            "state_change": self.state_change,
            "query": self.query.to_dict(),
            "verifier": self.verifier.to_dict(),
            "reference": self.reference.to_dict(),
            "filter_report": self.filter_report.to_dict() if self.filter_report else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> TaskInstance:
        return cls(d["instance_id"], d["snapshot_digest"], TaskQuery.from_dict(d["query"]),
                   VerifierSpec.from_dict(d["verifier"]), ReferenceSolution.from_dict(d["reference"]),
                   dict(d.get("provenance") or {}), bool(d.get("state_change", True)),
                   FilterReport.from_dict(d.get("filter_report")))


# ---------------------------------------------------------------------------
# parsing generator output


def build_verifier(raw: dict, policy: ScoringPolicy, registry: ToolRegistry) -> VerifierSpec:
    """Assemble the weighted rubric.

    The outcome item becomes all(required_final_state, none(forbidden_actions),
    generator outcome checks). Missing weights get the policy defaults: the
    outcome item takes ``outcome_weight`` and process items split the rest equally.
    Weights supplied by the generator are kept as given; auto_filter judges them.
    """
    if not isinstance(raw, dict) or not isinstance(raw.get("rubric"), list):
        raise GeneratorSchemaError("verifier.rubric must be a list", raw)
    required = list(raw.get("required_final_state") or [])
    forbidden = list(raw.get("forbidden_actions") or [])
    items = raw["rubric"]
    outcome_raw = [i for i in items if i.get("kind") == "outcome"]
    process_raw = [i for i in items if i.get("kind") != "outcome"]
    if len(outcome_raw) != 1:
        raise GeneratorSchemaError(f"rubric needs exactly one outcome item, got {len(outcome_raw)}", raw)
    for i in items:
        if not isinstance(i.get("item_id"), str) or not isinstance(i.get("check"), dict):
            raise GeneratorSchemaError("rubric items need item_id and check", i)
    ids = [i["item_id"] for i in items]
    if len(set(ids)) != len(ids):
        raise GeneratorSchemaError("rubric item ids repeat", raw)

    extra = outcome_raw[0]["check"]
    extras = extra["checks"] if extra.get("type") == "all" else [extra]
    outcome_checks = list(required)
    if forbidden:
        outcome_checks.append({"type": "none", "checks": forbidden})
    outcome_checks += extras
    if not outcome_checks:
        raise VerifierCompileError("outcome item checks nothing")
    outcome_check = {"type": "all", "checks": outcome_checks}

    threshold = float(raw.get("pass_threshold", policy.pass_threshold))
    given = [i.get("weight") for i in items]
    if all(w is not None for w in given):
        outcome_w = float(outcome_raw[0]["weight"])
        weights = {i["item_id"]: float(i["weight"]) for i in items}
    else:
        outcome_w = float(raw.get("outcome_weight", policy.outcome_weight)) if process_raw else 1.0
        share = (1.0 - outcome_w) / len(process_raw) if process_raw else 0.0
        weights = {i["item_id"]: share for i in process_raw}
        weights[outcome_raw[0]["item_id"]] = outcome_w

    rubric = [RubricItem(outcome_raw[0]["item_id"], "outcome", weights[outcome_raw[0]["item_id"]], outcome_check)]
    rubric += [RubricItem(i["item_id"], "process", weights[i["item_id"]], i["check"]) for i in process_raw]
    for item in rubric:
        try:
            compile_check(item.check, registry.names(), registry.schemas)
        except VerifierCompileError as exc:
            raise VerifierCompileError(f"rubric item {item.item_id}: {exc}") from None
    return VerifierSpec(tuple(rubric), threshold, outcome_w, tuple(raw.get("conflict_refs") or ()),
                        tuple(required), tuple(forbidden))


def parse_reference(raw: dict, registry: ToolRegistry) -> ReferenceSolution:
    if not isinstance(raw, dict) or not isinstance(raw.get("steps"), list):
        raise GeneratorSchemaError("reference.steps must be a list", raw)
    ref = ReferenceSolution.from_dict(raw)
    for s in ref.steps:
        if s.tool not in registry:
            raise VerifierCompileError(f"reference step names unknown tool {s.tool!r}")
    return ref


def parse_query(raw: dict, default_mode: str) -> TaskQuery:
    if not isinstance(raw, dict):
        raise GeneratorSchemaError("query must be an object", raw)
    try:
        q = TaskQuery.from_dict({"loading_mode": default_mode, **raw})
    except (KeyError, ValueError, TypeError) as exc:
        raise GeneratorSchemaError(f"query malformed: {exc}", raw) from None
    problems = []
    if q.trigger not in TRIGGERS:
        problems.append(f"unknown trigger {q.trigger!r}")
    if (q.trigger == "heartbeat") != (q.text.strip() == ""):
        problems.append("heartbeat tasks and only heartbeat tasks have empty query text")
    if q.loading_mode not in ("full", "lazy"):
        problems.append(f"unknown loading_mode {q.loading_mode!r}")
    if q.difficulty not in DIFFICULTIES:
        problems.append(f"unknown difficulty {q.difficulty!r}")
    if problems:
        raise GeneratorSchemaError("; ".join(problems), raw)
    return q


def tool_lines(registry: ToolRegistry) -> list[str]:
    return [f"{t.name}: {t.description}" for t in registry.tools.values()]


def gen_task(snapshot: Snapshot, gen, *, loading_mode: str = "full", policy: ScoringPolicy | None = None,
             retries: int = DEFAULT_RETRIES, task_kind: str | None = None
             ) -> tuple[TaskQuery, VerifierSpec, ReferenceSolution, bool]:
    """Ask the generator for one task over ``snapshot``; schema problems are retried with feedback."""
    policy = policy or ScoringPolicy()
    world = snapshot.world()
    registry = build_registry(world.fixtures.schemas)
    summary = summarize_world(world)
    summary["tools"] = tool_lines(registry)
    summary["loading_mode"] = loading_mode
    if task_kind:
        summary["task_kind"] = task_kind
    last: Exception | None = None
    for _ in range(retries):
        try:
            raw = gen.generate_task(summary)
            if not isinstance(raw, dict):
                raise GeneratorSchemaError("task output must be an object", raw)
            query = parse_query(raw.get("query"), loading_mode)
            verifier = build_verifier(raw.get("verifier"), policy, registry)
            reference = parse_reference(raw.get("reference"), registry)
            return query, verifier, reference, bool(raw.get("state_change", True))
        except GeneratorSchemaError as exc:
            last = exc
            summary["feedback"] = str(exc)
    raise GeneratorSchemaError(f"task generation failed after {retries} attempts: {last}",
                               getattr(last, "raw", None))


def make_instance(snapshot: Snapshot, gen, *, persona_id: str | None = None, seed_id: str | None = None,
                  loading_mode: str = "full", policy: ScoringPolicy | None = None,
                  task_kind: str | None = None) -> TaskInstance:
    query, verifier, reference, state_change = gen_task(snapshot, gen, loading_mode=loading_mode, policy=policy,
                                                        task_kind=task_kind)
    if persona_id is None:
        persona_id = snapshot.world().persona.persona_id
    iid = f"{persona_id}-r{snapshot.round:03d}-{snapshot.digest[:8]}"
    prov = {"persona_id": persona_id, "round": snapshot.round, "seed_id": seed_id}
    return TaskInstance(iid, snapshot.digest, query, verifier, reference, prov, state_change)


# ---------------------------------------------------------------------------
# candidate filtering


def _strings(obj) -> Iterable[str]:
    if isinstance(obj, str):
        yield obj
    elif isinstance(obj, dict):
        for k, v in obj.items():
            yield from _strings(k)
            yield from _strings(v)
    elif isinstance(obj, (list, tuple)):
        for v in obj:
            yield from _strings(v)


def _id_pattern(world: WorldState) -> re.Pattern:
    prefixes = sorted({s.prefix for s in world.fixtures.schemas.values()}, key=len, reverse=True)
    return re.compile(r"\b(?:" + "|".join(prefixes) + r")-\d+\b")


def rule_problems(instance: TaskInstance, world: WorldState, registry: ToolRegistry) -> list[dict]:
    reasons = []

    def add(code, detail):
        reasons.append({"code": code, "detail": detail})

    for s in instance.reference.steps:
        if s.tool not in registry:
            add("unknown-tool", f"reference step uses {s.tool}")
    for item in instance.verifier.rubric:
        try:
            compile_check(item.check, registry.names(), registry.schemas)
        except VerifierCompileError as exc:
            add("unknown-tool", f"{item.item_id}: {exc}")

    pattern = _id_pattern(world)
    doc = {"query": instance.query.text, "verifier": instance.verifier.to_dict(),
           "reference": instance.reference.to_dict()}
    seen = set()
    for text in _strings(doc):
        for rid in pattern.findall(text):
            if rid not in seen and world.fixtures.find(rid) is None:
                add("dangling-ref", f"{rid} does not exist in the snapshot")
            seen.add(rid)
    ledger = {c.conflict_id for c in world.conflicts}
    for cid in instance.verifier.conflict_refs:
        if cid not in ledger:
            add("dangling-ref", f"conflict {cid} not in the ledger")

    start, end = world.time_window
    if not (start <= instance.query.task_date <= end):
        add("date-insane", f"task_date {instance.query.task_date} outside {start}..{end}")
    elif instance.query.task_date < world.clock.date():
        add("date-insane", f"task_date {instance.query.task_date} precedes the snapshot clock")

    for p in instance.verifier.problems():
        add("weight-invariant", p)
    return reasons


def auto_filter(instance: TaskInstance, snapshot: Snapshot, gen=None) -> FilterReport:
    """Rule layer, then the generator judge. Never raises; the report says why."""
    world = snapshot.world()
    registry = build_registry(world.fixtures.schemas)
    reasons = rule_problems(instance, world, registry)
    report = FilterReport(accepted=False, reasons=reasons)
    if gen is None:
        report.warnings.append("no judge configured; rule layer only")
    else:
        request = {"kind": "filter", "instance": instance.to_dict(), "world": summarize_world(world)}
        try:
            verdict = gen.judge(request)
            report.judge_used = True
            if not verdict.get("solvable", False):
                reasons.append({"code": "judge-unsolvable", "detail": "; ".join(verdict.get("reasons") or [])})
            if not verdict.get("consistent", False):
                reasons.append({"code": "judge-inconsistent", "detail": "; ".join(verdict.get("reasons") or [])})
        except GeneratorUnavailable as exc:
            report.warnings.append(f"judge unavailable, rule layer only: {exc}")
    report.accepted = not reasons
    return report


# ---------------------------------------------------------------------------
# reference-solution validation


@dataclass
class ValidationVerdict:
    status: str  # pass | fail | infrastructure_failure
    flag_for_review: bool = False
    detail: str = ""
    score: dict | None = None

    def to_dict(self) -> dict:
        return {"status": self.status, "flag_for_review": self.flag_for_review, "detail": self.detail,
                "score": self.score}


def validate_by_execution(instance: TaskInstance, snapshot: Snapshot, gen=None, *, adapter=None,
                          config=None) -> ValidationVerdict:
    from .harness import InfrastructureFailure, ReferenceAdapter, execute

    adapter = adapter or ReferenceAdapter(instance)
    try:
        result = execute(instance, snapshot, adapter, config, gen=gen)
    except InfrastructureFailure as exc:
        return ValidationVerdict("infrastructure_failure", False, str(exc))
    rep = result.score
    if rep.passed:
        return ValidationVerdict("pass", False, "", rep.to_dict())
    why = "judge unresolved" if rep.passed is None else f"reference scored {rep.soft_score:.2f}"
    failed = [r.item_id for r in rep.per_item if r.satisfied is not True]
    return ValidationVerdict("fail", True, f"{why}; unsatisfied: {', '.join(failed)}", rep.to_dict())


# ---------------------------------------------------------------------------
# task sets


@dataclass
class RoundStatus:
    round: int
    status: str  # accepted | rejected | error | missing
    instance_id: str | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"round": self.round, "status": self.status, "instance_id": self.instance_id, "detail": self.detail}


def seed_for_round(history: Iterable[tuple[int, str, str]], r: int) -> str | None:
    last = None
    for rnd, kind, sid in history:
        if rnd <= r and kind == "task":
            last = sid
    return last


def build_task_set(snapshots: Mapping[int, Snapshot], task_rounds: Iterable[int], gen, *,
                   history: Iterable = (), loading_mode: str = "full", policy: ScoringPolicy | None = None,
                   ) -> tuple[list[TaskInstance], list[RoundStatus]]:
    history = list(history)
    instances, statuses = [], []
    for r in sorted(set(task_rounds)):
        snap = snapshots.get(r)
        if snap is None:
            statuses.append(RoundStatus(r, "missing", detail="no snapshot for this round"))
            continue
        try:
            inst = make_instance(snap, gen, seed_id=seed_for_round(history, r), loading_mode=loading_mode,
                                 policy=policy)
        except (GeneratorSchemaError, VerifierCompileError, GeneratorUnavailable, ValueError) as exc:
            statuses.append(RoundStatus(r, "error", detail=str(exc)))
            log.warning("round %d: task generation failed: %s", r, exc)
            continue
        inst.filter_report = auto_filter(inst, snap, gen)
        if inst.filter_report.accepted:
            instances.append(inst)
            statuses.append(RoundStatus(r, "accepted", inst.instance_id))
        else:
            statuses.append(RoundStatus(r, "rejected", inst.instance_id, ", ".join(inst.filter_report.codes)))
            log.info("round %d rejected: %s", r, inst.filter_report.codes)
    return instances, statuses


__all__ = [
    "FilterReport",
    "ReferenceSolution",
    "ReferenceStep",
    "RoundStatus",
    "ScoringPolicy",
    "TaskInstance",
    "TaskQuery",
    "ValidationVerdict",
    "VerifierSpec",
    "auto_filter",
    "build_task_set",
    "build_verifier",
    "default_task_rounds",
    "gen_task",
    "make_instance",
    "validate_by_execution",
]
