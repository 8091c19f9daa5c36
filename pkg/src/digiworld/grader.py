"""Verifier execution, outcome-dominated scoring and pass@k aggregation.

Checks are plain dicts so they serialize verbatim into task bundles:

    {"type": "state", "service": s, "record_id"?: id, "where"?: {field: cond},
     "deleted"?: false | true | null, "expect"?: "exists" | "absent"}
    {"type": "call", "tool": name, "args"?: {k: v}, "ok"?: bool, "min_count"?: n}
    {"type": "text", "all_of"?: [...], "any_of"?: [...], "none_of"?: [...]}
    {"type": "judge", "prompt": str, "hints"?: [...]}
    {"type": "all" | "none", "checks": [...]}     {"type": "not", "check": {...}}

A ``cond`` is a scalar (equality) or one of ``{"eq"|"ne"|"contains"|"in"|"gte"|"lte": v}``.
Evaluation is three-valued: True, False, or None when a judge could not answer.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

from .catalog import RecordSchema

CHECK_TYPES = ("state", "call", "text", "judge", "all", "none", "not")
CONDITION_OPS = ("eq", "ne", "contains", "in", "gte", "lte")
WEIGHT_EPS = 1e-9


class VerifierCompileError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class RubricItem:
    item_id: str
    kind: str  # "outcome" | "process"
    weight: float
    check: dict

    @property
    def is_judge(self) -> bool:
        return _uses_judge(self.check)

    def to_dict(self) -> dict:
        return {"item_id": self.item_id, "kind": self.kind, "weight": self.weight, "check": self.check}

    @classmethod
    def from_dict(cls, d: dict) -> RubricItem:
        return cls(d["item_id"], d["kind"], float(d["weight"]), d["check"])


def _uses_judge(check: dict) -> bool:
    t = check.get("type")
    if t == "judge":
        return True
    if t in ("all", "none"):
        return any(_uses_judge(c) for c in check.get("checks", []))
    if t == "not":
        return _uses_judge(check["check"])
    return False


# ---------------------------------------------------------------------------
# compilation


def compile_check(check, tool_names: Iterable[str] | None, schemas: Mapping[str, RecordSchema]) -> None:
    """Raise VerifierCompileError when ``check`` is malformed or names unknown tools/services."""
    tools = set(tool_names) if tool_names is not None else None
    _compile(check, tools, schemas, "check")


def _compile(check, tools, schemas, where: str) -> None:
    if not isinstance(check, dict):
        raise VerifierCompileError(f"{where}: expected object")
    t = check.get("type")
    if t not in CHECK_TYPES:
        raise VerifierCompileError(f"{where}: unknown check type {t!r}")
    if t == "state":
        service = check.get("service")
        if service not in schemas:
            raise VerifierCompileError(f"{where}: unknown service {service!r}")
        fields = schemas[service].fields
        for fname, cond in (check.get("where") or {}).items():
            if fname not in fields:
                raise VerifierCompileError(f"{where}: {service} has no field {fname!r}")
            if isinstance(cond, dict):
                if len(cond) != 1 or next(iter(cond)) not in CONDITION_OPS:
                    raise VerifierCompileError(f"{where}: bad condition {cond!r}")
        if check.get("expect", "exists") not in ("exists", "absent"):
            raise VerifierCompileError(f"{where}: expect must be exists or absent")
    elif t == "call":
        tool = check.get("tool")
        if not isinstance(tool, str) or (tools is not None and tool not in tools):
            raise VerifierCompileError(f"{where}: unknown tool {tool!r}")
        if not isinstance(check.get("args", {}), dict):
            raise VerifierCompileError(f"{where}: args must be an object")
    elif t == "text":
        for key in ("all_of", "any_of", "none_of"):
            value = check.get(key, [])
            if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
                raise VerifierCompileError(f"{where}: {key} must be a list of strings")
    elif t == "judge":
        if not isinstance(check.get("prompt"), str):
            raise VerifierCompileError(f"{where}: judge needs a prompt")
    elif t in ("all", "none"):
        subs = check.get("checks")
        if not isinstance(subs, list):
            raise VerifierCompileError(f"{where}: {t} needs a checks list")
        for i, sub in enumerate(subs):
            _compile(sub, tools, schemas, f"{where}.checks[{i}]")
    elif t == "not":
        _compile(check.get("check"), tools, schemas, f"{where}.check")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalContext:
    final_db: object  # FixtureBank
    call_log: Sequence
    final_message: str
    judge: Callable[[dict], bool | None] | None = None


def _cond_holds(value, cond) -> bool:
    if not isinstance(cond, dict):
        return value == cond
    op, target = next(iter(cond.items()))
    if op == "eq":
        return value == target
    if op == "ne":
        return value != target
    if op == "contains":
        if isinstance(value, list):
            return target in value
        return isinstance(value, str) and str(target).lower() in value.lower()
    if op == "in":
        return value in target
    try:
        if op == "gte":
            return value is not None and value >= target
        if op == "lte":
            return value is not None and value <= target
    except TypeError:
        return False
    return False


def _state(check, ctx: EvalContext) -> bool:
    recs = ctx.final_db.records.get(check["service"], [])
    deleted = check.get("deleted", False)
    rid = check.get("record_id")
    where = check.get("where") or {}
    hits = 0
    for rec in recs:
        if deleted is not None and rec.tombstoned != bool(deleted):
            continue
        if rid is not None and rec.record_id != rid:
            continue
        if all(_cond_holds(rec.payload.get(f), c) for f, c in where.items()):
            hits += 1
    return hits == 0 if check.get("expect", "exists") == "absent" else hits > 0


def _args_match(request, expected: dict) -> bool:
    if not isinstance(request, dict):
        return False
    return all(request.get(k) == v for k, v in expected.items())


def _call(check, ctx: EvalContext) -> bool:
    n = 0
    for entry in ctx.call_log:
        if entry.tool_name != check["tool"]:
            continue
        if not _args_match(entry.request, check.get("args") or {}):
            continue
        if "ok" in check and (("error" not in entry.response) if isinstance(entry.response, dict) else False) != check["ok"]:
            continue
        n += 1
    return n >= int(check.get("min_count", 1))


def _text(check, ctx: EvalContext) -> bool:
    text = (ctx.final_message or "").lower()
    if any(s.lower() not in text for s in check.get("all_of", [])):
        return False
    any_of = check.get("any_of", [])
    if any_of and not any(s.lower() in text for s in any_of):
        return False
    return not any(s.lower() in text for s in check.get("none_of", []))


def evaluate(check: dict, ctx: EvalContext) -> bool | None:
    t = check["type"]
    if t == "state":
        return _state(check, ctx)
    if t == "call":
        return _call(check, ctx)
    if t == "text":
        return _text(check, ctx)
    if t == "judge":
        return ctx.judge(check) if ctx.judge is not None else None
    if t == "not":
        v = evaluate(check["check"], ctx)
        return None if v is None else not v
    results = [evaluate(c, ctx) for c in check["checks"]]
    if t == "all":
        if any(r is False for r in results):
            return False
        return None if any(r is None for r in results) else True
    # none
    if any(r is True for r in results):
        return False
    return None if any(r is None for r in results) else True


# ---------------------------------------------------------------------------
# scoring


def weights_problems(rubric: Sequence[RubricItem], pass_threshold: float, outcome_weight: float) -> list[str]:
    """Violations of the decisive weighting rules; empty when the verifier is sound."""
    problems = []
    outcome = [i for i in rubric if i.kind == "outcome"]
    process = [i for i in rubric if i.kind != "outcome"]
    if len(outcome) != 1:
        problems.append(f"expected exactly one outcome item, found {len(outcome)}")
    if any(i.weight <= 0 for i in rubric):
        problems.append("rubric weights must be positive")
    total = math.fsum(i.weight for i in rubric)
    if abs(total - 1.0) > WEIGHT_EPS:
        problems.append(f"weights sum to {total:.6f}, not 1")
    if outcome and abs(outcome[0].weight - outcome_weight) > WEIGHT_EPS:
        problems.append("outcome item weight differs from outcome_weight")
    if not outcome_weight > pass_threshold:
        problems.append(f"outcome_weight {outcome_weight} does not exceed pass_threshold {pass_threshold}")
    non_outcome = math.fsum(i.weight for i in process)
    if not non_outcome < pass_threshold:
        problems.append(f"process items can reach {non_outcome:.3f} >= pass_threshold {pass_threshold}")
    return problems


def score_items(rubric: Sequence[RubricItem], satisfied: Mapping[str, bool | None]) -> float:
    return math.fsum(i.weight for i in rubric if satisfied.get(i.item_id) is True)


@dataclass
class ItemResult:
    item_id: str
    kind: str
    weight: float
    satisfied: bool | None


@dataclass
class ScoreReport:
    instance_id: str
    soft_score: float
    outcome_correct: bool | None
    passed: bool | None
    per_item: list[ItemResult]
    flagged: bool = False
    notes: list[str] = field(default_factory=list)
    judge_transcripts: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "soft_score": round(self.soft_score, 6),
            "outcome_correct": self.outcome_correct,
            "pass": self.passed,
            "flagged": self.flagged,
            "notes": list(self.notes),
            "per_item": [
                {"item_id": r.item_id, "kind": r.kind, "weight": r.weight, "satisfied": r.satisfied}
                for r in self.per_item
            ],
            "judge_transcripts": list(self.judge_transcripts),
        }


class JudgeCache:
    """Judge verdicts keyed by (instance, trajectory digest, item)."""

    def __init__(self):
        self._data: dict[tuple[str, str, str], dict] = {}
        self._lock = threading.Lock()

    def get(self, key):
        return self._data.get(key)

    def put(self, key, value: dict) -> None:
        with self._lock:
            self._data.setdefault(key, value)

    def __len__(self) -> int:
        return len(self._data)


def score_from_satisfaction(rubric: Sequence[RubricItem], pass_threshold: float,
                            satisfied: Mapping[str, bool | None]) -> tuple[float, bool | None, bool | None]:
    """(soft score, outcome_correct, pass) for one satisfaction assignment."""
    outcome = next(i for i in rubric if i.kind == "outcome")
    score = score_items(rubric, satisfied)
    unresolved = any(satisfied.get(i.item_id) is None for i in rubric)
    outcome_correct = satisfied.get(outcome.item_id)
    passed = None if unresolved else score >= pass_threshold - WEIGHT_EPS
    return score, outcome_correct, passed


def grade(instance, trajectory, final_db, call_log, gen=None, *, cache: JudgeCache | None = None) -> ScoreReport:
    """Score one episode of ``instance``.

    Judge items go through ``gen.judge``; if the judge is missing or fails,
    those items stay unresolved, they earn no credit and ``passed`` is None.
    """
    from .generator import GeneratorUnavailable

    verifier = instance.verifier
    final_message = trajectory.final_message or ""
    traj_digest = trajectory.digest()
    transcripts: list[dict] = []
    notes: list[str] = []
    current_item = [""]

    def judge(check: dict) -> bool | None:
        key = (instance.instance_id, traj_digest, f"{current_item[0]}:{check.get('prompt')}")
        cached = cache.get(key) if cache is not None else None
        if cached is None:
            if gen is None:
                return None
            request = {
                "kind": "grade",
                "instance_id": instance.instance_id,
                "item_id": current_item[0],
                "prompt": check["prompt"],
                "hints": check.get("hints", []),
                "query": instance.query.text,
                "final_message": final_message,
                "trajectory_digest": traj_digest,
            }
            try:
                cached = gen.judge(request)
            except GeneratorUnavailable as exc:
                notes.append(f"judge unavailable: {exc}")
                return None
            if cache is not None:
                cache.put(key, cached)
        transcripts.append({"item_id": current_item[0], "verdict": cached})
        value = cached.get("satisfied")
        return value if isinstance(value, bool) else None

    ctx = EvalContext(final_db, call_log, final_message, judge)
    satisfied: dict[str, bool | None] = {}
    for item in verifier.rubric:
        current_item[0] = item.item_id
        satisfied[item.item_id] = evaluate(item.check, ctx)
    score, outcome_correct, passed = score_from_satisfaction(verifier.rubric, verifier.pass_threshold, satisfied)
    per_item = [ItemResult(i.item_id, i.kind, i.weight, satisfied[i.item_id]) for i in verifier.rubric]
    flagged = passed is None
    if flagged:
        notes.append("unresolved judge items; pass withheld")
    return ScoreReport(instance.instance_id, score, outcome_correct, passed, per_item, flagged, notes, transcripts)


# ---------------------------------------------------------------------------
# aggregation


@dataclass
class RunRecord:
    passed: bool
    score: float = 0.0
    input_tokens: int = 0
    output_tokens: int = 0
    infra_failure: bool = False

    def to_dict(self) -> dict:
        return {"pass": self.passed, "score": self.score, "input_tokens": self.input_tokens,
                "output_tokens": self.output_tokens, "infra_failure": self.infra_failure}

    @classmethod
    def from_dict(cls, d: dict) -> RunRecord:
        return cls(bool(d["pass"]), float(d.get("score", 0.0)), int(d.get("input_tokens", 0)),
                   int(d.get("output_tokens", 0)), bool(d.get("infra_failure", False)))


@dataclass
class RunMatrix:
    runs: dict[str, list[RunRecord]]
    meta: dict[str, dict] = field(default_factory=dict)

    @classmethod
    def from_booleans(cls, rows: Mapping[str, Sequence[bool]]) -> RunMatrix:
        return cls({t: [RunRecord(bool(b)) for b in row] for t, row in rows.items()})

    def subset(self, task_ids: Iterable[str]) -> RunMatrix:
        ids = list(task_ids)
        return RunMatrix({t: self.runs[t] for t in ids}, {t: self.meta.get(t, {}) for t in ids})


@dataclass
class MetricsReport:
    n_tasks: int
    k: int
    pass_at_1: float
    pass_at_k: float
    pass_hat_k: float
    mean_score: float
    input_tokens: int
    output_tokens: int
    excluded_tasks: int = 0

    def to_dict(self) -> dict:
        return {
            "n_tasks": self.n_tasks,
            "k": self.k,
            "pass@1": self.pass_at_1,
            f"pass@{self.k}": self.pass_at_k,
            f"pass^{self.k}": self.pass_hat_k,
            "mean_score": self.mean_score,
            "input_tokens": self.input_tokens,
            "output_tokens": self.output_tokens,
            "excluded_tasks": self.excluded_tasks,
        }


def aggregate(matrix: RunMatrix | Mapping[str, Sequence[bool]], k: int, *, exclude_infra: bool = False) -> MetricsReport:
    """pass@1 = mean per-run pass rate; pass@k = any of k; pass^k = all k."""
    if not isinstance(matrix, RunMatrix):
        matrix = RunMatrix.from_booleans(matrix)
    if k < 1:
        raise ShapeError("k must be at least 1")
    for task, runs in matrix.runs.items():
        if len(runs) != k:
            raise ShapeError(f"task {task} has {len(runs)} runs, expected {k}")
    rows = matrix.runs
    excluded = 0
    if exclude_infra:
        kept = {t: r for t, r in rows.items() if not any(x.infra_failure for x in r)}
        excluded = len(rows) - len(kept)
        rows = kept
    n = len(rows)
    if n == 0:
        return MetricsReport(0, k, 0.0, 0.0, 0.0, 0.0, 0, 0, excluded)
    # mean of per-task rates == total passes / (n * k); one division keeps it exact
    passes = sum(1 for r in rows.values() for x in r if x.passed)
    any_pass = sum(1 for r in rows.values() if any(x.passed for x in r))
    all_pass = sum(1 for r in rows.values() if all(x.passed for x in r))
    scores = [x.score for r in rows.values() for x in r]
    return MetricsReport(
        n_tasks=n,
        k=k,
        pass_at_1=passes / (n * k),
        pass_at_k=any_pass / n,
        pass_hat_k=all_pass / n,
        mean_score=math.fsum(scores) / len(scores),
        input_tokens=sum(x.input_tokens for r in rows.values() for x in r),
        output_tokens=sum(x.output_tokens for r in rows.values() for x in r),
        excluded_tasks=excluded,
    )


# ---------------------------------------------------------------------------
# reports


def format_tokens(n: int) -> str:
    if n >= 100_000:
        return f"{n / 1e6:.1f}M"
    if n >= 1_000:
        return f"{n / 1e3:.1f}k"
    return str(n)


def _row(label: str, m: MetricsReport) -> str:
    return (
        f"| {label} | {m.n_tasks} | {m.mean_score:.2f} | {100 * m.pass_at_1:.1f} | {100 * m.pass_at_k:.1f} | "
        f"{100 * m.pass_hat_k:.1f} | {format_tokens(m.input_tokens)} / {format_tokens(m.output_tokens)} |"
    )


BREAKDOWNS = {
    "category": lambda meta: meta.get("category", "unknown"),
    "loading mode": lambda meta: meta.get("loading_mode", "full"),
    "task type": lambda meta: "proactive" if meta.get("trigger") == "heartbeat" else "reactive",
    "devices": lambda meta: "CLI+GUI" if "gui_mobile" in (meta.get("device_requirements") or []) else "CLI",
}


def breakdown(matrix: RunMatrix, k: int, key: Callable[[dict], str]) -> dict[str, MetricsReport]:
    groups: dict[str, list[str]] = {}
    for task in matrix.runs:
        groups.setdefault(key(matrix.meta.get(task, {})), []).append(task)
    return {g: aggregate(matrix.subset(ids), k) for g, ids in sorted(groups.items())}


def report(metrics: MetricsReport, matrix: RunMatrix | None = None, title: str = "Evaluation report") -> str:
    """Markdown tables: overall row plus per-category, mode, trigger and device splits."""
    k = metrics.k
    header = (
        f"| Group | Tasks | Score | Pass@1 | Pass@{k} | Pass^{k} | Tokens (I / O) |\n"
        "|---|---|---|---|---|---|---|"
    )
    parts = [f"# {title}", "", header, _row("all", metrics)]
    if matrix is not None:
        for name, key in BREAKDOWNS.items():
            parts += ["", f"## By {name}", "", header]
            parts += [_row(g, m) for g, m in breakdown(matrix, k, key).items()]
    return "\n".join(parts) + "\n"
