"""Pluggable content generators.

A generator turns structured requests into structured outputs. Two
implementations share one contract:

* :class:`StubGenerator` - deterministic template expansion, no model.
* :class:`RemoteGenerator` - posts rendered prompts to an HTTP endpoint.

All four operations return plain dicts; callers parse and validate them, so a
misbehaving generator surfaces as a schema error rather than a crash.
"""

from __future__ import annotations

import json
import os
import re
from datetime import date, datetime, time, timedelta
from typing import Any, Protocol, runtime_checkable

import httpx

from . import prompts
from .catalog import DEFAULT_SCHEMAS, FACT_LINKS, format_datetime, parse_datetime
from .seedpool import NoiseTemplate, SeedTask, derive_rng


class GeneratorUnavailable(RuntimeError):
    pass


class GeneratorSchemaError(ValueError):
    def __init__(self, message: str, raw: Any = None):
        super().__init__(message)
        self.raw = raw


@runtime_checkable
class Generator(Protocol):
    def adapt_event(self, event, summary: dict, allowed_services: list[str], feedback: str | None = None) -> dict: ...

    def generate_records(self, adapted: dict, summary: dict, reservations: dict[str, list[str]], context: dict) -> dict: ...

    def generate_task(self, summary: dict) -> dict: ...

    def judge(self, request: dict) -> dict: ...


# ---------------------------------------------------------------------------
# stub

FIRST_NAMES = [
    "Amira", "Bruno", "Chen", "Dalia", "Emeka", "Farah", "Goran", "Hana", "Ilya", "Jonas", "Keiko", "Leila",
    "Mateo", "Nadia", "Omar", "Priya", "Quinn", "Rosa", "Sami", "Tariq", "Ulla", "Vera", "Wen", "Yusuf", "Zara",
]
LAST_NAMES = [
    "Haddad", "Okafor", "Lindqvist", "Moreau", "Tanaka", "Novak", "Rahman", "Costa", "Weber", "Ibrahim",
    "Kowalski", "Park", "Singh", "Alvarez", "Petrov", "Nakamura", "Osei", "Duarte", "Fischer", "Aziz",
]
COMPANIES = [
    "Harbor Steelworks", "Northwind Logistics", "Cedar Analytics", "Orchid Health", "Summit Concrete",
    "Bluefin Capital", "Atlas Surveying", "Meridian Foods", "Quarry Lane Legal", "Lumen Facilities",
]
LOCATIONS = [
    "Site Office B", "Room 4.12", "Harbor Cafe", "Main Boardroom", "Gate 3 Trailer", "Video call",
    "North Annex", "Client HQ Lobby", "Warehouse 7", "Rooftop Terrace",
]
TOPICS = [
    "schedule review", "budget check", "supplier quote", "safety walk", "handover notes", "design change",
    "permit renewal", "invoice query", "team offsite", "quarterly plan", "inspection report", "vendor onboarding",
    "travel arrangements", "contract amendment", "risk register", "status update", "training session",
]
VERBS = ["confirm", "review", "update", "escalate", "reschedule", "approve", "clarify", "close out", "follow up on"]
TAGS = ["urgent", "finance", "site", "personal", "legal", "ops", "travel", "hr", "archive", "weekly"]
ROUTINE_NOTES = [
    "Quick check before the morning stand-up.",
    "Nothing new that needs action.",
    "Skimmed and moved on to other work.",
    "Left it for later in the week.",
    "Glanced over it between meetings.",
]
TRAIT_BANK = [
    "prefers concise written summaries over long calls",
    "blocks Friday afternoons for deep work",
    "double-checks supplier figures against the ledger",
    "answers personal messages only in the evening",
    "distrusts verbal commitments that are not confirmed in writing",
    "keeps a running list of open decisions for each project",
    "avoids scheduling anything before 8am",
    "tends to over-commit during busy weeks",
    "favours in-person meetings for difficult conversations",
    "tracks expenses weekly rather than monthly",
]
STATUS_CHOICES = {
    "todo": ["open"],
    "helpdesk": ["open", "pending", "in_progress"],
    "calendar": ["confirmed", "tentative"],
    "shopping": ["ordered", "shipped", "delivered"],
    "bills": ["due", "scheduled"],
    "invoices": ["sent", "overdue", "draft"],
    "expenses": ["submitted", "approved"],
    "projects": ["active", "blocked", "review"],
    "hr": ["requested", "approved"],
}
FUTURE_FIELDS = {"start", "end", "due", "depart", "return_at", "remind_at", "deadline", "stated_time"}
SERVICE_ORDER = ["contacts", "crm", "calendar", "finance"]


class _Fake:
    """Seeded value factory for stub payloads."""

    def __init__(self, rng, persona: dict):
        self.rng = rng
        self.persona = persona
        words = " ".join([persona.get("role", ""), persona.get("industry", "")]).replace("/", " ").split()
        self.domain_words = [w.strip(",.").lower() for w in words if len(w) > 3] or ["project"]

    def person(self) -> str:
        return f"{self.rng.choice(FIRST_NAMES)} {self.rng.choice(LAST_NAMES)}"

    def topic(self) -> str:
        return f"{self.rng.choice(self.domain_words)} {self.rng.choice(TOPICS)}"

    def sentence(self, topic: str | None = None) -> str:
        topic = topic or self.topic()
        verb = self.rng.choice(VERBS)
        tail = self.rng.choice(ROUTINE_NOTES)
        return f"Need to {verb} the {topic} with {self.rng.choice(COMPANIES)}. {tail}"

    def amount(self) -> float:
        return round(self.rng.uniform(20, 5000), 2)


def _title_of(payload: dict) -> str:
    for key in ("subject", "title", "name", "headline", "description", "caption", "item", "text", "payee"):
        v = payload.get(key)
        if isinstance(v, str) and v:
            return v
    return ""


class StubGenerator:
    """Deterministic generator for desk-scale runs and tests.

    Every output is a pure function of ``seed`` and the request contents.
    ``fail_first`` makes the first N adapt calls emit an invalid service,
    which exercises the retry path.
    """

    def __init__(self, seed: int = 0, *, fail_first: int = 0, bad_service: str | None = None,
                 judge_available: bool = True, judge_verdict: bool = True):
        self.seed = seed
        self.fail_first = fail_first
        self.bad_service = bad_service
        self.judge_available = judge_available
        self.judge_verdict = judge_verdict
        self.calls: list[str] = []

    # -- adaptation ---------------------------------------------------------
    def adapt_event(self, event, summary, allowed_services, feedback=None) -> dict:
        self.calls.append("adapt_event")
        persona = summary["persona"]
        r = summary["round"] + 1
        rng = derive_rng(self.seed, "adapt", persona["persona_id"], r, _event_id(event))
        if isinstance(event, NoiseTemplate):
            services = [s for s in event.services if s in allowed_services]
            planned = {s: 1 for s in event.residual_record_kinds} if event.trace_mode == "trace_leaving" else {}
            out = {
                "adapted_name": f"{event.pattern} ({persona['persona_name'] or persona['persona_id']})",
                "adapted_description": f"Routine activity: {event.pattern}.",
                "adapted_category": "noise",
                "adapted_difficulty": "simple",
                "involved_services": services,
                "planned_records": planned,
                "conflict_axes": [],
            }
        else:
            fake = _Fake(rng, persona)
            optional = [s for s in event.optional_services if s in allowed_services]
            chosen = list(event.required_services) + rng.sample(optional, k=rng.randint(0, len(optional)))
            planned = {s: rng.randint(1, 2) for s in chosen}
            direction = rng.choice(event.plausible_content_directions or (event.task_content,))
            topic = fake.topic()
            out = {
                "adapted_name": f"{event.name}: {topic} (r{r})",
                "adapted_description": (
                    f"{persona.get('persona_name') or 'The user'} faces a {event.name.lower()} around the {topic}. "
                    f"As {persona.get('role') or 'a professional'}, they must {rng.choice(VERBS)} it "
                    f"before it affects {rng.choice(COMPANIES)}."
                ),
                "adapted_category": event.category,
                "adapted_difficulty": event.difficulty,
                "involved_services": chosen,
                "planned_records": planned,
                "conflict_axes": [a.split(":", 1)[0].strip() for a in event.adaptable_elements],
                "content_direction": direction,
            }
        if self.bad_service and (self.fail_first < 0 or len(self.calls) <= self.fail_first):
            out["involved_services"] = list(out["involved_services"]) + [self.bad_service]
        return out

    # -- records ------------------------------------------------------------
    def generate_records(self, adapted, summary, reservations, context) -> dict:
        self.calls.append("generate_records")
        persona = summary["persona"]
        r = context["round"]
        rng = derive_rng(self.seed, "records", persona["persona_id"], r, adapted["adapted_name"])
        fake = _Fake(rng, persona)
        start = parse_datetime(context["start"])
        end = parse_datetime(context["window_end"])
        step = [0]

        def stamp() -> str:
            ts = min(start + timedelta(minutes=7 * step[0]), end)
            step[0] += 1
            return format_datetime(ts)

        kind = context["kind"]
        existing = summary["fixtures"]
        created: dict[str, list[dict]] = {}
        records: dict[str, list[dict]] = {}
        log: list[dict] = []

        if kind == "noise" and context.get("trace_mode") == "ephemeral":
            for svc in adapted["involved_services"]:
                pool = existing.get(svc, [])
                picks = rng.sample(pool, k=min(len(pool), rng.randint(0, 2)))
                refs = [p["record_id"] for p in picks]
                what = ", ".join(f"{p['record_id']} '{_title_of(p)}'" for p in picks) or "nothing new"
                log.append({"timestamp": stamp(), "origin": f"service:{svc}", "kind": "noise_ephemeral",
                            "text": f"{adapted['adapted_name']}: viewed {what}. {rng.choice(ROUTINE_NOTES)}",
                            "refs": refs})
            return {"records": {}, "log_entries": log}

        order = sorted(reservations, key=lambda s: (SERVICE_ORDER.index(s) if s in SERVICE_ORDER else 99, s))
        for svc in order:
            schema = DEFAULT_SCHEMAS[svc]
            for rid in reservations[svc]:
                ts = stamp()
                payload = self._payload(svc, fake, rng, parse_datetime(ts), existing, created)
                created.setdefault(svc, []).append({"record_id": rid, **payload})
                rec = {schema.id_field: rid, **payload}
                if kind == "noise":
                    rec["deleted"] = True
                records.setdefault(svc, []).append(rec)
                log_kind = "noise_trace_leaving" if kind == "noise" else "task_event"
                log.append({"timestamp": ts, "origin": f"service:{svc}", "kind": log_kind,
                            "text": f"Created {schema.entity} {rid} '{_title_of(payload)}'", "refs": [rid]})
                if kind == "noise":
                    log.append({"timestamp": stamp(), "origin": f"service:{svc}", "kind": "noise_trace_leaving",
                                "text": f"Discarded {schema.entity} {rid}", "refs": [rid]})

        out = {"records": records, "log_entries": log}
        if kind == "task":
            device = context.get("device_id", "laptop")
            log.append({"timestamp": stamp(), "origin": "system", "kind": "task_event",
                        "text": f"Session on {device}: worked on {adapted['adapted_name']}.", "refs": []})
            mapping = {s: [x["record_id"] for x in v] for s, v in created.items()}
            out["persona_updates"] = {
                "new_traits": [rng.choice(TRAIT_BANK)] if rng.random() < 0.3 else [],
                "new_threads": [{
                    "name": adapted["adapted_name"],
                    "description": adapted["adapted_description"],
                    "involved_services": list(adapted["involved_services"]),
                    "involved_records": {},
                    "signal_density": round(rng.random(), 2),
                    "difficulty": adapted["adapted_difficulty"],
                    "category": adapted["adapted_category"],
                    "thread_type": "standard",
                }],
            }
            out["thread_record_mapping"] = {adapted["adapted_name"]: mapping}
        return out

    def _payload(self, svc, fake, rng, ts: datetime, existing, created) -> dict:
        schema = DEFAULT_SCHEMAS[svc]
        payload: dict[str, Any] = {}

        def candidates(target):
            return list(existing.get(target, [])) + list(created.get(target, []))

        topic = fake.topic()
        for name, ftype in schema.fields.items():
            if ftype.startswith("ref:"):
                pool = candidates(ftype[4:])
                if pool and rng.random() < 0.7:
                    payload[name] = rng.choice(pool)["record_id"]
                continue
            if ftype.startswith("refs:"):
                pool = candidates(ftype[5:])
                if pool:
                    payload[name] = [p["record_id"] for p in rng.sample(pool, k=min(len(pool), rng.randint(1, 3)))]
                continue
            if name not in schema.required and rng.random() < 0.25:
                continue
            payload[name] = self._scalar(svc, name, ftype, fake, rng, ts, topic)

        # contact-derived fields stay consistent with the referenced contact
        if svc == "gmail" and payload.get("contact_ref"):
            contact = next(c for c in candidates("contacts") if c["record_id"] == payload["contact_ref"])
            payload["sender"] = contact["email"]
        # echo fields restate their source record's value
        for link in FACT_LINKS:
            if link.echo_service != svc:
                continue
            ref = payload.get(link.echo_ref)
            if ref is None:
                if link.echo_field.startswith("stated_"):
                    payload.pop(link.echo_field, None)
                continue
            src = next((c for c in candidates(link.source_service) if c["record_id"] == ref), None)
            if src is not None and src.get(link.source_field) is not None:
                payload[link.echo_field] = src[link.source_field]
        return payload

    def _scalar(self, svc, name, ftype, fake, rng, ts: datetime, topic: str):
        if ftype == "datetime":
            if name in FUTURE_FIELDS:
                day = ts.date() + timedelta(days=rng.randint(1, 14))
                return format_datetime(datetime.combine(day, time(rng.randint(8, 17), rng.choice([0, 30]))))
            return format_datetime(ts)
        if ftype == "date":
            return (ts.date() + timedelta(days=rng.randint(1, 30))).isoformat()
        if ftype == "int":
            return rng.randint(1, 120)
        if ftype == "float":
            return fake.amount()
        if ftype == "bool":
            return False
        if ftype == "list[str]":
            return rng.sample(TAGS, k=rng.randint(1, 3))
        if name == "status":
            return rng.choice(STATUS_CHOICES.get(svc, ["open", "closed"]))
        if name in ("name", "author", "artist", "payee") and svc in ("contacts", "slack", "crm", "music", "bills"):
            return fake.person() if svc != "bills" else rng.choice(COMPANIES)
        if name in ("email", "sender"):
            return f"{fake.person().lower().replace(' ', '.')}@{rng.choice(COMPANIES).split()[0].lower()}.example"
        if name == "phone":
            return f"+1-555-{rng.randint(1000, 9999)}"
        if name in ("company", "institution", "merchant", "carrier", "provider", "source"):
            return rng.choice(COMPANIES)
        if name in ("location", "address", "destination", "room", "stated_location"):
            return rng.choice(LOCATIONS)
        if name == "currency":
            return rng.choice(["USD", "EUR", "SAR"])
        if name in ("priority", "tier"):
            return rng.choice(["low", "medium", "high"])
        if ftype == "text":
            return fake.sentence(topic)
        return f"{rng.choice(VERBS).capitalize()} {topic}"

    # -- tasks --------------------------------------------------------------
    def generate_task(self, summary: dict) -> dict:
        self.calls.append("generate_task")
        from .stubtasks import stub_task

        rng = derive_rng(self.seed, "task", summary["persona"]["persona_id"], summary["round"])
        return stub_task(summary, rng)

    # -- judging ------------------------------------------------------------
    def judge(self, request: dict) -> dict:
        self.calls.append("judge")
        if not self.judge_available:
            raise GeneratorUnavailable("stub judge disabled")
        kind = request.get("kind")
        if kind == "filter":
            return {"solvable": self.judge_verdict, "consistent": self.judge_verdict,
                    "reasons": [] if self.judge_verdict else ["stub judge rejected the instance"]}
        text = (request.get("final_message") or "").lower()
        hints = [h.lower() for h in request.get("hints") or []]
        satisfied = bool(text.strip()) and (not hints or any(h in text for h in hints))
        return {"satisfied": satisfied, "rationale": "keyword match" if satisfied else "no matching content"}


def _event_id(event) -> str:
    if isinstance(event, SeedTask):
        return event.seed_id
    if isinstance(event, NoiseTemplate):
        return event.noise_id
    return str(event)


# ---------------------------------------------------------------------------
# remote

OUTPUT_SCHEMAS = {
    "adapt_event": {
        "adapted_name": "string", "adapted_description": "string", "adapted_category": "string",
        "adapted_difficulty": "simple | medium | hard", "involved_services": "list of service names",
        "planned_records": "map service -> count", "conflict_axes": "list of strings",
    },
    "generate_records": {
        "records": "map service -> list of records (each with its id field)",
        "log_entries": "list of {timestamp, origin, kind, text, refs}",
        "persona_updates": "{new_traits: [...], new_threads: [...]}",
        "thread_record_mapping": "map thread name -> map service -> record ids",
    },
    "generate_task": {
        "query": "{text, trigger, task_date, loading_mode, device_requirements, category, difficulty}",
        "verifier": "{rubric, pass_threshold, outcome_weight, conflict_refs, required_final_state, forbidden_actions}",
        "reference": "{steps: [{tool, args, rationale}], expected_outcome: {text, predicates}}",
    },
    "judge": {"solvable|satisfied": "boolean", "consistent": "boolean (filter only)", "reasons": "list of strings"},
}

_FENCE = re.compile(r"```(?:json)?\s*(\{.*?\})\s*```", re.S)


def extract_json(text: str) -> dict:
    """Pull the first JSON object out of a model reply."""
    text = (text or "").strip()
    candidates = [text]
    candidates += _FENCE.findall(text)
    if "{" in text and "}" in text:
        candidates.append(text[text.find("{"): text.rfind("}") + 1])
    for c in candidates:
        try:
            obj = json.loads(c)
        except ValueError:
            continue
        if isinstance(obj, dict):
            return obj
    raise GeneratorSchemaError("no JSON object in generator reply", raw=text)


class RemoteGenerator:
    """HTTP client for a model-backed generator service.

    The endpoint receives ``{"operation", "prompt", "output_schema", "input"}``
    and answers ``{"output": {...}}`` or ``{"text": "<reply containing JSON>"}``.
    Credentials come from the environment variable named by ``token_env``.
    """

    def __init__(self, url_env: str = "DIGIWORLD_GENERATOR_URL", token_env: str = "DIGIWORLD_GENERATOR_TOKEN",
                 *, url: str | None = None, timeout: float = 120.0, client: httpx.Client | None = None):
        self.url = url or os.environ.get(url_env)
        self.token = os.environ.get(token_env)
        self.timeout = timeout
        self._client = client

    def _post(self, operation: str, prompt: str, payload: dict) -> dict:
        if not self.url:
            raise GeneratorUnavailable("no generator endpoint configured")
        headers = {"Authorization": f"Bearer {self.token}"} if self.token else {}
        body = {"operation": operation, "prompt": prompt, "output_schema": OUTPUT_SCHEMAS[operation],
                "input": payload}
        try:
            client = self._client or httpx.Client(timeout=self.timeout)
            try:
                resp = client.post(self.url, json=body, headers=headers)
            finally:
                if self._client is None:
                    client.close()
        except httpx.HTTPError as exc:
            raise GeneratorUnavailable(f"generator request failed: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code in (401, 403, 429):
            raise GeneratorUnavailable(f"generator returned HTTP {resp.status_code}")
        try:
            data = resp.json()
        except ValueError:
            return extract_json(resp.text)
        if isinstance(data, dict) and isinstance(data.get("output"), dict):
            return data["output"]
        if isinstance(data, dict) and isinstance(data.get("text"), str):
            return extract_json(data["text"])
        raise GeneratorSchemaError("unexpected generator response shape", raw=data)

    def adapt_event(self, event, summary, allowed_services, feedback=None) -> dict:
        prompt = prompts.render_adapt(event, summary, allowed_services, feedback)
        return self._post("adapt_event", prompt, {"event": event.to_dict(), "allowed_services": allowed_services})

    def generate_records(self, adapted, summary, reservations, context) -> dict:
        prompt = prompts.render_records(adapted, summary, reservations, context)
        return self._post("generate_records", prompt, {"adapted": adapted, "reservations": reservations,
                                                       "context": context})

    def generate_task(self, summary) -> dict:
        return self._post("generate_task", prompts.render_task(summary), {"round": summary["round"]})

    def judge(self, request) -> dict:
        return self._post("judge", prompts.render_judge(request), request)


def parse_date(value) -> date:
    if isinstance(value, date) and not isinstance(value, datetime):
        return value
    return date.fromisoformat(str(value)[:10])
