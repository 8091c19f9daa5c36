"""Mock service catalog: record schemas, ID prefixes and payload validation.

Every service owns one resource kind. Field types are small strings:

    str, text, int, float, bool, datetime, date, list[str]
    ref:<service>   a single RecordId of another service
    refs:<service>  a list of RecordIds of another service

Reference fields are declared here and nowhere else; integrity scanning
never pattern-matches prose.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from datetime import date, datetime

RECORD_ID_RE = re.compile(r"^([A-Z]+)-(\d+)$")


class UnknownServiceError(KeyError):
    def __init__(self, service: str):
        super().__init__(service)
        self.service = service

    def __str__(self) -> str:
        return f"unknown service: {self.service!r}"


@dataclass(frozen=True)
class RecordSchema:
    service: str
    prefix: str
    id_start: int
    resource: str
    entity: str
    fields: dict[str, str]
    required: tuple[str, ...] = ()
    searchable: tuple[str, ...] = ()
    time_field: str | None = None

    @property
    def id_field(self) -> str:
        return f"{self.entity}_id"

    @property
    def ref_fields(self) -> dict[str, str]:
        """Map of reference field name -> target service."""
        out = {}
        for name, ftype in self.fields.items():
            if ftype.startswith(("ref:", "refs:")):
                out[name] = ftype.split(":", 1)[1]
        return out

    def to_dict(self) -> dict:
        return {
            "service": self.service,
            "prefix": self.prefix,
            "id_start": self.id_start,
            "resource": self.resource,
            "entity": self.entity,
            "fields": dict(self.fields),
            "required": list(self.required),
            "searchable": list(self.searchable),
            "time_field": self.time_field,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RecordSchema:
        return cls(
            service=d["service"],
            prefix=d["prefix"],
            id_start=int(d["id_start"]),
            resource=d["resource"],
            entity=d["entity"],
            fields=dict(d["fields"]),
            required=tuple(d.get("required", ())),
            searchable=tuple(d.get("searchable", ())),
            time_field=d.get("time_field"),
        )


@dataclass(frozen=True)
class FactLink:
    """An echo record restating a scalar fact of a source record.

    ``echo_service`` records point at the source through ``echo_ref`` and carry
    their own copy of the value in ``echo_field``. Conflict injection perturbs
    that copy.
    """

    source_service: str
    source_field: str
    echo_service: str
    echo_ref: str
    echo_field: str


def _schema(service, prefix, start, resource, entity, fields, required=(), searchable=(), time_field=None):
    return RecordSchema(
        service=service,
        prefix=prefix,
        id_start=start,
        resource=resource,
        entity=entity,
        fields=fields,
        required=tuple(required),
        searchable=tuple(searchable),
        time_field=time_field,
    )


_SCHEMAS = [
    _schema("gmail", "MSG", 5001, "messages", "message",
            {"subject": "str", "sender": "str", "to": "list[str]", "body": "text", "date": "datetime",
             "labels": "list[str]", "contact_ref": "ref:contacts", "event_ref": "ref:calendar",
             "txn_ref": "ref:finance", "stated_time": "datetime", "stated_amount": "float"},
            required=("subject", "sender", "date"), searchable=("subject", "sender"), time_field="date"),
    _schema("calendar", "EVT", 301, "events", "event",
            {"title": "str", "start": "datetime", "end": "datetime", "location": "str",
             "attendees": "refs:contacts", "description": "text", "status": "str"},
            required=("title", "start"), searchable=("title", "location"), time_field="start"),
    _schema("contacts", "CON", 201, "contacts", "contact",
            {"name": "str", "email": "str", "phone": "str", "company": "str", "role": "str", "notes": "text"},
            required=("name", "email"), searchable=("name", "email", "company")),
    _schema("todo", "TODO", 501, "todos", "todo",
            {"title": "str", "due": "datetime", "status": "str", "priority": "str",
             "event_ref": "ref:calendar", "notes": "text"},
            required=("title", "status"), searchable=("title",), time_field="due"),
    _schema("kb", "KB", 401, "articles", "article",
            {"title": "str", "body": "text", "tags": "list[str]", "updated": "datetime"},
            required=("title", "body"), searchable=("title", "body"), time_field="updated"),
    _schema("finance", "TXN", 6001, "transactions", "transaction",
            {"description": "str", "amount": "float", "currency": "str", "date": "datetime",
             "counterparty": "ref:contacts", "category": "str"},
            required=("description", "amount", "date"), searchable=("description", "category"), time_field="date"),
    _schema("notes", "NOTE", 101, "notes", "note",
            {"title": "str", "body": "text", "created": "datetime", "event_ref": "ref:calendar",
             "stated_location": "str"},
            required=("title", "created"), searchable=("title", "body"), time_field="created"),
    _schema("helpdesk", "TKT", 7001, "tickets", "ticket",
            {"subject": "str", "description": "text", "status": "str", "priority": "str",
             "requester": "ref:contacts", "created": "datetime"},
            required=("subject", "status"), searchable=("subject", "description"), time_field="created"),
    _schema("crm", "CUS", 801, "customers", "customer",
            {"name": "str", "company": "str", "tier": "str", "owner": "ref:contacts", "notes": "text"},
            required=("name",), searchable=("name", "company")),
    _schema("inventory", "PRD", 901, "products", "product",
            {"name": "str", "sku": "str", "stock": "int", "price": "float", "location": "str"},
            required=("name",), searchable=("name", "sku")),
    _schema("slack", "CHT", 1001, "messages", "message",
            {"channel": "str", "author": "str", "text": "text", "sent": "datetime",
             "event_ref": "ref:calendar", "stated_time": "datetime"},
            required=("channel", "author", "text", "sent"), searchable=("channel", "author", "text"),
            time_field="sent"),
    _schema("drive", "DOC", 1101, "files", "file",
            {"name": "str", "mime": "str", "size_kb": "int", "modified": "datetime",
             "owner": "ref:contacts", "summary": "text"},
            required=("name",), searchable=("name", "summary"), time_field="modified"),
    _schema("rss", "FEED", 1201, "items", "item",
            {"title": "str", "source": "str", "published": "datetime", "summary": "text"},
            required=("title", "source", "published"), searchable=("title", "source"), time_field="published"),
    _schema("travel", "TRV", 1301, "bookings", "booking",
            {"destination": "str", "depart": "datetime", "return_at": "datetime", "carrier": "str",
             "confirmation": "str", "cost": "float"},
            required=("destination", "depart"), searchable=("destination", "carrier"), time_field="depart"),
    _schema("expenses", "EXP", 1401, "claims", "claim",
            {"description": "str", "amount": "float", "submitted": "datetime", "status": "str",
             "txn_ref": "ref:finance"},
            required=("description", "amount", "submitted"), searchable=("description",), time_field="submitted"),
    _schema("projects", "PRJ", 1501, "tasks", "task",
            {"title": "str", "owner": "ref:contacts", "due": "datetime", "status": "str", "milestone": "str"},
            required=("title",), searchable=("title", "milestone"), time_field="due"),
    _schema("hr", "HR", 1601, "requests", "request",
            {"kind": "str", "start": "date", "days": "int", "status": "str", "reason": "text"},
            required=("kind",), searchable=("kind", "reason")),
    _schema("weather", "WX", 1701, "forecasts", "forecast",
            {"location": "str", "date": "datetime", "summary": "str", "high_c": "float", "low_c": "float"},
            required=("location", "date"), searchable=("location", "summary"), time_field="date"),
    _schema("maps", "MAP", 1801, "places", "place",
            {"name": "str", "address": "str", "category": "str", "saved": "datetime"},
            required=("name", "address"), searchable=("name", "address", "category"), time_field="saved"),
    _schema("health", "HLT", 1901, "entries", "entry",
            {"metric": "str", "value": "float", "recorded": "datetime", "note": "str"},
            required=("metric", "value", "recorded"), searchable=("metric",), time_field="recorded"),
    _schema("fitness", "FIT", 2001, "workouts", "workout",
            {"activity": "str", "duration_min": "int", "date": "datetime"},
            required=("activity", "duration_min", "date"), searchable=("activity",), time_field="date"),
    _schema("shopping", "ORD", 2101, "orders", "order",
            {"item": "str", "amount": "float", "status": "str", "ordered": "datetime", "merchant": "str"},
            required=("item", "amount", "status", "ordered"), searchable=("item", "merchant"),
            time_field="ordered"),
    _schema("banking", "ACC", 2201, "accounts", "account",
            {"name": "str", "balance": "float", "currency": "str", "institution": "str"},
            required=("name", "balance", "currency"), searchable=("name", "institution")),
    _schema("bills", "BILL", 2301, "bills", "bill",
            {"payee": "str", "amount": "float", "due": "datetime", "status": "str", "txn_ref": "ref:finance"},
            required=("payee", "amount", "due", "status"), searchable=("payee",), time_field="due"),
    _schema("social", "POST", 2401, "posts", "post",
            {"platform": "str", "text": "text", "posted": "datetime", "author": "str"},
            required=("platform", "text", "posted"), searchable=("platform", "text", "author"),
            time_field="posted"),
    _schema("news", "NEWS", 2501, "articles", "article",
            {"headline": "str", "source": "str", "published": "datetime", "summary": "text"},
            required=("headline", "source", "published"), searchable=("headline", "source"),
            time_field="published"),
    _schema("music", "TRK", 2601, "tracks", "track",
            {"title": "str", "artist": "str", "played": "datetime"},
            required=("title", "artist"), searchable=("title", "artist"), time_field="played"),
    _schema("photos", "IMG", 2701, "photos", "photo",
            {"caption": "str", "taken": "datetime", "location": "str", "album": "str"},
            required=("caption", "taken"), searchable=("caption", "location", "album"), time_field="taken"),
    _schema("smarthome", "DEV", 2801, "devices", "device",
            {"name": "str", "room": "str", "state": "str", "updated": "datetime"},
            required=("name", "room", "state"), searchable=("name", "room"), time_field="updated"),
    _schema("reminders", "REM", 2901, "reminders", "reminder",
            {"text": "str", "remind_at": "datetime", "done": "bool"},
            required=("text", "remind_at"), searchable=("text",), time_field="remind_at"),
    _schema("meetings", "MTG", 3001, "transcripts", "transcript",
            {"title": "str", "event_ref": "ref:calendar", "summary": "text", "recorded": "datetime"},
            required=("title", "summary", "recorded"), searchable=("title", "summary"), time_field="recorded"),
    _schema("vendors", "VND", 3101, "vendors", "vendor",
            {"name": "str", "category": "str", "contact": "ref:contacts", "rating": "float"},
            required=("name",), searchable=("name", "category")),
    _schema("invoices", "INV", 3201, "invoices", "invoice",
            {"number": "str", "customer": "ref:crm", "amount": "float", "due": "datetime", "status": "str"},
            required=("number", "amount", "due", "status"), searchable=("number", "status"), time_field="due"),
    _schema("learning", "CRS", 3301, "courses", "course",
            {"title": "str", "provider": "str", "progress": "int", "deadline": "datetime"},
            required=("title", "provider"), searchable=("title", "provider"), time_field="deadline"),
    _schema("payroll", "PAY", 3401, "payslips", "payslip",
            {"period": "str", "gross": "float", "net": "float", "paid": "datetime"},
            required=("period", "gross", "net", "paid"), searchable=("period",), time_field="paid"),
]

DEFAULT_SCHEMAS: dict[str, RecordSchema] = {s.service: s for s in _SCHEMAS}

FACT_LINKS: tuple[FactLink, ...] = (
    FactLink("calendar", "start", "gmail", "event_ref", "stated_time"),
    FactLink("calendar", "start", "slack", "event_ref", "stated_time"),
    FactLink("calendar", "start", "todo", "event_ref", "due"),
    FactLink("calendar", "location", "notes", "event_ref", "stated_location"),
    FactLink("finance", "amount", "gmail", "txn_ref", "stated_amount"),
    FactLink("finance", "amount", "expenses", "txn_ref", "amount"),
    FactLink("finance", "amount", "bills", "txn_ref", "amount"),
)


def default_schemas() -> dict[str, RecordSchema]:
    return dict(DEFAULT_SCHEMAS)


def schema_for(schemas: dict[str, RecordSchema], service: str) -> RecordSchema:
    try:
        return schemas[service]
    except KeyError:
        raise UnknownServiceError(service) from None


def parse_record_id(record_id: str) -> tuple[str, int]:
    m = RECORD_ID_RE.match(record_id or "")
    if not m:
        raise ValueError(f"malformed record id: {record_id!r}")
    return m.group(1), int(m.group(2))


def parse_datetime(value: str) -> datetime:
    return datetime.fromisoformat(value)


def format_datetime(value: datetime) -> str:
    return value.replace(microsecond=0).isoformat()


def _check_type(ftype: str, value, schemas: dict[str, RecordSchema]) -> str | None:
    if ftype in ("str", "text"):
        return None if isinstance(value, str) else "expected string"
    if ftype == "int":
        return None if isinstance(value, int) and not isinstance(value, bool) else "expected integer"
    if ftype == "float":
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        return None if ok else "expected number"
    if ftype == "bool":
        return None if isinstance(value, bool) else "expected boolean"
    if ftype == "datetime":
        if not isinstance(value, str):
            return "expected ISO datetime string"
        try:
            datetime.fromisoformat(value)
        except ValueError:
            return "expected ISO datetime string"
        return None
    if ftype == "date":
        if not isinstance(value, str):
            return "expected ISO date string"
        try:
            date.fromisoformat(value)
        except ValueError:
            return "expected ISO date string"
        return None
    if ftype == "list[str]":
        ok = isinstance(value, list) and all(isinstance(v, str) for v in value)
        return None if ok else "expected list of strings"
    kind, _, target = ftype.partition(":")
    prefix = schemas[target].prefix if target in schemas else None
    if kind == "ref":
        return _check_id(value, prefix)
    if kind == "refs":
        if not isinstance(value, list):
            return "expected list of record ids"
        for v in value:
            err = _check_id(v, prefix)
            if err:
                return err
        return None
    return f"unsupported field type {ftype!r}"


def _check_id(value, prefix: str | None) -> str | None:
    if not isinstance(value, str):
        return "expected record id"
    m = RECORD_ID_RE.match(value)
    if not m or (prefix is not None and m.group(1) != prefix):
        return f"expected {prefix}-<n> record id"
    return None


def validate_payload(
    schema: RecordSchema,
    payload: dict,
    schemas: dict[str, RecordSchema] | None = None,
    *,
    partial: bool = False,
) -> list[str]:
    """Return field-level problems with ``payload``; empty means valid.

    ``partial`` skips the required-field check (used for updates).
    Null values are treated as absent.
    """
    schemas = schemas if schemas is not None else DEFAULT_SCHEMAS
    problems = []
    if not isinstance(payload, dict):
        return ["payload: expected object"]
    for name, value in payload.items():
        if name not in schema.fields:
            problems.append(f"{name}: unknown field")
            continue
        if value is None:
            continue
        err = _check_type(schema.fields[name], value, schemas)
        if err:
            problems.append(f"{name}: {err}")
    if not partial:
        for name in schema.required:
            if payload.get(name) is None:
                problems.append(f"{name}: required")
    return problems


def referenced_ids(schema: RecordSchema, payload: dict) -> list[tuple[str, str, str]]:
    """(field, target service, record id) for every reference held by ``payload``."""
    out = []
    for name, target in schema.ref_fields.items():
        value = payload.get(name)
        if value is None:
            continue
        values = value if isinstance(value, list) else [value]
        for v in values:
            out.append((name, target, v))
    return out
