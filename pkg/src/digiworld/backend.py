"""Simulated app backend: five tools per service served over a run-scoped copy of a snapshot.

Tools are addressed by name in-process (``BackendRun.handle_call``) or over HTTP
as ``POST /<service>/<resource>/<verb>`` on a single port.
"""

from __future__ import annotations

import copy
import errno
import json
import threading
import time
from dataclasses import dataclass, replace
from datetime import datetime, timedelta
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import yaml

from .catalog import RecordSchema, validate_payload
from .worldstate import (
    FixtureBank,
    ServiceRecord,
    Snapshot,
    record_violations,
    referencing_records,
)

LIST_DAYS_DEFAULT = 7
LIST_LIMIT_MAX = 20
VERBS = ("list", "get", "create", "update", "delete")

_JSON_TYPES = {
    "str": {"type": "string"},
    "text": {"type": "string"},
    "int": {"type": "integer"},
    "float": {"type": "number"},
    "bool": {"type": "boolean"},
    "datetime": {"type": "string", "format": "date-time"},
    "date": {"type": "string", "format": "date"},
    "list[str]": {"type": "array", "items": {"type": "string"}},
}


class BackendError(Exception):
    pass


class PortInUseError(BackendError):
    pass


class SnapshotDigestError(BackendError):
    pass


class RunStillLiveError(BackendError):
    pass


class RunFinishedError(BackendError):
    pass


@dataclass(frozen=True)
class ToolSpec:
    name: str
    description: str
    input_schema: dict
    service: str
    effect: str  # read | write | delete
    verb: str
    path: str
    method: str = "POST"

    def spec_dict(self) -> dict:
        return {"name": self.name, "description": self.description, "input_schema": self.input_schema}

    def binding(self, base_url: str = "") -> dict:
        return {"tool_name": self.name, "url": f"{base_url}{self.path}", "method": self.method}


_SPEC_TEXT: dict[str, str] = {}


def render_tool_spec(spec: ToolSpec) -> str:
    """The YAML block a full-mode prompt embeds for one tool."""
    key = json.dumps(spec.spec_dict(), sort_keys=True)
    text = _SPEC_TEXT.get(key)
    if text is None:
        text = _SPEC_TEXT[key] = _dump_spec(spec)
    return text


def _dump_spec(spec: ToolSpec) -> str:
    return yaml.safe_dump([spec.spec_dict()], sort_keys=False, allow_unicode=True, width=1000)


def _field_schema(ftype: str) -> dict:
    if ftype in _JSON_TYPES:
        return dict(_JSON_TYPES[ftype])
    kind, _, target = ftype.partition(":")
    if kind == "ref":
        return {"type": "string", "description": f"{target} record id"}
    return {"type": "array", "items": {"type": "string"}, "description": f"{target} record ids"}


def _tools_for(schema: RecordSchema) -> list[ToolSpec]:
    s, ent, res, idf = schema.service, schema.entity, schema.resource, schema.id_field
    fields = {name: _field_schema(t) for name, t in schema.fields.items()}
    search = " or ".join(schema.searchable) or "any field"
    if schema.time_field:
        window = (f"Only {res} whose {schema.time_field} falls in the last {LIST_DAYS_DEFAULT} days are listed "
                  f"unless days is given (0 = no limit); at most {LIST_LIMIT_MAX} per page.")
    else:
        window = f"At most {LIST_LIMIT_MAX} per page."
    list_props = {
        "query": {"type": "string", "description": f"space-separated words; every word must occur in {search}"},
        "days": {"type": "integer"},
        "offset": {"type": "integer"},
        "limit": {"type": "integer"},
    }
    id_prop = {idf: {"type": "string"}}
    base = f"/{s}/{res}"
    return [
        ToolSpec(f"{s}_list_{res}", f"List {res} (long text fields omitted). {window} "
                 "The reply carries total (all matches), returned (this page) and offset.",
                 {"type": "object", "properties": list_props, "required": []}, s, "read", "list", f"{base}/list"),
        ToolSpec(f"{s}_get_{ent}", f"Fetch one {ent} with every field, by {idf}",
                 {"type": "object", "properties": id_prop, "required": [idf]}, s, "read", "get", f"{base}/get"),
        ToolSpec(f"{s}_create_{ent}", f"Create a {ent}; the new {idf} is assigned by the service",
                 {"type": "object", "properties": fields, "required": list(schema.required)}, s, "write", "create",
                 f"{base}/create"),
        ToolSpec(f"{s}_update_{ent}", f"Change fields of an existing {ent}; send null to clear a field",
                 {"type": "object", "properties": {**id_prop, **fields}, "required": [idf]}, s, "write", "update",
                 f"{base}/update"),
        ToolSpec(f"{s}_delete_{ent}", f"Delete a {ent} by {idf}",
                 {"type": "object", "properties": id_prop, "required": [idf]}, s, "delete", "delete",
                 f"{base}/delete"),
    ]


class ToolRegistry:
    def __init__(self, schemas: dict[str, RecordSchema]):
        self.schemas = schemas
        self.tools: dict[str, ToolSpec] = {}
        self.by_path: dict[str, ToolSpec] = {}
        for service in sorted(schemas):
            for spec in _tools_for(schemas[service]):
                self.tools[spec.name] = spec
                self.by_path[spec.path] = spec

    def __contains__(self, name: str) -> bool:
        return name in self.tools

    def __len__(self) -> int:
        return len(self.tools)

    def names(self) -> list[str]:
        return list(self.tools)

    def get(self, name: str) -> ToolSpec | None:
        return self.tools.get(name)

    def services(self) -> list[str]:
        return sorted({t.service for t in self.tools.values()})

    def listing(self, base_url: str = "") -> list[dict]:
        return [{"name": t.name, "description": t.description, **t.binding(base_url)} for t in self.tools.values()]


_REGISTRY_CACHE: dict[str, ToolRegistry] = {}


def build_registry(schemas: dict[str, RecordSchema]) -> ToolRegistry:
    key = json.dumps({s: sc.to_dict() for s, sc in sorted(schemas.items())}, sort_keys=True)
    reg = _REGISTRY_CACHE.get(key)
    if reg is None:
        reg = _REGISTRY_CACHE[key] = ToolRegistry(schemas)
    return reg


@dataclass(frozen=True)
class CallLogEntry:
    seq: int
    tool_name: str
    path: str
    request: object
    response: dict
    wall_time: float

    def to_dict(self) -> dict:
        return {"seq": self.seq, "tool_name": self.tool_name, "path": self.path, "request": self.request,
                "response": self.response, "wall_time": self.wall_time}

    @classmethod
    def from_dict(cls, d: dict) -> CallLogEntry:
        return cls(int(d["seq"]), d["tool_name"], d["path"], d["request"], d["response"], float(d["wall_time"]))


def _err(msg: str) -> dict:
    return {"error": msg}


def _check_args(spec: ToolSpec, args: dict) -> list[str]:
    problems = []
    props = spec.input_schema["properties"]
    for name in args:
        if name not in props:
            if spec.verb == "create" and name.endswith("_id") and name.startswith(spec.name.rsplit("_", 1)[1]):
                problems.append(f"{name}: assigned by the service")
            else:
                problems.append(f"{name}: unknown argument")
    for name in spec.input_schema["required"]:
        if args.get(name) is None:
            problems.append(f"{name}: required")
    return problems


def _as_int(value, name: str):
    if value is None:
        return None, None
    if isinstance(value, bool) or not isinstance(value, int):
        return None, f"{name}: expected integer"
    return value, None


def _record_view(schema: RecordSchema, rec: ServiceRecord, brief: bool = False) -> dict:
    out = {schema.id_field: rec.record_id}
    for name in schema.fields:
        if name in rec.payload and not (brief and schema.fields[name] == "text"):
            out[name] = copy.deepcopy(rec.payload[name])
    return out


def _haystack(schema: RecordSchema, rec: ServiceRecord) -> str:
    parts = []
    for name in schema.searchable:
        v = rec.payload.get(name)
        if isinstance(v, list):
            parts.extend(str(x) for x in v)
        elif v is not None:
            parts.append(str(v))
    return " ".join(parts).lower()


class BackendRun:
    """One episode's backend: private database, serialized mutations, append-only call log."""

    def __init__(self, snapshot: Snapshot):
        world = snapshot.world()
        self.snapshot_digest = snapshot.digest
        self.bank: FixtureBank = world.fixtures.deepcopy()
        self.now: datetime = world.clock
        self.round = world.round
        self.registry = build_registry(self.bank.schemas)
        self._log: list[CallLogEntry] = []
        self._lock = threading.Lock()
        self._finished = False
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None

    # -- plumbing -----------------------------------------------------------
    @property
    def finished(self) -> bool:
        return self._finished

    @property
    def url(self) -> str | None:
        if self._server is None:
            return None
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def call_log(self) -> list[CallLogEntry]:
        with self._lock:
            return list(self._log)

    def finish(self) -> None:
        with self._lock:
            self._finished = True
        self._stop_server()

    def export_final_state(self) -> FixtureBank:
        if not self._finished:
            raise RunStillLiveError("run is still live; call finish() first")
        with self._lock:
            return self.bank.deepcopy()

    # -- dispatch -----------------------------------------------------------
    def handle_path(self, path: str, args) -> dict:
        spec = self.registry.by_path.get(path)
        return self.handle_call(spec.name if spec else path, args, path=path)

    def handle_call(self, tool_name: str, args, *, path: str | None = None) -> dict:
        with self._lock:
            if self._finished:
                raise RunFinishedError("run already finished")
            spec = self.registry.get(tool_name)
            request = copy.deepcopy(args)
            if spec is None:
                resp = _err(f"Unknown tool {tool_name}")
            elif not isinstance(args, dict):
                resp = _err("Invalid arguments: expected a JSON object")
            else:
                problems = _check_args(spec, args)
                if problems:
                    resp = _err("Invalid arguments: " + "; ".join(problems))
                else:
                    resp = getattr(self, f"_{spec.verb}")(self.bank.schemas[spec.service], dict(args))
            entry = CallLogEntry(len(self._log) + 1, tool_name, spec.path if spec else (path or ""),
                                 request, copy.deepcopy(resp), time.time())
            self._log.append(entry)
            return resp

    # -- verbs --------------------------------------------------------------
    def _live(self, schema: RecordSchema, rid) -> ServiceRecord | None:
        rec = self.bank.get(schema.service, rid) if isinstance(rid, str) else None
        return None if rec is None or rec.tombstoned else rec

    def _not_found(self, schema: RecordSchema, rid) -> dict:
        return _err(f"{schema.entity.capitalize()} {rid} not found")

    def _list(self, schema: RecordSchema, args: dict) -> dict:
        query = args.get("query")
        if query is not None and not isinstance(query, str):
            return _err("Invalid arguments: query: expected string")
        days, e1 = _as_int(args.get("days"), "days")
        offset, e2 = _as_int(args.get("offset"), "offset")
        limit, e3 = _as_int(args.get("limit"), "limit")
        bad = [e for e in (e1, e2, e3) if e]
        if bad:
            return _err("Invalid arguments: " + "; ".join(bad))
        days = LIST_DAYS_DEFAULT if days is None else days
        offset = max(offset or 0, 0)
        limit = LIST_LIMIT_MAX if limit is None else max(0, min(limit, LIST_LIMIT_MAX))
        words = (query or "").lower().split()
        tf = schema.time_field
        cutoff = self.now - timedelta(days=days) if (tf and days > 0) else None

        hits = []
        for rec in self.bank.live(schema.service):
            stamp = None
            if tf and isinstance(rec.payload.get(tf), str):
                try:
                    stamp = datetime.fromisoformat(rec.payload[tf])
                except ValueError:
                    stamp = None
            if cutoff is not None and (stamp is None or stamp < cutoff):
                continue
            if words:
                hay = _haystack(schema, rec)
                if not all(w in hay for w in words):
                    continue
            hits.append((stamp, rec))
        if tf:
            hits.sort(key=lambda h: (h[0] is None, -(h[0].timestamp()) if h[0] else 0, h[1].suffix))
        else:
            hits.sort(key=lambda h: h[1].suffix)
        page = hits[offset:offset + limit]
        return {
            schema.resource: [_record_view(schema, rec, brief=True) for _, rec in page],
            "total": len(hits),
            "returned": len(page),
            "offset": offset,
        }

    def _get(self, schema: RecordSchema, args: dict) -> dict:
        rid = args[schema.id_field]
        rec = self._live(schema, rid)
        if rec is None:
            return self._not_found(schema, rid)
        return _record_view(schema, rec)

    def _validated(self, schema: RecordSchema, rid: str, payload: dict) -> list[str]:
        problems = validate_payload(schema, payload, self.bank.schemas)
        if problems:
            return problems
        probe = ServiceRecord(schema.service, rid, payload, created_round=self.round)
        return [v.detail for v in record_violations(self.bank, probe)]

    def _create(self, schema: RecordSchema, args: dict) -> dict:
        payload = {k: v for k, v in args.items() if v is not None}
        if schema.id_field in payload:
            return _err(f"Invalid {schema.entity}: {schema.id_field} is assigned by the service")
        counter = self.bank.id_counters.get(schema.service, schema.id_start)
        problems = self._validated(schema, f"{schema.prefix}-{counter}", payload)
        if problems:
            return _err(f"Invalid {schema.entity}: " + "; ".join(problems))
        rid = self.bank.allocate_id(schema.service)
        rec = ServiceRecord(schema.service, rid, copy.deepcopy(payload), created_round=self.round)
        self.bank.add(rec)
        return _record_view(schema, rec)

    def _update(self, schema: RecordSchema, args: dict) -> dict:
        rid = args.pop(schema.id_field)
        rec = self._live(schema, rid)
        if rec is None:
            return self._not_found(schema, rid)
        payload = copy.deepcopy(rec.payload)
        for k, v in args.items():
            if v is None:
                payload.pop(k, None)
            else:
                payload[k] = copy.deepcopy(v)
        problems = self._validated(schema, rid, payload)
        if problems:
            return _err(f"Invalid {schema.entity}: " + "; ".join(problems))
        new = replace(rec, payload=payload)
        self.bank.replace_record(new)
        return _record_view(schema, new)

    def _delete(self, schema: RecordSchema, args: dict) -> dict:
        rid = args[schema.id_field]
        rec = self._live(schema, rid)
        if rec is None:
            return self._not_found(schema, rid)
        holders = referencing_records(self.bank, schema.service, rid)
        if holders:
            return _err(f"{schema.entity.capitalize()} {rid} is still referenced by {', '.join(holders)}")
        self.bank.replace_record(replace(rec, tombstoned=True))
        return {"deleted": rid}

    # -- HTTP ---------------------------------------------------------------
    def serve(self, host: str = "127.0.0.1", port: int = 0) -> str:
        run = self

        class Handler(BaseHTTPRequestHandler):
            def _reply(self, code: int, body) -> None:
                data = json.dumps(body, ensure_ascii=False).encode()
                self.send_response(code)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(data)))
                self.end_headers()
                self.wfile.write(data)

            def do_GET(self):
                if self.path == "/registry":
                    self._reply(200, run.registry.listing(run.url or ""))
                else:
                    self._reply(404, _err(f"No route {self.path}"))

            def do_POST(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b"{}"
                try:
                    args = json.loads(raw or b"{}")
                except json.JSONDecodeError:
                    args = None
                if self.path not in run.registry.by_path:
                    self._reply(404, _err(f"No route {self.path}"))
                    return
                try:
                    resp = run.handle_path(self.path, args if args is not None else "<malformed json>")
                except RunFinishedError as exc:
                    self._reply(409, _err(str(exc)))
                    return
                self._reply(200, resp)

            def log_message(self, *a):
                pass

        try:
            self._server = ThreadingHTTPServer((host, port), Handler)
        except OSError as exc:
            if exc.errno == errno.EADDRINUSE:
                raise PortInUseError(f"port {port} on {host} is in use") from exc
            raise
        self._server.daemon_threads = True
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self.url

    def _stop_server(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None


def start_run(snapshot: Snapshot, bind: tuple[str, int] | None = None, *,
              expected_digest: str | None = None) -> BackendRun:
    """Open a run over a private copy of ``snapshot``; optionally serve it over HTTP."""
    if not snapshot.verify():
        raise SnapshotDigestError("snapshot content does not match its digest")
    if expected_digest is not None and snapshot.digest != expected_digest:
        raise SnapshotDigestError(f"snapshot digest {snapshot.digest[:12]} != expected {expected_digest[:12]}")
    run = BackendRun(snapshot)
    if bind is not None:
        run.serve(*bind)
    return run


__all__ = [
    "BackendRun",
    "CallLogEntry",
    "PortInUseError",
    "RunFinishedError",
    "RunStillLiveError",
    "SnapshotDigestError",
    "ToolRegistry",
    "ToolSpec",
    "build_registry",
    "render_tool_spec",
    "start_run",
]
