import json
import re
import socket
import threading

import httpx
import pytest

from helpers import full_payload
from digiworld.backend import (
    LIST_LIMIT_MAX,
    PortInUseError,
    RunFinishedError,
    RunStillLiveError,
    SnapshotDigestError,
    build_registry,
    start_run,
)
from digiworld.catalog import DEFAULT_SCHEMAS, format_datetime
from digiworld.worldstate import Snapshot


@pytest.fixture
def run(snap30):
    r = start_run(snap30)
    yield r
    if not r.finished:
        r.finish()


def test_registry_shape():
    reg = build_registry(DEFAULT_SCHEMAS)
    assert len(reg) == 5 * 35 and len(reg.services()) == 35
    assert {"gmail_list_messages", "gmail_get_message", "calendar_create_event", "helpdesk_delete_ticket"} <= set(reg.names())
    assert all(t.method == "POST" and t.path.startswith(f"/{t.service}/") for t in reg.tools.values())


@pytest.mark.parametrize("service", sorted(DEFAULT_SCHEMAS))
def test_write_read_roundtrip(run, service):
    schema = run.bank.schemas[service]
    payload = full_payload(run, service)
    created = run.handle_call(f"{service}_create_{schema.entity}", payload)
    assert "error" not in created, created
    rid = created[schema.id_field]
    assert rid.startswith(schema.prefix + "-")
    got = run.handle_call(f"{service}_get_{schema.entity}", {schema.id_field: rid})
    assert {k: got[k] for k in payload} == payload


def test_not_found_shape(run):
    resp = run.handle_call("helpdesk_get_ticket", {"ticket_id": "T-1"})
    assert resp == {"error": "Ticket T-1 not found"}
    for service, schema in DEFAULT_SCHEMAS.items():
        for verb in ("get", "update", "delete"):
            resp = run.handle_call(f"{service}_{verb}_{schema.entity}", {schema.id_field: "X-0"})
            assert re.fullmatch(rf"{schema.entity.capitalize()} X-0 not found", resp["error"])


def test_concurrent_callers_all_logged(run):
    per_thread = 10
    barrier = threading.Barrier(32)

    def worker(i):
        barrier.wait()
        for j in range(per_thread):
            if j % 2:
                run.handle_call("notes_create_note", {"title": f"t{i}-{j}", "created": format_datetime(run.now)})
            else:
                run.handle_call("gmail_list_messages", {"query": "x"})

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(32)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    log = run.call_log()
    assert len(log) == 32 * per_thread
    assert [e.seq for e in log] == list(range(1, len(log) + 1))
    ids = [e.response["note_id"] for e in log if e.tool_name == "notes_create_note"]
    assert len(ids) == len(set(ids)) == 32 * per_thread // 2


def test_runs_are_isolated(snap30):
    a, b = start_run(snap30), start_run(snap30)
    a.handle_call("notes_create_note", {"title": "only in a", "created": format_datetime(a.now)})
    a.finish(), b.finish()
    assert a.export_final_state().count() == b.export_final_state().count() + 1
    assert snap30.verify()


def test_update_null_clears_and_validation(run):
    rid = run.handle_call("notes_create_note", {"title": "x", "created": format_datetime(run.now), "body": "b"})["note_id"]
    out = run.handle_call("notes_update_note", {"note_id": rid, "body": None})
    assert "body" not in out
    bad = run.handle_call("notes_update_note", {"note_id": rid, "title": 5})
    assert bad["error"].startswith("Invalid note")


def test_create_rejects_client_id(run):
    resp = run.handle_call("notes_create_note", {"note_id": "NOTE-1", "title": "x", "created": "2026-01-01T00:00:00"})
    assert "assigned by the service" in resp["error"]


def test_create_rejects_dangling_ref(run):
    resp = run.handle_call("gmail_create_message", {"subject": "s", "sender": "a", "date": format_datetime(run.now),
                                                     "contact_ref": "CON-99999"})
    assert "error" in resp


def test_delete_then_get(run):
    rid = run.handle_call("notes_create_note", {"title": "gone", "created": format_datetime(run.now)})["note_id"]
    assert run.handle_call("notes_delete_note", {"note_id": rid}) == {"deleted": rid}
    assert run.handle_call("notes_get_note", {"note_id": rid}) == {"error": f"Note {rid} not found"}
    run.finish()
    assert run.export_final_state().get("notes", rid).tombstoned


def test_delete_refused_while_referenced(run):
    cid = run.handle_call("contacts_create_contact", {"name": "Zed", "email": "z@x"})["contact_id"]
    run.handle_call("crm_create_customer", {"name": "Acme", "owner": cid})
    resp = run.handle_call("contacts_delete_contact", {"contact_id": cid})
    assert "still referenced" in resp["error"]


def test_list_window_limit_and_search(run):
    for i in range(LIST_LIMIT_MAX + 5):
        run.handle_call("notes_create_note", {"title": f"zebra item {i}", "created": format_datetime(run.now)})
    out = run.handle_call("notes_list_notes", {"query": "zebra ITEM"})
    assert out["total"] == LIST_LIMIT_MAX + 5 and out["returned"] == LIST_LIMIT_MAX
    page2 = run.handle_call("notes_list_notes", {"query": "zebra", "offset": LIST_LIMIT_MAX})
    assert page2["returned"] == 5
    assert run.handle_call("notes_list_notes", {"query": "zebra giraffe"})["total"] == 0


def test_list_omits_text_fields(run):
    run.handle_call("notes_create_note", {"title": "brief", "created": format_datetime(run.now), "body": "long"})
    rows = run.handle_call("notes_list_notes", {"query": "brief"})["notes"]
    assert rows and "body" not in rows[0]


def test_invalid_args_and_unknown_tool(run):
    assert "Invalid arguments" in run.handle_call("notes_get_note", {})["error"]
    assert "Invalid arguments" in run.handle_call("notes_get_note", "not a dict")["error"]
    assert run.handle_call("fax_send", {})["error"] == "Unknown tool fax_send"
    assert len(run.call_log()) == 3


def test_export_before_finish_and_calls_after(run):
    with pytest.raises(RunStillLiveError):
        run.export_final_state()
    run.finish()
    with pytest.raises(RunFinishedError):
        run.handle_call("notes_list_notes", {})


def test_digest_checks(snap30):
    with pytest.raises(SnapshotDigestError):
        start_run(snap30, expected_digest="0" * 64)
    tampered = Snapshot(snap30.round, snap30.data.replace("Mara", "Mira", 1), snap30.digest)
    with pytest.raises(SnapshotDigestError):
        start_run(tampered)


def test_http_serving(snap30):
    run = start_run(snap30, ("127.0.0.1", 0))
    try:
        reg = httpx.get(f"{run.url}/registry").json()
        assert len(reg) == 175 and reg[0]["url"].startswith(run.url)
        resp = httpx.post(f"{run.url}/helpdesk/tickets/get", json={"ticket_id": "T-1"})
        assert resp.status_code == 200 and resp.json() == {"error": "Ticket T-1 not found"}
        assert httpx.post(f"{run.url}/nope", json={}).status_code == 404
        bad = httpx.post(f"{run.url}/notes/notes/get", content=b"{not json")
        assert "Invalid arguments" in bad.json()["error"]
        assert len(run.call_log()) == 2
    finally:
        run.finish()


def test_port_in_use(snap30):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen()
    port = sock.getsockname()[1]
    try:
        with pytest.raises(PortInUseError):
            start_run(snap30, ("127.0.0.1", port))
    finally:
        sock.close()


def test_call_log_serializable(run):
    run.handle_call("notes_list_notes", {})
    json.dumps([e.to_dict() for e in run.call_log()])
