"""Template tasks emitted by the stub generator.

Each builder picks concrete records out of a world summary and returns the raw
task document (query, verifier, reference) in the same shape a remote
generator must produce. Builders return None when the world lacks the records
they need.
"""

from __future__ import annotations

from datetime import date, datetime, time, timedelta


def _first_name(full: str) -> str:
    return (full or "them").split()[0]


def _live(summary, service):
    return list(summary["fixtures"].get(service, []))


def _task_day(summary) -> date:
    return date.fromisoformat(summary["clock"][:10])


def _process_pool(read_tool, id_arg, rid, list_tool, keywords):
    return [
        {"item_id": "inspected-record", "check": {"type": "call", "tool": read_tool, "args": {id_arg: rid}}},
        {"item_id": "surveyed-service", "check": {"type": "call", "tool": list_tool}},
        {"item_id": "mentions-entity", "check": {"type": "text", "any_of": keywords}},
        {"item_id": "explains-action", "check": {"type": "judge", "hints": keywords,
                                                 "prompt": "Does the final message explain what was done and why?"}},
    ]


def _followup(summary, rng):
    contacts = _live(summary, "contacts")
    if not contacts:
        return None
    c = rng.choice(contacts)
    first = _first_name(c.get("name"))
    title = f"Follow-up with {c.get('name')}"
    start = datetime.combine(_task_day(summary) + timedelta(days=1), time(10, 0)).isoformat()
    predicate = {"type": "state", "service": "calendar",
                 "where": {"title": {"contains": title}, "attendees": {"contains": c["record_id"]}}}
    return {
        "kind": "followup",
        "state_change": True,
        "query_text": rng.choice([
            f"Can you get a follow-up with {first} on my calendar for tomorrow morning?",
            f"I need to catch up with {first} again. Book something tomorrow at 10.",
            f"Put a follow-up with {first} in for tomorrow, morning is best.",
        ]),
        "category": "scheduling",
        "required_final_state": [predicate],
        "forbidden_actions": [{"type": "call", "tool": "calendar_delete_event"}],
        "steps": [
            {"tool": "contacts_get_contact", "args": {"contact_id": c["record_id"]},
             "rationale": "identify the right contact"},
            {"tool": "calendar_create_event", "args": {"title": title, "start": start, "attendees": [c["record_id"]]},
             "rationale": "book the follow-up"},
        ],
        "expected_text": f"Booked '{title}' for {start} with {c.get('name')} ({c['record_id']}).",
        "process": _process_pool("contacts_get_contact", "contact_id", c["record_id"], "calendar_list_events",
                                 [first, c["record_id"]]),
    }


def _close_todo(summary, rng):
    todos = [t for t in _live(summary, "todo") if t.get("status") == "open"]
    if not todos:
        return None
    t = rng.choice(todos)
    title = t.get("title", t["record_id"])
    return {
        "kind": "close_todo",
        "state_change": True,
        "query_text": rng.choice([
            f"'{title}' is done, tick it off my list.",
            f"I wrapped up '{title}' yesterday. Update my todos.",
            f"Mark the '{title}' item as finished please.",
        ]),
        "category": "workflow_execution",
        "required_final_state": [{"type": "state", "service": "todo", "record_id": t["record_id"],
                                  "where": {"status": {"eq": "done"}}}],
        "forbidden_actions": [{"type": "call", "tool": "todo_delete_todo", "args": {"todo_id": t["record_id"]}}],
        "steps": [
            {"tool": "todo_get_todo", "args": {"todo_id": t["record_id"]}, "rationale": "confirm the item"},
            {"tool": "todo_update_todo", "args": {"todo_id": t["record_id"], "status": "done"},
             "rationale": "close it"},
        ],
        "expected_text": f"Marked {t['record_id']} '{title}' as done.",
        "process": _process_pool("todo_get_todo", "todo_id", t["record_id"], "todo_list_todos",
                                 [t["record_id"], title]),
    }


def _cancel_event(summary, rng):
    pinned = set(summary.get("referenced", []))
    events = [e for e in _live(summary, "calendar")
              if e.get("status") != "cancelled" and e["record_id"] not in pinned]
    if not events:
        return None
    e = rng.choice(events)
    title = e.get("title", e["record_id"])
    return {
        "kind": "cancel_event",
        "state_change": True,
        "query_text": rng.choice([
            f"'{title}' is off. Clear it from my calendar.",
            f"We're not doing '{title}' anymore, remove it.",
        ]),
        "category": "scheduling",
        "required_final_state": [{"type": "state", "service": "calendar", "record_id": e["record_id"],
                                  "deleted": True}],
        "forbidden_actions": [{"type": "call", "tool": "calendar_create_event",
                               "args": {"title": title}}],
        "steps": [
            {"tool": "calendar_get_event", "args": {"event_id": e["record_id"]}, "rationale": "locate the event"},
            {"tool": "calendar_delete_event", "args": {"event_id": e["record_id"]}, "rationale": "remove it"},
        ],
        "expected_text": f"Removed {e['record_id']} '{title}' from the calendar.",
        "process": _process_pool("calendar_get_event", "event_id", e["record_id"], "calendar_list_events",
                                 [e["record_id"], title]),
    }


def _reconcile(summary, rng):
    open_conflicts = summary.get("conflicts") or []
    if not open_conflicts:
        return None
    c = rng.choice(open_conflicts)
    src, echo = c["source_id"], c["echo_id"]
    created = summary["clock"]
    title = f"Discrepancy {src} vs {echo}"
    body = f"{c['source_field']} is {c['source_value']} in {src} but {c['echo_value']} in {echo}."
    entity = {"calendar": "event", "finance": "transaction"}.get(c["source_service"], "record")
    return {
        "kind": "reconcile",
        "state_change": True,
        "query_text": rng.choice([
            f"Something about that {entity} doesn't line up across my apps. Find it and leave me a note with both ids.",
            f"My records disagree about a {entity} somewhere. Track it down and note both record ids for me.",
        ]),
        "category": "conflict_detection",
        "conflict_refs": [c["conflict_id"]],
        "required_final_state": [{"type": "state", "service": "notes",
                                  "where": {"title": {"contains": src}, "body": {"contains": str(c["echo_value"])}}},
                                 {"type": "state", "service": "notes", "where": {"title": {"contains": echo}}}],
        "forbidden_actions": [],
        "steps": [
            {"tool": f"{c['source_service']}_get_{entity}",
             "args": {f"{entity}_id": src}, "rationale": "read the source of truth"},
            {"tool": "notes_create_note", "args": {"title": title, "body": body, "created": created},
             "rationale": "record the discrepancy"},
        ],
        "expected_text": f"Noted the mismatch: {body}",
        "process": _process_pool(f"{c['source_service']}_get_{entity}", f"{entity}_id", src,
                                 f"{c['echo_service']}_list_{_resource(c['echo_service'])}", [src, echo]),
    }


def _resource(service):
    from .catalog import DEFAULT_SCHEMAS

    return DEFAULT_SCHEMAS[service].resource


def _heartbeat(summary, rng):
    events = _live(summary, "calendar")
    if not events:
        return None
    upcoming = [e for e in events if e.get("start", "") >= summary["clock"]] or events
    e = rng.choice(upcoming)
    title = e.get("title", e["record_id"])
    return {
        "kind": "heartbeat",
        "state_change": False,
        "trigger": "heartbeat",
        "query_text": "",
        "category": "proactive",
        "required_final_state": [],
        "forbidden_actions": [{"type": "call", "tool": "calendar_delete_event"}],
        "outcome_extra": [
            {"type": "text", "all_of": [title]},
            {"type": "judge", "hints": [title],
             "prompt": "Does the message give a timely, grounded recommendation about the flagged item?"},
        ],
        "steps": [
            {"tool": "calendar_list_events", "args": {}, "rationale": "scan what is coming up"},
            {"tool": "calendar_get_event", "args": {"event_id": e["record_id"]}, "rationale": "check details"},
        ],
        "expected_text": f"Heads-up: '{title}' is scheduled for {e.get('start')}. Worth preparing for it today.",
        "process": _process_pool("calendar_get_event", "event_id", e["record_id"], "calendar_list_events",
                                 [title, e["record_id"]]),
    }


BUILDERS = {
    "followup": _followup,
    "close_todo": _close_todo,
    "cancel_event": _cancel_event,
    "reconcile": _reconcile,
    "heartbeat": _heartbeat,
}
WEIGHTS = {"followup": 3, "close_todo": 3, "cancel_event": 2, "reconcile": 3, "heartbeat": 1}


def stub_task(summary: dict, rng) -> dict:
    kinds = list(BUILDERS)
    order = []
    pool = dict(WEIGHTS)
    if summary.get("task_kind"):
        order = [summary["task_kind"]]
    else:
        while pool:
            names = list(pool)
            pick = rng.choices(names, weights=[pool[n] for n in names])[0]
            order.append(pick)
            del pool[pick]
    spec = None
    for kind in order + [k for k in kinds if k not in order]:
        spec = BUILDERS[kind](summary, rng)
        if spec is not None:
            break
    if spec is None:
        raise ValueError("world too sparse for any stub task")

    n_process = rng.randint(1, len(spec["process"]))
    process = rng.sample(spec["process"], n_process)
    trigger = spec.get("trigger", "user_request")
    rubric = [{"item_id": "outcome", "kind": "outcome", "check": {"type": "all", "checks": spec.get("outcome_extra", [])}}]
    rubric += [{"item_id": p["item_id"], "kind": "process", "check": p["check"]} for p in process]
    return {
        "query": {
            "text": spec["query_text"],
            "trigger": trigger,
            "task_date": summary["clock"][:10],
            "loading_mode": summary.get("loading_mode", "full"),
            "device_requirements": ["cli_workspace"],
            "category": spec["category"],
            "difficulty": rng.choice(["medium", "hard"]),
        },
        "verifier": {
            "rubric": rubric,
            "conflict_refs": spec.get("conflict_refs", []),
            "required_final_state": spec["required_final_state"],
            "forbidden_actions": spec["forbidden_actions"],
        },
        "reference": {
            "steps": spec["steps"],
            "expected_outcome": {"text": spec["expected_text"], "predicates": spec["required_final_state"]},
        },
        "state_change": spec["state_change"],
        "task_kind": spec["kind"],
    }
