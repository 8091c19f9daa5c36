"""Prompt documents sent to remote generators.

Each renderer produces a self-contained text request with an explicit JSON
output contract. The stub generator never reads these.
"""

from __future__ import annotations

import json

ADAPT_TEMPLATE = """\
Role: you turn a generic challenge pattern into one concrete event in the life of a specific user.

# User
{persona}

# World so far
Time window: {time_window}
Current time: {clock}
Recent records per service (newest last):
{fixtures}

Known entities:
{entities}

# Pattern to instantiate
{event}

# Rules
- involved_services may only use these names: {allowed}.
- planned_records maps each involved service to how many new records the event needs.
- Keep the event consistent with existing records; reuse known entities where natural.
{feedback}
# Output
Reply with a single JSON object:
{{"adapted_name": str, "adapted_description": str, "adapted_category": str,
  "adapted_difficulty": "simple" | "medium" | "hard", "involved_services": [str],
  "planned_records": {{service: int}}, "conflict_axes": [str]}}
"""

RECORDS_TEMPLATE = """\
Role: you write realistic, interlinked app records and activity-log lines for one event.

# User
{persona}

# Event
{adapted}

# Context
Round: {round}; event kind: {kind}; log timestamps must be between {start} and {window_end}, non-decreasing.

# Record schemas (follow exactly; reference fields must point at existing or newly created records)
{schemas}

# Reserved ids (use only these for new records)
{reservations}

# Existing records
{fixtures}

# Output
Reply with a single JSON object:
{{"records": {{service: [{{<id field>: id, ...fields}}]}},
  "log_entries": [{{"timestamp": iso, "origin": "system" | "service:<name>", "kind": str, "text": str, "refs": [id]}}],
  "persona_updates": {{"new_traits": [str], "new_threads": [thread]}},
  "thread_record_mapping": {{thread_name: {{service: [id]}}}}}}
Services without new records get an empty list.
"""

TASK_TEMPLATE = """\
Role: with full visibility of the world below, write one assistant task for the user, an executable
verifier and a reference solution that provably satisfies it.

# World
{world}

# Available tools
{tools}

# Open conflicts
{conflicts}

# Output
Reply with a single JSON object with keys "query", "verifier", "reference", "state_change".
Verifier checks are predicates of type state, call, text, judge, all, none or not.
"""

JUDGE_TEMPLATE = """\
Role: impartial reviewer. Answer strictly in JSON.

# Request
{request}
"""


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True)


def _persona_text(p: dict) -> str:
    traits = "\n".join(f"- {t}" for t in p.get("traits", []))
    return f"{p.get('persona_name')} ({p.get('role')}, {p.get('company')}, {p.get('industry')})\n{traits}"


def render_adapt(event, summary: dict, allowed: list[str], feedback: str | None) -> str:
    fb = f"- Your previous answer was rejected: {feedback}\n" if feedback else ""
    return ADAPT_TEMPLATE.format(
        persona=_persona_text(summary["persona"]),
        time_window=" to ".join(summary["time_window"]),
        clock=summary["clock"],
        fixtures=_dump(summary["fixtures"]),
        entities=_dump(summary["entities"]),
        event=_dump(event.to_dict()),
        allowed=", ".join(allowed),
        feedback=fb,
    )


def render_records(adapted: dict, summary: dict, reservations: dict, context: dict) -> str:
    return RECORDS_TEMPLATE.format(
        persona=_persona_text(summary["persona"]),
        adapted=_dump(adapted),
        round=context["round"],
        kind=context["kind"],
        start=context["start"],
        window_end=context["window_end"],
        schemas=_dump(summary.get("schemas", {})),
        reservations=_dump(reservations),
        fixtures=_dump(summary["fixtures"]),
    )


def render_task(summary: dict) -> str:
    world = {k: v for k, v in summary.items() if k not in ("tools", "conflicts")}
    return TASK_TEMPLATE.format(world=_dump(world), tools="\n".join(summary.get("tools", [])),
                                conflicts=_dump(summary.get("conflicts", [])))


def render_judge(request: dict) -> str:
    return JUDGE_TEMPLATE.format(request=_dump(request))
