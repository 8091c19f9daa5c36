"""Shared builders for tests that talk to a backend run."""

from digiworld.catalog import format_datetime


def value_for(ftype, name, run, depth=0):
    stamp = format_datetime(run.now)
    simple = {
        "str": f"{name} alpha", "text": f"{name} body text", "int": 3, "float": 12.5, "bool": True,
        "datetime": stamp, "date": stamp[:10], "list[str]": ["one", "two"],
    }
    if ftype in simple:
        return simple[ftype]
    kind, _, target = ftype.partition(":")
    rid = create_minimal(run, target, depth + 1)
    return rid if kind == "ref" else [rid]


def full_payload(run, service, depth=0):
    schema = run.bank.schemas[service]
    fields = schema.fields if depth == 0 else {k: schema.fields[k] for k in schema.required}
    return {name: value_for(t, name, run, depth) for name, t in fields.items()}


def create_minimal(run, service, depth=1):
    schema = run.bank.schemas[service]
    resp = run.handle_call(f"{service}_create_{schema.entity}", full_payload(run, service, depth))
    assert "error" not in resp, resp
    return resp[schema.id_field]
