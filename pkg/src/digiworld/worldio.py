"""On-disk world directories.

Layout::

    manifest.yaml            seed, round, clock, window, digest, devices
    persona.yaml
    schemas.yaml
    fixtures/<service>.yaml  one file per service with records
    logs/<service>.yaml      one activity log per service
    logs/system.yaml
    conflicts.yaml
"""

from __future__ import annotations

from pathlib import Path

import yaml

from .worldstate import WorldState, canonical_json, sha256_hex


def dump_yaml(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(yaml.safe_dump(obj, sort_keys=False, allow_unicode=True, width=100), encoding="utf-8")


def load_yaml(path: Path):
    return yaml.safe_load(Path(path).read_text(encoding="utf-8"))


def save_world(world: WorldState, root: str | Path, extra_manifest: dict | None = None) -> Path:
    root = Path(root)
    d = world.to_dict()
    manifest = {
        "persona_id": world.persona.persona_id,
        "seed": world.rng_seed,
        "round": world.round,
        "clock": d["clock"],
        "time_window": d["time_window"],
        "digest": world.digest(),
        "devices": d["devices"],
        "id_counters": d["fixtures"]["id_counters"],
    }
    if extra_manifest:
        manifest.update(extra_manifest)
    dump_yaml(manifest, root / "manifest.yaml")
    dump_yaml(d["persona"], root / "persona.yaml")
    dump_yaml(d["fixtures"]["schemas"], root / "schemas.yaml")
    for service, recs in d["fixtures"]["records"].items():
        if recs:
            dump_yaml(recs, root / "fixtures" / f"{service}.yaml")
    by_origin: dict[str, list] = {}
    for seq, entry in enumerate(d["log"]):
        name = entry["origin"].split(":", 1)[1] if entry["origin"].startswith("service:") else "system"
        by_origin.setdefault(name, []).append({"seq": seq, **entry})
    for name, entries in by_origin.items():
        dump_yaml(entries, root / "logs" / f"{name}.yaml")
    dump_yaml(d["conflicts"], root / "conflicts.yaml")
    return root


def load_world(root: str | Path) -> WorldState:
    root = Path(root)
    manifest = load_yaml(root / "manifest.yaml")
    schemas = load_yaml(root / "schemas.yaml")
    records = {s: [] for s in schemas}
    fixtures_dir = root / "fixtures"
    if fixtures_dir.is_dir():
        for f in sorted(fixtures_dir.glob("*.yaml")):
            records[f.stem] = load_yaml(f) or []
    entries = []
    logs_dir = root / "logs"
    if logs_dir.is_dir():
        for f in sorted(logs_dir.glob("*.yaml")):
            entries.extend(load_yaml(f) or [])
    entries.sort(key=lambda e: e["seq"])
    for e in entries:
        e.pop("seq")
    d = {
        "persona": load_yaml(root / "persona.yaml"),
        "devices": manifest["devices"],
        "fixtures": {"schemas": schemas, "records": records, "id_counters": manifest["id_counters"]},
        "log": entries,
        "clock": manifest["clock"],
        "round": manifest["round"],
        "rng_seed": manifest["seed"],
        "time_window": manifest["time_window"],
        "conflicts": load_yaml(root / "conflicts.yaml") or [],
    }
    world = WorldState.from_dict(d)
    expected = manifest.get("digest")
    if expected and sha256_hex(canonical_json(world.to_dict())) != expected:
        raise ValueError(f"world digest mismatch in {root}")
    return world


def load_persona_file(path: str | Path):
    from .worldstate import Persona

    return Persona.from_dict(load_yaml(path))
