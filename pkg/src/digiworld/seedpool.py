"""Task-seed and noise-event pools and the per-round sampler."""

from __future__ import annotations

import random
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Union

import yaml

from .catalog import DEFAULT_SCHEMAS

TRACE_MODES = ("ephemeral", "trace_leaving")


class SeedParseError(ValueError):
    pass


class SeedValidationError(ValueError):
    def __init__(self, problems: dict[str, list[str]]):
        self.problems = problems
        detail = "; ".join(f"{sid}: {', '.join(p)}" for sid, p in problems.items())
        super().__init__(f"invalid seeds: {detail}")

    @property
    def seed_ids(self) -> list[str]:
        return list(self.problems)


class PoolConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SeedTask:
    seed_id: str
    name: str
    category: str
    task_content: str
    interaction_mode: str
    plausible_content_directions: tuple[str, ...]
    difficulty: str
    description: str
    required_services: tuple[str, ...]
    optional_services: tuple[str, ...]
    key_actions: tuple[str, ...]
    safety_concerns: tuple[str, ...] = ()
    adaptable_elements: tuple[str, ...] = ()

    @property
    def services(self) -> tuple[str, ...]:
        return self.required_services + tuple(s for s in self.optional_services if s not in self.required_services)

    def to_dict(self) -> dict:
        return {
            "seed_id": self.seed_id,
            "name": self.name,
            "category": self.category,
            "task_content": self.task_content,
            "interaction_mode": self.interaction_mode,
            "plausible_content_directions": list(self.plausible_content_directions),
            "difficulty": self.difficulty,
            "description": self.description,
            "required_services": list(self.required_services),
            "optional_services": list(self.optional_services),
            "key_actions": list(self.key_actions),
            "safety_concerns": list(self.safety_concerns),
            "adaptable_elements": list(self.adaptable_elements),
        }


@dataclass(frozen=True)
class NoiseTemplate:
    noise_id: str
    pattern: str
    trace_mode: str
    services: tuple[str, ...]
    residual_record_kinds: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "noise_id": self.noise_id,
            "pattern": self.pattern,
            "trace_mode": self.trace_mode,
            "services": list(self.services),
            "residual_record_kinds": list(self.residual_record_kinds),
        }


@dataclass(frozen=True)
class SamplerConfig:
    noise_ratio: float = 0.5
    seed: int = 0
    conflict_count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.noise_ratio <= 1.0:
            raise PoolConfigError(f"noise_ratio must lie in [0, 1], got {self.noise_ratio}")
        if self.conflict_count < 0:
            raise PoolConfigError("conflict_count must be non-negative")


@dataclass(frozen=True)
class Pools:
    tasks: tuple[SeedTask, ...]
    noise: tuple[NoiseTemplate, ...]


@dataclass(frozen=True)
class SampledEvent:
    kind: str  # "task" | "noise"
    item: Union[SeedTask, NoiseTemplate]
    round: int

    @property
    def is_noise(self) -> bool:
        return self.kind == "noise"


# ---------------------------------------------------------------------------
# loading

Source = Union[str, Path, Iterable[tuple[str, str]]]


def _iter_texts(source: Source, pattern: str) -> list[tuple[str, str]]:
    """(location, text) pairs from a directory, a single file, or ready-made pairs."""
    if isinstance(source, (str, Path)):
        p = Path(source)
        if p.is_dir():
            return [(str(f), f.read_text(encoding="utf-8")) for f in sorted(p.glob(pattern))]
        return [(str(p), p.read_text(encoding="utf-8"))]
    return list(source)


def _parse(location: str, text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"{location}:{mark.line + 1}:{mark.column + 1}" if mark else location
        raise SeedParseError(f"{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(doc, dict):
        raise SeedParseError(f"{location}: expected a mapping of fields")
    return doc


def _strs(doc: dict, key: str) -> tuple[str, ...]:
    value = doc.get(key) or []
    if isinstance(value, str):
        value = [value]
    return tuple(str(v) for v in value)


def _need(doc: dict, key: str, location: str):
    if key not in doc or doc[key] in (None, ""):
        raise SeedParseError(f"{location}: missing field {key!r}")
    return doc[key]


def parse_seed_task(text: str, location: str = "<seed>") -> SeedTask:
    doc = _parse(location, text)
    return SeedTask(
        seed_id=str(_need(doc, "seed_id", location)),
        name=str(_need(doc, "name", location)),
        category=str(_need(doc, "category", location)),
        task_content=str(doc.get("task_content", "")),
        interaction_mode=str(doc.get("interaction_mode", "standard")),
        plausible_content_directions=_strs(doc, "plausible_content_directions"),
        difficulty=str(doc.get("difficulty", "medium")),
        description=str(doc.get("description", "")).strip(),
        required_services=_strs(doc, "required_services"),
        optional_services=_strs(doc, "optional_services"),
        key_actions=_strs(doc, "key_actions"),
        safety_concerns=_strs(doc, "safety_concerns"),
        adaptable_elements=_strs(doc, "adaptable_elements"),
    )


def parse_noise_template(text: str, location: str = "<noise>") -> NoiseTemplate:
    doc = _parse(location, text)
    return NoiseTemplate(
        noise_id=str(_need(doc, "noise_id", location)),
        pattern=str(_need(doc, "pattern", location)),
        trace_mode=str(_need(doc, "trace_mode", location)),
        services=_strs(doc, "services"),
        residual_record_kinds=_strs(doc, "residual_record_kinds"),
    )


def validate_seed(seed: SeedTask, catalog=DEFAULT_SCHEMAS) -> list[str]:
    problems = []
    for svc in seed.required_services + seed.optional_services:
        if svc not in catalog:
            problems.append(f"unregistered service {svc!r}")
    if not seed.required_services:
        problems.append("required_services empty")
    if not seed.key_actions:
        problems.append("key_actions empty")
    if seed.difficulty not in ("simple", "medium", "hard"):
        problems.append(f"difficulty {seed.difficulty!r}")
    return problems


def validate_noise(noise: NoiseTemplate, catalog=DEFAULT_SCHEMAS) -> list[str]:
    problems = []
    if noise.trace_mode not in TRACE_MODES:
        problems.append(f"trace_mode {noise.trace_mode!r}")
    if not noise.services:
        problems.append("services empty")
    for svc in noise.services + noise.residual_record_kinds:
        if svc not in catalog:
            problems.append(f"unregistered service {svc!r}")
    if noise.trace_mode == "trace_leaving" and not noise.residual_record_kinds:
        problems.append("trace_leaving template needs residual_record_kinds")
    if noise.trace_mode == "ephemeral" and noise.residual_record_kinds:
        problems.append("ephemeral template must not leave residual records")
    return problems


def load_pools(
    task_source: Source,
    noise_source: Source,
    config: SamplerConfig | None = None,
    catalog=DEFAULT_SCHEMAS,
) -> Pools:
    """Parse and validate both pools.

    Sources are directories of ``*.seed`` files, single files, or iterables of
    ``(location, text)`` pairs.
    """
    tasks = [parse_seed_task(t, loc) for loc, t in _iter_texts(task_source, "*.seed")]
    noise = [parse_noise_template(t, loc) for loc, t in _iter_texts(noise_source, "*.seed")]

    problems: dict[str, list[str]] = {}
    seen: set[str] = set()
    for s in tasks:
        p = validate_seed(s, catalog)
        if s.seed_id in seen:
            p.append("duplicate seed_id")
        seen.add(s.seed_id)
        if p:
            problems[s.seed_id] = p
    for n in noise:
        p = validate_noise(n, catalog)
        if n.noise_id in seen:
            p.append("duplicate noise_id")
        seen.add(n.noise_id)
        if p:
            problems[n.noise_id] = p
    if problems:
        raise SeedValidationError(problems)

    if config is not None:
        if config.noise_ratio > 0 and not noise:
            raise PoolConfigError("noise_ratio > 0 but the noise pool is empty")
        if config.noise_ratio < 1 and not tasks:
            raise PoolConfigError("noise_ratio < 1 but the task pool is empty")
    return Pools(tuple(tasks), tuple(noise))


# ---------------------------------------------------------------------------
# sampling


def derive_rng(seed: int, *labels) -> random.Random:
    """Independent generator for a labelled purpose; stable across processes."""
    return random.Random(":".join([str(seed), *map(str, labels)]))


class Sampler:
    """Draws one event per round.

    The task/noise coin for round ``r`` depends only on (seed, r). Within a
    pool, draws cycle through a seeded permutation so every item appears once
    per epoch before repeats.
    """

    def __init__(self, pools: Pools, config: SamplerConfig):
        if config.noise_ratio > 0 and not pools.noise:
            raise PoolConfigError("noise_ratio > 0 but the noise pool is empty")
        if config.noise_ratio < 1 and not pools.tasks:
            raise PoolConfigError("noise_ratio < 1 but the task pool is empty")
        self.pools = pools
        self.config = config
        # counts[r] = (task draws, noise draws) in rounds 1..r
        self._counts: list[tuple[int, int]] = [(0, 0)]
        self._perms: dict[tuple[str, int], list[int]] = {}

    def is_noise_round(self, r: int) -> bool:
        ratio = self.config.noise_ratio
        if ratio <= 0.0:
            return False
        if ratio >= 1.0:
            return True
        return derive_rng(self.config.seed, "coin", r).random() < ratio

    def _prior_counts(self, r: int) -> tuple[int, int]:
        while len(self._counts) < r:
            k = len(self._counts)
            t, n = self._counts[-1]
            self._counts.append((t, n + 1) if self.is_noise_round(k) else (t + 1, n))
        return self._counts[r - 1]

    def _pick(self, label: str, size: int, n: int) -> int:
        epoch, pos = divmod(n, size)
        key = (label, epoch)
        perm = self._perms.get(key)
        if perm is None:
            perm = list(range(size))
            derive_rng(self.config.seed, label, "epoch", epoch).shuffle(perm)
            self._perms[key] = perm
        return perm[pos]

    def sample(self, r: int) -> SampledEvent:
        if r < 1:
            raise ValueError("rounds start at 1")
        tasks_before, noise_before = self._prior_counts(r)
        if self.is_noise_round(r):
            i = self._pick("noise", len(self.pools.noise), noise_before)
            return SampledEvent("noise", self.pools.noise[i], r)
        i = self._pick("task", len(self.pools.tasks), tasks_before)
        return SampledEvent("task", self.pools.tasks[i], r)


def sample(pools: Pools, config: SamplerConfig, r: int) -> SampledEvent:
    return Sampler(pools, config).sample(r)
