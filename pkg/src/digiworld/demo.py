"""Packaged demo inputs: personas, seed pools and a one-call rollout helper."""

from __future__ import annotations

from importlib import resources
from pathlib import Path

from .generator import StubGenerator
from .seedpool import SamplerConfig, load_pools
from .synthesis import Rollout, rollout
from .worldio import load_persona_file
from .worldstate import new_world


def data_path(*parts: str) -> Path:
    return Path(str(resources.files("digiworld").joinpath("data", *parts)))


def persona_path(persona_id: str = "p01") -> Path:
    return data_path("personas", f"{persona_id}.yaml")


def demo_pools(config: SamplerConfig | None = None):
    return load_pools(data_path("seeds", "tasks"), data_path("seeds", "noise"), config)


def demo_rollout(seed: int = 0, rounds: int = 30, *, persona_id: str = "p01", noise_ratio: float = 0.5,
                 conflict_count: int = 1, task_rounds=(), gen=None) -> Rollout:
    config = SamplerConfig(noise_ratio=noise_ratio, seed=seed, conflict_count=conflict_count)
    world = new_world(load_persona_file(persona_path(persona_id)), seed=seed)
    return rollout(world, demo_pools(config), config, gen or StubGenerator(seed), rounds, task_rounds)
