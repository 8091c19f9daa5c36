from collections import Counter

import pytest

from digiworld.demo import data_path
from digiworld.seedpool import (
    PoolConfigError,
    SamplerConfig,
    Sampler,
    SeedParseError,
    SeedValidationError,
    derive_rng,
    load_pools,
    parse_seed_task,
)

GOOD_SEED = """\
seed_id: X001
name: Sample
category: tracking
required_services: [gmail]
key_actions: [read]
difficulty: simple
"""

NOISE = """\
noise_id: Y001
pattern: browsing a recipe
trace_mode: ephemeral
services: [notes]
"""


def test_packaged_pools_load(pools):
    assert len(pools.tasks) >= 8 and len(pools.noise) >= 8
    m000 = next(s for s in pools.tasks if s.seed_id == "M000")
    assert m000.required_services == ("gmail", "calendar", "contacts")
    assert set(m000.optional_services) == {"notes", "kb", "todo"}
    n002 = next(n for n in pools.noise if n.noise_id == "N002")
    assert n002.trace_mode == "trace_leaving" and "notes" in n002.services


def test_parse_error_has_location():
    with pytest.raises(SeedParseError, match=r"bad\.seed:\d+:\d+"):
        parse_seed_task("seed_id: A\nname: [unclosed\n", "bad.seed")


def test_missing_field():
    with pytest.raises(SeedParseError, match="category"):
        parse_seed_task("seed_id: A\nname: B\n")


def test_unregistered_service_names_every_bad_seed():
    bad1 = GOOD_SEED.replace("X001", "X002").replace("[gmail]", "[fax]")
    bad2 = GOOD_SEED.replace("X001", "X003").replace("[gmail]", "[pager]")
    with pytest.raises(SeedValidationError) as exc:
        load_pools([("a", GOOD_SEED), ("b", bad1), ("c", bad2)], [("n", NOISE)])
    assert exc.value.seed_ids == ["X002", "X003"]


def test_empty_noise_pool_with_positive_ratio():
    with pytest.raises(PoolConfigError):
        load_pools([("a", GOOD_SEED)], [], SamplerConfig(noise_ratio=0.3))
    # no noise needed at ratio 0
    load_pools([("a", GOOD_SEED)], [], SamplerConfig(noise_ratio=0.0))


def test_ratio_range():
    with pytest.raises(PoolConfigError):
        SamplerConfig(noise_ratio=1.5)


def test_sampler_deterministic(pools):
    cfg = SamplerConfig(noise_ratio=0.5, seed=11)
    a = [Sampler(pools, cfg).sample(r) for r in range(1, 41)]
    s = Sampler(pools, cfg)
    b = [s.sample(r) for r in range(1, 41)]
    assert a == b


def test_coin_depends_only_on_seed_and_round(pools):
    cfg = SamplerConfig(noise_ratio=0.5, seed=2)
    s = Sampler(pools, cfg)
    expected = [derive_rng(2, "coin", r).random() < 0.5 for r in range(1, 60)]
    assert [s.is_noise_round(r) for r in range(1, 60)] == expected


def test_every_task_seed_once_per_epoch(pools):
    s = Sampler(pools, SamplerConfig(noise_ratio=0.0, seed=9))
    n = len(pools.tasks)
    draws = [s.sample(r).item.seed_id for r in range(1, 2 * n + 1)]
    assert Counter(draws[:n]) == Counter(t.seed_id for t in pools.tasks)
    assert Counter(draws[n:]) == Counter(t.seed_id for t in pools.tasks)


def test_extreme_ratios(pools):
    zero = Sampler(pools, SamplerConfig(noise_ratio=0.0, seed=1))
    one = Sampler(pools, SamplerConfig(noise_ratio=1.0, seed=1))
    assert not any(zero.sample(r).is_noise for r in range(1, 200))
    assert all(one.sample(r).is_noise for r in range(1, 200))


def test_rounds_start_at_one(pools):
    with pytest.raises(ValueError):
        Sampler(pools, SamplerConfig()).sample(0)


def test_load_from_directory():
    p = load_pools(data_path("seeds", "tasks"), data_path("seeds", "noise"), SamplerConfig())
    assert p.tasks and p.noise
