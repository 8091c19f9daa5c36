"""Command line entry point: simulate, generate-tasks, filter, validate, serve, evaluate, score, report."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path

from .generator import GeneratorSchemaError, GeneratorUnavailable, RemoteGenerator, StubGenerator
from .grader import JudgeCache, RunMatrix, RunRecord, aggregate, report as render_report
from .seedpool import PoolConfigError, SamplerConfig, SeedParseError, SeedValidationError, derive_rng, load_pools
from .synthesis import SchemaViolationError, rollout
from .taskgen import (
    ScoringPolicy,
    TaskInstance,
    auto_filter,
    make_instance,
    seed_for_round,
    validate_by_execution,
)
from .worldio import dump_yaml, load_persona_file, load_yaml, save_world
from .worldstate import Snapshot, WorldError, canonical_json, new_world

log = logging.getLogger("digiworld")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_GENERATION, EXIT_INFRA, EXIT_EMPTY = 0, 1, 2, 3, 4, 5


class CommandError(Exception):
    def __init__(self, code: int, kind: str, detail: str):
        super().__init__(detail)
        self.code, self.kind, self.detail = code, kind, detail


def _config_error(detail: str) -> CommandError:
    return CommandError(EXIT_CONFIG, "config", detail)


# ---------------------------------------------------------------------------
# suite configuration


@dataclass
class SuiteConfig:
    seed: int = 0
    personas: list[str] = field(default_factory=lambda: ["p01", "p02", "p03"])
    task_pool: str | None = None
    noise_pool: str | None = None
    rounds: int = 50
    noise_ratio: float = 0.5
    conflict_count: int = 1
    task_rounds: list[int] = field(default_factory=lambda: [20, 30, 40, 50])
    task_date: str | None = None
    generator: dict = field(default_factory=lambda: {"kind": "stub"})
    loading_mode: str = "full"
    k: int = 3
    max_turns: int = 30
    token_budget: int | None = None
    pass_threshold: float = 0.6
    outcome_weight: float = 0.7
    jobs: int = 4
    output: str = "out"

    @classmethod
    def load(cls, path: str | None, overrides: dict) -> SuiteConfig:
        data = {}
        if path:
            p = Path(path)
            if not p.exists():
                raise _config_error(f"suite file {path} not found")
            data = load_yaml(p) or {}
            if not isinstance(data, dict):
                raise _config_error("suite file must be a mapping")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise _config_error(f"unknown suite keys: {', '.join(sorted(unknown))}")
        data.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**data)
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.task_rounds and self.rounds < max(self.task_rounds):
            raise _config_error(f"rounds={self.rounds} is below the last task round {max(self.task_rounds)}")
        if self.loading_mode not in ("full", "lazy"):
            raise _config_error(f"loading_mode must be full or lazy, not {self.loading_mode!r}")
        if self.k < 1 or self.jobs < 1 or self.max_turns < 1:
            raise _config_error("k, jobs and max_turns must be positive")
        for p in (self.task_pool, self.noise_pool):
            if p is not None and not Path(p).exists():
                raise _config_error(f"pool path {p} not found")
        for ref in self.personas:
            if _persona_file(ref) is None:
                raise _config_error(f"persona {ref} is neither a file nor a packaged persona id")
        try:
            ScoringPolicy(self.pass_threshold, self.outcome_weight)
            SamplerConfig(self.noise_ratio, self.seed, self.conflict_count)
        except ValueError as exc:
            raise _config_error(str(exc)) from None
        if self.generator.get("kind", "stub") not in ("stub", "remote"):
            raise _config_error("generator.kind must be stub or remote")

    @property
    def policy(self) -> ScoringPolicy:
        return ScoringPolicy(self.pass_threshold, self.outcome_weight)

    def make_generator(self, label: str = "generator"):
        g = self.generator
        if g.get("kind", "stub") == "remote":
            return RemoteGenerator(g.get("url_env", "DIGIWORLD_GENERATOR_URL"),
                                   g.get("token_env", "DIGIWORLD_GENERATOR_TOKEN"))
        return StubGenerator(derive_rng(self.seed, label).randrange(2**31))


def _persona_file(ref: str) -> Path | None:
    from .demo import persona_path

    p = Path(ref)
    if p.suffix in (".yaml", ".yml") and p.exists():
        return p
    packaged = persona_path(ref)
    return packaged if packaged.exists() else None


# ---------------------------------------------------------------------------
# bundle layout


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(canonical_json(obj) + "\n", encoding="utf-8")


def snapshot_path(out: Path, persona_id: str, r: int) -> Path:
    return out / "snapshots" / persona_id / f"r{r:03d}.json"


def load_snapshots(out: Path) -> dict[str, Snapshot]:
    """All stored snapshots keyed by digest."""
    snaps = {}
    for p in sorted((out / "snapshots").glob("*/r*.json")):
        s = Snapshot.from_dict(json.loads(p.read_text(encoding="utf-8")))
        snaps[s.digest] = s
    return snaps


def write_instance(root: Path, inst: TaskInstance, snapshot_file: str | None = None) -> Path:
    d = root / inst.instance_id
    d.mkdir(parents=True, exist_ok=True)
    dump_yaml({"instance_id": inst.instance_id, "provenance": inst.provenance, "state_change": inst.state_change},
              d / "meta.yaml")
    dump_yaml(inst.query.to_dict(), d / "query.yaml")
    dump_yaml(inst.verifier.to_dict(), d / "verifier.yaml")
    dump_yaml(inst.reference.to_dict(), d / "reference.yaml")
    dump_yaml({"digest": inst.snapshot_digest, "round": inst.provenance.get("round"), "path": snapshot_file},
              d / "snapshot.yaml")
    if inst.filter_report is not None:
        dump_yaml(inst.filter_report.to_dict(), d / "filter.yaml")
    return d


def read_instance(d: Path) -> TaskInstance:
    meta = load_yaml(d / "meta.yaml")
    filt = load_yaml(d / "filter.yaml") if (d / "filter.yaml").exists() else None
    return TaskInstance.from_dict({
        **meta,
        "snapshot_digest": load_yaml(d / "snapshot.yaml")["digest"],
        "query": load_yaml(d / "query.yaml"),
        "verifier": load_yaml(d / "verifier.yaml"),
        "reference": load_yaml(d / "reference.yaml"),
        "filter_report": filt,
    })


def read_instances(root: Path) -> list[TaskInstance]:
    if not root.exists():
        return []
    return [read_instance(d) for d in sorted(root.iterdir()) if (d / "meta.yaml").exists()]


def _move(src: Path, dst_root: Path) -> Path:
    dst = dst_root / src.name
    dst_root.mkdir(parents=True, exist_ok=True)
    if dst.exists():
        shutil.rmtree(dst)
    shutil.move(str(src), str(dst))
    return dst


def _task_meta(inst: TaskInstance) -> dict:
    return {"instance_id": inst.instance_id, "round": inst.provenance.get("round"),
            "persona_id": inst.provenance.get("persona_id"), "seed_id": inst.provenance.get("seed_id"),
            "category": inst.query.category, "trigger": inst.query.trigger,
            "loading_mode": inst.query.loading_mode, "device_requirements": list(inst.query.device_requirements),
            "state_change": inst.state_change}


def write_manifest(out: Path, instances: list[TaskInstance]) -> None:
    dump_yaml({"instances": [_task_meta(i) for i in instances]}, out / "tasks" / "manifest.yaml")


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: SuiteConfig, out: Path) -> dict:
    from .demo import data_path

    sampler_cfg = SamplerConfig(cfg.noise_ratio, cfg.seed, cfg.conflict_count)
    try:
        pools = load_pools(cfg.task_pool or data_path("seeds", "tasks"), cfg.noise_pool or data_path("seeds", "noise"),
                           sampler_cfg)
    except (SeedParseError, SeedValidationError, PoolConfigError) as exc:
        raise _config_error(str(exc)) from None
    from datetime import date

    task_date = date.fromisoformat(cfg.task_date) if cfg.task_date else date(2026, 4, 1)
    manifest = {"seed": cfg.seed, "rounds": cfg.rounds, "task_rounds": sorted(cfg.task_rounds), "worlds": {}}
    for ref in cfg.personas:
        persona = load_persona_file(_persona_file(ref))
        world_seed = derive_rng(cfg.seed, "world", persona.persona_id).randrange(2**31)
        world = new_world(persona, seed=world_seed, task_date=task_date)
        pcfg = SamplerConfig(cfg.noise_ratio, world_seed, cfg.conflict_count)
        gen = cfg.make_generator(f"generator:{persona.persona_id}")
        try:
            result = rollout(world, pools, pcfg, gen, cfg.rounds, cfg.task_rounds)
        except (SchemaViolationError, GeneratorSchemaError, GeneratorUnavailable) as exc:
            raise CommandError(EXIT_GENERATION, "generation", f"{persona.persona_id}: {exc}") from None
        except WorldError as exc:
            raise CommandError(EXIT_GENERATION, "world", f"{persona.persona_id}: {exc}") from None
        for r, snap in result.snapshots.items():
            _write_json(snapshot_path(out, persona.persona_id, r), snap.to_dict())
        save_world(result.world, out / "worlds" / persona.persona_id,
                   {"snapshots": {r: d for r, d in result.digests().items()}})
        manifest["worlds"][persona.persona_id] = {
            "world_seed": world_seed,
            "final_digest": result.world.digest(),
            "snapshots": result.digests(),
            "history": [list(h) for h in result.history],
        }
    dump_yaml(manifest, out / "simulate.yaml")
    return manifest


def _require_simulation(out: Path) -> dict:
    path = out / "simulate.yaml"
    if not path.exists():
        raise _config_error(f"{path} missing; run simulate first")
    return load_yaml(path)


def cmd_generate(cfg: SuiteConfig, out: Path) -> list[TaskInstance]:
    sim = _require_simulation(out)
    cand_root = out / "candidates"
    if cand_root.exists():
        shutil.rmtree(cand_root)
    snaps = load_snapshots(out)
    instances, status = [], []
    for pid, info in sim["worlds"].items():
        gen = cfg.make_generator(f"taskgen:{pid}")
        history = [tuple(h) for h in info.get("history", [])]
        for r in sorted(cfg.task_rounds):
            digest = info["snapshots"].get(r)
            snap = snaps.get(digest)
            if snap is None:
                raise _config_error(f"snapshot for {pid} round {r} is missing")
            try:
                inst = make_instance(snap, gen, persona_id=pid, seed_id=seed_for_round(history, r),
                                     loading_mode=cfg.loading_mode, policy=cfg.policy)
            except (GeneratorSchemaError, GeneratorUnavailable, ValueError) as exc:
                status.append({"persona_id": pid, "round": r, "status": "error", "detail": str(exc)})
                continue
            write_instance(cand_root, inst, str(snapshot_path(out, pid, r).relative_to(out)))
            instances.append(inst)
            status.append({"persona_id": pid, "round": r, "status": "generated", "instance_id": inst.instance_id})
    dump_yaml({"rounds": status}, cand_root / "status.yaml")
    if not instances:
        raise CommandError(EXIT_EMPTY, "empty", "no task instances were generated")
    return instances


def cmd_filter(cfg: SuiteConfig, out: Path) -> list[TaskInstance]:
    snaps = load_snapshots(out)
    cand_root = out / "candidates"
    candidates = read_instances(cand_root)
    if not candidates:
        raise _config_error("no candidates; run generate-tasks first")
    gen = cfg.make_generator("judge")
    tasks_root, rejected_root = out / "tasks", out / "rejected"
    for root in (tasks_root, rejected_root):
        if root.exists():
            shutil.rmtree(root)
    accepted = []
    for inst in candidates:
        snap = snaps.get(inst.snapshot_digest)
        if snap is None:
            raise _config_error(f"snapshot {inst.snapshot_digest[:12]} for {inst.instance_id} missing")
        inst.filter_report = auto_filter(inst, snap, gen)
        src = write_instance(cand_root, inst)
        if inst.filter_report.accepted:
            shutil.copytree(src, tasks_root / inst.instance_id)
            accepted.append(inst)
        else:
            shutil.copytree(src, rejected_root / inst.instance_id)
    write_manifest(out, accepted)
    if not accepted:
        raise CommandError(EXIT_EMPTY, "empty", "every candidate was rejected")
    return accepted


def cmd_validate(cfg: SuiteConfig, out: Path) -> list[TaskInstance]:
    from .harness import RunConfig

    snaps = load_snapshots(out)
    tasks_root = out / "tasks"
    instances = read_instances(tasks_root)
    if not instances:
        raise _config_error("no accepted tasks; run filter first")
    gen = cfg.make_generator("judge")
    survivors, infra = [], 0
    for inst in instances:
        rc = RunConfig(loading_mode=inst.query.loading_mode, max_turns=cfg.max_turns, task_date=inst.query.task_date)
        verdict = validate_by_execution(inst, snaps[inst.snapshot_digest], gen, config=rc)
        d = tasks_root / inst.instance_id
        dump_yaml(verdict.to_dict(), d / "validation.yaml")
        if verdict.status == "pass":
            survivors.append(inst)
        elif verdict.status == "fail":
            dump_yaml({"instance_id": inst.instance_id, "reason": verdict.detail}, d / "review.yaml")
            _move(d, out / "quarantine")
        else:
            infra += 1
    write_manifest(out, survivors)
    if not survivors:
        if infra:
            raise CommandError(EXIT_INFRA, "infrastructure", f"{infra} validations hit infrastructure failures")
        raise CommandError(EXIT_EMPTY, "empty", "no instance survived validation")
    return survivors


def _adapter_factory(spec: str, cfg: SuiteConfig, out: Path):
    from .harness import CoinFlipAdapter, NoopAdapter, ReferenceAdapter, ReplayAdapter, SubprocessAdapter, Trajectory

    if spec == "reference":
        return lambda inst, i: ReferenceAdapter(inst)
    if spec == "noop":
        return lambda inst, i: NoopAdapter()
    if spec == "coinflip":
        return lambda inst, i: CoinFlipAdapter(inst, derive_rng(cfg.seed, "adapter", inst.instance_id, i)
                                               .randrange(2**31))
    if spec.startswith("replay:"):
        root = Path(spec.split(":", 1)[1])

        def replay(inst, i):
            path = root / inst.instance_id / f"run-{i}" / "trajectory.yaml"
            return ReplayAdapter(Trajectory.from_dict(load_yaml(path)))
        return replay
    if spec.startswith("cmd:"):
        argv = spec.split(":", 1)[1]
        return lambda inst, i: SubprocessAdapter(argv)
    raise _config_error(f"unknown adapter {spec!r}; use reference, noop, coinflip, replay:<dir> or cmd:<command>")


def _adapter_label(spec: str) -> str:
    return spec.split(":", 1)[0]


def cmd_evaluate(cfg: SuiteConfig, out: Path, adapter: str, label: str | None = None) -> Path:
    from .harness import InfrastructureFailure, RunConfig, execute

    factory = _adapter_factory(adapter, cfg, out)
    snaps = load_snapshots(out)
    instances = read_instances(out / "tasks")
    if not (out / "tasks" / "manifest.yaml").exists() or not instances:
        raise _config_error("no validated bundle; run validate first")
    manifest_ids = {m["instance_id"] for m in load_yaml(out / "tasks" / "manifest.yaml")["instances"]}
    instances = [i for i in instances if i.instance_id in manifest_ids]
    runs_root = out / "runs" / (label or _adapter_label(adapter))
    if runs_root.exists():
        shutil.rmtree(runs_root)
    gen = cfg.make_generator("judge")
    cache = JudgeCache()

    def one(job):
        inst, i = job
        rc = RunConfig(loading_mode=inst.query.loading_mode, max_turns=cfg.max_turns,
                       token_budget=cfg.token_budget, task_date=inst.query.task_date)
        d = runs_root / inst.instance_id / f"run-{i}"
        d.mkdir(parents=True, exist_ok=True)
        try:
            res = execute(inst, snaps[inst.snapshot_digest], factory(inst, i), rc, gen=gen, cache=cache)
        except InfrastructureFailure as exc:
            dump_yaml({"instance_id": inst.instance_id, "run": i, "infra_failure": True, "detail": str(exc),
                       "pass": False, "soft_score": 0.0}, d / "score.yaml")
            return
        dump_yaml(res.trajectory.to_dict(), d / "trajectory.yaml")
        dump_yaml([e.to_dict() for e in res.call_log], d / "call_log.yaml")
        dump_yaml({**res.score.to_dict(), "run": i, "infra_failure": False,
                   "tokens": {"input": res.trajectory.input_tokens, "output": res.trajectory.output_tokens}},
                  d / "score.yaml")

    jobs = [(inst, i) for inst in instances for i in range(cfg.k)]
    with ThreadPoolExecutor(max_workers=cfg.jobs) as pool:
        list(pool.map(one, jobs))
    dump_yaml({"adapter": adapter, "k": cfg.k, "tasks": {i.instance_id: _task_meta(i) for i in instances}},
              runs_root / "runs.yaml")
    return runs_root


def load_matrix(runs_root: Path) -> tuple[RunMatrix, int]:
    info = load_yaml(runs_root / "runs.yaml")
    k = int(info["k"])
    runs, meta = {}, {}
    for tid, m in info["tasks"].items():
        rows = []
        for i in range(k):
            path = runs_root / tid / f"run-{i}" / "score.yaml"
            s = load_yaml(path) if path.exists() else {"pass": False, "infra_failure": True}
            tok = s.get("tokens") or {}
            rows.append(RunRecord(bool(s.get("pass")), float(s.get("soft_score", 0.0)), int(tok.get("input", 0)),
                                  int(tok.get("output", 0)), bool(s.get("infra_failure"))))
        runs[tid], meta[tid] = rows, m
    return RunMatrix(runs, meta), k


def cmd_score(runs_root: Path, exclude_infra: bool = False) -> tuple[dict, int]:
    if not (runs_root / "runs.yaml").exists():
        raise _config_error(f"{runs_root} holds no evaluation runs")
    matrix, k = load_matrix(runs_root)
    metrics = aggregate(matrix, k, exclude_infra=exclude_infra)
    doc = metrics.to_dict()
    dump_yaml({**doc, "exclude_infra": exclude_infra}, runs_root / "metrics.yaml")
    code = EXIT_OK
    if len(matrix.runs) == 1 and k == 1:
        code = EXIT_OK if next(iter(matrix.runs.values()))[0].passed else EXIT_FAIL
    return doc, code


def cmd_report(runs_root: Path, exclude_infra: bool = False) -> str:
    if not (runs_root / "runs.yaml").exists():
        raise _config_error(f"{runs_root} holds no evaluation runs")
    matrix, k = load_matrix(runs_root)
    metrics = aggregate(matrix, k, exclude_infra=exclude_infra)
    text = render_report(metrics, matrix, title=f"Evaluation report: {runs_root.name}")
    (runs_root / "report.md").write_text(text, encoding="utf-8")
    return text


def cmd_serve(snapshot_file: Path, host: str, port: int, duration: float | None = None) -> None:
    from .backend import PortInUseError, start_run

    if not snapshot_file.exists():
        raise _config_error(f"snapshot {snapshot_file} not found")
    snap = Snapshot.from_dict(json.loads(snapshot_file.read_text(encoding="utf-8")))
    try:
        run = start_run(snap, (host, port))
    except PortInUseError as exc:
        raise CommandError(EXIT_INFRA, "infrastructure", str(exc)) from None
    print(json.dumps({"url": run.url, "tools": len(run.registry)}), flush=True)
    try:
        if duration is not None:
            time.sleep(duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        run.finish()


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="digiworld", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def suite_args(p):
        p.add_argument("--suite", help="suite YAML file (packaged demo defaults when omitted)")
        p.add_argument("--out", help="output root (overrides suite.output)")
        p.add_argument("--seed", type=int)
        p.add_argument("--jobs", type=int)

    p = sub.add_parser("simulate", help="roll out worlds and store snapshots")
    suite_args(p)
    p.add_argument("--rounds", type=int)
    p.add_argument("--noise-ratio", type=float)
    p.add_argument("--personas", nargs="+")
    p = sub.add_parser("generate-tasks", help="generate candidate task instances from snapshots")
    suite_args(p)
    p.add_argument("--loading-mode", choices=["full", "lazy"])
    for name, text in (("filter", "rule and judge filtering of candidates"),
                       ("validate", "run reference solutions and quarantine failures")):
        suite_args(sub.add_parser(name, help=text))
    p = sub.add_parser("serve", help="serve one snapshot's backend over HTTP")
    p.add_argument("snapshot")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=9100)
    p.add_argument("--duration", type=float, help="stop after this many seconds")
    p = sub.add_parser("evaluate", help="k runs per validated task with an adapter")
    suite_args(p)
    p.add_argument("--adapter", default="reference")
    p.add_argument("--label")
    p.add_argument("-k", type=int)
    p.add_argument("--max-turns", type=int)
    for name in ("score", "report"):
        p = sub.add_parser(name, help="aggregate run matrices" if name == "score" else "render breakdown tables")
        p.add_argument("runs", help="directory written by evaluate (out/runs/<label>)")
        p.add_argument("--exclude-infra", action="store_true",
                       help="drop tasks with infrastructure failures instead of counting them as fails")
    return parser


def _suite(args, **extra) -> tuple[SuiteConfig, Path]:
    overrides = {"output": args.out, "seed": args.seed, "jobs": getattr(args, "jobs", None), **extra}
    cfg = SuiteConfig.load(args.suite, overrides)
    return cfg, Path(cfg.output)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "simulate":
            cfg, out = _suite(args, rounds=args.rounds, noise_ratio=args.noise_ratio, personas=args.personas)
            m = cmd_simulate(cfg, out)
            print(json.dumps({pid: w["snapshots"] for pid, w in m["worlds"].items()}, indent=1))
        elif args.command == "generate-tasks":
            cfg, out = _suite(args, loading_mode=args.loading_mode)
            print(f"{len(cmd_generate(cfg, out))} candidates")
        elif args.command == "filter":
            cfg, out = _suite(args)
            print(f"{len(cmd_filter(cfg, out))} accepted")
        elif args.command == "validate":
            cfg, out = _suite(args)
            print(f"{len(cmd_validate(cfg, out))} validated")
        elif args.command == "serve":
            cmd_serve(Path(args.snapshot), args.host, args.port, args.duration)
        elif args.command == "evaluate":
            cfg, out = _suite(args, k=args.k, max_turns=args.max_turns)
            print(cmd_evaluate(cfg, out, args.adapter, args.label))
        elif args.command == "score":
            doc, code = cmd_score(Path(args.runs), args.exclude_infra)
            print(json.dumps(doc, indent=1))
            return code
        elif args.command == "report":
            print(cmd_report(Path(args.runs), args.exclude_infra), end="")
    except CommandError as exc:
        print(json.dumps({"error": exc.kind, "detail": exc.detail}), file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
