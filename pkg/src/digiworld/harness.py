"""Episode harness: workspace materialization, system prompts, the action loop and agent adapters.

Actions are plain dicts:

    {"type": "tool_call", "name": str, "args": {...}}
    {"type": "shell", "command": str}
    {"type": "final", "text": str}

An action may carry ``"usage": {"input": n, "output": m}`` to report real token
counts; otherwise the harness estimates four characters per token.
"""

from __future__ import annotations

import fnmatch
import hashlib
import json
import math
import os
import random
import re
import shlex
import shutil
import stat
import subprocess
import tempfile
from dataclasses import dataclass, field
from datetime import date
from importlib import resources
from pathlib import Path, PurePosixPath

from .backend import BackendRun, ToolRegistry, render_tool_spec
from .worldstate import WorldState, canonical_json, logged_services, render_service_log, render_system_log

WORKSPACE = "/workspace"
LOG_DIR = "logs/services"
META_TOOL = "load_skill"
TERMINATIONS = ("final", "turn_limit", "budget", "error")


class HarnessError(Exception):
    pass


class InfrastructureFailure(HarnessError):
    """The backend or harness broke; the episode says nothing about the agent."""


class UnknownToolError(HarnessError):
    pass


def default_heartbeat_prompt() -> str:
    return resources.files("digiworld").joinpath("data/heartbeat.txt").read_text(encoding="utf-8").strip()


@dataclass
class RunConfig:
    loading_mode: str = "full"
    max_turns: int = 30
    token_budget: int | None = None
    task_date: date | None = None
    observation_byte_limit: int = 16_000
    heartbeat_prompt: str | None = None

    def __post_init__(self):
        if self.loading_mode not in ("full", "lazy"):
            raise ValueError(f"loading_mode must be full or lazy, not {self.loading_mode!r}")
        if self.max_turns < 1:
            raise ValueError("max_turns must be at least 1")


# ---------------------------------------------------------------------------
# workspace


@dataclass
class Workspace:
    root: Path
    files: list[str]
    owned: bool = False

    def host_path(self, virtual: str) -> Path:
        rel = PurePosixPath(virtual).relative_to(WORKSPACE)
        return self.root.joinpath(*rel.parts)

    def cleanup(self) -> None:
        if self.owned and self.root.exists():
            for p in self.root.rglob("*"):
                os.chmod(p, stat.S_IRWXU)
            shutil.rmtree(self.root)


def materialize_workspace(world: WorldState, root: str | Path | None = None) -> Workspace:
    """Write one read-only markdown activity log per service that has entries."""
    owned = root is None
    base = Path(tempfile.mkdtemp(prefix="dw-ws-")) if owned else Path(root)
    logs = base / LOG_DIR
    logs.mkdir(parents=True, exist_ok=True)
    files = []
    for service in logged_services(world):
        text = render_service_log(world, service)
        if not text:
            continue
        path = logs / f"{service}_activity.md"
        path.write_text(text, encoding="utf-8")
        os.chmod(path, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
        files.append(f"{WORKSPACE}/{LOG_DIR}/{service}_activity.md")
    system = render_system_log(world)
    if system:
        path = base / "logs" / "system_activity.md"
        path.write_text(system, encoding="utf-8")
        os.chmod(path, stat.S_IRUSR | stat.S_IRGRP | stat.S_IROTH)
    return Workspace(base, files, owned)


# ---------------------------------------------------------------------------
# prompts


def load_skill(tool_name: str, registry: ToolRegistry) -> str:
    spec = registry.get(tool_name)
    if spec is None:
        raise UnknownToolError(f"unknown tool {tool_name!r}")
    return render_tool_spec(spec)


def _log_lines(workspace_files: list[str]) -> list[str]:
    lines = ["## Activity logs", "The user's activity history is stored as files:", f"- {WORKSPACE}/{LOG_DIR}/"]
    if workspace_files:
        lines.append("- one log per app:")
        for f in workspace_files:
            svc = PurePosixPath(f).name[: -len("_activity.md")]
            lines.append(f"- {f} ({svc})")
    return lines


def build_system_prompt(instance, config: RunConfig, registry: ToolRegistry, workspace_files: list[str]) -> str:
    """Pure function of its inputs; carries exactly one ``Date:`` line."""
    task_date = config.task_date or instance.query.task_date
    lines = [
        "You are a personal assistant working inside the user's digital environment.",
        "Act through the tools below and the shell; finish with a message to the user.",
        "",
        "## Environment",
        f"Shell: sandboxed (ls, cat, head, tail, grep, wc, find, pwd, echo) - Working directory: {WORKSPACE}",
        f"Date: {task_date.isoformat()}",
        "",
        "## Tools",
        "Tool names are case-sensitive; call them exactly as written.",
    ]
    if config.loading_mode == "full":
        lines.append("")
        for name in registry.names():
            lines.append(render_tool_spec(registry.get(name)).rstrip("\n"))
    else:
        lines.append(f"Before calling a tool, fetch its full specification with {META_TOOL}(tool_name).")
        lines.append(f"- {META_TOOL}: Return the full specification of one tool by tool_name")
        for name in registry.names():
            lines.append(f"- {name}: {registry.get(name).description}")
    lines.append("")
    lines += _log_lines(workspace_files)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# sandboxed shell


class Shell:
    """A handful of read-only commands confined to the workspace root."""

    COMMANDS = ("ls", "cat", "head", "tail", "grep", "wc", "find", "pwd", "echo")

    def __init__(self, root: Path):
        self.root = root.resolve()

    def _resolve(self, arg: str) -> Path:
        p = PurePosixPath(arg)
        if not p.is_absolute():
            p = PurePosixPath(WORKSPACE) / p
        parts = []
        for part in p.parts[1:]:
            if part == "..":
                if parts:
                    parts.pop()
            elif part != ".":
                parts.append(part)
        if parts[:1] != ["workspace"]:
            raise PermissionError(f"{arg}: outside {WORKSPACE}")
        host = self.root.joinpath(*parts[1:]).resolve()
        if host != self.root and self.root not in host.parents:
            raise PermissionError(f"{arg}: outside {WORKSPACE}")
        return host

    def _virtual(self, host: Path) -> str:
        rel = host.relative_to(self.root)
        return WORKSPACE + ("/" + rel.as_posix() if rel.parts else "")

    def run(self, command: str) -> str:
        if any(tok in command for tok in ("|", ">", "<", ";", "&", "`", "$(")):
            return "error: pipes, redirection and command chaining are not supported"
        try:
            argv = shlex.split(command)
        except ValueError as exc:
            return f"error: {exc}"
        if not argv:
            return ""
        cmd, args = argv[0], argv[1:]
        if cmd not in self.COMMANDS:
            return f"error: command not found: {cmd}"
        try:
            return getattr(self, f"_cmd_{cmd}")(args)
        except (PermissionError, FileNotFoundError, IsADirectoryError, NotADirectoryError) as exc:
            return f"{cmd}: {exc}"

    def _read(self, arg: str) -> str:
        path = self._resolve(arg)
        if not path.exists():
            raise FileNotFoundError(f"{arg}: No such file or directory")
        if path.is_dir():
            raise IsADirectoryError(f"{arg}: Is a directory")
        return path.read_text(encoding="utf-8")

    def _cmd_pwd(self, args):
        return WORKSPACE

    def _cmd_echo(self, args):
        return " ".join(args)

    def _cmd_ls(self, args):
        targets = [a for a in args if not a.startswith("-")] or ["."]
        out = []
        for t in targets:
            p = self._resolve(t)
            if not p.exists():
                raise FileNotFoundError(f"{t}: No such file or directory")
            if p.is_dir():
                names = sorted(c.name + ("/" if c.is_dir() else "") for c in p.iterdir())
                out.append("\n".join(names))
            else:
                out.append(self._virtual(p))
        return "\n".join(out)

    def _cmd_cat(self, args):
        return "".join(self._read(a) for a in args if not a.startswith("-"))

    def _head_tail(self, args, tail: bool):
        n, files, it = 10, [], iter(args)
        for a in it:
            if a == "-n":
                n = int(next(it, "10"))
            elif re.fullmatch(r"-\d+", a):
                n = int(a[1:])
            else:
                files.append(a)
        out = []
        for f in files:
            lines = self._read(f).splitlines()
            out.extend(lines[-n:] if tail and n else lines[:n] if not tail else [])
        return "\n".join(out)

    def _cmd_head(self, args):
        return self._head_tail(args, False)

    def _cmd_tail(self, args):
        return self._head_tail(args, True)

    def _cmd_wc(self, args):
        out = []
        for f in (a for a in args if not a.startswith("-")):
            text = self._read(f)
            out.append(f"{len(text.splitlines())} {len(text.split())} {len(text.encode())} {f}")
        return "\n".join(out)

    def _cmd_grep(self, args):
        flags = {a for a in args if a.startswith("-")}
        rest = [a for a in args if not a.startswith("-")]
        if not rest:
            return "grep: missing pattern"
        pattern, targets = rest[0], rest[1:] or ["."]
        rx = re.compile(pattern, re.IGNORECASE if "-i" in flags else 0)
        files = []
        for t in targets:
            p = self._resolve(t)
            files.extend(sorted(x for x in p.rglob("*") if x.is_file()) if p.is_dir() else [p])
        out = []
        for f in files:
            for i, line in enumerate(f.read_text(encoding="utf-8").splitlines(), 1):
                if rx.search(line):
                    prefix = f"{self._virtual(f)}:" if len(files) > 1 else ""
                    out.append(f"{prefix}{i}:{line}" if "-n" in flags else f"{prefix}{line}")
        return "\n".join(out)

    def _cmd_find(self, args):
        base = args[0] if args and not args[0].startswith("-") else "."
        name = args[args.index("-name") + 1] if "-name" in args and args.index("-name") + 1 < len(args) else "*"
        root = self._resolve(base)
        hits = [root] + sorted(root.rglob("*")) if root.is_dir() else [root]
        return "\n".join(self._virtual(h) for h in hits if fnmatch.fnmatch(h.name, name))


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    steps: list[dict] = field(default_factory=list)
    final_message: str | None = None
    input_tokens: int = 0
    output_tokens: int = 0
    turn_count: int = 0
    termination: str = "final"
    error: str | None = None
    first_message: str = ""

    def actions(self) -> list[dict]:
        acts = [s["action"] for s in self.steps]
        if self.final_message is not None:
            acts.append({"type": "final", "text": self.final_message})
        return acts

    def to_dict(self) -> dict:
        return {
            "first_message": self.first_message,
            "steps": self.steps,
            "final_message": self.final_message,
            "tokens": {"input": self.input_tokens, "output": self.output_tokens},
            "turn_count": self.turn_count,
            "termination": self.termination,
            "error": self.error,
        }

    @classmethod
    def from_dict(cls, d: dict) -> Trajectory:
        tok = d.get("tokens") or {}
        return cls(list(d.get("steps") or []), d.get("final_message"), int(tok.get("input", 0)),
                   int(tok.get("output", 0)), int(d.get("turn_count", 0)), d.get("termination", "final"),
                   d.get("error"), d.get("first_message", ""))

    def digest(self) -> str:
        body = {"steps": self.steps, "final_message": self.final_message, "termination": self.termination}
        return hashlib.sha256(canonical_json(body).encode()).hexdigest()


def _estimate(text: str) -> int:
    return math.ceil(len(text) / 4)


def _truncate(text: str, limit: int) -> str:
    data = text.encode()
    if limit <= 0 or len(data) <= limit:
        return text
    kept = data[:limit].decode(errors="ignore")
    return f"{kept}\n[truncated: {len(data) - len(kept.encode())} more bytes]"


# ---------------------------------------------------------------------------
# episode loop


def _observation_for(action, backend: BackendRun, shell: Shell, registry: ToolRegistry,
                     config: RunConfig) -> dict:
    kind = action.get("type")
    if kind == "shell":
        return {"type": "shell_output", "content": _truncate(shell.run(str(action.get("command", ""))),
                                                             config.observation_byte_limit)}
    if kind != "tool_call":
        return {"type": "error", "content": f"unsupported action type {kind!r}"}
    name, args = action.get("name"), action.get("args", {})
    if name == META_TOOL:
        target = args.get("tool_name") if isinstance(args, dict) else None
        try:
            content = load_skill(target, registry)
        except UnknownToolError as exc:
            content = json.dumps({"error": str(exc)})
        return {"type": "tool_result", "name": name, "content": content}
    try:
        resp = backend.handle_call(name, args)
    except Exception as exc:  # backend faults are not the agent's fault
        raise InfrastructureFailure(f"backend failed on {name}: {exc}") from exc
    content = json.dumps(resp, ensure_ascii=False, sort_keys=True)
    return {"type": "tool_result", "name": name, "content": _truncate(content, config.observation_byte_limit)}


def run_episode(instance, adapter, config: RunConfig, backend: BackendRun, workspace: Workspace) -> Trajectory:
    registry = backend.registry
    prompt = build_system_prompt(instance, config, registry, workspace.files)
    if instance.query.trigger == "heartbeat":
        first = config.heartbeat_prompt or default_heartbeat_prompt()
    else:
        first = instance.query.text
    traj = Trajectory(first_message=first)
    shell = Shell(workspace.root)
    tool_view = registry.names() if config.loading_mode == "full" else [META_TOOL, *registry.names()]
    try:
        adapter.begin(prompt, tool_view)
    except Exception as exc:
        traj.termination, traj.error = "error", f"adapter begin failed: {exc}"
        return traj
    traj.input_tokens += _estimate(prompt)
    observation = {"type": "user", "content": first}
    while True:
        if traj.turn_count >= config.max_turns:
            traj.termination = "turn_limit"
            return traj
        traj.input_tokens += _estimate(observation.get("content", ""))
        try:
            action = adapter.step(observation)
        except Exception as exc:
            traj.termination, traj.error = "error", f"adapter failed: {exc}"
            return traj
        if not isinstance(action, dict):
            traj.termination, traj.error = "error", f"adapter returned {type(action).__name__}, not an action"
            return traj
        traj.turn_count += 1
        usage = action.get("usage")
        action = {k: v for k, v in action.items() if k != "usage"}
        if isinstance(usage, dict):
            traj.input_tokens += int(usage.get("input", 0))
            traj.output_tokens += int(usage.get("output", 0))
        else:
            traj.output_tokens += _estimate(json.dumps(action, ensure_ascii=False, sort_keys=True))
        if action.get("type") == "final":
            traj.final_message = str(action.get("text") or "")
            traj.termination = "final"
            return traj
        observation = _observation_for(action, backend, shell, registry, config)
        traj.steps.append({"action": action, "observation": observation})
        if config.token_budget is not None and traj.input_tokens + traj.output_tokens > config.token_budget:
            traj.termination = "budget"
            return traj


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    call_log: list
    final_db: object
    score: object | None = None


def execute(instance, snapshot, adapter, config: RunConfig | None = None, *, gen=None, cache=None,
            grade_it: bool = True) -> EpisodeResult:
    """Fresh backend + workspace, one episode, grading. Infrastructure faults propagate."""
    from .backend import BackendError, start_run
    from .grader import grade

    config = config or RunConfig(loading_mode=instance.query.loading_mode, task_date=instance.query.task_date)
    try:
        backend = start_run(snapshot, expected_digest=instance.snapshot_digest)
    except (BackendError, OSError) as exc:
        raise InfrastructureFailure(str(exc)) from exc
    workspace = materialize_workspace(snapshot.world())
    try:
        traj = run_episode(instance, adapter, config, backend, workspace)
    finally:
        backend.finish()
        workspace.cleanup()
        close = getattr(adapter, "close", None)
        if close:
            close()
    final_db = backend.export_final_state()
    log = backend.call_log()
    report = grade(instance, traj, final_db, log, gen, cache=cache) if grade_it else None
    return EpisodeResult(traj, log, final_db, report)


# ---------------------------------------------------------------------------
# adapters


class AgentAdapter:
    def begin(self, system_prompt: str, tools: list[str]) -> None:
        self.system_prompt = system_prompt
        self.tools = tools

    def step(self, observation: dict) -> dict:
        raise NotImplementedError


class ScriptedAdapter(AgentAdapter):
    """Emits a fixed action list, then an empty final message."""

    def __init__(self, actions: list[dict]):
        self._actions = list(actions)
        self._i = 0
        self.observations: list[dict] = []

    def step(self, observation):
        self.observations.append(observation)
        if self._i < len(self._actions):
            self._i += 1
            return dict(self._actions[self._i - 1])
        return {"type": "final", "text": ""}


def reference_actions(instance) -> list[dict]:
    acts = [{"type": "tool_call", "name": s.tool, "args": dict(s.args)} for s in instance.reference.steps]
    acts.append({"type": "final", "text": instance.reference.expected_text})
    return acts


class ReferenceAdapter(ScriptedAdapter):
    """Executes the instance's reference solution literally."""

    def __init__(self, instance):
        super().__init__(reference_actions(instance))


class NoopAdapter(AgentAdapter):
    def step(self, observation):
        return {"type": "final", "text": "Nothing to do."}


class CoinFlipAdapter(AgentAdapter):
    """Runs the reference solution with probability ``p``, otherwise gives up at once."""

    def __init__(self, instance, seed: int, p: float = 0.5):
        heads = random.Random(seed).random() < p
        self._inner = ReferenceAdapter(instance) if heads else NoopAdapter()
        self.heads = heads

    def begin(self, system_prompt, tools):
        self._inner.begin(system_prompt, tools)

    def step(self, observation):
        return self._inner.step(observation)


class ReplayAdapter(ScriptedAdapter):
    def __init__(self, trajectory: Trajectory):
        super().__init__(trajectory.actions())


class SubprocessAdapter(AgentAdapter):
    """Line-delimited JSON over stdio.

    The child first receives ``{"type": "begin", "system_prompt", "tools"}``, then
    one observation object per line; it answers every line after ``begin``
    with one action object.
    """

    def __init__(self, argv: list[str] | str, timeout: float = 300.0):
        self.argv = shlex.split(argv) if isinstance(argv, str) else list(argv)
        self.timeout = timeout
        self.proc: subprocess.Popen | None = None

    def _send(self, obj) -> None:
        self.proc.stdin.write(json.dumps(obj, ensure_ascii=False) + "\n")
        self.proc.stdin.flush()

    def begin(self, system_prompt, tools):
        self.proc = subprocess.Popen(self.argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        self._send({"type": "begin", "system_prompt": system_prompt, "tools": tools})

    def step(self, observation):
        self._send(observation)
        line = self.proc.stdout.readline()
        if not line:
            raise HarnessError(f"agent process exited with {self.proc.poll()}")
        return json.loads(line)

    def close(self):
        if self.proc is not None:
            try:
                self.proc.stdin.close()
                self.proc.wait(timeout=5)
            except Exception:
                self.proc.kill()
            self.proc = None


__all__ = [
    "AgentAdapter",
    "CoinFlipAdapter",
    "EpisodeResult",
    "InfrastructureFailure",
    "NoopAdapter",
    "ReferenceAdapter",
    "ReplayAdapter",
    "RunConfig",
    "ScriptedAdapter",
    "Shell",
    "SubprocessAdapter",
    "Trajectory",
    "Workspace",
    "build_system_prompt",
    "execute",
    "load_skill",
    "materialize_workspace",
    "run_episode",
]
