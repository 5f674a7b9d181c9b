"""Runners turn a job into an external-program invocation and a verdict.

A server is configured with one runner name; the registry maps that name to
an instance at config-validation time.  Built-ins:

``generic_command``
    Runs ``runner.command_template`` (shell-style tokens with ``{source}``,
    ``{output}``, ``{case_id}``, ``{param.<key>}`` ... placeholders).
``mock``
    In-process test double with configurable sleep, exit code and output files.
"""

from __future__ import annotations

import os
import re
import shlex
import signal
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path

from .model import JobSpec

_PLACEHOLDER = re.compile(r"\{\{|\}\}|\{([^{}]*)\}")


class RunnerError(Exception):
    pass


class UnresolvedPlaceholder(RunnerError):
    def __init__(self, name: str):
        super().__init__(f"unresolved placeholder {{{name}}}")
        self.name = name


class UnknownRunner(RunnerError):
    pass


@dataclass(frozen=True)
class InvocationPlan:
    argv: tuple[str, ...]
    working_dir: str
    timeout: float | None = None
    env_additions: tuple[tuple[str, str], ...] = ()


@dataclass
class ExecRecord:
    exit_code: int | None
    stdout_path: Path
    stderr_path: Path
    duration: float
    timed_out: bool = False
    signal: int | None = None


@dataclass
class Verdict:
    succeeded: bool
    detail: str = ""


def job_fields(job: JobSpec) -> dict[str, str]:
    fields = {
        "job_id": job.job_id,
        "tool": job.tool,
        "source": job.source,
        "source_root": job.source_root,
        "output": job.output,
        "case_id": job.case_id,
        "evidence_name": job.evidence_name,
        "requested_by": job.requested_by,
    }
    fields.update({f"param.{k}": v for k, v in job.params})
    return fields


def substitute(token: str, fields: dict[str, str]) -> str:
    """Fill ``{name}`` placeholders inside one token; ``{{``/``}}`` are literal braces."""

    def repl(match: re.Match) -> str:
        text = match.group(0)
        if text == "{{":
            return "{"
        if text == "}}":
            return "}"
        name = match.group(1)
        if name not in fields:
            raise UnresolvedPlaceholder(name)
        return fields[name]

    return _PLACEHOLDER.sub(repl, token)


def split_list(value: str | None) -> list[str]:
    if not value:
        return []
    return [item.strip() for item in value.split(",") if item.strip()]


def parse_timeout(settings: dict[str, str]) -> float | None:
    raw = settings.get("timeout", "").strip()
    if not raw or raw.lower() == "none":
        return None
    value = float(raw)
    if value <= 0:
        raise ValueError("timeout must be positive")
    return value


class Runner:
    """Base class: ``plan`` is pure, ``execute`` runs it, ``check_result`` judges it."""

    name = ""

    def validate_settings(self, settings: dict[str, str]) -> None:
        parse_timeout(settings)
        for code in split_list(settings.get("ok_exit_codes")):
            int(code)
        if settings.get("min_output_files"):
            int(settings["min_output_files"])

    def plan(self, job: JobSpec, settings: dict[str, str]) -> InvocationPlan:
        raise NotImplementedError

    def execute(self, plan: InvocationPlan, capture_base: Path) -> ExecRecord:
        raise NotImplementedError

    def check_result(self, job: JobSpec, rec: ExecRecord, settings: dict[str, str]) -> Verdict:
        if rec.timed_out:
            return Verdict(False, f"timed out after {rec.duration:.1f}s")
        if rec.exit_code is None:
            return Verdict(False, f"killed by signal {rec.signal}")
        ok_codes = {int(c) for c in split_list(settings.get("ok_exit_codes"))} or {0}
        if rec.exit_code not in ok_codes:
            return Verdict(False, f"exit code {rec.exit_code} not in {sorted(ok_codes)}")

        output = Path(job.output)
        fields = job_fields(job)
        missing = []
        for template in self.required_outputs(settings):
            rel = substitute(template, fields)
            if not (output / rel).exists():
                missing.append(rel)
        if missing:
            return Verdict(False, "missing output " + ", ".join(missing))

        min_files = settings.get("min_output_files")
        if min_files:
            count = sum(1 for p in output.rglob("*") if p.is_file()) if output.is_dir() else 0
            if count < int(min_files):
                return Verdict(False, f"{count} output files, expected at least {min_files}")
        return Verdict(True, f"exit code {rec.exit_code}")

    def required_outputs(self, settings: dict[str, str]) -> list[str]:
        return split_list(settings.get("required_outputs"))


class GenericCommandRunner(Runner):
    name = "generic_command"

    def validate_settings(self, settings):
        super().validate_settings(settings)
        if not settings.get("command_template", "").strip():
            raise ValueError("runner.command_template is required")
        shlex.split(settings["command_template"])

    def plan(self, job, settings):
        fields = job_fields(job)
        # Split before substituting so values with spaces stay one argument.
        template = shlex.split(settings.get("command_template", ""))
        if not template:
            raise RunnerError("empty command_template")
        argv = tuple(substitute(token, fields) for token in template)
        working_dir = substitute(settings.get("working_dir", "{output}"), fields)
        env = tuple(
            (key[len("env."):], substitute(value, fields))
            for key, value in sorted(settings.items())
            if key.startswith("env.")
        )
        return InvocationPlan(argv, working_dir, parse_timeout(settings), env)

    def execute(self, plan, capture_base):
        return run_subprocess(plan, capture_base)


def run_subprocess(plan: InvocationPlan, capture_base: Path) -> ExecRecord:
    """Run ``plan.argv`` with stdout/stderr captured to ``<capture_base>.stdout/.stderr``.

    On timeout the whole process group is killed.
    """
    stdout_path = Path(f"{capture_base}.stdout")
    stderr_path = Path(f"{capture_base}.stderr")
    Path(plan.working_dir).mkdir(parents=True, exist_ok=True)
    env = dict(os.environ)
    env.update(plan.env_additions)
    started = time.monotonic()
    with open(stdout_path, "wb") as out, open(stderr_path, "wb") as err:
        proc = subprocess.Popen(
            list(plan.argv),
            cwd=plan.working_dir,
            stdin=subprocess.DEVNULL,
            stdout=out,
            stderr=err,
            env=env,
            start_new_session=True,
        )
        timed_out = False
        try:
            proc.wait(timeout=plan.timeout)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_group(proc)
            proc.wait()
        except BaseException:
            _kill_group(proc)
            proc.wait()
            raise
    duration = time.monotonic() - started
    code = proc.returncode
    if code is not None and code < 0:
        return ExecRecord(None, stdout_path, stderr_path, duration, timed_out, signal=-code)
    return ExecRecord(code, stdout_path, stderr_path, duration, timed_out)


def _kill_group(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        proc.kill()


class MockRunner(Runner):
    """Test double; behaviour comes from settings, overridable per job via params.

    Settings (all optional): ``behavior`` (succeed | fail | hang | crash),
    ``create`` (comma list of files written under the job output),
    ``sleep`` (seconds), ``exit_code``, ``timeout``, ``entry_log`` (file that
    receives one ``start``/``end`` line per execution).
    """

    name = "mock"

    def plan(self, job, settings):
        merged = dict(settings)
        merged.update({k: v for k, v in job.params if k in _MOCK_KEYS})
        argv = ("mock", merged.get("behavior", "succeed"))
        env = tuple(sorted((k, merged[k]) for k in _MOCK_KEYS if k in merged))
        env += (("job_id", job.job_id), ("source_root", job.source_root))
        return InvocationPlan(argv, job.output, parse_timeout(merged), env)

    def execute(self, plan, capture_base):
        opts = dict(plan.env_additions)
        behavior = plan.argv[1]
        stdout_path = Path(f"{capture_base}.stdout")
        stderr_path = Path(f"{capture_base}.stderr")
        started = time.monotonic()
        _log_entry(opts, "start")
        try:
            if behavior == "crash":
                raise RuntimeError("mock runner crashed")
            sleep = float(opts.get("sleep", "0"))
            timed_out = False
            if behavior == "hang":
                sleep = float(opts.get("sleep", "3600"))
                if plan.timeout is not None and plan.timeout < sleep:
                    sleep, timed_out = plan.timeout, True
            if sleep:
                time.sleep(sleep)
            output = Path(plan.working_dir)
            output.mkdir(parents=True, exist_ok=True)
            if behavior == "succeed" and not timed_out:
                for name in split_list(opts.get("create")):
                    target = output / name
                    target.parent.mkdir(parents=True, exist_ok=True)
                    target.write_text(f"{opts['job_id']}\n", encoding="utf-8")
            stdout_path.write_text(f"mock {behavior} {opts['job_id']}\n", encoding="utf-8")
            stderr_path.write_text("", encoding="utf-8")
        finally:
            _log_entry(opts, "end")
        if timed_out:
            return ExecRecord(None, stdout_path, stderr_path, time.monotonic() - started, True, signal.SIGKILL)
        default = "0" if behavior == "succeed" else "2"
        code = int(opts.get("exit_code", default))
        return ExecRecord(code, stdout_path, stderr_path, time.monotonic() - started)

    def required_outputs(self, settings):
        if "required_outputs" in settings:
            return split_list(settings["required_outputs"])
        return split_list(settings.get("create"))


_MOCK_KEYS = ("behavior", "create", "sleep", "exit_code", "timeout", "entry_log")


def _log_entry(opts: dict[str, str], event: str) -> None:
    path = opts.get("entry_log")
    if not path:
        return
    line = f"{time.time():.6f} {event} {opts['job_id']} {opts['source_root']} {os.getpid()}\n"
    # Single O_APPEND write so concurrent servers never interleave a line.
    fd = os.open(path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)
    try:
        os.write(fd, line.encode("utf-8"))
    finally:
        os.close(fd)


@dataclass
class RunnerRegistry:
    factories: dict[str, type[Runner]] = field(default_factory=dict)

    def register(self, cls: type[Runner]) -> type[Runner]:
        self.factories[cls.name] = cls
        return cls

    def names(self) -> list[str]:
        return sorted(self.factories)

    def resolve(self, name: str) -> Runner:
        try:
            return self.factories[name]()
        except KeyError:
            raise UnknownRunner(
                f"unknown runner {name!r}; available: {', '.join(self.names())}"
            ) from None


registry = RunnerRegistry()
registry.register(GenericCommandRunner)
registry.register(MockRunner)
