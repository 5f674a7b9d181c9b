"""Queue server: claim, lock, run and finalize job files.

All coordination between servers happens on disk.  A job is claimed by an
atomic rename from ``queue/`` into ``processing/<server_id>/``; a source is
locked by exclusively creating ``.evidence.lock`` in its ``source_root``.
"""

from __future__ import annotations

import logging
import os
import threading
import time
from dataclasses import dataclass
from datetime import datetime
from pathlib import Path

from . import kvfile
from .model import (
    JOB_SUFFIX,
    LAYOUT_DIRS,
    LOCK_NAME,
    JobFileError,
    JobSpec,
    QueueLayout,
    ServerConfig,
    SourceLock,
    format_utc,
    init_queue_layout,
    job_filename,
    new_job_id,
    next_seq,
    parse_job_file,
    parse_utc,
    render_job_file,
    utc_now,
)
from .runners import Runner, RunnerError, registry

log = logging.getLogger("evidenceflow.server")

SUCCEEDED, FAILED, LOCKED = "succeeded", "failed", "locked"
SIDECAR_SUFFIXES = (".result", ".stdout", ".stderr")


class ConfigError(ValueError):
    pass


class AlreadyLocked(Exception):
    def __init__(self, path: Path, holder: str, job_id: str, acquired_utc: str):
        super().__init__(f"{path} held by {holder or '?'} (job {job_id or '?'})")
        self.path = path
        self.holder = holder
        self.job_id = job_id
        self.acquired_utc = acquired_utc


class HolderMismatch(Exception):
    pass


@dataclass
class ClaimedJob:
    file_path: Path
    claimed_utc: datetime
    job: JobSpec | None = None
    parse_error: str | None = None

    @property
    def filename(self) -> str:
        return self.file_path.name


@dataclass
class JobOutcome:
    kind: str  # succeeded | failed | locked
    detail: str
    started_utc: datetime
    finished_utc: datetime


def log_event(level: int, server_id: str, job_id: str, event: str) -> None:
    log.log(level, "%s %s %s", server_id, job_id or "-", event)


# -- config -----------------------------------------------------------------

SERVER_KEYS = {"server_id", "queue_root", "poll_interval", "runner", "lock_policy"}


def load_server_config(path: str | Path, server_id: str | None = None) -> ServerConfig:
    """Read and validate a server config file; errors carry line numbers."""
    try:
        sections = kvfile.load_sections(path)
    except kvfile.KVSyntaxError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    if len(sections) > 1:
        raise ConfigError(f"{path}: line {sections[1].line_no}: sections are not allowed here")
    top = sections[0]
    settings = {}
    for entry in top.entries:
        if entry.key.startswith("runner."):
            settings[entry.key[len("runner."):]] = entry.value
        elif entry.key not in SERVER_KEYS:
            raise ConfigError(f"{path}: line {entry.line_no}: unknown key {entry.key!r}")

    def need(key):
        value = top.get(key)
        if not value:
            raise ConfigError(f"{path}: missing {key}")
        return value

    try:
        poll = float(top.get("poll_interval", "5"))
    except ValueError:
        raise ConfigError(f"{path}: line {top.line_of('poll_interval')}: poll_interval is not a number") from None
    config = ServerConfig(
        server_id=server_id or need("server_id"),
        queue_root=Path(need("queue_root")),
        runner=need("runner"),
        poll_interval=poll,
        runner_settings=settings,
        lock_policy=top.get("lock_policy", "exclusive"),
    )
    try:
        validate_config(config)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config


def validate_config(config: ServerConfig) -> Runner:
    """Check a config and return its resolved runner instance."""
    if not config.poll_interval > 0:
        raise ConfigError("poll_interval must be > 0")
    if config.lock_policy not in ("exclusive", "shared"):
        raise ConfigError(f"lock_policy must be exclusive or shared, got {config.lock_policy!r}")
    if not config.server_id or "/" in config.server_id or config.server_id.startswith("."):
        raise ConfigError(f"bad server_id {config.server_id!r}")
    try:
        runner = registry.resolve(config.runner)
        runner.validate_settings(config.runner_settings)
    except (RunnerError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    return runner


# -- submitting -------------------------------------------------------------

def enqueue(layout: QueueLayout, job: JobSpec) -> Path:
    """Write ``job`` into ``queue/``; it becomes visible only once complete."""
    final = layout.queue / job_filename(job)
    tmp = layout.queue / f".{final.name}.{os.getpid()}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(render_job_file(job))
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, final)
    return final


def submit(layout: QueueLayout, **fields) -> tuple[JobSpec, Path]:
    """Build a JobSpec with a fresh id, timestamp and sequence number, then enqueue it."""
    if not layout.is_initialized():
        raise FileNotFoundError(f"{layout.root} is not an initialized queue")
    fields.setdefault("job_id", new_job_id())
    fields.setdefault("created_utc", utc_now())
    fields.setdefault("source_root", str(Path(fields["source"]).parent))
    fields.setdefault("case_id", "")
    fields.setdefault("evidence_name", "")
    fields.setdefault("requested_by", "")
    fields["seq"] = next_seq(layout)
    job = JobSpec(**fields)
    return job, enqueue(layout, job)


# -- claiming ---------------------------------------------------------------

def queued_files(folder: Path) -> list[Path]:
    try:
        names = os.listdir(folder)
    except FileNotFoundError:
        return []
    return [folder / n for n in sorted(names) if n.endswith(JOB_SUFFIX) and not n.startswith(".")]


def processing_dir(layout: QueueLayout, server_id: str) -> Path:
    return layout.processing / server_id


def claim_next(layout: QueueLayout, server_id: str) -> ClaimedJob | None:
    """Move the oldest queued job into this server's processing folder.

    Losing a rename race to another server just moves on to the next file.
    """
    target_dir = processing_dir(layout, server_id)
    target_dir.mkdir(parents=True, exist_ok=True)
    for path in queued_files(layout.queue):
        target = target_dir / path.name
        try:
            os.rename(path, target)
        except FileNotFoundError:
            continue
        claimed = ClaimedJob(target, utc_now())
        try:
            claimed.job = parse_job_file(target.read_text(encoding="utf-8"))
        except (JobFileError, UnicodeDecodeError) as exc:
            claimed.parse_error = f"unparseable job file: {exc}"
        return claimed
    return None


# -- source locks -----------------------------------------------------------

def _read_lock(path: Path) -> dict[str, str]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return {}
    out = {}
    for line in text.splitlines():
        key, _, value = line.partition("=")
        out[key] = value
    return out


def acquire_lock(source_root: str | Path, server_id: str, job_id: str) -> SourceLock:
    path = Path(source_root) / LOCK_NAME
    now = utc_now()
    try:
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    except FileExistsError:
        info = _read_lock(path)
        raise AlreadyLocked(path, info.get("holder", ""), info.get("job_id", ""), info.get("acquired_utc", "")) from None
    try:
        body = kvfile.render([("holder", server_id), ("job_id", job_id), ("acquired_utc", format_utc(now))])
        os.write(fd, body.encode("utf-8"))
        os.fsync(fd)
    finally:
        os.close(fd)
    return SourceLock(path, server_id, job_id, now)


def release_lock(lock: SourceLock) -> None:
    """Remove a lock this server holds; a missing file only logs a warning."""
    if not lock.path.exists():
        log.warning("lock %s already gone", lock.path)
        return
    info = _read_lock(lock.path)
    if info.get("holder") != lock.holder or info.get("job_id") != lock.job_id:
        raise HolderMismatch(
            f"{lock.path} is held by {info.get('holder')!r}/{info.get('job_id')!r}, "
            f"not {lock.holder!r}/{lock.job_id!r}"
        )
    try:
        lock.path.unlink()
    except FileNotFoundError:
        log.warning("lock %s already gone", lock.path)


def break_lock(source_root: str | Path) -> dict[str, str] | None:
    """Remove whatever lock sits in ``source_root``; returns its contents, or None if unlocked."""
    path = Path(source_root) / LOCK_NAME
    info = _read_lock(path)
    try:
        path.unlink()
    except FileNotFoundError:
        return None
    return info


# -- executing and finalizing -------------------------------------------------

def execute_claimed(claimed: ClaimedJob, runner: Runner, config: ServerConfig) -> JobOutcome:
    started = utc_now()
    if claimed.job is None:
        return JobOutcome(FAILED, claimed.parse_error or "unparseable job file", started, utc_now())
    job = claimed.job
    lock = None
    if config.lock_policy == "exclusive":
        try:
            lock = acquire_lock(job.source_root, config.server_id, job.job_id)
        except AlreadyLocked as exc:
            return JobOutcome(LOCKED, f"source locked by {exc.holder or '?'} (job {exc.job_id or '?'})", started, utc_now())
        except OSError as exc:
            return JobOutcome(FAILED, f"cannot lock {job.source_root}: {exc}", started, utc_now())
    try:
        capture_base = claimed.file_path.parent / claimed.filename
        try:
            plan = runner.plan(job, config.runner_settings)
            record = runner.execute(plan, capture_base)
            verdict = runner.check_result(job, record, config.runner_settings)
        except Exception as exc:  # a crashing tool must not take the server down
            log.exception("runner %s crashed on %s", runner.name, job.job_id)
            return JobOutcome(FAILED, f"runner error: {type(exc).__name__}: {exc}", started, utc_now())
        kind = SUCCEEDED if verdict.succeeded else FAILED
        return JobOutcome(kind, verdict.detail, started, utc_now())
    finally:
        if lock is not None:
            try:
                release_lock(lock)
            except HolderMismatch as exc:
                log.error("%s", exc)


def _result_text(claimed: ClaimedJob, outcome: JobOutcome, server_id: str) -> str:
    return kvfile.render([
        ("outcome", outcome.kind),
        ("detail", " ".join(outcome.detail.split())),
        ("job_id", claimed.job.job_id if claimed.job else ""),
        ("server_id", server_id),
        ("claimed_utc", format_utc(claimed.claimed_utc)),
        ("started_utc", format_utc(outcome.started_utc)),
        ("finished_utc", format_utc(outcome.finished_utc)),
    ])


def finalize(claimed: ClaimedJob, outcome: JobOutcome, layout: QueueLayout, server_id: str = "") -> Path:
    """Move the job file (and its captures) to the folder named by the outcome.

    The ``.result`` sidecar is written before the job file moves, so a job
    seen in a terminal folder always has its result beside it.
    """
    dest_dir = layout.folder(outcome.kind)
    name = claimed.filename

    def attempt():
        tmp = dest_dir / f".{name}.result.tmp"
        tmp.write_text(_result_text(claimed, outcome, server_id), encoding="utf-8")
        os.replace(tmp, dest_dir / f"{name}.result")
        for suffix in (".stdout", ".stderr"):
            capture = claimed.file_path.parent / f"{name}{suffix}"
            if capture.exists():
                os.replace(capture, dest_dir / f"{name}{suffix}")
        dest = dest_dir / name
        os.replace(claimed.file_path, dest)
        return dest

    try:
        return attempt()
    except OSError as exc:
        log.warning("finalize of %s failed (%s); retrying once", name, exc)
        time.sleep(0.1)
        try:
            return attempt()
        except OSError:
            log.critical("finalize of %s failed twice; job left in %s", name, claimed.file_path.parent)
            raise


def _move_jobs(src_dir: Path, layout: QueueLayout) -> int:
    """Move job files back to ``queue/``, discarding their sidecars."""
    count = 0
    for path in queued_files(src_dir):
        try:
            os.rename(path, layout.queue / path.name)
        except FileNotFoundError:
            continue
        count += 1
        for suffix in SIDECAR_SUFFIXES:
            (src_dir / f"{path.name}{suffix}").unlink(missing_ok=True)
    return count


def requeue_locked(layout: QueueLayout) -> int:
    """Put every locked job back into ``queue/`` under its original name (same FIFO slot)."""
    return _move_jobs(layout.locked, layout)


def recover_orphans(layout: QueueLayout, server_id: str) -> int:
    """Return jobs this server left in processing (after a crash) to the queue."""
    folder = processing_dir(layout, server_id)
    count = _move_jobs(folder, layout)
    if count:
        log_event(logging.WARNING, server_id, "-", f"recovered {count} orphaned job(s)")
    return count


# -- main loop --------------------------------------------------------------

@dataclass
class ServeStats:
    succeeded: int = 0
    failed: int = 0
    locked: int = 0

    def add(self, kind: str) -> None:
        setattr(self, kind, getattr(self, kind) + 1)

    @property
    def total(self) -> int:
        return self.succeeded + self.failed + self.locked


def process_one(layout: QueueLayout, runner: Runner, config: ServerConfig) -> JobOutcome | None:
    claimed = claim_next(layout, config.server_id)
    if claimed is None:
        return None
    job_id = claimed.job.job_id if claimed.job else claimed.filename
    log_event(logging.INFO, config.server_id, job_id, "claimed")
    outcome = execute_claimed(claimed, runner, config)
    finalize(claimed, outcome, layout, config.server_id)
    level = logging.INFO if outcome.kind == SUCCEEDED else logging.WARNING
    log_event(level, config.server_id, job_id, f"{outcome.kind}: {outcome.detail}")
    return outcome


def serve(config: ServerConfig, stop: threading.Event | None = None, once: bool = False) -> ServeStats:
    """Run the server loop until ``stop`` is set (or, with ``once``, the queue is empty).

    A stop request is honoured between jobs and while idle; an in-flight job
    always runs to completion and is finalized first.
    """
    runner = validate_config(config)
    stop = stop or threading.Event()
    layout = init_queue_layout(config.queue_root)
    recover_orphans(layout, config.server_id)
    log_event(logging.INFO, config.server_id, "-", f"serving {layout.root} with runner {config.runner}")
    stats = ServeStats()
    while not stop.is_set():
        try:
            outcome = process_one(layout, runner, config)
        except OSError as exc:
            log_event(logging.ERROR, config.server_id, "-", f"io error: {exc}")
            outcome = None
            if once:
                raise
            stop.wait(config.poll_interval)
            continue
        if outcome is not None:
            stats.add(outcome.kind)
            continue
        if once:
            break
        stop.wait(config.poll_interval)
    log_event(logging.INFO, config.server_id, "-", "stopped")
    return stats


def oldest_job_age(layout: QueueLayout, now: datetime | None = None) -> float | None:
    files = queued_files(layout.queue)
    if not files:
        return None
    stamp = files[0].name.split("_", 1)[0]
    created = parse_utc(f"{stamp[0:4]}-{stamp[4:6]}-{stamp[6:8]}T{stamp[9:11]}:{stamp[11:13]}:{stamp[13:15]}Z")
    return ((now or utc_now()) - created).total_seconds()


def folder_counts(layout: QueueLayout) -> dict[str, int]:
    counts = {name: len(queued_files(layout.folder(name))) for name in LAYOUT_DIRS}
    if layout.processing.is_dir():
        for sub in layout.processing.iterdir():
            if sub.is_dir():
                counts["processing"] += len(queued_files(sub))
    return counts
