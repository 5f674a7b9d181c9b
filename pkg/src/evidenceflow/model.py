"""Shared data types, the job-file format and the queue directory layout."""

from __future__ import annotations

import os
import re
import uuid
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import kvfile

JOB_FORMAT_VERSION = "1"
JOB_SUFFIX = ".job"
LOCK_NAME = ".evidence.lock"
SEQ_NAME = ".seq"
SEQ_LIMIT = 10**8

QUEUE, PROCESSING, SUCCEEDED, FAILED, LOCKED = "queue", "processing", "succeeded", "failed", "locked"
LAYOUT_DIRS = (QUEUE, PROCESSING, SUCCEEDED, FAILED, LOCKED)

# Mandatory keys in on-disk order; params follow as param.<key>=<value>.
JOB_KEYS = (
    "version",
    "job_id",
    "tool",
    "source",
    "source_root",
    "output",
    "case_id",
    "evidence_name",
    "requested_by",
    "created_utc",
    "seq",
)
PARAM_PREFIX = "param."

_JOB_ID_RE = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*")
_TOOL_RE = re.compile(r"[A-Za-z0-9_][A-Za-z0-9_.-]*")
_UTC_FORMAT = "%Y-%m-%dT%H:%M:%SZ"


class JobFileError(ValueError):
    """Base class for job-file parse failures."""


class MissingKey(JobFileError):
    def __init__(self, name: str):
        super().__init__(f"missing key {name!r}")
        self.name = name


class BadVersion(JobFileError):
    def __init__(self, version: str):
        super().__init__(f"unsupported job file version {version!r}")
        self.version = version


class MalformedLine(JobFileError):
    def __init__(self, line_no: int, reason: str = "malformed line"):
        super().__init__(f"line {line_no}: {reason}")
        self.line_no = line_no


def utc_now() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def format_utc(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(_UTC_FORMAT)


def parse_utc(text: str) -> datetime:
    return datetime.strptime(text, _UTC_FORMAT).replace(tzinfo=timezone.utc)


def new_job_id() -> str:
    return uuid.uuid4().hex[:16]


@dataclass(frozen=True)
class JobSpec:
    """One unit of work for a queue server.

    ``created_utc`` is truncated to whole seconds; values may not contain
    line breaks and param keys may not contain ``=``.
    """

    job_id: str
    tool: str
    source: str
    source_root: str
    output: str
    case_id: str
    evidence_name: str
    requested_by: str
    created_utc: datetime
    seq: int
    params: tuple[tuple[str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "params", tuple((str(k), str(v)) for k, v in self.params))
        ts = self.created_utc
        if ts.tzinfo is None:
            raise ValueError("created_utc must be timezone-aware")
        object.__setattr__(self, "created_utc", ts.astimezone(timezone.utc).replace(microsecond=0))
        if not _JOB_ID_RE.fullmatch(self.job_id):
            raise ValueError(f"job_id {self.job_id!r} is not filename-safe")
        if not _TOOL_RE.fullmatch(self.tool):
            raise ValueError(f"tool {self.tool!r} is not a token")
        if not self.source or not self.output:
            raise ValueError("source and output must be non-empty")
        if not isinstance(self.seq, int) or not 0 <= self.seq < SEQ_LIMIT:
            raise ValueError(f"seq must be in [0, {SEQ_LIMIT})")
        for name in ("source", "source_root", "output", "case_id", "evidence_name", "requested_by"):
            _check_value(name, getattr(self, name))
        seen = set()
        for key, value in self.params:
            if not key or "=" in key or key in seen:
                raise ValueError(f"bad or duplicate param key {key!r}")
            seen.add(key)
            _check_value(PARAM_PREFIX + key, key)
            _check_value(PARAM_PREFIX + key, value)

    @property
    def param_map(self) -> dict[str, str]:
        return dict(self.params)


def _check_value(name: str, value: str) -> None:
    if "\n" in value or "\r" in value:
        raise ValueError(f"{name} contains a line break")


def render_job_file(job: JobSpec) -> str:
    pairs = [
        ("version", JOB_FORMAT_VERSION),
        ("job_id", job.job_id),
        ("tool", job.tool),
        ("source", job.source),
        ("source_root", job.source_root),
        ("output", job.output),
        ("case_id", job.case_id),
        ("evidence_name", job.evidence_name),
        ("requested_by", job.requested_by),
        ("created_utc", format_utc(job.created_utc)),
        ("seq", str(job.seq)),
    ]
    pairs.extend((PARAM_PREFIX + k, v) for k, v in job.params)
    return kvfile.render(pairs)


def parse_job_file(text: str) -> JobSpec:
    """Parse job-file text; raises MissingKey, BadVersion or MalformedLine."""
    try:
        entries = kvfile.parse_strict(text)
    except kvfile.KVSyntaxError as exc:
        raise MalformedLine(exc.line_no) from None

    values: dict[str, tuple[str, int]] = {}
    params: list[tuple[str, str]] = []
    param_keys = set()
    for entry in entries:
        if entry.key.startswith(PARAM_PREFIX):
            key = entry.key[len(PARAM_PREFIX):]
            if not key or key in param_keys:
                raise MalformedLine(entry.line_no, f"bad or duplicate param {entry.key!r}")
            param_keys.add(key)
            params.append((key, entry.value))
        elif entry.key in JOB_KEYS:
            if entry.key in values:
                raise MalformedLine(entry.line_no, f"duplicate key {entry.key!r}")
            values[entry.key] = (entry.value, entry.line_no)
        else:
            raise MalformedLine(entry.line_no, f"unknown key {entry.key!r}")

    if "version" not in values:
        raise MissingKey("version")
    if values["version"][0] != JOB_FORMAT_VERSION:
        raise BadVersion(values["version"][0])
    for key in JOB_KEYS:
        if key not in values:
            raise MissingKey(key)

    seq_text, seq_line = values["seq"]
    if not seq_text.isascii() or not seq_text.isdigit():
        raise MalformedLine(seq_line, f"seq is not numeric: {seq_text!r}")
    ts_text, ts_line = values["created_utc"]
    try:
        created = parse_utc(ts_text)
    except ValueError:
        raise MalformedLine(ts_line, f"bad created_utc {ts_text!r}") from None

    try:
        return JobSpec(
            job_id=values["job_id"][0],
            tool=values["tool"][0],
            source=values["source"][0],
            source_root=values["source_root"][0],
            output=values["output"][0],
            case_id=values["case_id"][0],
            evidence_name=values["evidence_name"][0],
            requested_by=values["requested_by"][0],
            created_utc=created,
            seq=int(seq_text),
            params=tuple(params),
        )
    except ValueError as exc:
        raise JobFileError(str(exc)) from None


def job_filename(job: JobSpec) -> str:
    stamp = job.created_utc.strftime("%Y%m%dT%H%M%SZ")
    return f"{stamp}_{job.seq:08d}_{job.job_id}{JOB_SUFFIX}"


@dataclass(frozen=True)
class QueueLayout:
    root: Path

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))

    @property
    def queue(self) -> Path:
        return self.root / QUEUE

    @property
    def processing(self) -> Path:
        return self.root / PROCESSING

    @property
    def succeeded(self) -> Path:
        return self.root / SUCCEEDED

    @property
    def failed(self) -> Path:
        return self.root / FAILED

    @property
    def locked(self) -> Path:
        return self.root / LOCKED

    def folder(self, name: str) -> Path:
        if name not in LAYOUT_DIRS:
            raise ValueError(f"unknown queue folder {name!r}")
        return self.root / name

    def is_initialized(self) -> bool:
        return all((self.root / d).is_dir() for d in LAYOUT_DIRS)


class LayoutError(OSError):
    pass


def init_queue_layout(root: str | Path) -> QueueLayout:
    """Create the five queue folders under ``root``; safe to repeat or race."""
    layout = QueueLayout(Path(root))
    for name in LAYOUT_DIRS:
        path = layout.root / name
        try:
            path.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise LayoutError(exc.errno, f"cannot create queue folder {path}: {exc.strerror}") from exc
    return layout


def next_seq(layout: QueueLayout) -> int:
    """Take the next value of the queue's persisted ``.seq`` counter."""
    import fcntl

    path = layout.root / SEQ_NAME
    fd = os.open(path, os.O_RDWR | os.O_CREAT, 0o644)
    try:
        fcntl.flock(fd, fcntl.LOCK_EX)
        raw = os.read(fd, 64).decode("ascii").strip()
        current = int(raw) if raw else 0
        os.lseek(fd, 0, os.SEEK_SET)
        os.ftruncate(fd, 0)
        os.write(fd, f"{current + 1}\n".encode("ascii"))
        os.fsync(fd)
        if current >= SEQ_LIMIT:
            raise OverflowError(f"sequence counter exhausted in {path}")
        return current
    finally:
        os.close(fd)


@dataclass(frozen=True)
class SourceLock:
    path: Path
    holder: str
    job_id: str
    acquired_utc: datetime


@dataclass(frozen=True)
class CaseRecord:
    case_id: str
    status: str  # "open" | "closed"
    status_date_utc: datetime


@dataclass
class ServerConfig:
    server_id: str
    queue_root: Path
    runner: str
    poll_interval: float = 5.0
    runner_settings: dict[str, str] = field(default_factory=dict)
    lock_policy: str = "exclusive"

    @property
    def layout(self) -> QueueLayout:
        return QueueLayout(self.queue_root)
