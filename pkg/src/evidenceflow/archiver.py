"""Clean up and archive cases that have been closed for longer than a threshold."""

from __future__ import annotations

import errno
import logging
import os
import re
import shutil
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Protocol

from . import kvfile
from .acquisition import file_digest
from .model import CaseRecord, format_utc

log = logging.getLogger("evidenceflow.archiver")

REGISTRY_HEADER = "case_id\tstatus\tstatus_date_utc"
RUN_LOCK = ".archive.lock"
DEFAULT_CLEAN_GLOBS = ("prep/*/tmp/**", "**/*.cache")
DEFAULT_CASE_PATTERN = r"[A-Za-z0-9][A-Za-z0-9_-]*"


class RegistryError(ValueError):
    pass


class DuplicateCase(RegistryError):
    pass


class ArchiveBusy(RuntimeError):
    pass


class PolicyError(ValueError):
    pass


@dataclass(frozen=True)
class ArchivePolicy:
    archive_root: Path
    source_roots: tuple[Path, ...]
    threshold_days: int = 30
    clean_globs: tuple[str, ...] = DEFAULT_CLEAN_GLOBS
    case_id_pattern: str = DEFAULT_CASE_PATTERN

    def __post_init__(self):
        if self.threshold_days < 0:
            raise PolicyError("threshold_days must be >= 0")
        try:
            re.compile(self.case_id_pattern)
        except re.error as exc:
            raise PolicyError(f"bad case_id_pattern: {exc}") from None
        archive = self.archive_root.resolve()
        for root in self.source_roots:
            if archive == root.resolve() or archive.is_relative_to(root.resolve()):
                raise PolicyError(f"archive_root {self.archive_root} lies inside source root {root}")


def load_policy(path: str | Path) -> tuple[ArchivePolicy, Path | None]:
    """Read an archive config; returns the policy and the ``registry`` path, if set.

    ``source_root`` and ``clean_glob`` may be repeated.
    """
    try:
        sections = kvfile.load_sections(path)
    except kvfile.KVSyntaxError as exc:
        raise PolicyError(f"{path}: {exc}") from None
    top = sections[0]
    if len(sections) > 1:
        raise PolicyError(f"{path}: line {sections[1].line_no}: sections are not allowed here")
    known = {"archive_root", "source_root", "threshold_days", "clean_glob", "case_id_pattern", "registry"}
    for entry in top.entries:
        if entry.key not in known:
            raise PolicyError(f"{path}: line {entry.line_no}: unknown key {entry.key!r}")
    if not top.get("archive_root"):
        raise PolicyError(f"{path}: missing archive_root")
    sources = top.get_all("source_root")
    if not sources:
        raise PolicyError(f"{path}: at least one source_root is required")
    try:
        threshold = int(top.get("threshold_days", "30"))
    except ValueError:
        raise PolicyError(f"{path}: line {top.line_of('threshold_days')}: threshold_days must be an integer") from None
    globs = tuple(top.get_all("clean_glob")) or DEFAULT_CLEAN_GLOBS
    registry = top.get("registry")
    try:
        policy = ArchivePolicy(
            archive_root=Path(top.get("archive_root")),
            source_roots=tuple(Path(s) for s in sources),
            threshold_days=threshold,
            clean_globs=globs,
            case_id_pattern=top.get("case_id_pattern", DEFAULT_CASE_PATTERN),
        )
    except PolicyError as exc:
        raise PolicyError(f"{path}: {exc}") from None
    return policy, Path(registry) if registry else None


# -- registry -------------------------------------------------------------------

@dataclass(frozen=True)
class RegistrySnapshot:
    records: Mapping[str, CaseRecord]
    snapshot_utc: datetime


class RegistryStore(Protocol):
    def snapshot(self) -> RegistrySnapshot: ...


def _parse_date(text: str) -> datetime:
    for fmt in ("%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            pass
    raise ValueError(text)


def parse_registry(text: str, source: str = "<registry>") -> dict[str, CaseRecord]:
    lines = text.splitlines()
    if not lines or lines[0] != REGISTRY_HEADER:
        raise RegistryError(f"{source}: line 1: header must be {REGISTRY_HEADER!r}")
    records: dict[str, CaseRecord] = {}
    for no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise RegistryError(f"{source}: line {no}: expected 3 tab-separated fields")
        case_id, status, date_text = parts
        if status not in ("open", "closed"):
            raise RegistryError(f"{source}: line {no}: status must be open or closed, got {status!r}")
        try:
            date = _parse_date(date_text)
        except ValueError:
            raise RegistryError(f"{source}: line {no}: bad date {date_text!r}") from None
        if case_id in records:
            raise DuplicateCase(f"{source}: line {no}: duplicate case {case_id!r}")
        records[case_id] = CaseRecord(case_id, status, date)
    return records


class TsvRegistry:
    """Stand-in for the case registration system: a TSV file with a fixed header."""

    def __init__(self, path: str | Path):
        self.path = Path(path)

    def snapshot(self) -> RegistrySnapshot:
        text = self.path.read_bytes().decode("utf-8")
        records = parse_registry(text, str(self.path))
        return RegistrySnapshot(MappingProxyType(records), datetime.now(timezone.utc))


def snapshot_registry(registry_path: str | Path) -> RegistrySnapshot:
    return TsvRegistry(registry_path).snapshot()


# -- eligibility ----------------------------------------------------------------

@dataclass(frozen=True)
class Eligibility:
    eligible: bool
    reason: str

    def __bool__(self):
        return self.eligible


def eligibility(case_id: str, snapshot: RegistrySnapshot, policy: ArchivePolicy, now: datetime) -> Eligibility:
    record = snapshot.records.get(case_id)
    if record is None:
        return Eligibility(False, "not in registry")
    if record.status != "closed":
        return Eligibility(False, f"case is {record.status}")
    age = now - record.status_date_utc
    if age < timedelta(0):
        return Eligibility(False, "status date lies in the future")
    if age > timedelta(days=policy.threshold_days):
        return Eligibility(True, f"closed {_days(age)} days ago")
    return Eligibility(False, f"closed {_days(age)} days ago, not more than {policy.threshold_days}")


def _days(age: timedelta) -> str:
    return f"{age.total_seconds() / 86400:g}"


# -- the run --------------------------------------------------------------------

@dataclass
class ArchiveEntry:
    folder: Path
    action: str  # moved | would_move | untouched | skipped | error
    reason: str
    warnings: list[str] = field(default_factory=list)


@dataclass
class ArchiveReport:
    now: datetime
    dry_run: bool
    entries: list[ArchiveEntry] = field(default_factory=list)

    @property
    def moved(self) -> list[ArchiveEntry]:
        return [e for e in self.entries if e.action == "moved"]

    @property
    def errors(self) -> list[ArchiveEntry]:
        return [e for e in self.entries if e.action == "error"]

    def render(self) -> str:
        pairs = [("version", "1"), ("now_utc", format_utc(self.now)), ("dry_run", str(self.dry_run).lower())]
        for i, entry in enumerate(self.entries, start=1):
            prefix = f"entry.{i}."
            pairs += [
                (prefix + "folder", entry.folder),
                (prefix + "action", entry.action),
                (prefix + "reason", entry.reason),
            ]
            pairs += [(prefix + f"warning.{j}", w) for j, w in enumerate(entry.warnings, start=1)]
        pairs.append(("moved", len(self.moved)))
        pairs.append(("errors", len(self.errors)))
        return kvfile.render(pairs)


def clean_targets(case_dir: Path, globs) -> list[Path]:
    """Paths under ``case_dir`` matched by ``globs``, never escaping it via symlinks."""
    root = case_dir.resolve()
    found = set()
    for pattern in globs:
        for match in case_dir.glob(pattern):
            if match == case_dir:
                continue
            if not match.is_symlink() and not match.resolve().is_relative_to(root):
                continue
            found.add(match)
    # Drop anything already covered by a matched ancestor directory.
    return sorted(p for p in found if not any(a in found and a.is_dir() for a in p.parents))


def clean_case(case_dir: Path, globs) -> list[Path]:
    removed = []
    for target in clean_targets(case_dir, globs):
        if target.is_dir() and not target.is_symlink():
            shutil.rmtree(target)
        else:
            target.unlink()
        removed.append(target)
    return removed


def _tree_digests(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): file_digest(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and not p.is_symlink()
    }


def move_case(src: Path, dst: Path) -> None:
    """Rename when possible; across volumes copy, verify every file digest, then delete."""
    try:
        os.rename(src, dst)
        return
    except OSError as exc:
        if exc.errno != errno.EXDEV:
            raise
    shutil.copytree(src, dst, symlinks=True)
    if _tree_digests(src) != _tree_digests(dst):
        shutil.rmtree(dst)
        raise OSError(errno.EIO, f"copy of {src} to {dst} did not verify")
    shutil.rmtree(src)


def _job_files(case_dir: Path) -> list[str]:
    return [str(p.relative_to(case_dir)) for p in sorted(case_dir.rglob("*.job"))]


def archive_run(
    policy: ArchivePolicy,
    registry: str | Path | RegistryStore,
    now: datetime | None = None,
    dry_run: bool = False,
) -> ArchiveReport:
    """Scan every source root once and archive the eligible case folders.

    The registry is snapshotted once at the start; edits made to it during
    the run do not affect this run's decisions.
    """
    now = now or datetime.now(timezone.utc)
    store = registry if hasattr(registry, "snapshot") else TsvRegistry(registry)
    report = ArchiveReport(now, dry_run)
    pattern = re.compile(policy.case_id_pattern)

    policy.archive_root.mkdir(parents=True, exist_ok=True)
    lock_path = policy.archive_root / RUN_LOCK
    try:
        fd = os.open(lock_path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o644)
    except FileExistsError:
        raise ArchiveBusy(f"another archive run holds {lock_path}") from None
    try:
        os.write(fd, f"pid={os.getpid()}\nstarted_utc={format_utc(now)}\n".encode())
        os.close(fd)
        snapshot = store.snapshot()
        for source_root in policy.source_roots:
            if not source_root.is_dir():
                report.entries.append(ArchiveEntry(source_root, "error", "source root missing"))
                continue
            for case_dir in sorted(p for p in source_root.iterdir() if p.is_dir()):
                report.entries.append(_handle_case(case_dir, pattern, snapshot, policy, now, dry_run))
    finally:
        lock_path.unlink(missing_ok=True)
    return report


def _handle_case(case_dir, pattern, snapshot, policy, now, dry_run) -> ArchiveEntry:
    match = pattern.fullmatch(case_dir.name)
    if not match:
        return ArchiveEntry(case_dir, "skipped", "not a case folder")
    case_id = match.groupdict().get("case_id") or case_dir.name
    verdict = eligibility(case_id, snapshot, policy, now)
    if not verdict:
        return ArchiveEntry(case_dir, "untouched", verdict.reason)

    entry = ArchiveEntry(case_dir, "moved", verdict.reason)
    jobs = _job_files(case_dir)
    if jobs:
        entry.warnings.append("job files present: " + ", ".join(jobs))
    dest = policy.archive_root / case_id
    if dest.exists():
        entry.action, entry.reason = "error", f"{dest} already exists"
        return entry
    if dry_run:
        targets = clean_targets(case_dir, policy.clean_globs)
        entry.action = "would_move"
        entry.reason += f"; would clean {len(targets)} path(s)"
        return entry
    try:
        removed = clean_case(case_dir, policy.clean_globs)
    except OSError as exc:
        entry.action, entry.reason = "error", f"partially cleaned: {exc}"
        return entry
    try:
        move_case(case_dir, dest)
    except OSError as exc:
        entry.action, entry.reason = "error", f"move failed: {exc}"
        return entry
    entry.reason += f"; cleaned {len(removed)} path(s); moved to {dest}"
    log.info("archived %s to %s", case_dir, dest)
    return entry
