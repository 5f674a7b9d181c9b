import errno
import hashlib
from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from evidenceflow import archiver
from evidenceflow.archiver import (
    REGISTRY_HEADER,
    ArchiveBusy,
    ArchivePolicy,
    DuplicateCase,
    PolicyError,
    RegistryError,
    RegistrySnapshot,
    archive_run,
    eligibility,
    load_policy,
    parse_registry,
)

NOW = datetime(2014, 9, 1, 12, 0, tzinfo=timezone.utc)


def registry_text(*rows):
    return "\n".join([REGISTRY_HEADER, *("\t".join(r) for r in rows)]) + "\n"


def stamp(days_ago):
    return (NOW - timedelta(days=days_ago)).strftime("%Y-%m-%dT%H:%M:%SZ")


def tree(root: Path) -> dict[str, str]:
    return {
        str(p.relative_to(root)): hashlib.sha256(p.read_bytes()).hexdigest()
        for p in sorted(root.rglob("*")) if p.is_file()
    }


@pytest.fixture
def world(tmp_path):
    src = tmp_path / "cases"
    for case in ("OLD", "RECENT", "OPEN"):
        (src / case / "image").mkdir(parents=True)
        (src / case / "image" / "disk.raw").write_bytes(case.encode() * 100)
        (src / case / "prep" / "ief" / "tmp").mkdir(parents=True)
        (src / case / "prep" / "ief" / "tmp" / "scratch.bin").write_bytes(b"x")
        (src / case / "prep" / "ief" / "report.txt").write_text("r")
        (src / case / "index.cache").write_text("c")
    (src / "not a case!").mkdir()
    reg = tmp_path / "registry.tsv"
    reg.write_text(registry_text(
        ("OLD", "closed", stamp(31)), ("RECENT", "closed", stamp(30)), ("OPEN", "open", stamp(90)),
    ))
    policy = ArchivePolicy(tmp_path / "archive", (src,), threshold_days=30)
    return policy, reg, src


def test_parse_registry_rows():
    records = parse_registry(registry_text(("A", "closed", "2014-07-01"), ("B", "open", stamp(2)), ("C", "closed", stamp(5))))
    assert list(records) == ["A", "B", "C"]
    assert records["A"].status_date_utc == datetime(2014, 7, 1, tzinfo=timezone.utc)


def test_registry_duplicate_case():
    with pytest.raises(DuplicateCase, match="line 3"):
        parse_registry(registry_text(("A", "closed", "2014-07-01"), ("A", "open", "2014-07-02")))


@pytest.mark.parametrize("row, fragment", [
    (("A", "closed", "yesterday"), "bad date"),
    (("A", "archived", "2014-07-01"), "status"),
    (("A", "closed"), "3 tab-separated"),
])
def test_registry_bad_rows(row, fragment):
    with pytest.raises(RegistryError, match=f"line 2: .*{fragment}"):
        parse_registry(registry_text(row))


def test_registry_header_required():
    with pytest.raises(RegistryError, match="line 1"):
        parse_registry("case\tstatus\n")


@pytest.mark.parametrize("days, status, expected", [
    (31, "closed", True),
    (30, "closed", False),
    (30.001, "closed", True),
    (400, "open", False),
    (-1, "closed", False),
])
def test_eligibility_threshold_is_strict(tmp_path, days, status, expected):
    snap = RegistrySnapshot(
        {"C": archiver.CaseRecord("C", status, NOW - timedelta(days=days))}, NOW
    )
    policy = ArchivePolicy(tmp_path / "a", (tmp_path / "s",), threshold_days=30)
    assert bool(eligibility("C", snap, policy, NOW)) is expected


def test_unknown_case_not_eligible(tmp_path):
    policy = ArchivePolicy(tmp_path / "a", (tmp_path / "s",))
    verdict = eligibility("X", RegistrySnapshot({}, NOW), policy, NOW)
    assert not verdict and verdict.reason == "not in registry"


def test_archive_inside_source_rejected(tmp_path):
    with pytest.raises(PolicyError):
        ArchivePolicy(tmp_path / "src" / "archive", (tmp_path / "src",))


def test_run_moves_only_eligible(world, tmp_path):
    policy, reg, src = world
    before = {c: tree(src / c) for c in ("OLD", "RECENT", "OPEN")}
    report = archive_run(policy, reg, NOW)
    actions = {e.folder.name: e.action for e in report.entries}
    assert actions == {"OLD": "moved", "RECENT": "untouched", "OPEN": "untouched", "not a case!": "skipped"}
    assert not (src / "OLD").exists()
    # Oracle: the archived tree is the original minus exactly the clean_glob matches.
    expected = {k: v for k, v in before["OLD"].items() if not k.startswith("prep/ief/tmp/") and not k.endswith(".cache")}
    assert tree(tmp_path / "archive" / "OLD") == expected
    assert (tmp_path / "archive" / "OLD" / "prep" / "ief").is_dir()
    assert not (tmp_path / "archive" / "OLD" / "prep" / "ief" / "tmp").exists()
    assert tree(src / "RECENT") == before["RECENT"]
    assert tree(src / "OPEN") == before["OPEN"]
    assert not (tmp_path / "archive" / archiver.RUN_LOCK).exists()


def test_run_is_idempotent(world, tmp_path):
    policy, reg, src = world
    archive_run(policy, reg, NOW)
    snapshot = tree(tmp_path)
    second = archive_run(policy, reg, NOW)
    assert second.moved == [] and second.errors == []
    assert tree(tmp_path) == snapshot


def test_dry_run_changes_nothing(world, tmp_path):
    policy, reg, _ = world
    before = tree(tmp_path)
    report = archive_run(policy, reg, NOW, dry_run=True)
    assert [e.action for e in report.entries if e.folder.name == "OLD"] == ["would_move"]
    assert tree(tmp_path) == before
    assert "dry_run=true" in report.render()


def test_registry_is_never_written(world):
    policy, reg, _ = world
    before = reg.read_bytes()
    archive_run(policy, reg, NOW)
    assert reg.read_bytes() == before


def test_registry_edit_during_run_is_ignored(world, monkeypatch):
    policy, reg, src = world
    store = archiver.TsvRegistry(reg)
    original = archiver.clean_case

    def edit_then_clean(case_dir, globs):
        reg.write_text(registry_text(("OLD", "closed", stamp(31)), ("RECENT", "closed", stamp(365))))
        return original(case_dir, globs)

    monkeypatch.setattr(archiver, "clean_case", edit_then_clean)
    report = archive_run(policy, store, NOW)
    assert {e.folder.name: e.action for e in report.entries}["RECENT"] == "untouched"


def test_collision_reports_error(world, tmp_path):
    policy, reg, src = world
    (tmp_path / "archive" / "OLD").mkdir(parents=True)
    report = archive_run(policy, reg, NOW)
    assert [e.folder.name for e in report.errors] == ["OLD"]
    assert (src / "OLD" / "image" / "disk.raw").exists()


def test_concurrent_run_refused(world, tmp_path):
    policy, reg, _ = world
    (tmp_path / "archive").mkdir()
    (tmp_path / "archive" / archiver.RUN_LOCK).write_text("pid=1\n")
    with pytest.raises(ArchiveBusy):
        archive_run(policy, reg, NOW)


def test_job_files_warned(world):
    policy, reg, src = world
    (src / "OLD" / "stray.job").write_text("version=1\n")
    report = archive_run(policy, reg, NOW)
    entry = next(e for e in report.entries if e.folder.name == "OLD")
    assert entry.action == "moved" and "stray.job" in entry.warnings[0]


def test_cross_device_move_copies_and_verifies(world, tmp_path, monkeypatch):
    policy, reg, src = world
    real_rename = archiver.os.rename

    def exdev(a, b):
        if Path(a).parent == src:
            raise OSError(errno.EXDEV, "Invalid cross-device link")
        return real_rename(a, b)

    monkeypatch.setattr(archiver.os, "rename", exdev)
    report = archive_run(policy, reg, NOW)
    assert [e.folder.name for e in report.moved] == ["OLD"]
    assert not (src / "OLD").exists()
    assert (tmp_path / "archive" / "OLD" / "image" / "disk.raw").read_bytes() == b"OLD" * 100


def test_load_policy(tmp_path):
    path = tmp_path / "archive.conf"
    path.write_text(
        f"archive_root={tmp_path}/archive\nsource_root={tmp_path}/a\nsource_root={tmp_path}/b\n"
        f"threshold_days=45\nclean_glob=**/*.tmp\nregistry={tmp_path}/reg.tsv\n"
    )
    policy, registry = load_policy(path)
    assert policy.source_roots == (tmp_path / "a", tmp_path / "b")
    assert policy.threshold_days == 45 and policy.clean_globs == ("**/*.tmp",)
    assert registry == tmp_path / "reg.tsv"


def test_load_policy_unknown_key(tmp_path):
    path = tmp_path / "archive.conf"
    path.write_text(f"archive_root={tmp_path}/x\nsource_root={tmp_path}/a\nthreshold=3\n")
    with pytest.raises(PolicyError, match="line 3"):
        load_policy(path)
