"""Image creation: acquire a device, verify, replicate, verify again, enqueue preparations.

The local staging copy is deleted only after both the file-server and the
backup replica have been re-hashed and match the verified staging digest.
Any mismatch stops the run at that step and leaves everything in place.
"""

from __future__ import annotations

import hashlib
import logging
import os
import re
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Iterable, Protocol

from . import kvfile
from .model import QueueLayout, format_utc, init_queue_layout, utc_now
from .server import submit

log = logging.getLogger("evidenceflow.acquisition")

DIGEST_ALGORITHM = "sha256"
CHUNK_SIZE = 1 << 20
MANIFEST_NAME = "manifest.txt"
REPORT_NAME = "acquisition_report.txt"
UNVERIFIED_FLAG = "UNVERIFIED.txt"

_SAFE_NAME = re.compile(r"[A-Za-z0-9][A-Za-z0-9._-]*")


class AcquisitionConfigError(ValueError):
    pass


class RequestError(ValueError):
    pass


# -- config -------------------------------------------------------------------

@dataclass(frozen=True)
class OutputLocation:
    name: str
    fileserver_path: Path
    backup_path: Path


@dataclass(frozen=True)
class PreparationTemplate:
    name: str
    tool: str
    queue_root: Path
    params: tuple[tuple[str, str], ...] = ()


@dataclass
class AcquisitionConfig:
    output_locations: list[OutputLocation]
    staging_root: Path
    imager: str = "mock"
    device_provider: str = "fake"
    devices_dir: Path | None = None
    replication: str = "sequential"
    preparations: list[PreparationTemplate] = field(default_factory=list)

    def location(self, name: str) -> OutputLocation:
        for loc in self.output_locations:
            if loc.name == name:
                return loc
        raise RequestError(
            f"unknown destination {name!r}; choose from {', '.join(l.name for l in self.output_locations)}"
        )

    def preparation(self, name: str) -> PreparationTemplate:
        for prep in self.preparations:
            if prep.name == name:
                return prep
        raise RequestError(
            f"unknown preparation {name!r}; choose from {', '.join(p.name for p in self.preparations)}"
        )


def load_config(path: str | Path) -> AcquisitionConfig:
    """Parse an acquisition config (``[location]`` and ``[preparation]`` blocks)."""
    try:
        sections = kvfile.load_sections(path)
    except kvfile.KVSyntaxError as exc:
        raise AcquisitionConfigError(f"{path}: {exc}") from None

    def fail(line_no, message):
        raise AcquisitionConfigError(f"{path}: line {line_no}: {message}")

    top = sections[0]
    locations: list[OutputLocation] = []
    preps: list[PreparationTemplate] = []
    for section in sections[1:]:
        if section.name == "location":
            name = section.get("name")
            if not name:
                fail(section.line_no, "location without name")
            for key in ("fileserver_path", "backup_path"):
                if not section.get(key):
                    fail(section.line_no, f"location {name!r} is missing {key}")
            if any(loc.name == name for loc in locations):
                fail(section.line_of("name"), f"duplicate location name {name!r}")
            locations.append(OutputLocation(name, Path(section.get("fileserver_path")), Path(section.get("backup_path"))))
        elif section.name == "preparation":
            name, tool, queue_root = section.get("name"), section.get("tool"), section.get("queue_root")
            if not (name and tool and queue_root):
                fail(section.line_no, "preparation needs name, tool and queue_root")
            if any(p.name == name for p in preps):
                fail(section.line_of("name"), f"duplicate preparation name {name!r}")
            params = tuple((e.key[len("param."):], e.value) for e in section.with_prefix("param."))
            preps.append(PreparationTemplate(name, tool, Path(queue_root), params))
        else:
            fail(section.line_no, f"unknown section [{section.name}]")

    if not locations:
        raise AcquisitionConfigError(f"{path}: no [location] configured")
    staging = top.get("staging_root")
    if not staging:
        raise AcquisitionConfigError(f"{path}: missing staging_root")
    replication = top.get("replication", "sequential")
    if replication not in ("sequential", "concurrent"):
        fail(top.line_of("replication"), f"replication must be sequential or concurrent, got {replication!r}")
    imager = top.get("imager", "mock")
    if imager not in IMAGERS:
        fail(top.line_of("imager"), f"unknown imager {imager!r}")
    provider = top.get("device_provider", "fake")
    if provider not in PROVIDERS:
        fail(top.line_of("device_provider"), f"unknown device provider {provider!r}")
    devices_dir = top.get("devices_dir")
    return AcquisitionConfig(
        output_locations=locations,
        staging_root=Path(staging),
        imager=imager,
        device_provider=provider,
        devices_dir=Path(devices_dir) if devices_dir else None,
        replication=replication,
        preparations=preps,
    )


# -- devices and imagers ------------------------------------------------------

@dataclass(frozen=True)
class Device:
    device_id: str
    description: str
    size_bytes: int


class DeviceProvider(Protocol):
    def snapshot(self) -> list[Device]: ...

    def open(self, device: Device): ...


class FakeDeviceProvider:
    """Every regular file in ``devices_dir`` is a connected device; its bytes are the medium."""

    def __init__(self, devices_dir: str | Path):
        self.devices_dir = Path(devices_dir)

    def snapshot(self) -> list[Device]:
        devices = []
        for path in sorted(self.devices_dir.iterdir()):
            if path.is_file() and not path.name.startswith("."):
                devices.append(Device(path.name, f"fake device {path.name}", path.stat().st_size))
        return devices

    def open(self, device: Device):
        return open(self.devices_dir / device.device_id, "rb")


PROVIDERS = {"fake": FakeDeviceProvider}


def new_devices(before: Iterable[Device], after: Iterable[Device]) -> list[Device]:
    """Devices present in ``after`` but not ``before`` (by id), in provider order."""
    known = {d.device_id for d in before}
    return [d for d in after if d.device_id not in known]


@dataclass
class ImageResult:
    image_files: list[Path]
    stated_digest: str


class MockImager:
    """Streams the device into one raw file and states the digest of what it read."""

    def __init__(self, provider: DeviceProvider):
        self.provider = provider

    def acquire(self, device: Device, dest_dir: Path, basename: str = "image") -> ImageResult:
        dest_dir.mkdir(parents=True, exist_ok=True)
        target = dest_dir / f"{basename}.raw"
        digest = hashlib.new(DIGEST_ALGORITHM)
        with self.provider.open(device) as src, open(target, "wb") as out:
            for chunk in iter(lambda: src.read(CHUNK_SIZE), b""):
                digest.update(chunk)
                out.write(chunk)
            out.flush()
            os.fsync(out.fileno())
        return ImageResult([target], digest.hexdigest())


IMAGERS = {"mock": MockImager}


def make_provider(config: AcquisitionConfig) -> DeviceProvider:
    if config.devices_dir is None:
        raise AcquisitionConfigError("the fake device provider needs devices_dir")
    return PROVIDERS[config.device_provider](config.devices_dir)


# -- digests ----------------------------------------------------------------

def file_digest(paths: Path | Iterable[Path]) -> str:
    """Digest of the concatenated contents of ``paths`` (in the given order), streamed."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    digest = hashlib.new(DIGEST_ALGORITHM)
    for path in paths:
        with open(path, "rb") as fh:
            for chunk in iter(lambda: fh.read(CHUNK_SIZE), b""):
                digest.update(chunk)
    return digest.hexdigest()


@dataclass(frozen=True)
class DigestCheck:
    match: bool
    expected: str
    actual: str

    def __bool__(self):
        return self.match


def verify_digest(paths: Path | Iterable[Path], expected: str) -> DigestCheck:
    actual = file_digest(paths)
    return DigestCheck(actual == expected.lower(), expected.lower(), actual)


def replicate_file(src: Path, dst: Path) -> None:
    """Copy one image file and fsync it."""
    with open(src, "rb") as fin, open(dst, "wb") as fout:
        shutil.copyfileobj(fin, fout, CHUNK_SIZE)
        fout.flush()
        os.fsync(fout.fileno())


# -- the pipeline ---------------------------------------------------------------

@dataclass
class AcquisitionRequest:
    device: Device
    destination: str
    case_id: str
    evidence_name: str
    investigator: str
    preparations: list[str] = field(default_factory=list)


@dataclass
class StepRecord:
    number: int
    name: str
    status: str  # ok | failed
    started_utc: datetime
    finished_utc: datetime
    detail: str = ""
    values: dict[str, str] = field(default_factory=dict)


@dataclass
class AcquisitionReport:
    request: AcquisitionRequest
    steps: list[StepRecord] = field(default_factory=list)
    evidence_root: Path | None = None
    staging_dir: Path | None = None
    jobs: list[Path] = field(default_factory=list)

    @property
    def succeeded(self) -> bool:
        return len(self.steps) == len(STEPS) and all(s.status == "ok" for s in self.steps)

    @property
    def failed_step(self) -> StepRecord | None:
        return next((s for s in self.steps if s.status != "ok"), None)

    @property
    def verification_failed(self) -> bool:
        failed = self.failed_step
        return failed is not None and failed.name in ("verify_image", "verify_replicas")

    def render(self) -> str:
        req = self.request
        pairs = [
            ("version", "1"),
            ("case_id", req.case_id),
            ("evidence_name", req.evidence_name),
            ("investigator", req.investigator),
            ("device_id", req.device.device_id),
            ("device_size_bytes", req.device.size_bytes),
            ("destination", req.destination),
            ("preparations", ",".join(req.preparations)),
            ("digest_algorithm", DIGEST_ALGORITHM),
        ]
        for step in self.steps:
            prefix = f"step.{step.number}."
            pairs += [
                (prefix + "name", step.name),
                (prefix + "status", step.status),
                (prefix + "started_utc", format_utc(step.started_utc)),
                (prefix + "finished_utc", format_utc(step.finished_utc)),
            ]
            if step.detail:
                pairs.append((prefix + "detail", " ".join(step.detail.split())))
            pairs += [(prefix + k, v) for k, v in step.values.items()]
        failed = self.failed_step
        pairs.append(("result", "success" if self.succeeded else "failed"))
        if failed is not None:
            pairs.append(("failed_step", failed.number))
        return kvfile.render(pairs)


STEPS = (
    "prepare_layout",
    "acquire",
    "verify_image",
    "replicate",
    "verify_replicas",
    "delete_staging",
    "enqueue_preparations",
)


class _StepFailed(Exception):
    pass


def validate_request(request: AcquisitionRequest, config: AcquisitionConfig) -> tuple[OutputLocation, list[PreparationTemplate]]:
    location = config.location(request.destination)
    for label, value in (("case id", request.case_id), ("evidence name", request.evidence_name)):
        if not value or not _SAFE_NAME.fullmatch(value):
            raise RequestError(f"{label} {value!r} must be a non-empty filesystem-safe name")
    if not request.investigator:
        raise RequestError("investigator credential is required")
    preps = [config.preparation(name) for name in request.preparations]
    tools = [p.tool for p in preps]
    if len(set(tools)) != len(tools):
        raise RequestError("each tool may be selected once per acquisition")
    return location, preps


def _write_manifest(image_dir: Path, files: list[Path], digest: str) -> None:
    pairs = [("algorithm", DIGEST_ALGORITHM), ("digest", digest)]
    for i, path in enumerate(files, start=1):
        pairs.append((f"file.{i}", f"{path.name}:{file_digest(path)}"))
    (image_dir / MANIFEST_NAME).write_text(kvfile.render(pairs), encoding="utf-8")


def run_acquisition(
    request: AcquisitionRequest,
    config: AcquisitionConfig,
    queue_layouts: dict[str, QueueLayout] | None = None,
    provider: DeviceProvider | None = None,
) -> AcquisitionReport:
    """Run all seven steps in order; stop at the first failing one.

    ``queue_layouts`` maps tool name to its queue; tools not in the map use
    the ``queue_root`` from their preparation template.
    """
    location, preps = validate_request(request, config)
    provider = provider or make_provider(config)
    imager = IMAGERS[config.imager](provider)
    queue_layouts = dict(queue_layouts or {})
    for prep in preps:
        if prep.tool not in queue_layouts:
            queue_layouts[prep.tool] = init_queue_layout(prep.queue_root)

    report = AcquisitionReport(request)
    evidence_root = location.fileserver_path / request.case_id / request.evidence_name
    backup_root = location.backup_path / request.case_id / request.evidence_name
    staging = config.staging_root / f"{request.case_id}_{request.evidence_name}"
    report.staging_dir = staging
    state: dict = {}

    def step(name, fn):
        number = len(report.steps) + 1
        started = utc_now()
        record = StepRecord(number, name, "ok", started, started)
        try:
            fn(record)
        except _StepFailed as exc:
            record.status, record.detail = "failed", str(exc)
        except OSError as exc:
            record.status, record.detail = "failed", f"{type(exc).__name__}: {exc}"
        record.finished_utc = utc_now()
        report.steps.append(record)
        log.info("step %d %s %s %s", number, name, record.status, record.detail)
        return record.status == "ok"

    def prepare_layout(rec):
        for root in (evidence_root, backup_root):
            if root.exists():
                raise _StepFailed(f"{root} already exists")
        if staging.exists():
            raise _StepFailed(f"staging dir {staging} already exists")
        (evidence_root / "image").mkdir(parents=True)
        (evidence_root / "logs").mkdir()
        for prep in preps:
            (evidence_root / "prep" / prep.tool).mkdir(parents=True)
        (backup_root / "image").mkdir(parents=True)
        report.evidence_root = evidence_root
        rec.values["evidence_root"] = str(evidence_root)
        rec.values["backup_root"] = str(backup_root)

    def acquire(rec):
        result = imager.acquire(request.device, staging, request.evidence_name)
        state["image"] = result
        rec.values["stated_digest"] = result.stated_digest
        rec.values["files"] = ",".join(p.name for p in result.image_files)

    def verify_image(rec):
        result = state["image"]
        check = verify_digest(result.image_files, result.stated_digest)
        rec.values["digest"] = check.actual
        if not check:
            raise _StepFailed(f"staging digest {check.actual} != stated {check.expected}")
        state["digest"] = check.actual

    def replicate(rec):
        files = state["image"].image_files
        targets = [evidence_root / "image", backup_root / "image"]

        def copy_to(target_dir):
            for src in files:
                replicate_file(src, target_dir / src.name)
            _write_manifest(target_dir, [target_dir / f.name for f in files], state["digest"])

        if config.replication == "concurrent":
            with ThreadPoolExecutor(max_workers=2) as pool:
                for future in [pool.submit(copy_to, t) for t in targets]:
                    future.result()
        else:
            for target in targets:
                copy_to(target)
        rec.values["fileserver"] = str(targets[0])
        rec.values["backup"] = str(targets[1])

    def verify_replicas(rec):
        names = [f.name for f in state["image"].image_files]
        bad = []
        for label, image_dir in (("fileserver", evidence_root / "image"), ("backup", backup_root / "image")):
            check = verify_digest([image_dir / n for n in names], state["digest"])
            rec.values[f"{label}_digest"] = check.actual
            if not check:
                bad.append((label, image_dir, check))
        if bad:
            for label, image_dir, check in bad:
                (image_dir / UNVERIFIED_FLAG).write_text(
                    f"replica digest {check.actual} does not match {check.expected}\n", encoding="utf-8"
                )
            raise _StepFailed("replica mismatch: " + ", ".join(label for label, _, _ in bad))

    def delete_staging(rec):
        shutil.rmtree(staging)
        rec.values["removed"] = str(staging)

    def enqueue_preparations(rec):
        names = [f.name for f in state["image"].image_files]
        source = evidence_root / "image" / names[0]
        for prep in preps:
            _, path = submit(
                queue_layouts[prep.tool],
                tool=prep.tool,
                source=str(source),
                source_root=str(evidence_root),
                output=str(evidence_root / "prep" / prep.tool),
                case_id=request.case_id,
                evidence_name=request.evidence_name,
                requested_by=request.investigator,
                params=prep.params,
            )
            report.jobs.append(path)
            rec.values[f"job.{prep.tool}"] = str(path)

    for name, fn in zip(STEPS, (prepare_layout, acquire, verify_image, replicate,
                                verify_replicas, delete_staging, enqueue_preparations)):
        if not step(name, fn):
            break

    if report.evidence_root is not None:
        (report.evidence_root / "logs" / REPORT_NAME).write_text(report.render(), encoding="utf-8")
    return report
