"""Simulation scenarios: devices, resources and the working calendar.

Scenario files are sectioned ``key=value`` text::

    [calendar]
    anchor_date=2014-07-01
    day_start=08:00
    day_end=17:00
    workdays=Mon,Tue,Wed,Thu,Fri

    [resource]
    name=Evidence system 1
    kind=human_gated            # or always_on
    discipline=listed_order     # or fifo_by_ready (default)
    turnaround_minutes=0

    [resource]
    name=EnCase case processor
    kind=human_gated
    tools=encase                # resources with tools run preparations

    [device]
    name=HDD 1
    station=Evidence system 1
    imaging_minutes=1000
    prep.encase=2000
    copy_minutes=0              # optional hand-off copy before preparation
    turnaround.EnCase case processor=30   # optional per-task override
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, datetime
from importlib import resources as importlib_resources
from pathlib import Path

from .. import kvfile
from .calendar import WorkCalendar, parse_workdays

HUMAN_GATED, ALWAYS_ON = "human_gated", "always_on"
FIFO_BY_READY, LISTED_ORDER = "fifo_by_ready", "listed_order"

# Preparation time as a multiple of imaging time, measured from the reference timelines.
REFERENCE_PREP_RATIOS = {"encase": 2.0, "ief": 2.0, "bulk_extractor": 0.2}


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ResourceSpec:
    name: str
    kind: str = HUMAN_GATED
    discipline: str = FIFO_BY_READY
    turnaround_minutes: float = 0
    tools: tuple[str, ...] = ()

    @property
    def is_station(self) -> bool:
        return not self.tools


@dataclass(frozen=True)
class DeviceTask:
    device_name: str
    station: str
    imaging_duration: float  # minutes
    prep_durations: tuple[tuple[str, float], ...] = ()
    copy_minutes: float = 0
    turnaround_overrides: tuple[tuple[str, float], ...] = ()

    def turnaround_for(self, resource: ResourceSpec) -> float:
        return dict(self.turnaround_overrides).get(resource.name, resource.turnaround_minutes)


@dataclass(frozen=True)
class Scenario:
    calendar: WorkCalendar = field(default_factory=WorkCalendar)
    resources: tuple[ResourceSpec, ...] = ()
    devices: tuple[DeviceTask, ...] = ()
    name: str = ""

    def resource(self, name: str) -> ResourceSpec:
        for res in self.resources:
            if res.name == name:
                return res
        raise ScenarioError(f"unknown resource {name!r}")

    def resource_for_tool(self) -> dict[str, ResourceSpec]:
        return {tool: res for res in self.resources for tool in res.tools}

    def with_discipline(self, resource_name: str, discipline: str) -> "Scenario":
        resources = tuple(
            ResourceSpec(r.name, r.kind, discipline, r.turnaround_minutes, r.tools) if r.name == resource_name else r
            for r in self.resources
        )
        return Scenario(self.calendar, resources, self.devices, self.name)

    def validate(self) -> None:
        names = [r.name for r in self.resources]
        if len(set(names)) != len(names):
            raise ScenarioError("duplicate resource names")
        tool_owner: dict[str, str] = {}
        for res in self.resources:
            if res.kind not in (HUMAN_GATED, ALWAYS_ON):
                raise ScenarioError(f"resource {res.name!r}: unknown kind {res.kind!r}")
            if res.discipline not in (FIFO_BY_READY, LISTED_ORDER):
                raise ScenarioError(f"resource {res.name!r}: unknown discipline {res.discipline!r}")
            if res.turnaround_minutes < 0:
                raise ScenarioError(f"resource {res.name!r}: negative turnaround")
            if res.kind == ALWAYS_ON and res.turnaround_minutes:
                raise ScenarioError(f"resource {res.name!r}: always_on resources have no turnaround")
            for tool in res.tools:
                if tool in tool_owner:
                    raise ScenarioError(f"tool {tool!r} mapped to both {tool_owner[tool]!r} and {res.name!r}")
                tool_owner[tool] = res.name
        devices = [d.device_name for d in self.devices]
        if len(set(devices)) != len(devices):
            raise ScenarioError("duplicate device names")
        for dev in self.devices:
            station = next((r for r in self.resources if r.name == dev.station), None)
            if station is None or not station.is_station:
                raise ScenarioError(f"device {dev.device_name!r}: {dev.station!r} is not an evidence station")
            if not dev.imaging_duration > 0:
                raise ScenarioError(f"device {dev.device_name!r}: imaging duration must be > 0")
            if dev.copy_minutes < 0:
                raise ScenarioError(f"device {dev.device_name!r}: negative copy_minutes")
            for tool, minutes in dev.prep_durations:
                if tool not in tool_owner:
                    raise ScenarioError(f"device {dev.device_name!r}: tool {tool!r} is not mapped to a resource")
                if not minutes > 0:
                    raise ScenarioError(f"device {dev.device_name!r}: {tool} duration must be > 0")
            for res_name, minutes in dev.turnaround_overrides:
                if res_name not in names:
                    raise ScenarioError(f"device {dev.device_name!r}: turnaround for unknown resource {res_name!r}")
                if minutes < 0 or (minutes and self.resource(res_name).kind == ALWAYS_ON):
                    raise ScenarioError(f"device {dev.device_name!r}: bad turnaround for {res_name!r}")


def _minutes(section: kvfile.Section, key: str, default: str | None = None) -> float:
    raw = section.get(key, default)
    if raw is None:
        raise ScenarioError(f"line {section.line_no}: [{section.name}] is missing {key}")
    try:
        return float(raw)
    except ValueError:
        raise ScenarioError(f"line {section.line_of(key)}: {key} must be a number of minutes") from None


def _clock(text: str, line_no: int):
    try:
        return datetime.strptime(text, "%H:%M").time()
    except ValueError:
        raise ScenarioError(f"line {line_no}: bad time {text!r}, expected HH:MM") from None


def parse_scenario(text: str, name: str = "") -> Scenario:
    try:
        sections = kvfile.parse_sections(text)
    except kvfile.KVSyntaxError as exc:
        raise ScenarioError(str(exc)) from None
    if sections[0].entries:
        raise ScenarioError(f"line {sections[0].entries[0].line_no}: entry outside a section")

    calendar = WorkCalendar()
    resources, devices = [], []
    for sec in sections[1:]:
        if sec.name == "calendar":
            try:
                calendar = WorkCalendar(
                    day_start=_clock(sec.get("day_start", "08:00"), sec.line_of("day_start")),
                    day_end=_clock(sec.get("day_end", "17:00"), sec.line_of("day_end")),
                    workdays=parse_workdays(sec.get("workdays", "Mon,Tue,Wed,Thu,Fri")),
                    anchor_date=date.fromisoformat(sec.get("anchor_date", "2014-07-01")),
                )
            except ValueError as exc:
                raise ScenarioError(f"line {sec.line_no}: [calendar]: {exc}") from None
        elif sec.name == "resource":
            if not sec.get("name"):
                raise ScenarioError(f"line {sec.line_no}: resource without name")
            tools = tuple(t.strip() for t in sec.get("tools", "").split(",") if t.strip())
            resources.append(ResourceSpec(
                name=sec.get("name"),
                kind=sec.get("kind", HUMAN_GATED),
                discipline=sec.get("discipline", FIFO_BY_READY),
                turnaround_minutes=_minutes(sec, "turnaround_minutes", "0"),
                tools=tools,
            ))
        elif sec.name == "device":
            if not sec.get("name") or not sec.get("station"):
                raise ScenarioError(f"line {sec.line_no}: device needs name and station")
            preps = tuple((e.key[len("prep."):], _minutes(sec, e.key)) for e in sec.with_prefix("prep."))
            overrides = tuple(
                (e.key[len("turnaround."):], _minutes(sec, e.key)) for e in sec.with_prefix("turnaround.")
            )
            devices.append(DeviceTask(
                device_name=sec.get("name"),
                station=sec.get("station"),
                imaging_duration=_minutes(sec, "imaging_minutes"),
                prep_durations=preps,
                copy_minutes=_minutes(sec, "copy_minutes", "0"),
                turnaround_overrides=overrides,
            ))
        else:
            raise ScenarioError(f"line {sec.line_no}: unknown section [{sec.name}]")

    scenario = Scenario(calendar, tuple(resources), tuple(devices), name)
    scenario.validate()
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    """Load a scenario file; a bare name such as ``table1.scn`` falls back to the bundled copies."""
    path = Path(path)
    if not path.exists() and path.parent == Path("."):
        bundled = importlib_resources.files("evidenceflow") / "scenarios" / path.name
        if bundled.is_file():
            return parse_scenario(bundled.read_text(encoding="utf-8"), path.stem)
    return parse_scenario(path.read_text(encoding="utf-8"), path.stem)


def scenario_from_imaging(
    imaging: list[tuple[str, str, float]],
    resources: tuple[ResourceSpec, ...],
    ratios: dict[str, float] | None = None,
    calendar: WorkCalendar | None = None,
) -> Scenario:
    """Build a scenario from ``(device, station, imaging_minutes)`` rows.

    Each preparation tool served by ``resources`` gets ``ratio * imaging``
    minutes, using the reference ratios unless ``ratios`` is given.
    """
    ratios = REFERENCE_PREP_RATIOS if ratios is None else ratios
    tools = [t for r in resources for t in r.tools]
    devices = tuple(
        DeviceTask(name, station, minutes, tuple((t, ratios[t] * minutes) for t in tools))
        for name, station, minutes in imaging
    )
    scenario = Scenario(calendar or WorkCalendar(), resources, devices)
    scenario.validate()
    return scenario
