"""Deterministic schedule of imaging and preparation tasks over shared resources.

Imaging runs first on the evidence stations; each preparation becomes ready
when its device's image is done (plus an optional copy time).  A resource
serves one task at a time.  Human-gated resources may only *start* a task
during working hours; always-on resources start as soon as they are free.
Once started, every task runs to completion.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import datetime, timedelta

from .calendar import WorkCalendar, next_permitted_start
from .scenario import ALWAYS_ON, LISTED_ORDER, ResourceSpec, Scenario

IMAGING = "imaging"


@dataclass(frozen=True)
class Entry:
    device: str
    resource: str
    task: str  # "imaging" or a tool name
    start: datetime
    end: datetime

    @property
    def is_prep(self) -> bool:
        return self.task != IMAGING


@dataclass
class Metrics:
    start: datetime | None
    makespan_hours: float
    first_result_raw_hours: float | None
    first_result_available: datetime | None
    last_end: datetime | None = None


@dataclass
class Timeline:
    entries: list[Entry] = field(default_factory=list)
    resources: tuple[str, ...] = ()
    devices: tuple[str, ...] = ()
    calendar: WorkCalendar = field(default_factory=WorkCalendar)
    metrics: Metrics | None = None

    def cell(self, device: str, resource: str) -> list[Entry]:
        return [e for e in self.entries if e.device == device and e.resource == resource]


@dataclass
class _Pending:
    index: int
    device: str
    task: str
    ready: datetime
    duration: timedelta
    turnaround: timedelta


def _start_time(res: ResourceSpec, job: _Pending, free: datetime, calendar: WorkCalendar) -> datetime:
    earliest = max(job.ready, free)
    if res.kind == ALWAYS_ON:
        return earliest
    start = next_permitted_start(earliest, calendar) + job.turnaround
    # A hand-off delay that runs past closing time waits for the next working moment.
    return start if calendar.in_hours(start) else next_permitted_start(start, calendar)


def schedule_resource(res: ResourceSpec, jobs: list[_Pending], calendar: WorkCalendar) -> list[Entry]:
    """Serve ``jobs`` one at a time on ``res`` according to its discipline."""
    pending = sorted(jobs, key=lambda j: j.index)
    free = datetime.min
    entries = []
    while pending:
        if res.discipline == LISTED_ORDER:
            job = pending[0]
        else:
            # FIFO: at the moment the resource can next act, take the earliest-ready job.
            moment = max(free, min(j.ready for j in pending))
            if res.kind != ALWAYS_ON:
                moment = next_permitted_start(moment, calendar)
            job = min((j for j in pending if j.ready <= moment), key=lambda j: (j.ready, j.index))
        pending.remove(job)
        start = _start_time(res, job, free, calendar)
        end = start + job.duration
        entries.append(Entry(job.device, res.name, job.task, start, end))
        free = end
    return entries


def simulate(scenario: Scenario) -> Timeline:
    scenario.validate()
    cal = scenario.calendar
    timeline = Timeline(
        resources=tuple(r.name for r in scenario.resources),
        devices=tuple(d.device_name for d in scenario.devices),
        calendar=cal,
    )
    imaging_end: dict[str, datetime] = {}
    for res in scenario.resources:
        if not res.is_station:
            continue
        jobs = [
            _Pending(i, d.device_name, IMAGING, cal.start, timedelta(minutes=d.imaging_duration),
                     timedelta(minutes=d.turnaround_for(res)))
            for i, d in enumerate(scenario.devices)
            if d.station == res.name
        ]
        for entry in schedule_resource(res, jobs, cal):
            imaging_end[entry.device] = entry.end
            timeline.entries.append(entry)

    owner = scenario.resource_for_tool()
    for res in scenario.resources:
        if res.is_station:
            continue
        jobs = []
        for i, d in enumerate(scenario.devices):
            for tool, minutes in d.prep_durations:
                if owner[tool].name != res.name:
                    continue
                ready = imaging_end[d.device_name] + timedelta(minutes=d.copy_minutes)
                jobs.append(_Pending(len(jobs), d.device_name, tool, ready, timedelta(minutes=minutes),
                                     timedelta(minutes=d.turnaround_for(res))))
        timeline.entries.extend(schedule_resource(res, jobs, cal))

    timeline.metrics = metrics(timeline, cal)
    return timeline


def _hours(delta: timedelta) -> float:
    return delta.total_seconds() / 3600


def metrics(timeline: Timeline, calendar: WorkCalendar | None = None) -> Metrics:
    calendar = calendar or timeline.calendar
    if not timeline.entries:
        return Metrics(None, 0.0, None, None)
    start = min(e.start for e in timeline.entries)
    last_end = max(e.end for e in timeline.entries)
    prep_ends = [e.end for e in timeline.entries if e.is_prep]
    first = min(prep_ends) if prep_ends else None
    return Metrics(
        start=start,
        makespan_hours=_hours(last_end - start),
        first_result_raw_hours=_hours(first - start) if first else None,
        first_result_available=next_permitted_start(first, calendar) if first else None,
        last_end=last_end,
    )


@dataclass(frozen=True)
class Savings:
    first_result_saving: float
    makespan_saving: float

    @staticmethod
    def percent(fraction: float, digits: int = 1) -> str:
        return f"{fraction * 100:.{digits}f}%"

    @staticmethod
    def rounded_percent(fraction: float) -> str:
        return f"{int(fraction * 100 + 0.5)}%"


def compare(traditional: Metrics, automated: Metrics) -> Savings:
    """Fractional savings of ``automated`` relative to ``traditional``."""
    if not traditional.first_result_raw_hours or automated.first_result_raw_hours is None:
        raise ValueError("both timelines need at least one preparation result")
    if not traditional.makespan_hours:
        raise ValueError("traditional makespan is zero")
    return Savings(
        first_result_saving=1 - automated.first_result_raw_hours / traditional.first_result_raw_hours,
        makespan_saving=1 - automated.makespan_hours / traditional.makespan_hours,
    )


def format_stamp(t: datetime) -> str:
    """``July 2, 0:40 AM`` style: full month name, hour 0 for the first hour after midnight."""
    hour = 12 if t.hour == 12 else t.hour % 12
    return f"{t:%B} {t.day}, {hour}:{t.minute:02d} {'AM' if t.hour < 12 else 'PM'}"


def format_cell(entries: list[Entry]) -> str:
    return "; ".join(f"{format_stamp(e.start)} / {format_stamp(e.end)}" for e in entries)


def render_table(timeline: Timeline) -> str:
    header = ["Device", *timeline.resources]
    rows = [header]
    for device in timeline.devices:
        rows.append([device, *(format_cell(timeline.cell(device, r)) for r in timeline.resources)])
    widths = [max(len(row[i]) for row in rows) for i in range(len(header))]
    lines = [" | ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def format_hours(hours: float) -> str:
    minutes = round(hours * 60)
    return f"{minutes // 60}h{minutes % 60:02d}m"


def render_metrics(m: Metrics, prefix: str = "") -> str:
    pairs = [(prefix + "makespan_hours", f"{m.makespan_hours:.1f}")]
    if m.first_result_raw_hours is not None:
        pairs += [
            (prefix + "first_result_raw_hours", f"{m.first_result_raw_hours:.1f}"),
            (prefix + "first_result_raw", format_hours(m.first_result_raw_hours)),
            (prefix + "first_result_available", f"{m.first_result_available:%Y-%m-%dT%H:%M}"),
        ]
    if m.start is not None:
        pairs += [
            (prefix + "start", f"{m.start:%Y-%m-%dT%H:%M}"),
            (prefix + "end", f"{m.last_end:%Y-%m-%dT%H:%M}"),
        ]
    return "".join(f"{k}={v}\n" for k, v in pairs)


def render_savings(s: Savings) -> str:
    return (
        f"first_result_saving={Savings.percent(s.first_result_saving)}\n"
        f"first_result_saving_rounded={Savings.rounded_percent(s.first_result_saving)}\n"
        f"makespan_saving={Savings.percent(s.makespan_saving)}\n"
        f"makespan_saving_rounded={Savings.rounded_percent(s.makespan_saving)}\n"
    )
