"""Working-hours calendar used to gate human-started steps."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import date, datetime, time, timedelta

WEEKDAY_NAMES = ("Mon", "Tue", "Wed", "Thu", "Fri", "Sat", "Sun")


@dataclass(frozen=True)
class WorkCalendar:
    """Workdays (``0`` = Monday) with a ``[day_start, day_end)`` working window."""

    day_start: time = time(8, 0)
    day_end: time = time(17, 0)
    workdays: frozenset[int] = frozenset(range(5))
    anchor_date: date = date(2014, 7, 1)

    def __post_init__(self):
        if not self.day_start < self.day_end:
            raise ValueError("day_start must be before day_end")
        if not self.workdays or not self.workdays <= set(range(7)):
            raise ValueError("workdays must be a non-empty subset of 0..6")

    @property
    def start(self) -> datetime:
        """The first instant of the scenario: anchor date at day start."""
        return datetime.combine(self.anchor_date, self.day_start)

    def is_workday(self, day: date) -> bool:
        return day.weekday() in self.workdays

    def in_hours(self, t: datetime) -> bool:
        return self.is_workday(t.date()) and self.day_start <= t.time() < self.day_end


def next_permitted_start(t: datetime, calendar: WorkCalendar) -> datetime:
    """``t`` if it falls inside working hours, else the next workday's day start."""
    if calendar.in_hours(t):
        return t
    day = t.date()
    if calendar.is_workday(day) and t.time() < calendar.day_start:
        return datetime.combine(day, calendar.day_start)
    day += timedelta(days=1)
    while not calendar.is_workday(day):
        day += timedelta(days=1)
    return datetime.combine(day, calendar.day_start)


def parse_workdays(text: str) -> frozenset[int]:
    days = set()
    for token in text.split(","):
        token = token.strip()[:3].title()
        if token not in WEEKDAY_NAMES:
            raise ValueError(f"unknown weekday {token!r}")
        days.add(WEEKDAY_NAMES.index(token))
    return frozenset(days)
