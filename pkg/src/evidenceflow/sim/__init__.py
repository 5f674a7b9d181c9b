"""Discrete-event throughput simulation of traditional vs automated evidence processing."""

from .calendar import WorkCalendar, next_permitted_start
from .engine import Entry, Metrics, Savings, Timeline, compare, metrics, render_table, simulate
from .scenario import DeviceTask, ResourceSpec, Scenario, ScenarioError, load_scenario, parse_scenario

__all__ = [
    "DeviceTask",
    "Entry",
    "Metrics",
    "ResourceSpec",
    "Savings",
    "Scenario",
    "ScenarioError",
    "Timeline",
    "WorkCalendar",
    "compare",
    "load_scenario",
    "metrics",
    "next_permitted_start",
    "parse_scenario",
    "render_table",
    "simulate",
]
