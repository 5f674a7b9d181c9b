"""Line-oriented ``key=value`` text used for job files, configs, reports and scenarios."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path


class KVSyntaxError(ValueError):
    """A line that is not ``key=value`` (or a section header, where allowed)."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass
class Entry:
    key: str
    value: str
    line_no: int


@dataclass
class Section:
    """A ``[name]`` block; name is ``""`` for entries before the first header."""

    name: str
    line_no: int
    entries: list[Entry] = field(default_factory=list)

    def get(self, key: str, default: str | None = None) -> str | None:
        for entry in reversed(self.entries):
            if entry.key == key:
                return entry.value
        return default

    def get_all(self, key: str) -> list[str]:
        return [e.value for e in self.entries if e.key == key]

    def with_prefix(self, prefix: str) -> list[Entry]:
        return [e for e in self.entries if e.key.startswith(prefix)]

    def line_of(self, key: str) -> int:
        for entry in self.entries:
            if entry.key == key:
                return entry.line_no
        return self.line_no


def split_line(line: str, line_no: int) -> tuple[str, str]:
    key, sep, value = line.partition("=")
    if not sep or not key:
        raise KVSyntaxError(line_no, f"expected key=value, got {line!r}")
    return key, value


def parse_strict(text: str) -> list[Entry]:
    """Parse machine-written text: every line must be ``key=value``, no comments."""
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    entries = []
    for no, line in enumerate(lines, start=1):
        if line.endswith("\r"):
            line = line[:-1]
        key, value = split_line(line, no)
        entries.append(Entry(key, value, no))
    return entries


def parse_sections(text: str) -> list[Section]:
    """Parse hand-written text with ``#`` comments, blank lines and ``[section]`` headers.

    Keys and values are stripped of surrounding whitespace.
    """
    sections = [Section("", 0)]
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("["):
            if not line.endswith("]") or len(line) < 3:
                raise KVSyntaxError(no, f"bad section header {line!r}")
            sections.append(Section(line[1:-1].strip(), no))
            continue
        key, value = split_line(line, no)
        sections[-1].entries.append(Entry(key.strip(), value.strip(), no))
    return sections


def load_sections(path: str | Path) -> list[Section]:
    return parse_sections(Path(path).read_text(encoding="utf-8"))


def render(pairs) -> str:
    """Render ``(key, value)`` pairs, one per line, ``\\n`` terminated."""
    out = []
    for key, value in pairs:
        value = str(value)
        if "\n" in value or "\r" in value:
            raise ValueError(f"value for {key!r} contains a line break")
        out.append(f"{key}={value}\n")
    return "".join(out)
