import sys
from datetime import datetime, timezone
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from evidenceflow.model import JobSpec, init_queue_layout


@pytest.fixture
def layout(tmp_path):
    return init_queue_layout(tmp_path / "q")


@pytest.fixture
def make_job(tmp_path):
    counter = iter(range(1, 10**6))

    def make(**overrides):
        n = next(counter)
        src_root = tmp_path / "evidence" / f"src{n}"
        src_root.mkdir(parents=True, exist_ok=True)
        fields = dict(
            job_id=f"job{n:04d}",
            tool="mock",
            source=str(src_root / "image.raw"),
            source_root=str(src_root),
            output=str(tmp_path / "out" / f"job{n:04d}"),
            case_id="2014-001",
            evidence_name="HDD1",
            requested_by="inv01",
            created_utc=datetime(2014, 7, 2, 0, 40, tzinfo=timezone.utc),
            seq=n,
        )
        fields.update(overrides)
        return JobSpec(**fields)

    return make


def write_server_config(path: Path, **values) -> Path:
    lines = [f"{k}={v}" for k, v in values.items()]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


ACCEPTANCE_RESULTS: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
