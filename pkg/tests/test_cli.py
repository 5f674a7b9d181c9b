import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import pytest

from evidenceflow.cli import main
from evidenceflow.model import LOCK_NAME, QueueLayout
from evidenceflow.server import acquire_lock, queued_files
from conftest import write_server_config


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def queue(tmp_path, capsys):
    root = tmp_path / "q"
    assert run(capsys, "init", "--queue-root", root)[0] == 0
    return root


def submit(capsys, root, tmp_path, n, *extra):
    src = tmp_path / "ev" / f"d{n}"
    src.mkdir(parents=True, exist_ok=True)
    return run(capsys, "submit", "--queue-root", root, "--tool", "mock", "--source", src / "img.raw",
               "--output", tmp_path / "out" / str(n), "--case", "C1", "--name", f"D{n}", *extra)


def test_submit_and_status(capsys, queue, tmp_path):
    names = []
    for n in range(2):
        code, out, _ = submit(capsys, queue, tmp_path, n, "--param", "depth=2")
        assert code == 0
        names.append(Path(out.strip()).name)
    assert names == sorted(names) and names[0].split("_")[1] < names[1].split("_")[1]
    code, out, _ = run(capsys, "status", "--queue-root", queue)
    lines = dict(line.split("=", 1) for line in out.splitlines())
    assert (lines["queue"], lines["processing"], lines["succeeded"]) == ("2", "0", "0")
    assert lines["oldest_queued_age_seconds"].isdigit()


def test_submit_to_missing_queue(capsys, tmp_path):
    code, _, err = submit(capsys, tmp_path / "nope", tmp_path, 0)
    assert code == 1 and "not an initialized queue" in err


def test_submit_bad_param(capsys, queue, tmp_path):
    assert submit(capsys, queue, tmp_path, 0, "--param", "novalue")[0] == 1


def test_serve_once_drains(capsys, queue, tmp_path):
    for n in range(3):
        submit(capsys, queue, tmp_path, n)
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="mock")
    code, out, _ = run(capsys, "serve", "--config", conf, "--once")
    assert code == 0 and "succeeded=3" in out
    assert queued_files(QueueLayout(queue).queue) == []


def test_serve_once_reports_failures(capsys, queue, tmp_path):
    submit(capsys, queue, tmp_path, 0, "--param", "behavior=fail")
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="mock")
    code, out, _ = run(capsys, "serve", "--config", conf, "--once")
    assert code == 2 and "failed=1" in out


def test_serve_invalid_runner_claims_nothing(capsys, queue, tmp_path):
    submit(capsys, queue, tmp_path, 0)
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="bogus")
    code, _, err = run(capsys, "serve", "--config", conf, "--once")
    assert code == 1 and "bogus" in err
    assert len(queued_files(QueueLayout(queue).queue)) == 1


def test_serve_uses_environment_config(capsys, queue, tmp_path, monkeypatch):
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="mock")
    monkeypatch.setenv("EVIDENCEFLOW_CONFIG", str(conf))
    assert run(capsys, "serve", "--once")[0] == 0


def test_sigterm_finishes_running_job(capsys, queue, tmp_path):
    for n in range(2):
        submit(capsys, queue, tmp_path, n)
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="mock",
                               poll_interval="0.1", **{"runner.sleep": "1.0"})
    proc = subprocess.Popen([sys.executable, "-m", "evidenceflow", "serve", "--config", str(conf)],
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    layout = QueueLayout(queue)
    deadline = time.monotonic() + 10
    while not queued_files(layout.processing / "s1") and time.monotonic() < deadline:
        time.sleep(0.02)
    proc.send_signal(signal.SIGTERM)
    out, _ = proc.communicate(timeout=10)
    assert proc.returncode == 0 and "succeeded=1" in out
    assert len(queued_files(layout.succeeded)) == 1
    assert len(queued_files(layout.queue)) == 1
    assert queued_files(layout.processing / "s1") == []
    assert not any((tmp_path / "ev").rglob(LOCK_NAME))


def test_lock_break(capsys, tmp_path):
    acquire_lock(tmp_path, "s9", "j9")
    code, _, err = run(capsys, "lock", "break", "--source", tmp_path)
    assert code == 1 and (tmp_path / LOCK_NAME).exists()
    code, out, _ = run(capsys, "lock", "break", "--source", tmp_path, "--yes")
    assert code == 0 and "s9" in out and not (tmp_path / LOCK_NAME).exists()
    code, out, _ = run(capsys, "lock", "break", "--source", tmp_path, "--yes")
    assert code == 0 and "nothing to do" in out


def test_lock_break_then_requeue_succeeds(capsys, queue, tmp_path):
    submit(capsys, queue, tmp_path, 0)
    acquire_lock(tmp_path / "ev" / "d0", "ghost", "old")
    conf = write_server_config(tmp_path / "s.conf", server_id="s1", queue_root=queue, runner="mock")
    code, out, _ = run(capsys, "serve", "--config", conf, "--once")
    assert code == 0 and "locked=1" in out
    run(capsys, "lock", "break", "--source", tmp_path / "ev" / "d0", "--yes")
    assert "requeued=1" in run(capsys, "requeue", "--queue-root", queue)[1]
    code, out, _ = run(capsys, "serve", "--config", conf, "--once")
    assert "succeeded=1" in out
    assert len(queued_files(QueueLayout(queue).succeeded)) == 1


@pytest.fixture
def acq_conf(tmp_path):
    devices = tmp_path / "devices"
    devices.mkdir()
    (devices / "usb0").write_bytes(os.urandom(4096))
    path = tmp_path / "acq.conf"
    path.write_text(
        f"staging_root={tmp_path}/staging\ndevices_dir={devices}\n"
        f"[location]\nname=lab\nfileserver_path={tmp_path}/fs\nbackup_path={tmp_path}/bak\n"
        f"[preparation]\nname=be\ntool=bulk_extractor\nqueue_root={tmp_path}/qbe\n"
    )
    return path


ACQ_FLAGS = ["--device-id", "usb0", "--dest", "lab", "--case", "C1", "--name", "USB", "--investigator", "inv", "--prep", "be", "--yes"]


def test_acquire_success(capsys, acq_conf, tmp_path):
    code, out, _ = run(capsys, "acquire", "--config", acq_conf, *ACQ_FLAGS)
    assert code == 0 and "result=success" in out
    assert len(queued_files(tmp_path / "qbe" / "queue")) == 1


def test_acquire_missing_case(capsys, acq_conf):
    flags = [f for f in ACQ_FLAGS]
    i = flags.index("--case")
    del flags[i:i + 2]
    code, _, err = run(capsys, "acquire", "--config", acq_conf, *flags)
    assert code == 1 and "--case" in err and "usage" in err


def test_acquire_corrupt_replica(capsys, acq_conf, tmp_path, monkeypatch):
    from evidenceflow import acquisition

    original = acquisition.replicate_file

    def corrupt(src, dst):
        original(src, dst)
        if "bak" in str(dst):
            dst.write_bytes(b"\0" + dst.read_bytes()[1:])

    monkeypatch.setattr(acquisition, "replicate_file", corrupt)
    code, out, err = run(capsys, "acquire", "--config", acq_conf, *ACQ_FLAGS)
    assert code == 2 and "failed_step=5" in out and "verify_replicas" in err
    assert (tmp_path / "staging" / "C1_USB" / "USB.raw").exists()
    assert not (tmp_path / "qbe" / "queue").exists() or queued_files(tmp_path / "qbe" / "queue") == []


def test_archive_dry_run(capsys, tmp_path):
    src = tmp_path / "cases"
    (src / "OLD").mkdir(parents=True)
    (src / "OLD" / "a.txt").write_text("a")
    reg = tmp_path / "reg.tsv"
    reg.write_text("case_id\tstatus\tstatus_date_utc\nOLD\tclosed\t2014-01-01\n")
    conf = tmp_path / "arch.conf"
    conf.write_text(f"archive_root={tmp_path}/archive\nsource_root={src}\nregistry={reg}\n")
    code, out, _ = run(capsys, "archive", "--config", conf, "--dry-run", "--now", "2014-09-01")
    assert code == 0 and "would_move" in out
    assert (src / "OLD" / "a.txt").exists() and not (tmp_path / "archive" / "OLD").exists()
    code, out, _ = run(capsys, "archive", "--config", conf, "--now", "2014-09-01")
    assert code == 0 and "moved=1" in out and (tmp_path / "archive" / "OLD" / "a.txt").exists()


def test_simulate(capsys):
    code, out, _ = run(capsys, "simulate", "--scenario", "table1.scn")
    assert code == 0
    assert out.startswith("metrics:\n") and "makespan_hours=409.0\n" in out


def test_simulate_compare(capsys):
    code, out, _ = run(capsys, "simulate", "--scenario", "table1.scn", "--compare", "table2.scn", "--render-table")
    assert code == 0
    assert "compare.makespan_hours=244.0" in out
    assert "first_result_saving_rounded=65%" in out and "makespan_saving_rounded=40%" in out


def test_simulate_missing_scenario(capsys, tmp_path):
    assert run(capsys, "simulate", "--scenario", tmp_path / "none.scn")[0] == 1


def test_unknown_subcommand(capsys):
    code, _, err = run(capsys, "bogus")
    assert code == 1
    assert "simulate" in err and "acquire" in err
