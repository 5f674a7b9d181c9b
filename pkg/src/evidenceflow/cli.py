"""``evidenceflow`` command line.

Exit codes: 0 success, 1 usage or configuration error, 2 domain failure
(failed verification, failed jobs, archive errors).
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2

log = logging.getLogger("evidenceflow")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="config file (default: $EVIDENCEFLOW_CONFIG)")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG, INFO, WARNING, ERROR")
    common.add_argument("--no-color", action="store_true", default=argparse.SUPPRESS, help="plain output")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = _Parser(prog="evidenceflow", parents=[common], description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, help_text):
        return sub.add_parser(name, parents=[common], help=help_text, description=help_text)

    p = add("init", "create the queue folder layout")
    p.add_argument("--queue-root")

    p = add("submit", "write one job file into a queue")
    p.add_argument("--queue-root")
    p.add_argument("--tool", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--source-root", help="directory locked while the job runs (default: parent of --source)")
    p.add_argument("--output", required=True)
    p.add_argument("--case", default="")
    p.add_argument("--name", default="", help="evidence name")
    p.add_argument("--requested-by", default=os.environ.get("USER", ""))
    p.add_argument("--param", action="append", default=[], metavar="KEY=VALUE")

    p = add("serve", "run a queue server")
    p.add_argument("--once", action="store_true", help="drain the queue, then exit")
    p.add_argument("--server-id", help="override server_id from the config")

    p = add("status", "show per-folder job counts")
    p.add_argument("--queue-root")

    p = add("requeue", "move locked jobs back into the queue")
    p.add_argument("--queue-root")

    p = add("lock", "source lock maintenance")
    lock_sub = p.add_subparsers(dest="lock_command", metavar="ACTION", parser_class=_Parser)
    lock_sub.required = True
    lb = lock_sub.add_parser("break", parents=[common], help="remove a stale source lock")
    lb.add_argument("--source", required=True, help="evidence directory holding the lock")
    lb.add_argument("--yes", action="store_true", help="do not ask for confirmation")

    p = add("acquire", "image a device, verify, replicate and enqueue preparations")
    p.add_argument("--device-id")
    p.add_argument("--dest", help="output location name")
    p.add_argument("--case")
    p.add_argument("--name", help="evidence name")
    p.add_argument("--investigator")
    p.add_argument("--prep", help="comma-separated preparation names")
    p.add_argument("--yes", action="store_true", help="no prompts; missing values are errors")

    p = add("archive", "archive cases closed longer than the threshold")
    p.add_argument("--dry-run", action="store_true")
    p.add_argument("--now", help="evaluate as of this UTC time (YYYY-MM-DD or YYYY-MM-DDTHH:MM:SSZ)")
    p.add_argument("--registry", help="override the registry path from the config")

    p = add("simulate", "simulate a scenario and print metrics")
    p.add_argument("--scenario", required=True)
    p.add_argument("--render-table", action="store_true")
    p.add_argument("--compare", metavar="SCENARIO", help="automated scenario to compare against")
    return parser


def _config_path(args, required=True) -> Path | None:
    path = getattr(args, "config", None) or os.environ.get("EVIDENCEFLOW_CONFIG")
    if not path and required:
        raise UsageError("--config is required (or set EVIDENCEFLOW_CONFIG)")
    return Path(path) if path else None


def _queue_root(args) -> Path:
    if args.queue_root:
        return Path(args.queue_root)
    config_path = _config_path(args, required=False)
    if config_path is None:
        raise UsageError("give --queue-root or --config")
    from .kvfile import load_sections

    root = load_sections(config_path)[0].get("queue_root")
    if not root:
        raise UsageError(f"{config_path} has no queue_root")
    return Path(root)


def _setup_logging(args) -> None:
    level = getattr(args, "log_level", None) or "INFO"
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(message)s",
        datefmt="%Y-%m-%dT%H:%M:%S",
        stream=sys.stderr,
    )


def _confirm(question: str) -> bool:
    if not sys.stdin.isatty():
        return False
    return input(f"{question} [y/N] ").strip().lower() in ("y", "yes")


# -- queue commands -------------------------------------------------------------

def cmd_init(args) -> int:
    from .model import init_queue_layout

    layout = init_queue_layout(_queue_root(args))
    print(layout.root)
    return EXIT_OK


def cmd_submit(args) -> int:
    from .model import QueueLayout
    from .server import submit

    layout = QueueLayout(_queue_root(args))
    if not layout.is_initialized():
        print(f"error: {layout.root} is not an initialized queue (run `evidenceflow init`)", file=sys.stderr)
        return EXIT_USAGE
    params = []
    for item in args.param:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--param expects KEY=VALUE, got {item!r}")
        params.append((key, value))
    fields = dict(
        tool=args.tool,
        source=args.source,
        output=args.output,
        case_id=args.case,
        evidence_name=args.name,
        requested_by=args.requested_by,
        params=tuple(params),
    )
    if args.source_root:
        fields["source_root"] = args.source_root
    try:
        job, path = submit(layout, **fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(path)
    return EXIT_OK


def cmd_serve(args) -> int:
    from .server import ConfigError, load_server_config, serve

    try:
        config = load_server_config(_config_path(args), server_id=args.server_id)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    stop = threading.Event()

    def on_signal(signum, frame):
        log.info("signal %d received; stopping after the current job", signum)
        stop.set()

    previous = {s: signal.signal(s, on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        stats = serve(config, stop, once=args.once)
    finally:
        for s, handler in previous.items():
            signal.signal(s, handler)
    print(f"succeeded={stats.succeeded}\nfailed={stats.failed}\nlocked={stats.locked}")
    return EXIT_FAILURE if stats.failed else EXIT_OK


def cmd_status(args) -> int:
    from .model import QueueLayout
    from .server import folder_counts, oldest_job_age

    layout = QueueLayout(_queue_root(args))
    if not layout.is_initialized():
        print(f"error: {layout.root} is not an initialized queue", file=sys.stderr)
        return EXIT_USAGE
    for name, count in folder_counts(layout).items():
        print(f"{name}={count}")
    age = oldest_job_age(layout)
    print(f"oldest_queued_age_seconds={'' if age is None else int(age)}")
    return EXIT_OK


def cmd_requeue(args) -> int:
    from .model import QueueLayout
    from .server import requeue_locked

    layout = QueueLayout(_queue_root(args))
    if not layout.is_initialized():
        print(f"error: {layout.root} is not an initialized queue", file=sys.stderr)
        return EXIT_USAGE
    print(f"requeued={requeue_locked(layout)}")
    return EXIT_OK


def cmd_lock(args) -> int:
    from .model import LOCK_NAME
    from .server import break_lock

    source = Path(args.source)
    lock_path = source / LOCK_NAME
    if not lock_path.exists():
        print(f"no lock at {source}; nothing to do")
        return EXIT_OK
    holder = lock_path.read_text(encoding="utf-8", errors="replace").strip().replace("\n", ", ")
    if not args.yes and not _confirm(f"break lock {lock_path} ({holder})?"):
        print("lock left in place (confirm interactively or pass --yes)", file=sys.stderr)
        return EXIT_USAGE
    info = break_lock(source)
    if info is None:
        print(f"no lock at {source}; nothing to do")
    else:
        print(f"broke lock held by {info.get('holder', '?')} for job {info.get('job_id', '?')}")
    return EXIT_OK


# -- acquisition ---------------------------------------------------------------

def _ask(args, attr: str, prompt: str, choices: list[str] | None = None) -> str:
    value = getattr(args, attr)
    if value:
        return value
    if args.yes or not sys.stdin.isatty():
        raise UsageError(f"--{attr.replace('_', '-')} is required")
    if choices:
        prompt += f" ({', '.join(choices)})"
    value = input(f"{prompt}: ").strip()
    if not value:
        raise UsageError(f"{prompt} is required")
    return value


def _choose_device(args, provider):
    from .acquisition import new_devices

    snapshot = provider.snapshot()
    if args.device_id:
        for device in snapshot:
            if device.device_id == args.device_id:
                return device
        raise UsageError(f"device {args.device_id!r} is not connected")
    if args.yes or not sys.stdin.isatty():
        raise UsageError("--device-id is required")
    input("Connect the device to image, then press Enter ")
    fresh = new_devices(snapshot, provider.snapshot())
    if not fresh:
        raise UsageError("no newly connected device found")
    for i, device in enumerate(fresh, start=1):
        print(f"  {i}) {device.device_id}  {device.description}  {device.size_bytes} bytes")
    choice = input("Device number: ").strip()
    if not choice.isdigit() or not 1 <= int(choice) <= len(fresh):
        raise UsageError("invalid device selection")
    return fresh[int(choice) - 1]


def cmd_acquire(args) -> int:
    from .acquisition import (
        AcquisitionConfigError,
        AcquisitionRequest,
        RequestError,
        load_config,
        make_provider,
        run_acquisition,
    )

    try:
        config = load_config(_config_path(args))
        provider = make_provider(config)
    except (AcquisitionConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    device = _choose_device(args, provider)
    dest = _ask(args, "dest", "Destination", [loc.name for loc in config.output_locations])
    case = _ask(args, "case", "Case id")
    name = _ask(args, "name", "Evidence name")
    investigator = _ask(args, "investigator", "Investigator credential")
    if args.prep is None and not args.yes and sys.stdin.isatty():
        args.prep = input(f"Preparations ({', '.join(p.name for p in config.preparations)}; blank for none): ")
    preps = [p.strip() for p in (args.prep or "").split(",") if p.strip()]
    request = AcquisitionRequest(device, dest, case, name, investigator, preps)

    if not args.yes and sys.stdin.isatty():
        if not _confirm(f"Image {device.device_id} as {case}/{name} to {dest}?"):
            print("aborted", file=sys.stderr)
            return EXIT_USAGE
    try:
        report = run_acquisition(request, config, provider=provider)
    except RequestError as exc:
        raise UsageError(str(exc)) from None

    sys.stdout.write(report.render())
    if report.succeeded:
        return EXIT_OK
    failed = report.failed_step
    print(f"error: step {failed.number} ({failed.name}) failed: {failed.detail}", file=sys.stderr)
    return EXIT_FAILURE


# -- archive and simulate ---------------------------------------------------------

def _parse_now(text: str) -> datetime:
    for fmt in ("%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d"):
        try:
            return datetime.strptime(text, fmt).replace(tzinfo=timezone.utc)
        except ValueError:
            pass
    raise UsageError(f"bad --now value {text!r}")


def cmd_archive(args) -> int:
    from .archiver import ArchiveBusy, PolicyError, RegistryError, archive_run, load_policy

    try:
        policy, registry = load_policy(_config_path(args))
    except (PolicyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    registry = Path(args.registry) if args.registry else registry
    if registry is None:
        raise UsageError("no registry configured (set registry= or pass --registry)")
    now = _parse_now(args.now) if args.now else None
    try:
        report = archive_run(policy, registry, now=now, dry_run=args.dry_run)
    except (ArchiveBusy, RegistryError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    sys.stdout.write(report.render())
    return EXIT_FAILURE if report.errors else EXIT_OK


def cmd_simulate(args) -> int:
    from .sim import ScenarioError, compare, load_scenario, render_table, simulate
    from .sim.engine import render_metrics, render_savings

    try:
        scenario = load_scenario(args.scenario)
        other = load_scenario(args.compare) if args.compare else None
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    timeline = simulate(scenario)
    if args.render_table:
        sys.stdout.write(render_table(timeline))
        print()
    print("metrics:")
    sys.stdout.write(render_metrics(timeline.metrics))
    if other is not None:
        other_timeline = simulate(other)
        if args.render_table:
            print()
            sys.stdout.write(render_table(other_timeline))
        print("compare:")
        sys.stdout.write(render_metrics(other_timeline.metrics, prefix="compare."))
        try:
            sys.stdout.write(render_savings(compare(timeline.metrics, other_timeline.metrics)))
        except ValueError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_FAILURE
    return EXIT_OK


COMMANDS = {
    "init": cmd_init,
    "submit": cmd_submit,
    "serve": cmd_serve,
    "status": cmd_status,
    "requeue": cmd_requeue,
    "lock": cmd_lock,
    "acquire": cmd_acquire,
    "archive": cmd_archive,
    "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    _setup_logging(args)
    started = time.monotonic()
    try:
        code = COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    log.debug("%s finished in %.3fs", args.command, time.monotonic() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
