"""Container engine stand-in with a docker-compatible CLI subset.

Understands the argv shapes the build pipeline issues (``run``, ``ps``,
``rm``, ``kill``) so a real engine binary can be dropped in via config
without changing any caller. "Containers" are child processes executed in
the mounted workspace directory, tracked as JSON records under the state
directory (``SHIPLIGHT_ENGINE_STATE``, default ``~/.cache/shiplight-engine``).

Semantics worth knowing:
 - the build command runs with the host side of the ``-v`` mount as its
   working directory, so only files written under the mount survive;
 - ``kill`` marks the record and SIGKILLs the process; the ``run`` side
   then exits 137 and deliberately leaves the record behind even under
   ``--rm``, giving cleanup sweeps a leftover to collect, which mirrors
   the operational case remove-on-exit cannot cover;
 - an image tag of ``unpullable`` fails with exit 125, standing in for a
   registry pull failure.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import signal
import subprocess
import sys
import time
import uuid
from pathlib import Path

EXIT_KILLED = 137
EXIT_ENGINE = 125


def state_dir() -> Path:
    root = os.environ.get("SHIPLIGHT_ENGINE_STATE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "shiplight-engine"


def _record_path(cid: str) -> Path:
    return state_dir() / f"{cid}.json"


def _write_record(record: dict) -> None:
    path = _record_path(record["id"])
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps(record))
    tmp.replace(path)


def _read_record(cid: str) -> dict | None:
    try:
        return json.loads(_record_path(cid).read_text())
    except (OSError, ValueError):
        return None


def _all_records() -> list[dict]:
    records = []
    if not state_dir().is_dir():
        return records
    for path in sorted(state_dir().glob("*.json")):
        try:
            records.append(json.loads(path.read_text()))
        except (OSError, ValueError):
            continue
    return records


def _scratch_dir(cid: str) -> Path:
    return state_dir() / "fs" / cid


def cmd_run(args) -> int:
    labels = {}
    for raw in args.label or []:
        key, _, value = raw.partition("=")
        labels[key] = value

    if args.image.endswith(":unpullable"):
        print(f"Unable to find image '{args.image}' locally", file=sys.stderr)
        print(f"Error response from daemon: pull access denied for {args.image}",
              file=sys.stderr)
        return EXIT_ENGINE

    cwd = None
    for volume in args.volume or []:
        host_part = volume.split(":", 1)[0]
        if not os.path.isabs(host_part):
            continue  # named volumes have no host-side directory here
        cwd = host_part
        if not os.path.isdir(cwd):
            print(f"Error response from daemon: invalid mount path {cwd}",
                  file=sys.stderr)
            return EXIT_ENGINE
        break

    cid = uuid.uuid4().hex[:12]
    scratch = _scratch_dir(cid)
    scratch.mkdir(parents=True, exist_ok=True)
    record = {
        "id": cid,
        "image": args.image,
        "labels": labels,
        "cmd": args.command,
        "pid": 0,
        "status": "created",
        "exit_code": None,
        "created": time.time(),
        "rm": bool(args.rm),
    }
    _write_record(record)

    try:
        # own session per container so kill/rm can take down the whole
        # process tree, the way a real engine tears down its pid namespace
        proc = subprocess.Popen(args.command, cwd=cwd, start_new_session=True)
    except OSError as exc:
        record.update(status="error", exit_code=126)
        _write_record(record)
        print(f"Error response from daemon: {exc}", file=sys.stderr)
        return 126

    record.update(pid=proc.pid, status="running")
    _write_record(record)
    rc = proc.wait()

    latest = _read_record(cid)
    if latest is None or latest.get("status") == "removing":
        # removed out from under us (rm -f): stay gone, report like a kill
        return EXIT_KILLED if rc == -signal.SIGKILL else max(rc, 0)
    killed = latest.get("status") == "killed"
    exit_code = EXIT_KILLED if killed or rc == -signal.SIGKILL else rc
    latest.update(status="killed" if killed else "exited", exit_code=exit_code,
                  pid=0)
    _write_record(latest)

    # remove-on-exit cannot collect an externally killed container; the
    # record stays behind for the labeled cleanup sweep.
    if args.rm and not killed:
        _remove(cid)
    return exit_code


def _kill_group(pid: int) -> None:
    try:
        os.killpg(pid, signal.SIGKILL)
    except (OSError, ProcessLookupError):
        try:
            os.kill(pid, signal.SIGKILL)
        except (OSError, ProcessLookupError):
            pass


def _remove(cid: str) -> bool:
    record = _read_record(cid)
    if record is None:
        return False
    if record.get("status") == "running" and record.get("pid"):
        # mark before killing so the waiting `run` process cannot observe
        # its child's death and resurrect the record after our unlink
        record["status"] = "removing"
        _write_record(record)
        _kill_group(record["pid"])
    shutil.rmtree(_scratch_dir(cid), ignore_errors=True)
    try:
        _record_path(cid).unlink()
    except OSError:
        return False
    return True


def cmd_ps(args) -> int:
    filters = {}
    for raw in args.filter or []:
        if not raw.startswith("label="):
            print(f"invalid filter: {raw}", file=sys.stderr)
            return 1
        key, _, value = raw[len("label="):].partition("=")
        filters[key] = value

    for record in _all_records():
        if not args.all and record.get("status") != "running":
            continue
        labels = record.get("labels", {})
        if any(labels.get(k) != v for k, v in filters.items()):
            continue
        if args.quiet:
            print(record["id"])
        else:
            print(f"{record['id']}  {record['image']}  {record['status']}")
    return 0


def cmd_rm(args) -> int:
    rc = 0
    for cid in args.containers:
        record = _read_record(cid)
        if record is None:
            print(f"Error: No such container: {cid}", file=sys.stderr)
            rc = 1
            continue
        if record.get("status") == "running" and not args.force:
            print(f"Error: cannot remove running container {cid}", file=sys.stderr)
            rc = 1
            continue
        _remove(cid)
        print(cid)
    return rc


def cmd_kill(args) -> int:
    rc = 0
    for cid in args.containers:
        record = _read_record(cid)
        if record is None or record.get("status") != "running":
            print(f"Error: No such running container: {cid}", file=sys.stderr)
            rc = 1
            continue
        record["status"] = "killed"
        _write_record(record)
        _kill_group(record["pid"])
        print(cid)
    return rc


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="shiplight-engine")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run")
    p_run.add_argument("--rm", action="store_true")
    p_run.add_argument("-l", "--label", action="append")
    p_run.add_argument("-v", "--volume", action="append")
    p_run.add_argument("-w", "--workdir")
    p_run.add_argument("image")
    p_run.add_argument("command", nargs=argparse.REMAINDER)

    p_ps = sub.add_parser("ps")
    p_ps.add_argument("-a", "--all", action="store_true")
    p_ps.add_argument("-q", "--quiet", action="store_true")
    p_ps.add_argument("--filter", action="append")

    p_rm = sub.add_parser("rm")
    p_rm.add_argument("-f", "--force", action="store_true")
    p_rm.add_argument("containers", nargs="+")

    p_kill = sub.add_parser("kill")
    p_kill.add_argument("containers", nargs="+")

    args = parser.parse_args(argv)
    if args.cmd == "run":
        if not args.command:
            print("run requires a command", file=sys.stderr)
            return 2
        return cmd_run(args)
    if args.cmd == "ps":
        return cmd_ps(args)
    if args.cmd == "rm":
        return cmd_rm(args)
    if args.cmd == "kill":
        return cmd_kill(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
