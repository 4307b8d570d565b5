"""Terminal-state notifications with commit metadata and diagnostics.

Every run that reaches a terminal state produces exactly one message:
success messages carry the download link and backup references, failure
messages the failed stage, a log tail, and the rollback outcome. Sinks
are best-effort by contract; a broken mailer must never change what the
pipeline already decided.

Built-in sinks: ``file`` writes one JSON document per message, ``command``
pipes the JSON into an operator-supplied program (point it at a mail
client to get the classic build email).
"""

from __future__ import annotations

import json
import logging
import os
import subprocess
import tempfile
import time
from pathlib import Path

from .errors import SinkFailed

log = logging.getLogger(__name__)

LOG_TAIL_LINES = 100


class FileSink:
    def __init__(self, path: str):
        self.dir = Path(path)

    def deliver(self, message: dict) -> str:
        self.dir.mkdir(parents=True, exist_ok=True)
        name = f"{message['stamp']}.{message['kind']}.json"
        target = self.dir / name
        fd, tmp = tempfile.mkstemp(dir=self.dir, suffix=".tmp")
        try:
            with os.fdopen(fd, "w") as f:
                json.dump(message, f, indent=2, sort_keys=True)
                f.write("\n")
            os.replace(tmp, target)  # one message, atomically visible
        except OSError as exc:
            Path(tmp).unlink(missing_ok=True)
            raise SinkFailed(f"file sink {self.dir}: {exc}") from exc
        return str(target)


class CommandSink:
    def __init__(self, argv: tuple[str, ...]):
        self.argv = tuple(argv)

    def deliver(self, message: dict) -> str:
        try:
            proc = subprocess.run(
                list(self.argv),
                input=json.dumps(message, sort_keys=True).encode(),
                capture_output=True, timeout=30,
            )
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise SinkFailed(f"command sink {self.argv[0]}: {exc}") from exc
        if proc.returncode != 0:
            raise SinkFailed(
                f"command sink {self.argv[0]} exited {proc.returncode}"
            )
        return self.argv[0]


def build_sinks(sink_specs) -> list:
    sinks = []
    for spec in sink_specs:
        if spec["type"] == "file":
            sinks.append(FileSink(spec["path"]))
        elif spec["type"] == "command":
            argv = spec["argv"]
            sinks.append(CommandSink((argv,) if isinstance(argv, str)
                                     else tuple(argv)))
    return sinks


def log_tail(log_path: str | Path, lines: int = LOG_TAIL_LINES) -> str:
    try:
        text = Path(log_path).read_text(errors="replace")
    except OSError:
        return ""
    return "\n".join(text.splitlines()[-lines:])


def success_message(stamp: str, commit: dict, download_link: str,
                    backup_refs: dict) -> dict:
    return {
        "kind": "success",
        "stamp": stamp,
        "commit": commit,
        "download_link": download_link,
        "backup_ref": backup_refs,
        "sent_at": time.time(),
    }


def failure_message(stamp: str, commit: dict, failed_stage: str,
                    tail: str, rollback_info: dict | None) -> dict:
    message = {
        "kind": "failure",
        "stamp": stamp,
        "commit": commit,
        "failed_stage": failed_stage,
        "log_tail": tail,
        "sent_at": time.time(),
    }
    if rollback_info is not None:
        message["rollback"] = rollback_info
    return message


def dispatch(message: dict, sinks) -> int:
    """Deliver to every sink; failures are logged, never raised. Returns
    the number of sinks that accepted the message."""
    delivered = 0
    for sink in sinks:
        try:
            sink.deliver(message)
            delivered += 1
        except SinkFailed as exc:
            log.warning("notification sink failed: %s", exc)
    return delivered
