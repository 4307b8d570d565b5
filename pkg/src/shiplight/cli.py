"""Operator command surface.

Exit codes: 0 success, 1 run failure or failed verification, 2 usage or
configuration error, 3 a rollback did not restore cleanly (operator
alert). Human-readable output goes to stdout; each run's full log lives
in ``runs/<stamp>/console.log``.
"""

from __future__ import annotations

import argparse
import glob
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from . import report as reportmod
from .config import load_spec
from .deploy import (
    list_rollback_points,
    rollback as deploy_rollback,
    target_state,
)
from .errors import ConfigError, RollbackFailed, ShiplightError
from .executor import open_channel
from .model import ComponentKind, RunState, StoreSpec
from .orchestrator import run_pipeline, serve
from .packaging import load_sidecar_manifest, verify_bundle
from .store import ArtifactStore

EXIT_OK = 0
EXIT_RUN_FAILED = 1
EXIT_USAGE = 2
EXIT_ROLLBACK_ALERT = 3


def _load(spec_path: str):
    try:
        return load_spec(spec_path)
    except ConfigError as exc:
        print(str(exc), file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def cmd_run(args) -> int:
    spec = _load(args.spec)
    run = run_pipeline(spec, args.ref, executor=args.executor,
                       parallel_builds=args.parallel_builds or None)
    print(f"run {run.stamp}: {run.state}")
    for report in run.reports:
        print(f"  {report.stage.value:<16} {report.outcome.value:<8} "
              f"{report.duration_s:8.2f}s  {report.detail[:60]}")
    if run.state == RunState.SUCCEEDED:
        print(f"bundle: {run.download_link}")
        return EXIT_OK
    if run.rollback_failed:
        print("ROLLBACK FAILED: operator attention required", file=sys.stderr)
        return EXIT_ROLLBACK_ALERT
    print(f"failed at {run.failed_stage}: {run.error}", file=sys.stderr)
    return EXIT_RUN_FAILED


def cmd_serve(args) -> int:
    spec = _load(args.spec) if args.spec else None
    stop = threading.Event()

    def handle(signum, frame):
        print("shutting down; letting in-flight runs finish", file=sys.stderr)
        stop.set()

    signal.signal(signal.SIGTERM, handle)
    signal.signal(signal.SIGINT, handle)
    print(f"watching {args.watch} (max {args.max_concurrent} concurrent)")
    processed = serve(args.watch, default_spec=spec,
                      max_concurrent=args.max_concurrent, stop_event=stop)
    print(f"processed {processed} trigger(s)")
    return EXIT_OK


def cmd_rollback(args) -> int:
    spec = _load(args.spec)
    kind = ComponentKind(args.target)
    state = target_state(spec.deploy_root, kind)
    host = spec.deploy_host
    if spec.executor == "local":
        host = type(host)(address="local", role=host.role)
    ch = open_channel(host, connect_timeout_s=spec.connect_timeout_s,
                      allow_list=spec.allow_list())
    try:
        points = list_rollback_points(ch, state)
        if not points:
            print(f"no rollback points for {kind}", file=sys.stderr)
            return EXIT_RUN_FAILED
        if args.to:
            matches = [p for p in points if p.previous_stamp == args.to]
            if not matches:
                known = ", ".join(p.previous_stamp for p in points)
                print(f"no backup holds release {args.to} "
                      f"(restorable: {known})", file=sys.stderr)
                return EXIT_RUN_FAILED
            point = matches[0]
        else:
            point = points[0]
        scripts = spec.scripts.get(kind)
        hc = spec.health_check if kind is ComponentKind.BACKEND else None
        try:
            deploy_rollback(ch, state, point, scripts, hc)
        except RollbackFailed as exc:
            print(f"ROLLBACK FAILED: {exc}", file=sys.stderr)
            return EXIT_ROLLBACK_ALERT
        print(f"{kind} restored to {point.previous_stamp} "
              f"(backup {point.stamp_of_backup})")
        return EXIT_OK
    finally:
        ch.close()


def cmd_releases(args) -> int:
    if args.spec:
        store = ArtifactStore(_load(args.spec).store)
    elif os.environ.get("SHIPLIGHT_STORE_ROOT"):
        store = ArtifactStore(StoreSpec(root=os.environ["SHIPLIGHT_STORE_ROOT"]))
    else:
        print("releases: need --spec or SHIPLIGHT_STORE_ROOT", file=sys.stderr)
        return EXIT_USAGE
    for record in store.list_releases():
        print(f"{record.stamp}  {record.commit.id[:8]:<8}  "
              f"{record.commit.branch:<16}  {record.commit.message}")
    return EXIT_OK


def cmd_verify(args) -> int:
    try:
        manifest = load_sidecar_manifest(args.archive)
    except (OSError, ValueError, KeyError) as exc:
        print(f"cannot load sidecar manifest: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = verify_bundle(args.archive, manifest)
    if result.verified:
        print(f"verified: {args.archive} "
              f"({len(manifest.entries)} entries, 0 mismatches)")
        return EXIT_OK
    print(f"verification FAILED: {args.archive}")
    for mismatch in result.mismatches:
        print(f"  {mismatch}")
    return EXIT_RUN_FAILED


def cmd_report(args) -> int:
    paths = sorted(glob.glob(args.runs))
    records = []
    for path in paths:
        candidate = Path(path)
        if candidate.is_dir():
            candidate = candidate / "run.json"
        if candidate.is_file():
            records.append(reportmod.load_run_record(candidate))
    if not records:
        print(f"no run records match {args.runs!r}", file=sys.stderr)
        return EXIT_USAGE
    mode_report = reportmod.build_mode_report(records, args.mode)
    if args.compare:
        other = json.loads(Path(args.compare).read_text())
        comparison = reportmod.compare_reports(other, mode_report)
        print(reportmod.format_table(comparison), end="")
        output = comparison
    else:
        print(reportmod.format_table(mode_report), end="")
        output = mode_report
    if args.json_out:
        Path(args.json_out).write_text(reportmod.to_json(output))
        print(f"json written to {args.json_out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shiplight",
        description="trigger-and-observe CI/CD with remote container builds, "
                    "immutable bundles, and health-gated atomic deploys",
    )
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_run = sub.add_parser("run", help="execute one pipeline run")
    p_run.add_argument("--spec", required=True)
    p_run.add_argument("--ref", default="", help="branch or commit to build")
    p_run.add_argument("--executor", choices=["local", "ssh"])
    p_run.add_argument("--parallel-builds", action="store_true")
    p_run.set_defaults(fn=cmd_run)

    p_serve = sub.add_parser("serve", help="watch a directory for triggers")
    p_serve.add_argument("--spec", help="default spec for triggers without one")
    p_serve.add_argument("--watch", required=True)
    p_serve.add_argument("--max-concurrent", type=int, default=10)
    p_serve.set_defaults(fn=cmd_serve)

    p_rb = sub.add_parser("rollback", help="restore a target from a backup")
    p_rb.add_argument("--spec", required=True)
    p_rb.add_argument("--target", required=True,
                      choices=[k.value for k in ComponentKind])
    p_rb.add_argument("--to", help="release stamp to restore")
    p_rb.set_defaults(fn=cmd_rollback)

    p_rel = sub.add_parser("releases", help="inspect the artifact store")
    rel_sub = p_rel.add_subparsers(dest="releases_cmd", required=True)
    p_list = rel_sub.add_parser("list", help="published releases, newest first")
    p_list.add_argument("--spec")
    p_list.set_defaults(fn=cmd_releases)

    p_verify = sub.add_parser("verify",
                              help="check an archive against its manifest")
    p_verify.add_argument("archive")
    p_verify.set_defaults(fn=cmd_verify)

    p_report = sub.add_parser("report", help="stage timing report over runs")
    p_report.add_argument("--runs", required=True,
                          help="glob of run dirs or run.json files")
    p_report.add_argument("--mode", required=True)
    p_report.add_argument("--compare",
                          help="baseline report json to compare against")
    p_report.add_argument("--json-out")
    p_report.set_defaults(fn=cmd_report)

    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("SHIPLIGHT_LOG", "WARNING"))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except ShiplightError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUN_FAILED


if __name__ == "__main__":
    sys.exit(main())
