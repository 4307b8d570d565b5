"""Build one component on the build host inside a throwaway container.

The flow per component: stage sources into a fresh stamped workspace, run
the pinned builder image with the workspace mounted, collect and checksum
whatever landed in the output directory, then remove the workspace. Only
two things survive a build on the host: the retained log and the
collected outputs. A labeled sweep at the end of every pipeline removes
anything a crashed or externally killed container left behind.

Host layout, all under ``<work_root>/<stamp>/``::

    <kind>/           workspace, mounted into the container; removed
    logs/<kind>.log   retained build log
    collected/<kind>  collected outputs, removed by the final sweep
    bundle/, *.zip    produced later by packaging, removed by the sweep
"""

from __future__ import annotations

import json
import posixpath
import shlex
import tempfile
from pathlib import Path

from .errors import (
    BuildFailed,
    CollectEmpty,
    CommandTimeout,
    ContainerKilled,
    ImagePullFailed,
    WorkspaceCollision,
)
from .executor import Channel, CommandResult
from .model import (
    BuilderImageRef,
    ComponentArtifact,
    ComponentKind,
    ComponentSpec,
    FileEntry,
    ReleaseStamp,
)

STAMP_LABEL = "shiplight.stamp"
COMPONENT_LABEL = "shiplight.component"

EXIT_KILLED = 137
EXIT_ENGINE = 125


def run_root(work_root: str, stamp: ReleaseStamp) -> str:
    return posixpath.join(work_root, str(stamp))


def workspace_path(work_root: str, kind: ComponentKind, stamp: ReleaseStamp) -> str:
    return posixpath.join(run_root(work_root, stamp), kind.value)


def collected_path(work_root: str, kind: ComponentKind, stamp: ReleaseStamp) -> str:
    return posixpath.join(run_root(work_root, stamp), "collected", kind.value)


def logs_path(work_root: str, stamp: ReleaseStamp) -> str:
    return posixpath.join(run_root(work_root, stamp), "logs")


def prepare_workspace(ch: Channel, work_root: str, kind: ComponentKind,
                      stamp: ReleaseStamp) -> str:
    """Create a fresh ``<work_root>/<stamp>/<kind>`` directory. An existing
    directory means the stamp is being reused, which is always a bug."""
    ws = workspace_path(work_root, kind, stamp)
    parent = run_root(work_root, stamp)
    ch.run_command(["mkdir", "-p", parent], timeout_s=30)
    result = ch.run_command(["mkdir", ws], timeout_s=30)
    if not result.ok:
        raise WorkspaceCollision(
            f"workspace already exists for ({kind}, {stamp}): {ws}"
        )
    return ws


def ephemeral_container_build(ch: Channel, engine: tuple[str, ...],
                              image: BuilderImageRef, workspace: str,
                              build_cmd: tuple[str, ...], timeout_s: float,
                              stamp: ReleaseStamp, kind: ComponentKind,
                              cache_volume: str = "") -> CommandResult:
    """Run the build command in a labeled remove-on-exit container with the
    workspace mounted at /work. Raises on pull failure, build failure, or
    external termination; the caller still owns log retention and cleanup."""
    argv = list(engine) + [
        "run", "--rm",
        "-l", f"{STAMP_LABEL}={stamp}",
        "-l", f"{COMPONENT_LABEL}={kind}",
        "-v", f"{workspace}:/work",
        "-w", "/work",
    ]
    if cache_volume:
        argv += ["-v", f"{cache_volume}:/cache"]
    argv.append(str(image))
    argv.extend(build_cmd)

    try:
        result = ch.run_command(argv, timeout_s=timeout_s)
    except CommandTimeout as exc:
        raise BuildFailed(
            f"{kind} build exceeded {timeout_s:.0f}s and was killed",
            exc.result,
        ) from exc

    if result.exit_code == EXIT_KILLED:
        raise ContainerKilled(
            f"{kind} build container for {stamp} was terminated externally",
            result,
        )
    if result.exit_code == EXIT_ENGINE:
        stderr = result.stderr.decode(errors="replace")
        if "image" in stderr.lower() or "pull" in stderr.lower():
            raise ImagePullFailed(f"cannot pull {image}: {stderr.strip()}")
        raise BuildFailed(f"container engine error: {stderr.strip()}", result)
    if not result.ok:
        raise BuildFailed(
            f"{kind} build exited {result.exit_code}", result
        )
    return result


def collect_outputs(ch: Channel, archiver: tuple[str, ...], work_root: str,
                    kind: ComponentKind, stamp: ReleaseStamp,
                    output_dir: str) -> ComponentArtifact:
    """Move the build's output directory out of the workspace and checksum
    every file on the host. An empty or missing output directory fails the
    build even when the build command exited 0."""
    ws = workspace_path(work_root, kind, stamp)
    src = posixpath.join(ws, output_dir)
    dest = collected_path(work_root, kind, stamp)
    ch.run_command(["mkdir", "-p", posixpath.dirname(dest)], timeout_s=30)
    moved = ch.run_command(["mv", src, dest], timeout_s=60)
    if not moved.ok:
        raise CollectEmpty(
            f"{kind} build produced no output directory at {src}"
        )
    hashed = ch.run_command(list(archiver) + ["hash", dest], timeout_s=300)
    if not hashed.ok:
        raise CollectEmpty(
            f"cannot enumerate outputs under {dest}: "
            f"{hashed.stderr.decode(errors='replace').strip()}"
        )
    entries = json.loads(hashed.stdout)
    if not entries:
        raise CollectEmpty(f"{kind} build output directory is empty")
    return ComponentArtifact(
        kind=kind,
        stamp=stamp,
        root=dest,
        files=tuple(FileEntry.from_dict(e) for e in entries),
    )


def retain_log(ch: Channel, work_root: str, kind: ComponentKind,
               stamp: ReleaseStamp, output: bytes) -> str:
    """Write the captured build output next to the workspace so the host
    keeps a copy after everything else is swept."""
    logs = logs_path(work_root, stamp)
    ch.run_command(["mkdir", "-p", logs], timeout_s=30)
    target = posixpath.join(logs, f"{kind}.log")
    with tempfile.NamedTemporaryFile() as tmp:
        tmp.write(output)
        tmp.flush()
        ch.copy_to_host(tmp.name, target)
    return target


def remove_workspace(ch: Channel, work_root: str, kind: ComponentKind,
                     stamp: ReleaseStamp) -> None:
    ws = workspace_path(work_root, kind, stamp)
    ch.run_command(["rm", "-rf", ws], timeout_s=60)


def build_remote(ch: Channel, comp: ComponentSpec, source_tree: Path,
                 work_root: str, engine: tuple[str, ...],
                 archiver: tuple[str, ...],
                 stamp: ReleaseStamp) -> ComponentArtifact:
    """Stage, build, collect: the full per-component flow. On any failure
    the workspace is removed and the log retained before the error
    propagates; the container itself never outlives the attempt except
    when killed externally, which the end-of-run sweep covers."""
    ws = prepare_workspace(ch, work_root, comp.kind, stamp)
    src = source_tree / comp.source
    if not src.is_dir():
        remove_workspace(ch, work_root, comp.kind, stamp)
        raise BuildFailed(
            f"{comp.kind} sources missing under checkout: {comp.source!r}"
        )
    ch.copy_to_host(str(src), ws)

    result: CommandResult | None = None
    try:
        result = ephemeral_container_build(
            ch, engine, comp.image, ws, comp.build, comp.timeout_s,
            stamp, comp.kind, comp.cache_volume,
        )
        return collect_outputs(ch, archiver, work_root, comp.kind, stamp,
                               comp.output_dir)
    except (BuildFailed, ContainerKilled) as exc:
        if exc.result is not None:
            result = exc.result
        raise
    finally:
        if result is not None:
            retain_log(ch, work_root, comp.kind, stamp,
                       result.stdout + result.stderr)
        remove_workspace(ch, work_root, comp.kind, stamp)


def cleanup_sweep(ch: Channel, engine: tuple[str, ...], work_root: str,
                  stamp: ReleaseStamp) -> int:
    """Remove every container labeled with the run's stamp and purge the
    run's host directories except retained logs. Returns the number of
    leftover containers removed; never raises."""
    removed = 0
    try:
        listing = ch.run_command(
            list(engine) + ["ps", "-a", "-q", "--filter",
                            f"label={STAMP_LABEL}={stamp}"],
            timeout_s=60,
        )
        ids = [line.strip() for line in listing.text().splitlines() if line.strip()]
        if ids:
            result = ch.run_command(list(engine) + ["rm", "-f"] + ids,
                                    timeout_s=60)
            removed = len([l for l in result.text().splitlines() if l.strip()])
        root = shlex.quote(run_root(work_root, stamp))
        ch.run_command(
            ["sh", "-c",
             f"rm -rf {root}/backend {root}/frontend {root}/collected "
             f"{root}/bundle {root}/incoming; "
             f"rm -f {root}/*.zip {root}/*.manifest.json {root}/RELEASE.json"],
            timeout_s=60,
        )
    except Exception:
        # sweep failures must never mask the pipeline outcome
        pass
    return removed
