"""Deployment: backup, atomic promotion, health gate, restore.

Target layout on the deploy host::

    <deploy_root>/<target>/
        current  -> releases/<stamp>        (or a backup dir after restore)
        releases/<stamp>/                   unpacked release trees
        backups/<stamp>/                    content displaced by run <stamp>
        backups/<stamp>.json                rollback metadata, one line

The promotion itself is two renames: a prepared symlink moved over
``current``. Extraction always completes before any service is stopped,
so the unavailable window of a backend deploy is exactly stop, flip,
start. A reader resolving ``current`` at any instant sees a complete old
tree or a complete new tree, never a partial one.

Restores reactivate the backup directory by pointing ``current`` at it,
which is also why backup pruning refuses to touch whatever the link
currently resolves into. GNU coreutils are assumed on the deploy host
(``mv -T``, ``cp -Rp``).
"""

from __future__ import annotations

import json
import posixpath
import shlex
import time
import urllib.error
import urllib.request
import uuid
from dataclasses import dataclass, field

from .errors import (
    BackupFailed,
    ConfigRestoreFailed,
    PromoteFailed,
    RollbackFailed,
    StartFailed,
    StopFailed,
)
from .executor import Channel
from .model import (
    ComponentKind,
    HealthCheckSpec,
    ReleaseStamp,
    RollbackPoint,
    STAMP_RE,
    ServiceScripts,
    UNSTAMPED,
)


@dataclass(frozen=True, slots=True)
class DeployTargetState:
    """Locator for one deploy target's directories on the host."""

    target: ComponentKind
    root: str

    @property
    def current_link(self) -> str:
        return posixpath.join(self.root, "current")

    @property
    def releases_dir(self) -> str:
        return posixpath.join(self.root, "releases")

    @property
    def backups_dir(self) -> str:
        return posixpath.join(self.root, "backups")

    def release_path(self, stamp: ReleaseStamp | str) -> str:
        return posixpath.join(self.releases_dir, str(stamp))

    def backup_path(self, stamp: ReleaseStamp | str) -> str:
        return posixpath.join(self.backups_dir, str(stamp))


def target_state(deploy_root: str, target: ComponentKind) -> DeployTargetState:
    return DeployTargetState(target=target,
                             root=posixpath.join(deploy_root, target.value))


def ensure_layout(ch: Channel, state: DeployTargetState) -> None:
    ch.run_command(["mkdir", "-p", state.releases_dir, state.backups_dir],
                   timeout_s=30)


def _read_link(ch: Channel, path: str) -> str | None:
    result = ch.run_command(["readlink", path], timeout_s=30)
    if not result.ok:
        return None
    return result.text().strip() or None


def _path_exists(ch: Channel, path: str) -> bool:
    return ch.run_command(["sh", "-c", f"test -e {shlex.quote(path)}"],
                          timeout_s=30).ok


def read_active_stamp(ch: Channel, state: DeployTargetState) -> str:
    """Stamp the target currently serves: the release the link points at,
    the displaced stamp recorded on a reactivated backup, or ``unstamped``."""
    target = _read_link(ch, state.current_link)
    if target is None:
        return UNSTAMPED
    name = posixpath.basename(target.rstrip("/"))
    parent = posixpath.basename(posixpath.dirname(target.rstrip("/")))
    if parent == "releases" and STAMP_RE.match(name):
        return name
    if parent == "backups":
        meta = _read_backup_meta(ch, state, name)
        if meta is not None:
            return meta.previous_stamp
    return UNSTAMPED


def _read_backup_meta(ch: Channel, state: DeployTargetState,
                      name: str) -> RollbackPoint | None:
    result = ch.run_command(
        ["sh", "-c", f"cat {shlex.quote(state.backup_path(name) + '.json')}"],
        timeout_s=30,
    )
    if not result.ok:
        return None
    try:
        return RollbackPoint.from_dict(json.loads(result.text()))
    except (ValueError, KeyError):
        return None


def list_rollback_points(ch: Channel, state: DeployTargetState) -> list[RollbackPoint]:
    """Every restorable snapshot for this target, newest first."""
    result = ch.run_command(
        ["sh", "-c",
         f"cat {shlex.quote(state.backups_dir)}/*.json 2>/dev/null || true"],
        timeout_s=30,
    )
    points = []
    for line in result.text().splitlines():
        line = line.strip()
        if not line:
            continue
        try:
            points.append(RollbackPoint.from_dict(json.loads(line)))
        except (ValueError, KeyError):
            continue
    points.sort(key=lambda p: str(p.stamp_of_backup), reverse=True)
    return points


# -- backup -------------------------------------------------------------------


def backup_target(ch: Channel, state: DeployTargetState, stamp: ReleaseStamp,
                  retention: int) -> RollbackPoint:
    """Preserve whatever the target serves right now under
    ``backups/<stamp>`` before this run touches anything. Also prunes
    backups beyond the retention count, never the newest and never one
    the live link points into."""
    ensure_layout(ch, state)
    backup = state.backup_path(stamp)
    if _path_exists(ch, backup):
        raise BackupFailed(f"backup for {stamp} already exists: {backup}")

    link_target = _read_link(ch, state.current_link)
    legacy_dir = False
    if link_target is not None:
        copied = ch.run_command(
            ["sh", "-c",
             f"cp -Rp {shlex.quote(link_target)} {shlex.quote(backup)}"],
            timeout_s=600,
        )
        if not copied.ok:
            raise BackupFailed(
                f"cannot copy live content of {state.target}: "
                f"{copied.stderr.decode(errors='replace').strip()}"
            )
        previous = read_active_stamp(ch, state)
    elif _path_exists(ch, state.current_link):
        # pre-pipeline content: a plain directory where the link will live
        moved = ch.run_command(["mv", state.current_link, backup], timeout_s=600)
        if not moved.ok:
            raise BackupFailed(
                f"cannot displace legacy directory of {state.target}"
            )
        previous = UNSTAMPED
        legacy_dir = True
    else:
        ch.run_command(["mkdir", "-p", backup], timeout_s=30)
        previous = UNSTAMPED

    rp = RollbackPoint(stamp_of_backup=stamp, target=state.target,
                       backup_path=backup, previous_stamp=previous)
    meta = rp.to_dict()
    meta["legacy_dir"] = legacy_dir
    line = json.dumps(meta)
    ch.run_command(
        ["sh", "-c",
         f"printf '%s\\n' {shlex.quote(line)} > {shlex.quote(backup + '.json')}"],
        timeout_s=30,
    )
    _prune_backups(ch, state, retention)
    return rp


def _prune_backups(ch: Channel, state: DeployTargetState, retention: int) -> None:
    points = list_rollback_points(ch, state)  # newest first
    live = _read_link(ch, state.current_link) or ""
    for point in points[retention:]:
        if point.backup_path.rstrip("/") == live.rstrip("/"):
            continue
        ch.run_command(
            ["rm", "-rf", point.backup_path, point.backup_path + ".json"],
            timeout_s=60,
        )


# -- staging and promotion ------------------------------------------------------


def stage_release(ch: Channel, state: DeployTargetState, stamp: ReleaseStamp,
                  archive_local: str, kind: ComponentKind,
                  archiver: tuple[str, ...]) -> str:
    """Unpack the bundle on the deploy host and materialize this target's
    release tree (component subtree plus shipped config) at
    ``releases/<stamp>``. The tree appears in one rename: complete or
    absent, nothing in between."""
    ensure_layout(ch, state)
    incoming = posixpath.join(state.root, "incoming")
    ch.run_command(["mkdir", "-p", incoming], timeout_s=30)
    remote_zip = posixpath.join(incoming, f"{stamp}.zip")
    ch.copy_to_host(archive_local, remote_zip)

    stage_dir = posixpath.join(state.releases_dir, f".stage-{stamp}")
    partial = posixpath.join(state.releases_dir, f".partial-{stamp}")
    final = state.release_path(stamp)
    unpacked = ch.run_command(
        list(archiver) + ["unpack", remote_zip, stage_dir], timeout_s=600
    )
    if not unpacked.ok:
        raise PromoteFailed(
            f"cannot unpack bundle on deploy host: "
            f"{unpacked.stderr.decode(errors='replace').strip()}"
        )
    q_stage, q_partial = shlex.quote(stage_dir), shlex.quote(partial)
    script = (
        f"rm -rf {q_partial} && mkdir -p {q_partial} && "
        f"if [ -d {q_stage}/{kind.value} ]; then "
        f"cp -Rp {q_stage}/{kind.value}/. {q_partial}/; fi && "
        f"if [ -d {q_stage}/config ]; then mkdir -p {q_partial}/config && "
        f"cp -Rp {q_stage}/config/. {q_partial}/config/; fi"
    )
    built = ch.run_command(["sh", "-c", script], timeout_s=300)
    ch.run_command(["rm", "-rf", stage_dir, remote_zip], timeout_s=60)
    if not built.ok:
        ch.run_command(["rm", "-rf", partial], timeout_s=60)
        raise PromoteFailed(
            f"cannot materialize release tree for {kind}: "
            f"{built.stderr.decode(errors='replace').strip()}"
        )
    placed = ch.run_command(["mv", "-T", partial, final], timeout_s=60)
    if not placed.ok:
        ch.run_command(["rm", "-rf", partial], timeout_s=60)
        raise PromoteFailed(f"release tree already present: {final}")
    return final


def restore_config(ch: Channel, source_dir: str, release_dir: str,
                   globs: tuple[str, ...]) -> None:
    """Carry operator-preserved files (matched by the configured globs)
    from the displaced content into the new release tree."""
    if not globs:
        return
    if not _path_exists(ch, source_dir):
        return
    q_src, q_dst = shlex.quote(source_dir), shlex.quote(release_dir)
    pattern_list = " ".join(shlex.quote(g) for g in globs)
    script = (
        f'cd {q_src} || exit 0; '
        f'for pat in {pattern_list}; do '
        f'  for f in $pat; do '
        f'    if [ -f "$f" ]; then '
        f'      d=$(dirname "$f"); mkdir -p {q_dst}/"$d" && '
        f'      cp -p "$f" {q_dst}/"$f" || exit 1; '
        f'    fi; '
        f'  done; '
        f'done'
    )
    result = ch.run_command(["sh", "-c", script], timeout_s=120)
    if not result.ok:
        raise ConfigRestoreFailed(
            f"config restore into {release_dir} failed: "
            f"{result.stderr.decode(errors='replace').strip()}"
        )


def promote(ch: Channel, state: DeployTargetState, target_path: str) -> None:
    """Point ``current`` at ``target_path`` atomically: prepare a symlink
    under a temporary name, then rename it over the link."""
    tmp = posixpath.join(state.root, f".current-{uuid.uuid4().hex[:8]}")
    linked = ch.run_command(["ln", "-s", target_path, tmp], timeout_s=30)
    if not linked.ok:
        raise PromoteFailed(
            f"cannot prepare link for {state.target}: "
            f"{linked.stderr.decode(errors='replace').strip()}"
        )
    flipped = ch.run_command(["mv", "-T", tmp, state.current_link], timeout_s=30)
    if not flipped.ok:
        ch.run_command(["rm", "-f", tmp], timeout_s=30)
        raise PromoteFailed(
            f"cannot flip link for {state.target}: "
            f"{flipped.stderr.decode(errors='replace').strip()}"
        )


# -- health gate ------------------------------------------------------------------


@dataclass(slots=True)
class HealthResult:
    passed: bool
    attempts: list[dict] = field(default_factory=list)
    duration_s: float = 0.0

    def to_dict(self) -> dict:
        return {"passed": self.passed, "attempts": self.attempts,
                "duration_s": round(self.duration_s, 3)}


def health_check(hc: HealthCheckSpec) -> HealthResult:
    """Probe the endpoint up to the configured attempt count; the first
    response with an accepted status passes the gate. Failure is a value,
    not an exception."""
    started = time.monotonic()
    result = HealthResult(passed=False)
    for attempt in range(1, hc.attempts + 1):
        att_started = time.monotonic()
        status: int | str
        try:
            with urllib.request.urlopen(hc.url, timeout=hc.timeout_s) as resp:
                status = resp.status
        except urllib.error.HTTPError as exc:
            status = exc.code
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            status = f"error: {getattr(exc, 'reason', exc)}"
        elapsed = time.monotonic() - att_started
        result.attempts.append(
            {"attempt": attempt, "status": str(status),
             "elapsed_s": round(elapsed, 3)}
        )
        if isinstance(status, int) and status in hc.success_statuses:
            result.passed = True
            break
        if attempt < hc.attempts and hc.delay_between_s > 0:
            time.sleep(hc.delay_between_s)
    result.duration_s = time.monotonic() - started
    return result


# -- target deploys ------------------------------------------------------------------


def deploy_frontend(ch: Channel, state: DeployTargetState, stamp: ReleaseStamp,
                    archive_local: str, rp: RollbackPoint,
                    config_globs: tuple[str, ...],
                    archiver: tuple[str, ...]) -> None:
    """Stage, restore preserved config, flip. No service scripts and no
    health gate for static content; promotion failures restore the
    previous link target before the error propagates."""
    release_dir = stage_release(ch, state, stamp, archive_local,
                                state.target, archiver)
    previous_target = _read_link(ch, state.current_link)
    try:
        restore_config(ch, rp.backup_path, release_dir, config_globs)
        promote(ch, state, release_dir)
    except PromoteFailed:
        ch.run_command(["rm", "-rf", release_dir], timeout_s=60)
        if previous_target is not None:
            try:
                promote(ch, state, previous_target)
            except PromoteFailed:
                pass  # link was never flipped; nothing to undo
        raise


@dataclass(slots=True)
class BackendDeployResult:
    ok: bool
    health: HealthResult | None = None
    restored: bool = False
    deploy_duration_s: float = 0.0
    detail: str = ""


def deploy_backend(ch: Channel, state: DeployTargetState, stamp: ReleaseStamp,
                   archive_local: str, rp: RollbackPoint,
                   config_globs: tuple[str, ...], archiver: tuple[str, ...],
                   scripts: ServiceScripts, hc: HealthCheckSpec,
                   health_fn=health_check) -> BackendDeployResult:
    """Stop, swap, start under a rollback point, gated by the health
    check. Extraction precedes the stop, so downtime is the two renames
    plus the service scripts. A failed gate restores the backup, restarts
    the old content, and returns a failed result."""
    release_dir = stage_release(ch, state, stamp, archive_local,
                                state.target, archiver)
    restore_config(ch, rp.backup_path, release_dir, config_globs)

    deploy_started = time.monotonic()
    stopped = ch.run_command([scripts.stop, state.target.value, str(stamp)],
                             timeout_s=120)
    if not stopped.ok:
        ch.run_command(["rm", "-rf", release_dir], timeout_s=60)
        raise StopFailed(
            f"stop script exited {stopped.exit_code}; live content untouched"
        )
    try:
        promote(ch, state, release_dir)
    except PromoteFailed:
        ch.run_command(["rm", "-rf", release_dir], timeout_s=60)
        _start_service(ch, state, scripts, stamp)  # old content, best effort
        raise

    started = ch.run_command([scripts.start, state.target.value, str(stamp)],
                             timeout_s=120)
    deploy_duration = time.monotonic() - deploy_started
    if not started.ok:
        _restore_point(ch, state, rp, scripts, stamp)
        ch.run_command(["rm", "-rf", release_dir], timeout_s=60)
        return BackendDeployResult(
            ok=False, restored=True, deploy_duration_s=deploy_duration,
            detail=f"start script exited {started.exit_code}; "
                   f"previous version restored",
        )

    health = health_fn(hc)
    if not health.passed:
        _restore_point(ch, state, rp, scripts, stamp)
        ch.run_command(["rm", "-rf", release_dir], timeout_s=60)
        return BackendDeployResult(
            ok=False, health=health, restored=True,
            deploy_duration_s=deploy_duration,
            detail=f"health gate failed after {len(health.attempts)} attempts; "
                   f"previous version restored",
        )
    return BackendDeployResult(ok=True, health=health,
                               deploy_duration_s=deploy_duration)


def _start_service(ch: Channel, state: DeployTargetState,
                   scripts: ServiceScripts, stamp: ReleaseStamp) -> bool:
    result = ch.run_command([scripts.start, state.target.value, str(stamp)],
                            timeout_s=120)
    return result.ok


def _restore_point(ch: Channel, state: DeployTargetState, rp: RollbackPoint,
                   scripts: ServiceScripts | None,
                   stamp: ReleaseStamp) -> None:
    """Internal restore used by the backend gate; raises RollbackFailed
    only if the link cannot be repointed."""
    if scripts is not None:
        ch.run_command([scripts.stop, state.target.value, str(stamp)],
                       timeout_s=120)
    _reactivate_backup(ch, state, rp)
    if scripts is not None:
        _start_service(ch, state, scripts, stamp)


def _reactivate_backup(ch: Channel, state: DeployTargetState,
                       rp: RollbackPoint) -> None:
    raw = ch.run_command(
        ["sh", "-c", f"cat {shlex.quote(rp.backup_path + '.json')}"],
        timeout_s=30,
    )
    legacy_dir = False
    if raw.ok:
        try:
            legacy_dir = bool(json.loads(raw.text()).get("legacy_dir"))
        except ValueError:
            pass
    if not _path_exists(ch, rp.backup_path):
        raise RollbackFailed(f"backup missing: {rp.backup_path}")

    if rp.previous_stamp == UNSTAMPED and legacy_dir:
        # restore the pre-pipeline plain directory in place of the link
        script = (
            f"rm -f {shlex.quote(state.current_link)} && "
            f"cp -Rp {shlex.quote(rp.backup_path)} "
            f"{shlex.quote(state.current_link)}"
        )
        result = ch.run_command(["sh", "-c", script], timeout_s=600)
        if not result.ok:
            raise RollbackFailed(
                f"cannot restore legacy directory for {state.target}"
            )
    elif rp.previous_stamp == UNSTAMPED:
        # fresh target before this run: return to the empty state
        result = ch.run_command(["rm", "-f", state.current_link], timeout_s=30)
        if not result.ok:
            raise RollbackFailed(f"cannot clear link for {state.target}")
    else:
        promote(ch, state, rp.backup_path)


def rollback(ch: Channel, state: DeployTargetState, rp: RollbackPoint,
             scripts: ServiceScripts | None = None,
             hc: HealthCheckSpec | None = None,
             health_fn=health_check) -> None:
    """Reactivate a rollback point. For a backend target the service is
    restarted on the restored content and the health gate re-checked;
    a gate failure here means the restore did not take and is escalated."""
    try:
        if scripts is not None:
            ch.run_command([scripts.stop, state.target.value,
                            str(rp.stamp_of_backup)], timeout_s=120)
        _reactivate_backup(ch, state, rp)
    except RollbackFailed:
        raise
    except Exception as exc:
        raise RollbackFailed(f"restore of {state.target} failed: {exc}") from exc

    if scripts is not None:
        if not _start_service(ch, state, scripts, rp.stamp_of_backup):
            raise RollbackFailed(
                f"service start failed on restored content of {state.target}"
            )
        if hc is not None:
            health = health_fn(hc)
            if not health.passed:
                raise RollbackFailed(
                    f"restored {state.target} did not pass the health gate"
                )
