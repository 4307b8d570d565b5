"""Drive one pipeline run end to end, and many of them concurrently.

A run owns a stamp, a per-run directory under the runs root (``run.json``
plus the aggregated ``console.log``), and a sequence of stage reports in
checkout, channel, build, package, deploy, health, post order. The
coordinator process does no build work itself: everything heavy happens
across a channel, and the resource sampler records what the coordinator
actually spent.

Concurrency: a bounded worker pool; deploy sequences targeting the same
host directory serialize on an exclusive per-target lock held from first
backup through any rollback. Stamps are allocated process-wide; two runs
landing in the same second resolve by waiting for the next one.
"""

from __future__ import annotations

import json
import logging
import shutil
import subprocess
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import build as buildmod
from . import deploy as deploymod
from .config import load_spec
from .errors import CheckoutFailed, RollbackFailed, ShiplightError
from .executor import Channel, open_channel
from .model import (
    CommitMeta,
    ComponentKind,
    PipelineSpec,
    ReleaseStamp,
    RollbackPoint,
    RunState,
    Stage,
    StageOutcome,
    StageReport,
    make_release_stamp,
)
from .notify import (
    build_sinks,
    dispatch,
    failure_message,
    log_tail,
    success_message,
)
from .packaging import assemble_bundle, zip_bundle
from .sampling import ControllerSampler
from .store import ArtifactStore

log = logging.getLogger(__name__)

_STAGE_ORDER = {stage: index for index, stage in enumerate(Stage)}

_alloc_lock = threading.Lock()

_target_locks: dict[tuple, threading.Lock] = {}
_target_locks_guard = threading.Lock()


def _target_lock(spec: PipelineSpec, kind: ComponentKind) -> threading.Lock:
    key = (spec.deploy_host.address, spec.deploy_root, kind.value)
    with _target_locks_guard:
        return _target_locks.setdefault(key, threading.Lock())


def allocate_run(runs_root: Path) -> tuple[ReleaseStamp, Path]:
    """One stamp per run: the exclusive creation of the run directory is
    the claim. A second run inside the same second waits it out."""
    runs_root.mkdir(parents=True, exist_ok=True)
    with _alloc_lock:
        while True:
            stamp = make_release_stamp()
            run_dir = runs_root / str(stamp)
            try:
                run_dir.mkdir()
                return stamp, run_dir
            except FileExistsError:
                time.sleep(max(0.05, 1.0 - (time.time() % 1.0)))


class RunLogger:
    """Aggregated log: coordinator stage lines plus raw command output
    from every host, in arrival order."""

    def __init__(self, path: Path):
        self.path = path
        self._lock = threading.Lock()
        self._f = open(path, "ab")

    def line(self, text: str) -> None:
        ts = datetime.now(timezone.utc).strftime("%H:%M:%S")
        with self._lock:
            self._f.write(f"[{ts}] {text}\n".encode())
            self._f.flush()

    def chunk(self, stream: str, data: bytes) -> None:
        with self._lock:
            self._f.write(data)
            self._f.flush()

    def close(self) -> None:
        with self._lock:
            self._f.close()


@dataclass
class PipelineRun:
    stamp: ReleaseStamp
    run_dir: Path
    state: RunState = RunState.RUNNING
    commit: CommitMeta | None = None
    reports: list[StageReport] = field(default_factory=list)
    resources: dict = field(default_factory=dict)
    queue_wait_s: float = 0.0
    failed_stage: str = ""
    error: str = ""
    rollback_failed: bool = False
    restored_stamps: dict = field(default_factory=dict)
    download_link: str = ""

    @property
    def log_path(self) -> Path:
        return self.run_dir / "console.log"

    def add_report(self, report: StageReport) -> None:
        self.reports.append(report)
        self.reports.sort(key=lambda r: _STAGE_ORDER[r.stage])

    def to_dict(self) -> dict:
        return {
            "stamp": str(self.stamp),
            "state": self.state.value,
            "commit": self.commit.to_dict() if self.commit else None,
            "reports": [r.to_dict() for r in self.reports],
            "resources": self.resources,
            "queue_wait_s": round(self.queue_wait_s, 3),
            "failed_stage": self.failed_stage,
            "error": self.error,
            "rollback_failed": self.rollback_failed,
            "restored_stamps": self.restored_stamps,
            "download_link": self.download_link,
        }

    def persist(self) -> None:
        target = self.run_dir / "run.json"
        tmp = target.with_suffix(".tmp")
        tmp.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        tmp.replace(target)


def checkout(source_path: str, ref: str, dest: Path) -> tuple[Path, CommitMeta]:
    """Materialize a clean source tree at ``ref``. A git repository gives
    real commit metadata; a plain directory degrades to the unversioned
    sentinel so the pipeline still works on non-VCS inputs."""
    source = Path(source_path)
    if not source.exists():
        raise CheckoutFailed(f"source path missing: {source}")

    def git(*args, cwd=None):
        return subprocess.run(["git", *args], cwd=cwd, capture_output=True,
                              text=True, timeout=120)

    is_repo = git("-C", str(source), "rev-parse", "--git-dir").returncode == 0
    if not is_repo:
        shutil.copytree(source, dest, symlinks=False)
        return dest, CommitMeta.unversioned()

    cloned = git("clone", "--quiet", str(source), str(dest))
    if cloned.returncode != 0:
        raise CheckoutFailed(f"clone failed: {cloned.stderr.strip()}")
    if ref:
        picked = git("-C", str(dest), "checkout", "--quiet", ref)
        if picked.returncode != 0:
            raise CheckoutFailed(f"unknown ref {ref!r}: {picked.stderr.strip()}")

    commit_id = git("-C", str(dest), "rev-parse", "HEAD").stdout.strip()
    message = git("-C", str(dest), "log", "-1", "--pretty=%s").stdout.strip()
    commit_time = git("-C", str(dest), "log", "-1", "--pretty=%cI").stdout.strip()
    branch = git("-C", str(dest), "rev-parse", "--abbrev-ref", "HEAD").stdout.strip()
    if branch == "HEAD":
        named = git("-C", str(source), "rev-parse", "--abbrev-ref", ref or "HEAD")
        branch = named.stdout.strip() if named.returncode == 0 and \
            named.stdout.strip() != "HEAD" else "detached"
    try:
        when = datetime.fromisoformat(commit_time)
    except ValueError:
        when = datetime.now(timezone.utc)
    return dest, CommitMeta(id=commit_id, message=message, time=when,
                            branch=branch)


class _RunAborted(ShiplightError):
    """Internal: a stage failed; carries which one and whether the failing
    operation already restored targets on its own."""

    def __init__(self, stage: Stage, cause: BaseException | str,
                 restored: dict | None = None):
        super().__init__(str(cause))
        self.stage = stage
        self.restored = restored or {}


class _GateFailed(ShiplightError):
    """Backend deploy failed and restored itself (start failure)."""

    def __init__(self, message: str, restored: dict):
        super().__init__(message)
        self.restored = restored


class Orchestrator:
    def __init__(self, spec: PipelineSpec, executor: str | None = None,
                 parallel_builds: bool | None = None):
        self.spec = spec
        self.executor = executor or spec.executor
        self.parallel_builds = (spec.parallel_builds if parallel_builds is None
                                else parallel_builds)
        self.store = ArtifactStore(spec.store)
        self._deploy_ch: Channel | None = None

    # -- channel helpers ---------------------------------------------------------

    def _open(self, role: str, logger: RunLogger) -> Channel:
        host = self.spec.build_host if role == "build" else self.spec.deploy_host
        if self.executor == "local":
            host = type(host)(address="local", role=host.role)
        ch = open_channel(
            host,
            connect_timeout_s=self.spec.connect_timeout_s,
            allow_list=self.spec.allow_list(),
            transfer_retries=self.spec.transfer_retries,
        )
        ch.set_log_sink(logger.chunk)
        logger.line(f"{role} channel open: session {ch.session_id}")
        return ch

    # -- stage machinery ------------------------------------------------------------

    def _record(self, run: PipelineRun, stage: Stage, outcome: StageOutcome,
                started: datetime, mono0: float, mono1: float,
                detail: str = "") -> None:
        run.add_report(StageReport(
            stage=stage, started=started, duration_s=mono1 - mono0,
            outcome=outcome, detail=detail, mono_start=mono0, mono_end=mono1,
        ))

    def _stage(self, run: PipelineRun, logger: RunLogger, stage: Stage, fn,
               detail: str = ""):
        started = datetime.now(timezone.utc)
        mono0 = time.monotonic()
        logger.line(f"stage {stage} started")
        try:
            value = fn()
        except Exception as exc:
            mono1 = time.monotonic()
            self._record(run, stage, StageOutcome.FAILURE, started,
                         mono0, mono1, detail=str(exc))
            logger.line(f"stage {stage} failed: {exc}")
            raise _RunAborted(stage, exc,
                              getattr(exc, "restored", None)) from exc
        mono1 = time.monotonic()
        self._record(run, stage, StageOutcome.SUCCESS, started, mono0, mono1,
                     detail=detail)
        logger.line(f"stage {stage} done in {mono1 - mono0:.2f}s")
        return value

    def _skip(self, run: PipelineRun, stage: Stage, why: str) -> None:
        now = datetime.now(timezone.utc)
        mono = time.monotonic()
        self._record(run, stage, StageOutcome.SKIPPED, now, mono, mono,
                     detail=why)

    # -- the pipeline ------------------------------------------------------------------

    def run(self, source_ref: str) -> PipelineRun:
        spec = self.spec
        stamp, run_dir = allocate_run(Path(spec.runs_root))
        run = PipelineRun(stamp=stamp, run_dir=run_dir)
        logger = RunLogger(run.log_path)
        logger.line(f"run {stamp} for ref {source_ref!r} "
                    f"(executor: {self.executor})")
        sampler = ControllerSampler()
        sampler.start()

        checkout_dir = run_dir / "checkout"
        build_ch: Channel | None = None
        extra_channels: list[Channel] = []
        bundle = None

        try:
            tree, commit = self._stage(
                run, logger, Stage.CHECKOUT,
                lambda: checkout(spec.source_path, source_ref, checkout_dir),
            )
            run.commit = commit
            logger.line(f"checked out {commit.id} ({commit.branch})")

            build_ch = self._stage(run, logger, Stage.OPEN_CHANNEL,
                                   lambda: self._open("build", logger))

            artifacts = self._build_components(run, logger, build_ch, tree,
                                               stamp, extra_channels)

            def package():
                nonlocal bundle
                bundle_dir = assemble_bundle(build_ch, artifacts, stamp,
                                             spec.work_root)
                bundle = zip_bundle(build_ch, bundle_dir, commit, stamp,
                                    spec.archiver, spec.build_host.address)
                return self.store.publish_bundle(bundle, build_ch)

            archive_local = self._stage(run, logger, Stage.PACKAGE, package)
            run.download_link = self.store.download_link(stamp)

            # sets run.state, performing rollback under the target locks
            self._deploy_phase(run, logger, stamp, archive_local)

        except _RunAborted as aborted:
            if run.state == RunState.RUNNING:
                run.failed_stage = aborted.stage.value
                run.error = str(aborted)
                run.state = RunState.FAILED
        except Exception as exc:  # defensive: failure outside any stage
            if run.state == RunState.RUNNING:
                run.failed_stage = run.failed_stage or "internal"
                run.error = f"{exc}\n{traceback.format_exc()}"
                run.state = RunState.FAILED
            logger.line(f"internal error: {exc}")
        finally:
            if build_ch is not None and build_ch.state == "open":
                removed = buildmod.cleanup_sweep(build_ch, spec.engine,
                                                 spec.work_root, stamp)
                logger.line(
                    f"cleanup sweep removed {removed} leftover container(s)")
            for ch in [build_ch, self._deploy_ch, *extra_channels]:
                if ch is not None:
                    ch.close()
            self._deploy_ch = None
            shutil.rmtree(checkout_dir, ignore_errors=True)
            run.resources = sampler.stop().to_dict()

        if run.state == RunState.SUCCEEDED and spec.store.max_releases:
            try:
                self.store.prune(self._protected_stamps())
            except ShiplightError as exc:
                logger.line(f"retention prune skipped: {exc}")

        run.persist()
        self._notify_phase(run, logger)
        run.persist()
        logger.line(f"run {stamp} finished: {run.state}")
        logger.close()
        return run

    # -- build phase ---------------------------------------------------------------

    def _build_components(self, run, logger, build_ch, tree, stamp,
                          extra_channels) -> list:
        spec = self.spec
        plan = [(ComponentKind.BACKEND, Stage.BUILD_BACKEND),
                (ComponentKind.FRONTEND, Stage.BUILD_FRONTEND)]
        declared = [(k, s) for k, s in plan if k in spec.components]
        for kind, stage in plan:
            if kind not in spec.components:
                self._skip(run, stage, f"component {kind} not declared")

        def build_one(kind: ComponentKind, ch: Channel):
            comp = spec.components[kind]
            artifact = buildmod.build_remote(
                ch, comp, tree, spec.work_root, spec.engine, spec.archiver,
                stamp,
            )
            self.store.publish_component(artifact, ch)
            return artifact

        artifacts = []
        if self.parallel_builds and len(declared) > 1:
            second_ch = self._open("build", logger)
            extra_channels.append(second_ch)
            channels = {declared[0][0]: build_ch, declared[1][0]: second_ch}
            outcomes: dict[ComponentKind, dict] = {}

            def worker(kind: ComponentKind):
                started = datetime.now(timezone.utc)
                mono0 = time.monotonic()
                entry: dict = {"started": started, "mono0": mono0}
                try:
                    entry["artifact"] = build_one(kind, channels[kind])
                except Exception as exc:
                    entry["error"] = exc
                entry["mono1"] = time.monotonic()
                outcomes[kind] = entry

            threads = [threading.Thread(target=worker, args=(k,))
                       for k, _ in declared]
            for t in threads:
                t.start()
            for t in threads:
                t.join()

            first_error: tuple[Stage, Exception] | None = None
            for kind, stage in declared:
                entry = outcomes[kind]
                if "error" in entry:
                    self._record(run, stage, StageOutcome.FAILURE,
                                 entry["started"], entry["mono0"],
                                 entry["mono1"], detail=str(entry["error"]))
                    if first_error is None:
                        first_error = (stage, entry["error"])
                else:
                    artifact = entry["artifact"]
                    self._record(run, stage, StageOutcome.SUCCESS,
                                 entry["started"], entry["mono0"],
                                 entry["mono1"],
                                 detail=f"{len(artifact.files)} file(s)")
                    artifacts.append(artifact)
            if first_error is not None:
                raise _RunAborted(first_error[0], first_error[1])
        else:
            for kind, stage in declared:
                artifact = self._stage(
                    run, logger, stage,
                    lambda k=kind: build_one(k, build_ch),
                )
                logger.line(f"built {kind}: {len(artifact.files)} file(s)")
                artifacts.append(artifact)
        return artifacts

    # -- deploy phase ---------------------------------------------------------------

    def _deploy_phase(self, run: PipelineRun, logger: RunLogger,
                      stamp: ReleaseStamp, archive_local: str) -> None:
        """Frontend then backend behind the per-target locks; any failure
        here rolls back every target this run already promoted before the
        locks are released, and decides the terminal state."""
        spec = self.spec
        kinds = [k for k in (ComponentKind.FRONTEND, ComponentKind.BACKEND)
                 if k in spec.components]
        promoted: list[tuple[deploymod.DeployTargetState, RollbackPoint]] = []

        locks = sorted((_target_lock(spec, k) for k in kinds), key=id)
        wait0 = time.monotonic()
        with ExitStack() as stack:
            for lock in locks:
                lock.acquire()
                stack.callback(lock.release)
            run.queue_wait_s = time.monotonic() - wait0
            logger.line(f"deploy locks acquired after {run.queue_wait_s:.3f}s")

            deploy_ch = self._open("deploy", logger)
            self._deploy_ch = deploy_ch
            try:
                self._deploy_targets(run, logger, deploy_ch, stamp,
                                     archive_local, promoted)
                run.state = RunState.SUCCEEDED
            except _RunAborted as aborted:
                run.failed_stage = aborted.stage.value
                run.error = str(aborted)
                run.restored_stamps.update(aborted.restored)
                if promoted or aborted.restored:
                    self._rollback_phase(run, logger, deploy_ch, promoted)
                else:
                    run.state = RunState.FAILED

    def _deploy_targets(self, run, logger, deploy_ch, stamp, archive_local,
                        promoted) -> None:
        spec = self.spec

        if ComponentKind.FRONTEND in spec.components:
            state = deploymod.target_state(spec.deploy_root,
                                           ComponentKind.FRONTEND)

            def do_frontend():
                rp = deploymod.backup_target(deploy_ch, state, stamp,
                                             spec.backup_retention)
                deploymod.deploy_frontend(
                    deploy_ch, state, stamp, archive_local, rp,
                    spec.config_restore_globs, spec.archiver,
                )
                return rp

            rp_f = self._stage(run, logger, Stage.DEPLOY_FRONTEND, do_frontend)
            promoted.append((state, rp_f))
        else:
            self._skip(run, Stage.DEPLOY_FRONTEND, "no frontend component")

        if ComponentKind.BACKEND in spec.components:
            state = deploymod.target_state(spec.deploy_root,
                                           ComponentKind.BACKEND)
            scripts = spec.scripts[ComponentKind.BACKEND]
            holder: dict = {}

            def do_backend():
                rp = deploymod.backup_target(deploy_ch, state, stamp,
                                             spec.backup_retention)
                holder["rp"] = rp
                result = deploymod.deploy_backend(
                    deploy_ch, state, stamp, archive_local, rp,
                    spec.config_restore_globs, spec.archiver,
                    scripts, spec.health_check,
                )
                if not result.ok and result.health is None:
                    raise _GateFailed(
                        result.detail,
                        restored={state.target.value: rp.previous_stamp},
                    )
                return result

            try:
                result = self._stage(run, logger, Stage.DEPLOY_BACKEND,
                                     do_backend)
            except _RunAborted:
                self._skip(run, Stage.HEALTH_CHECK,
                           "deploy did not reach the gate")
                raise
            self._health_report(run, result)
            if result.ok:
                promoted.append((state, holder["rp"]))
            else:
                raise _RunAborted(
                    Stage.HEALTH_CHECK, result.detail,
                    restored={state.target.value:
                              holder["rp"].previous_stamp},
                )
        else:
            self._skip(run, Stage.DEPLOY_BACKEND, "no backend component")
            self._skip(run, Stage.HEALTH_CHECK, "no backend component")

    def _health_report(self, run: PipelineRun, result) -> None:
        health = result.health
        mono1 = time.monotonic()
        self._record(
            run, Stage.HEALTH_CHECK,
            StageOutcome.SUCCESS if health.passed else StageOutcome.FAILURE,
            datetime.now(timezone.utc),
            mono1 - health.duration_s, mono1,
            detail=json.dumps(health.to_dict()["attempts"]),
        )

    def _rollback_phase(self, run, logger, deploy_ch, promoted) -> None:
        """Restore every target promoted earlier in this run (a failing
        backend already restored itself). The run ends rolled back unless
        a restore fails, which escalates to an operator alert."""
        spec = self.spec

        def do_rollback():
            failures = []
            for state, rp in reversed(promoted):
                scripts = spec.scripts.get(state.target)
                hc = spec.health_check \
                    if state.target is ComponentKind.BACKEND else None
                try:
                    deploymod.rollback(deploy_ch, state, rp, scripts, hc)
                    run.restored_stamps[state.target.value] = rp.previous_stamp
                    logger.line(
                        f"rolled back {state.target} to {rp.previous_stamp}")
                except RollbackFailed as exc:
                    failures.append(f"{state.target}: {exc}")
            if failures:
                raise RollbackFailed("; ".join(failures))
            return len(promoted)

        try:
            self._stage(run, logger, Stage.ROLLBACK, do_rollback)
            run.state = RunState.ROLLED_BACK
        except _RunAborted as exc:
            run.state = RunState.FAILED
            run.rollback_failed = True
            run.error = f"{run.error}; rollback failed: {exc}"

    # -- notify phase -----------------------------------------------------------------

    def _notify_phase(self, run: PipelineRun, logger: RunLogger) -> None:
        sinks = build_sinks(self.spec.notification_sinks)

        def do_notify():
            commit = run.commit.to_dict() if run.commit else \
                {"id": "unknown", "message": "", "time": "", "branch": ""}
            if run.state == RunState.SUCCEEDED:
                message = success_message(
                    str(run.stamp), commit, run.download_link,
                    self._success_backup_refs(run),
                )
            else:
                rollback_info = None
                if run.restored_stamps or run.rollback_failed or \
                        run.state == RunState.ROLLED_BACK:
                    rollback_info = {
                        "attempted": True,
                        "succeeded": not run.rollback_failed,
                        "restored_stamps": run.restored_stamps,
                        "operator_alert": run.rollback_failed,
                    }
                message = failure_message(
                    str(run.stamp), commit, run.failed_stage,
                    log_tail(run.log_path), rollback_info,
                )
            delivered = dispatch(message, sinks)
            logger.line(f"notification delivered to {delivered}/{len(sinks)} "
                        f"sink(s)")
            return message

        try:
            self._stage(run, logger, Stage.NOTIFY, do_notify)
        except _RunAborted:
            pass  # the terminal state is already recorded; never mutate it

    def _success_backup_refs(self, run: PipelineRun) -> dict:
        """Where each displaced release went: the backup directory keyed
        by this run's stamp on every deployed target."""
        spec = self.spec
        refs = {}
        for kind in spec.components:
            state = deploymod.target_state(spec.deploy_root, kind)
            refs[kind.value] = {
                "backup_path": state.backup_path(run.stamp),
            }
        return refs

    def _protected_stamps(self) -> set[str]:
        """Stamps retention must never prune: whatever is active on a
        target plus anything an existing rollback point can restore."""
        spec = self.spec
        protected: set[str] = set()
        ch = None
        try:
            host = spec.deploy_host
            if self.executor == "local":
                host = type(host)(address="local", role=host.role)
            ch = open_channel(host, connect_timeout_s=spec.connect_timeout_s,
                              allow_list=spec.allow_list())
            for kind in spec.components:
                state = deploymod.target_state(spec.deploy_root, kind)
                protected.add(deploymod.read_active_stamp(ch, state))
                for rp in deploymod.list_rollback_points(ch, state):
                    protected.add(rp.previous_stamp)
                    protected.add(str(rp.stamp_of_backup))
        except ShiplightError:
            return {"*"}  # cannot tell what is live: prune nothing
        finally:
            if ch is not None:
                ch.close()
        protected.discard("unstamped")
        return protected


def run_pipeline(spec: PipelineSpec, source_ref: str,
                 executor: str | None = None,
                 parallel_builds: bool | None = None) -> PipelineRun:
    return Orchestrator(spec, executor=executor,
                        parallel_builds=parallel_builds).run(source_ref)


def run_many(jobs: list[tuple[PipelineSpec, str]],
             max_concurrent: int = 10) -> list[PipelineRun]:
    """Execute several runs concurrently under one bounded pool; every run
    reaches a terminal state, and runs sharing a deploy target serialize
    at the deploy stage on the target lock."""
    results: list[PipelineRun | None] = [None] * len(jobs)
    with ThreadPoolExecutor(max_workers=max_concurrent) as pool:
        futures = {
            pool.submit(run_pipeline, spec, ref): index
            for index, (spec, ref) in enumerate(jobs)
        }
        for future, index in futures.items():
            results[index] = future.result()
    return [r for r in results if r is not None]


def serve(watch_dir: str | Path, default_spec: PipelineSpec | None = None,
          max_concurrent: int = 10, stop_event: threading.Event | None = None,
          poll_s: float = 0.5) -> int:
    """Trigger-file daemon: a JSON document ``{"source_ref": .., "spec": ..}``
    dropped into the watch directory starts a run. Claiming is by rename,
    so concurrent daemons never double-run a trigger. Returns the number
    of triggers processed; in-flight runs finish before the call returns."""
    watch = Path(watch_dir)
    watch.mkdir(parents=True, exist_ok=True)
    stop_event = stop_event or threading.Event()
    processed = 0
    with ThreadPoolExecutor(max_workers=max_concurrent) as pool:
        pending = []
        while not stop_event.is_set():
            for trigger in sorted(watch.glob("*.json")):
                claimed = trigger.with_suffix(".claimed")
                try:
                    trigger.rename(claimed)
                except OSError:
                    continue  # someone else took it
                try:
                    doc = json.loads(claimed.read_text())
                    spec = (load_spec(doc["spec"]) if doc.get("spec")
                            else default_spec)
                    if spec is None:
                        raise ValueError("trigger names no spec and no "
                                         "default is configured")
                    ref = doc.get("source_ref", "")
                except (ValueError, KeyError, ShiplightError) as exc:
                    log.error("bad trigger %s: %s", trigger.name, exc)
                    claimed.rename(claimed.with_suffix(".rejected"))
                    continue
                pending.append(pool.submit(run_pipeline, spec, ref))
                processed += 1
            stop_event.wait(poll_s)
        for future in pending:
            future.result()
    return processed
