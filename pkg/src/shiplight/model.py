"""Domain types shared by every pipeline stage.

All values here are immutable after construction and safe to hand between
worker threads. Timestamps are UTC throughout; the release stamp string is
the single identity every artifact of a run carries.
"""

from __future__ import annotations

import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from enum import Enum

STAMP_RE = re.compile(r"^[0-9]{8}-[0-9]{6}Z$")
COMMIT_ID_RE = re.compile(r"^[0-9a-fA-F]{7,40}$")
UNVERSIONED_ID = "unversioned"

# characters allowed verbatim in archive file names; everything else becomes "-"
_BRANCH_SAFE_RE = re.compile(r"[^A-Za-z0-9._-]")


class ComponentKind(str, Enum):
    BACKEND = "backend"
    FRONTEND = "frontend"

    def __str__(self) -> str:
        return self.value


class Stage(str, Enum):
    CHECKOUT = "checkout"
    OPEN_CHANNEL = "open_channel"
    BUILD_BACKEND = "build_backend"
    BUILD_FRONTEND = "build_frontend"
    PACKAGE = "package"
    DEPLOY_FRONTEND = "deploy_frontend"
    DEPLOY_BACKEND = "deploy_backend"
    HEALTH_CHECK = "health_check"
    ROLLBACK = "rollback"
    NOTIFY = "notify"

    def __str__(self) -> str:
        return self.value


class StageOutcome(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    SKIPPED = "skipped"

    def __str__(self) -> str:
        return self.value


class RunState(str, Enum):
    QUEUED = "queued"
    RUNNING = "running"
    SUCCEEDED = "succeeded"
    FAILED = "failed"
    ROLLED_BACK = "rolled_back"

    def __str__(self) -> str:
        return self.value


TERMINAL_STATES = frozenset(
    {RunState.SUCCEEDED, RunState.FAILED, RunState.ROLLED_BACK}
)


@dataclass(frozen=True, slots=True, order=True)
class ReleaseStamp:
    """Second-precision UTC instant rendered as ``YYYYMMDD-HHMMSSZ``.

    Lexicographic order of the rendered form equals chronological order,
    which keeps store listings and directory sorts honest.
    """

    value: str

    def __post_init__(self) -> None:
        if not STAMP_RE.match(self.value):
            raise ValueError(f"malformed release stamp: {self.value!r}")

    def __str__(self) -> str:
        return self.value

    @classmethod
    def from_datetime(cls, instant: datetime) -> "ReleaseStamp":
        if instant.tzinfo is None:
            raise ValueError("release stamps require a timezone-aware instant")
        utc = instant.astimezone(timezone.utc)
        return cls(utc.strftime("%Y%m%d-%H%M%S") + "Z")

    def to_datetime(self) -> datetime:
        return datetime.strptime(self.value, "%Y%m%d-%H%M%SZ").replace(
            tzinfo=timezone.utc
        )


_stamp_lock = threading.Lock()
_last_stamp: ReleaseStamp | None = None


def make_release_stamp(clock=None) -> ReleaseStamp:
    """Render the current UTC instant as a stamp.

    Monotonic non-decreasing across calls within one process even if the
    wall clock steps backwards; uniqueness across runs is the orchestrator's
    job (it refuses to start two runs on one stamp).
    """
    global _last_stamp
    instant = clock() if clock is not None else datetime.now(timezone.utc)
    stamp = ReleaseStamp.from_datetime(instant)
    with _stamp_lock:
        if _last_stamp is not None and stamp < _last_stamp:
            stamp = _last_stamp
        _last_stamp = stamp
    return stamp


@dataclass(frozen=True, slots=True)
class CommitMeta:
    """Source revision identity attached to every bundle and notification."""

    id: str
    message: str
    time: datetime
    branch: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("commit id must be non-empty")
        if self.id != UNVERSIONED_ID and not COMMIT_ID_RE.match(self.id):
            raise ValueError(f"commit id must be hexadecimal: {self.id!r}")

    @property
    def short_id(self) -> str:
        return self.id[:8]

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "message": self.message,
            "time": self.time.astimezone(timezone.utc).isoformat(),
            "branch": self.branch,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CommitMeta":
        return cls(
            id=data["id"],
            message=data["message"],
            time=datetime.fromisoformat(data["time"]),
            branch=data["branch"],
        )

    @classmethod
    def unversioned(cls) -> "CommitMeta":
        return cls(
            id=UNVERSIONED_ID,
            message="",
            time=datetime.now(timezone.utc),
            branch="detached",
        )


@dataclass(frozen=True, slots=True)
class BuilderImageRef:
    """Container image pin. Floating tags defeat reproducibility, so a
    literal ``latest`` (or empty) tag is rejected outright."""

    image: str
    tag: str

    def __post_init__(self) -> None:
        if not self.image:
            raise ValueError("builder image name must be non-empty")
        if not self.tag or self.tag == "latest":
            raise ValueError(
                f"builder image {self.image!r} must be pinned to an exact tag, "
                f"got {self.tag!r}"
            )

    def __str__(self) -> str:
        return f"{self.image}:{self.tag}"


class HostRole(str, Enum):
    BUILD = "build"
    DEPLOY = "deploy"


@dataclass(frozen=True, slots=True)
class RemoteHost:
    """One SSH endpoint. ``address == "local"`` selects the in-process
    subprocess channel instead of SSH."""

    address: str
    role: HostRole
    port: int = 22
    user: str = ""
    identity: str = ""
    known_hosts: str = ""

    @property
    def is_local(self) -> bool:
        return self.address == "local"


def sanitize_branch(branch: str) -> str:
    return _BRANCH_SAFE_RE.sub("-", branch) or "-"


def archive_filename(stamp: ReleaseStamp, branch: str, commit_id: str) -> str:
    return f"release_{stamp}_{sanitize_branch(branch)}_{commit_id[:8]}.zip"


@dataclass(frozen=True, slots=True)
class FileEntry:
    """One file inside an artifact or bundle: relative path, size, sha256."""

    path: str
    size: int
    sha256: str

    def to_dict(self) -> dict:
        return {"path": self.path, "size": self.size, "sha256": self.sha256}

    @classmethod
    def from_dict(cls, data: dict) -> "FileEntry":
        return cls(path=data["path"], size=data["size"], sha256=data["sha256"])


@dataclass(frozen=True, slots=True)
class ComponentArtifact:
    """Collected build output of one component for one run. ``root`` is a
    directory on the host that produced the files."""

    kind: ComponentKind
    stamp: ReleaseStamp
    root: str
    files: tuple[FileEntry, ...]

    def __post_init__(self) -> None:
        if not self.files:
            raise ValueError(
                f"{self.kind} artifact for {self.stamp} lists no files"
            )


@dataclass(frozen=True, slots=True)
class BundleManifest:
    """Sidecar integrity record: every archive member with its digest, plus
    the digest of the archive itself."""

    stamp: ReleaseStamp
    entries: tuple[FileEntry, ...]
    archive_checksum: str
    algorithm: str = "sha256"

    def to_dict(self) -> dict:
        return {
            "stamp": str(self.stamp),
            "algorithm": self.algorithm,
            "archive_checksum": self.archive_checksum,
            "entries": [e.to_dict() for e in sorted(self.entries, key=lambda e: e.path)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BundleManifest":
        return cls(
            stamp=ReleaseStamp(data["stamp"]),
            entries=tuple(FileEntry.from_dict(e) for e in data["entries"]),
            archive_checksum=data["archive_checksum"],
            algorithm=data.get("algorithm", "sha256"),
        )


@dataclass(frozen=True, slots=True)
class Bundle:
    """The immutable release archive plus its manifest and commit identity.
    ``archive_path`` points at the host that holds the bytes (build host
    right after packing, store after publication)."""

    stamp: ReleaseStamp
    archive_path: str
    manifest: BundleManifest
    commit: CommitMeta

    @property
    def archive_name(self) -> str:
        return self.archive_path.rsplit("/", 1)[-1]


UNSTAMPED = "unstamped"


@dataclass(frozen=True, slots=True)
class RollbackPoint:
    """Snapshot taken before a swap: where the displaced content went and
    which stamp it carried (``unstamped`` for pre-pipeline content)."""

    stamp_of_backup: ReleaseStamp
    target: ComponentKind
    backup_path: str
    previous_stamp: str = UNSTAMPED

    def to_dict(self) -> dict:
        return {
            "stamp_of_backup": str(self.stamp_of_backup),
            "target": self.target.value,
            "backup_path": self.backup_path,
            "previous_stamp": self.previous_stamp,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RollbackPoint":
        return cls(
            stamp_of_backup=ReleaseStamp(data["stamp_of_backup"]),
            target=ComponentKind(data["target"]),
            backup_path=data["backup_path"],
            previous_stamp=data["previous_stamp"],
        )


@dataclass(frozen=True, slots=True)
class StageReport:
    """Timing and outcome of one pipeline stage.

    ``mono_start``/``mono_end`` come from the process monotonic clock so
    that stage intervals of concurrent runs can be compared exactly; the
    wall-clock ``started`` field is for humans and logs.
    """

    stage: Stage
    started: datetime
    duration_s: float
    outcome: StageOutcome
    detail: str = ""
    mono_start: float = 0.0
    mono_end: float = 0.0

    def __post_init__(self) -> None:
        if self.duration_s < 0:
            raise ValueError("stage duration cannot be negative")

    def to_dict(self) -> dict:
        return {
            "stage": self.stage.value,
            "started": self.started.astimezone(timezone.utc).isoformat(),
            "duration_s": round(self.duration_s, 6),
            "outcome": self.outcome.value,
            "detail": self.detail,
            "mono_start": self.mono_start,
            "mono_end": self.mono_end,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StageReport":
        return cls(
            stage=Stage(data["stage"]),
            started=datetime.fromisoformat(data["started"]),
            duration_s=data["duration_s"],
            outcome=StageOutcome(data["outcome"]),
            detail=data.get("detail", ""),
            mono_start=data.get("mono_start", 0.0),
            mono_end=data.get("mono_end", 0.0),
        )


@dataclass(frozen=True, slots=True)
class HealthCheckSpec:
    """Bounded probe sequence gating a backend deploy."""

    url: str
    timeout_s: float = 5.0
    attempts: int = 5
    delay_between_s: float = 2.0
    success_statuses: frozenset[int] = frozenset(range(200, 300))

    def __post_init__(self) -> None:
        if self.attempts < 1:
            raise ValueError("health check needs at least one attempt")
        if not self.success_statuses:
            raise ValueError("health check needs at least one success status")


@dataclass(frozen=True, slots=True)
class ComponentSpec:
    """How to build one component: where its sources live in the checkout,
    which pinned image builds it, and where outputs land inside the
    mounted workspace."""

    kind: ComponentKind
    source: str
    image: BuilderImageRef
    build: tuple[str, ...]
    output_dir: str = "out"
    timeout_s: float = 1800.0
    cache_volume: str = ""

    def __post_init__(self) -> None:
        if not self.build:
            raise ValueError(f"{self.kind} component has an empty build command")


@dataclass(frozen=True, slots=True)
class ServiceScripts:
    """Operator-supplied stop/start hooks on the deploy host, invoked as
    ``[script, target, stamp]``. Start must not block; readiness is the
    health gate's job."""

    stop: str
    start: str


@dataclass(frozen=True, slots=True)
class StoreSpec:
    root: str
    http_base: str = ""
    max_releases: int = 0  # 0 = keep all


@dataclass(frozen=True, slots=True)
class PipelineSpec:
    """Everything one pipeline run needs, validated at load time."""

    components: dict[ComponentKind, ComponentSpec]
    source_path: str
    build_host: RemoteHost
    deploy_host: RemoteHost
    store: StoreSpec
    work_root: str
    deploy_root: str
    runs_root: str
    health_check: HealthCheckSpec | None
    notification_sinks: tuple[dict, ...] = ()
    backup_retention: int = 3
    config_restore_globs: tuple[str, ...] = ()
    scripts: dict[ComponentKind, ServiceScripts] = field(default_factory=dict)
    engine: tuple[str, ...] = ("shiplight-engine",)
    archiver: tuple[str, ...] = ("shiplight-archiver",)
    parallel_builds: bool = False
    executor: str = "local"
    concurrency: int = 10
    connect_timeout_s: float = 10.0
    transfer_retries: int = 2
    allow_extra: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.components:
            raise ValueError("pipeline declares no components")
        if self.backup_retention < 1:
            raise ValueError("backup_retention must be >= 1")
        if ComponentKind.BACKEND in self.components:
            if self.health_check is None:
                raise ValueError("backend component requires a health check")
            if ComponentKind.BACKEND not in self.scripts:
                raise ValueError("backend component requires stop/start scripts")

    def allow_list(self) -> frozenset[str]:
        """Commands the controller may execute on the hosts: shell and
        workspace tools, the archiver, the engine CLI, service scripts."""
        base = {
            "sh", "mkdir", "mv", "ln", "rm", "cp", "readlink", "tar", "env",
            self.engine[0], self.archiver[0],
        }
        for scripts in self.scripts.values():
            base.add(scripts.stop)
            base.add(scripts.start)
        base.update(self.allow_extra)
        return frozenset(base)
