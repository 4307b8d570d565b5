"""shiplight: a thin-coordinator CI/CD pipeline.

Builds run in throwaway containers on a build host reached over SSH,
releases are immutable timestamped bundles with checksum manifests, and
deploys are atomic link flips with health-gated automatic rollback. The
coordinator process only orchestrates, aggregates logs, and reports.
"""

from .config import load_spec, parse_spec
from .errors import ShiplightError
from .executor import Channel, CommandResult, LocalChannel, SshChannel, open_channel
from .model import (
    Bundle,
    BundleManifest,
    CommitMeta,
    ComponentArtifact,
    ComponentKind,
    PipelineSpec,
    ReleaseStamp,
    RollbackPoint,
    RunState,
    Stage,
    StageReport,
    make_release_stamp,
)
from .orchestrator import Orchestrator, PipelineRun, run_many, run_pipeline, serve
from .packaging import verify_bundle
from .store import ArtifactStore

__version__ = "0.1.0"

__all__ = [
    "ArtifactStore",
    "Bundle",
    "BundleManifest",
    "Channel",
    "CommandResult",
    "CommitMeta",
    "ComponentArtifact",
    "ComponentKind",
    "LocalChannel",
    "Orchestrator",
    "PipelineRun",
    "PipelineSpec",
    "ReleaseStamp",
    "RollbackPoint",
    "RunState",
    "SshChannel",
    "ShiplightError",
    "Stage",
    "StageReport",
    "load_spec",
    "make_release_stamp",
    "open_channel",
    "parse_spec",
    "run_many",
    "run_pipeline",
    "serve",
    "verify_bundle",
]
