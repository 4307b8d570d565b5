"""Assemble component outputs into one immutable, timestamped archive.

The bundle directory separates compiled outputs per component plus a
shared ``config/`` area; the archive embeds a ``RELEASE.json`` with the
run's identity and ships with a sidecar checksum manifest so integrity is
checkable without extraction. Identical inputs produce byte-identical
archives (see ``archiver``), which is what makes build reproducibility a
testable property rather than a hope.
"""

from __future__ import annotations

import hashlib
import json
import posixpath
import shlex
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

from .archiver import sha256_file, unpack_archive
from .build import run_root
from .errors import ArchiveFailed, BundleCollision, StampMismatch
from .executor import Channel
from .model import (
    Bundle,
    BundleManifest,
    CommitMeta,
    ComponentArtifact,
    ReleaseStamp,
    archive_filename,
)

RELEASE_META = "RELEASE.json"


def bundle_dir_path(work_root: str, stamp: ReleaseStamp) -> str:
    return posixpath.join(run_root(work_root, stamp), "bundle")


def assemble_bundle(ch: Channel, artifacts: list[ComponentArtifact],
                    stamp: ReleaseStamp, work_root: str) -> str:
    """Lay out ``bundle/{<kind>/..., config/}`` on the host from collected
    component outputs. Files a component placed under its own top-level
    ``config/`` move to the shared config area."""
    if not artifacts:
        raise StampMismatch("nothing to assemble: no artifacts")
    for artifact in artifacts:
        if artifact.stamp != stamp:
            raise StampMismatch(
                f"{artifact.kind} artifact carries {artifact.stamp}, "
                f"bundle wants {stamp}"
            )

    bundle_dir = bundle_dir_path(work_root, stamp)
    ch.run_command(["mkdir", "-p", posixpath.dirname(bundle_dir)],
                   timeout_s=30)
    probe = ch.run_command(["mkdir", bundle_dir], timeout_s=30)
    if not probe.ok:
        raise BundleCollision(f"bundle directory already exists: {bundle_dir}")
    ch.run_command(["mkdir", "-p", posixpath.join(bundle_dir, "config")],
                   timeout_s=30)

    seen_config: set[str] = set()
    for artifact in artifacts:
        kind_dir = posixpath.join(bundle_dir, artifact.kind.value)
        src = shlex.quote(artifact.root)
        dst = shlex.quote(kind_dir)
        copied = ch.run_command(
            ["sh", "-c", f"mkdir -p {dst} && cp -R {src}/. {dst}/"],
            timeout_s=300,
        )
        if not copied.ok:
            raise ArchiveFailed(
                f"cannot assemble {artifact.kind} outputs: "
                f"{copied.stderr.decode(errors='replace').strip()}"
            )
        config_members = [f.path for f in artifact.files
                          if f.path.startswith("config/")]
        for member in config_members:
            if member in seen_config:
                raise ArchiveFailed(
                    f"config file {member!r} provided by more than one component"
                )
            seen_config.add(member)
        if config_members:
            moved = ch.run_command(
                ["sh", "-c",
                 f"cp -R {dst}/config/. {shlex.quote(bundle_dir)}/config/ "
                 f"&& rm -rf {dst}/config"],
                timeout_s=60,
            )
            if not moved.ok:
                raise ArchiveFailed(
                    f"cannot separate config files of {artifact.kind}"
                )
    return bundle_dir


def zip_bundle(ch: Channel, bundle_dir: str, commit: CommitMeta,
               stamp: ReleaseStamp, archiver: tuple[str, ...],
               built_on: str) -> Bundle:
    """Embed RELEASE.json, pack the bundle deterministically on the host,
    and return the Bundle with its parsed manifest. The sidecar manifest
    file lands next to the archive."""
    meta = {
        "stamp": str(stamp),
        "commit_id": commit.id,
        "commit_message": commit.message,
        "branch": commit.branch,
        "built_on": built_on,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as tmp:
        json.dump(meta, tmp, indent=2, sort_keys=True)
        tmp.write("\n")
        tmp_path = tmp.name
    try:
        ch.copy_to_host(tmp_path, posixpath.join(bundle_dir, RELEASE_META))
    finally:
        Path(tmp_path).unlink(missing_ok=True)

    name = archive_filename(stamp, commit.branch, commit.id)
    archive_path = posixpath.join(posixpath.dirname(bundle_dir), name)
    packed = ch.run_command(
        list(archiver) + ["pack", "--out", archive_path,
                          "--stamp", str(stamp), bundle_dir],
        timeout_s=600,
    )
    if not packed.ok:
        raise ArchiveFailed(
            f"archiver failed: {packed.stderr.decode(errors='replace').strip()}"
        )
    manifest = BundleManifest.from_dict(json.loads(packed.stdout))
    return Bundle(stamp=stamp, archive_path=archive_path,
                  manifest=manifest, commit=commit)


@dataclass(slots=True)
class VerificationReport:
    """Outcome of checking an archive against its manifest; corruption is
    reported, never raised."""

    archive: str
    mismatches: list[str] = field(default_factory=list)

    @property
    def verified(self) -> bool:
        return not self.mismatches

    def add(self, message: str) -> None:
        self.mismatches.append(message)


def verify_bundle(archive: str | Path, manifest: BundleManifest) -> VerificationReport:
    """Recompute the archive digest and every member digest after
    extraction to scratch space; list every deviation from the manifest."""
    archive = Path(archive)
    report = VerificationReport(archive=str(archive))
    if not archive.is_file():
        report.add(f"archive missing: {archive}")
        return report

    actual_archive = sha256_file(archive)
    if actual_archive != manifest.archive_checksum:
        report.add(
            "archive_checksum mismatch: "
            f"manifest {manifest.archive_checksum[:12]}.. "
            f"actual {actual_archive[:12]}.."
        )
        return report  # the bytes differ; member diffing would be noise

    with tempfile.TemporaryDirectory(prefix="shiplight-verify-") as scratch:
        try:
            unpack_archive(archive, scratch)
        except Exception as exc:
            report.add(f"extraction failed: {exc}")
            return report
        scratch_path = Path(scratch)
        on_disk = {
            p.relative_to(scratch_path).as_posix(): p
            for p in scratch_path.rglob("*")
            if p.is_file()
        }
        expected = {e.path: e for e in manifest.entries}
        for path in sorted(set(expected) - set(on_disk)):
            report.add(f"missing from archive: {path}")
        for path in sorted(set(on_disk) - set(expected)):
            report.add(f"not in manifest: {path}")
        for path in sorted(set(expected) & set(on_disk)):
            entry = expected[path]
            size = on_disk[path].stat().st_size
            if size != entry.size:
                report.add(f"size mismatch: {path} "
                           f"(manifest {entry.size}, actual {size})")
                continue
            digest = hashlib.sha256(on_disk[path].read_bytes()).hexdigest()
            if digest != entry.sha256:
                report.add(f"checksum mismatch: {path}")
    return report


def load_sidecar_manifest(archive: str | Path) -> BundleManifest:
    sidecar = Path(str(archive) + ".manifest.json")
    return BundleManifest.from_dict(json.loads(sidecar.read_text()))
