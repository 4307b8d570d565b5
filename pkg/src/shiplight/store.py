"""The artifact store: a write-once directory tree of published releases.

Layout: ``<root>/<stamp>/release_<...>.zip`` plus its sidecar manifest,
and optionally ``<root>/<stamp>/components/<kind>/`` for per-component
outputs. Publication commits atomically (exclusive directory creation or
hard link), so a duplicate stamp loses the race cleanly and existing
bytes are never touched. Foreign files in the root are ignored: operators
keep notes there, and that is fine.
"""

from __future__ import annotations

import json
import logging
import os
import shutil
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path

from .errors import DuplicateStamp, StoreUnreachable, UnknownStamp
from .executor import Channel
from .model import (
    Bundle,
    BundleManifest,
    CommitMeta,
    ComponentArtifact,
    ReleaseStamp,
    STAMP_RE,
    StoreSpec,
)
from .packaging import RELEASE_META

log = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class ReleaseRecord:
    stamp: ReleaseStamp
    commit: CommitMeta
    archive: str


class ArtifactStore:
    """Directory-backed store reachable from the coordinator process. A
    remote placement is an operational choice (mount it); the optional
    HTTP base only shapes download links."""

    def __init__(self, spec: StoreSpec):
        self.root = Path(spec.root)
        self.http_base = spec.http_base.rstrip("/") if spec.http_base else ""
        self.max_releases = spec.max_releases

    def _stamp_dir(self, stamp: ReleaseStamp) -> Path:
        return self.root / str(stamp)

    def _require_root(self) -> None:
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise StoreUnreachable(f"store root {self.root}: {exc}") from exc

    # -- publication -----------------------------------------------------------

    def publish_bundle(self, bundle: Bundle, ch: Channel) -> str:
        """Fetch the packed archive and its sidecar from the host that
        built it and commit both under the stamp directory. The hard link
        into place is the commit point: it either lands first or raises."""
        self._require_root()
        stamp_dir = self._stamp_dir(bundle.stamp)
        name = bundle.archive_name
        final = stamp_dir / name
        if final.exists():
            raise DuplicateStamp(f"bundle already published for {bundle.stamp}")

        with tempfile.TemporaryDirectory(dir=self.root,
                                         prefix=".incoming-") as staging:
            staged = Path(staging) / name
            ch.copy_from_host(bundle.archive_path, str(staged))
            ch.copy_from_host(bundle.archive_path + ".manifest.json",
                              str(staged) + ".manifest.json")
            stamp_dir.mkdir(parents=True, exist_ok=True)
            try:
                os.link(staged, final)
            except FileExistsError:
                raise DuplicateStamp(
                    f"bundle already published for {bundle.stamp}"
                ) from None
            try:
                os.link(str(staged) + ".manifest.json",
                        str(final) + ".manifest.json")
            except FileExistsError:
                pass
        return str(final)

    def publish_component(self, artifact: ComponentArtifact, ch: Channel) -> str:
        """Per-component outputs are kept beside the bundle. The exclusive
        mkdir of ``components/<kind>`` is the commit point."""
        self._require_root()
        dest = self._stamp_dir(artifact.stamp) / "components" / artifact.kind.value
        dest.parent.mkdir(parents=True, exist_ok=True)
        try:
            dest.mkdir()
        except FileExistsError:
            raise DuplicateStamp(
                f"{artifact.kind} artifact already published for {artifact.stamp}"
            ) from None
        ch.copy_from_host(artifact.root, str(dest))
        return str(dest)

    # -- retrieval -------------------------------------------------------------

    def _bundle_archive(self, stamp: ReleaseStamp) -> Path | None:
        stamp_dir = self._stamp_dir(stamp)
        if not stamp_dir.is_dir():
            return None
        archives = sorted(stamp_dir.glob("release_*.zip"))
        return archives[0] if archives else None

    def list_releases(self) -> list[ReleaseRecord]:
        """Published releases, newest stamp first. Anything in the root
        that is not a stamped release directory is skipped and logged."""
        if not self.root.is_dir():
            return []
        records = []
        for entry in sorted(self.root.iterdir(), reverse=True):
            if not entry.is_dir() or not STAMP_RE.match(entry.name):
                if not entry.name.startswith("."):
                    log.info("ignoring foreign store entry: %s", entry.name)
                continue
            stamp = ReleaseStamp(entry.name)
            archive = self._bundle_archive(stamp)
            if archive is None:
                log.info("stamp directory without a bundle: %s", entry.name)
                continue
            try:
                with zipfile.ZipFile(archive) as zf:
                    meta = json.loads(zf.read(RELEASE_META))
                commit = CommitMeta(
                    id=meta["commit_id"],
                    message=meta["commit_message"],
                    time=ReleaseStamp(meta["stamp"]).to_datetime(),
                    branch=meta["branch"],
                )
            except (OSError, KeyError, ValueError, zipfile.BadZipFile) as exc:
                log.warning("unreadable release metadata in %s: %s", archive, exc)
                continue
            records.append(ReleaseRecord(stamp=stamp, commit=commit,
                                         archive=str(archive)))
        return records

    def download_link(self, stamp: ReleaseStamp) -> str:
        archive = self._bundle_archive(stamp)
        if archive is None:
            raise UnknownStamp(f"no published bundle for {stamp}")
        if self.http_base:
            return f"{self.http_base}/{stamp}/{archive.name}"
        return str(archive.resolve())

    def archive_path(self, stamp: ReleaseStamp) -> Path:
        archive = self._bundle_archive(stamp)
        if archive is None:
            raise UnknownStamp(f"no published bundle for {stamp}")
        return archive

    def manifest(self, stamp: ReleaseStamp) -> BundleManifest:
        archive = self.archive_path(stamp)
        sidecar = Path(str(archive) + ".manifest.json")
        try:
            return BundleManifest.from_dict(json.loads(sidecar.read_text()))
        except OSError as exc:
            raise StoreUnreachable(f"manifest missing for {stamp}: {exc}") from exc

    def fetch(self, stamp: ReleaseStamp, dest: str | Path) -> Path:
        archive = self.archive_path(stamp)
        dest = Path(dest)
        dest.mkdir(parents=True, exist_ok=True)
        target = dest / archive.name
        shutil.copy(archive, target)
        return target

    # -- retention ---------------------------------------------------------------

    def prune(self, protected: set[str]) -> list[str]:
        """Count-based retention; stamps named in ``protected`` (live
        deployments, stamps referenced by existing rollback points) are
        never pruned. Returns the stamps removed."""
        if not self.max_releases:
            return []
        pruned = []
        releases = self.list_releases()  # newest first
        for record in releases[self.max_releases:]:
            if str(record.stamp) in protected:
                continue
            shutil.rmtree(self._stamp_dir(record.stamp), ignore_errors=True)
            log.info("pruned release %s", record.stamp)
            pruned.append(str(record.stamp))
        return pruned
