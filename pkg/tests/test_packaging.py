import json
import random
import subprocess
import sys
import zipfile
from datetime import datetime, timezone
from pathlib import Path

import pytest

from shiplight.errors import ArchiveFailed, BundleCollision, StampMismatch
from shiplight.model import (
    CommitMeta,
    ComponentArtifact,
    ComponentKind,
    FileEntry,
    ReleaseStamp,
)
from shiplight.packaging import (
    assemble_bundle,
    load_sidecar_manifest,
    verify_bundle,
    zip_bundle,
)

from helpers import make_tree, tree_checksums

ARCHIVER = (sys.executable, "-m", "shiplight.archiver")
STAMP = ReleaseStamp("20250102-130455Z")
COMMIT = CommitMeta(id="abcdef1234567890", message="ship it",
                    time=datetime(2025, 1, 2, tzinfo=timezone.utc),
                    branch="main")


def make_artifact(tmp_path, kind, files, stamp=STAMP):
    root = tmp_path / "collected" / kind.value
    make_tree(root, files)
    sums = tree_checksums(root)
    entries = tuple(
        FileEntry(path=p, size=(root / p).stat().st_size, sha256=s)
        for p, s in sums.items()
    )
    return ComponentArtifact(kind=kind, stamp=stamp, root=str(root),
                             files=entries)


class TestAssemble:
    def test_forced_layout(self, local_channel, tmp_path):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"app.jar": b"jar"})
        frontend = make_artifact(tmp_path, ComponentKind.FRONTEND,
                                 {"index.html": b"<html>"})
        work = tmp_path / "work"
        bundle_dir = assemble_bundle(local_channel, [backend, frontend],
                                     STAMP, str(work))
        root = Path(bundle_dir)
        assert (root / "backend" / "app.jar").read_bytes() == b"jar"
        assert (root / "frontend" / "index.html").read_bytes() == b"<html>"
        assert (root / "config").is_dir()

    def test_stamp_mismatch(self, local_channel, tmp_path):
        other = ReleaseStamp("20250102-130456Z")
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"a": b"1"}, stamp=other)
        with pytest.raises(StampMismatch):
            assemble_bundle(local_channel, [backend], STAMP,
                            str(tmp_path / "work"))

    def test_bundle_collision(self, local_channel, tmp_path):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND, {"a": b"1"})
        assemble_bundle(local_channel, [backend], STAMP, str(tmp_path / "w"))
        with pytest.raises(BundleCollision):
            assemble_bundle(local_channel, [backend], STAMP,
                            str(tmp_path / "w"))

    def test_component_config_separated(self, local_channel, tmp_path):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"app.bin": b"b", "config/app.conf": b"k=v"})
        bundle_dir = Path(assemble_bundle(local_channel, [backend], STAMP,
                                          str(tmp_path / "w")))
        assert (bundle_dir / "config" / "app.conf").read_bytes() == b"k=v"
        assert not (bundle_dir / "backend" / "config").exists()

    def test_config_collision_between_components(self, local_channel, tmp_path):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"config/shared.conf": b"1"})
        frontend = make_artifact(tmp_path, ComponentKind.FRONTEND,
                                 {"config/shared.conf": b"2"})
        with pytest.raises(ArchiveFailed, match="config"):
            assemble_bundle(local_channel, [backend, frontend], STAMP,
                            str(tmp_path / "w"))


class TestZipBundle:
    def _bundle(self, local_channel, tmp_path, commit=COMMIT):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"app.jar": b"binary"})
        bundle_dir = assemble_bundle(local_channel, [backend], STAMP,
                                     str(tmp_path / "work"))
        return zip_bundle(local_channel, bundle_dir, commit, STAMP,
                          ARCHIVER, built_on="buildhost")

    def test_forced_filename(self, local_channel, tmp_path):
        bundle = self._bundle(local_channel, tmp_path)
        assert bundle.archive_name == \
            "release_20250102-130455Z_main_abcdef12.zip"

    def test_branch_sanitized_in_filename(self, local_channel, tmp_path):
        commit = CommitMeta(id="abcdef1234567890", message="",
                            time=COMMIT.time, branch="feature/x")
        bundle = self._bundle(local_channel, tmp_path, commit=commit)
        assert "_feature-x_" in bundle.archive_name

    def test_release_metadata_embedded(self, local_channel, tmp_path):
        bundle = self._bundle(local_channel, tmp_path)
        with zipfile.ZipFile(bundle.archive_path) as zf:
            meta = json.loads(zf.read("RELEASE.json"))
        assert meta == {
            "stamp": str(STAMP),
            "commit_id": COMMIT.id,
            "commit_message": COMMIT.message,
            "branch": "main",
            "built_on": "buildhost",
        }

    def test_manifest_matches_independent_listing(self, local_channel,
                                                  tmp_path):
        bundle = self._bundle(local_channel, tmp_path)
        listing = subprocess.run(
            [sys.executable, "-m", "zipfile", "-l", bundle.archive_path],
            capture_output=True, text=True)
        listed = {
            line.split()[0] for line in listing.stdout.splitlines()[1:]
            if line.strip() and not line.split()[0].endswith("/")
        }
        assert listed == {e.path for e in bundle.manifest.entries}
        assert "RELEASE.json" in listed

    def test_sidecar_readable(self, local_channel, tmp_path):
        bundle = self._bundle(local_channel, tmp_path)
        sidecar = load_sidecar_manifest(bundle.archive_path)
        assert sidecar == bundle.manifest


class TestVerifyBundle:
    def _published(self, local_channel, tmp_path):
        backend = make_artifact(tmp_path, ComponentKind.BACKEND,
                                {"app.jar": b"x" * 512,
                                 "lib/dep.jar": b"y" * 128})
        bundle_dir = assemble_bundle(local_channel, [backend], STAMP,
                                     str(tmp_path / "work"))
        return zip_bundle(local_channel, bundle_dir, COMMIT, STAMP,
                          ARCHIVER, built_on="h")

    def test_untampered_archive_verifies(self, local_channel, tmp_path):
        bundle = self._published(local_channel, tmp_path)
        report = verify_bundle(bundle.archive_path, bundle.manifest)
        assert report.verified
        assert report.mismatches == []

    def test_member_bit_flip_is_reported_exactly(self, local_channel,
                                                 tmp_path):
        bundle = self._published(local_channel, tmp_path)
        # rebuild the archive with one member's bytes flipped, keeping the
        # stale manifest to compare against
        tampered = tmp_path / "tampered.zip"
        with zipfile.ZipFile(bundle.archive_path) as zin, \
                zipfile.ZipFile(tampered, "w") as zout:
            for info in zin.infolist():
                data = zin.read(info.filename)
                if info.filename == "backend/app.jar":
                    data = bytes([data[0] ^ 0xFF]) + data[1:]
                zout.writestr(info, data)
        stale = bundle.manifest
        fixed = type(stale)(
            stamp=stale.stamp, entries=stale.entries,
            archive_checksum=__import__("shiplight.archiver",
                                        fromlist=["sha256_file"]
                                        ).sha256_file(tampered),
            algorithm=stale.algorithm)
        report = verify_bundle(tampered, fixed)
        assert not report.verified
        flagged = [m for m in report.mismatches if "backend/app.jar" in m]
        assert len(report.mismatches) == 1 and len(flagged) == 1

    def test_truncated_archive_fails_archive_checksum(self, local_channel,
                                                      tmp_path):
        bundle = self._published(local_channel, tmp_path)
        data = Path(bundle.archive_path).read_bytes()
        truncated = tmp_path / "short.zip"
        truncated.write_bytes(data[:-64])
        report = verify_bundle(truncated, bundle.manifest)
        assert not report.verified
        assert any("archive_checksum" in m for m in report.mismatches)

    def test_verify_after_transfer_round_trip(self, local_channel, tmp_path):
        bundle = self._published(local_channel, tmp_path)
        hop1 = tmp_path / "hop1.zip"
        hop2 = tmp_path / "hop2.zip"
        local_channel.copy_to_host(bundle.archive_path, str(hop1))
        local_channel.copy_from_host(str(hop1), str(hop2))
        assert verify_bundle(hop2, bundle.manifest).verified


class TestReproducibility:
    def test_identical_inputs_identical_archives(self, local_channel,
                                                 tmp_path):
        rng = random.Random(5)
        files = {f"f{i}": rng.randbytes(64) for i in range(5)}
        archives = []
        for i in range(2):
            base = tmp_path / f"round{i}"
            backend = make_artifact(base, ComponentKind.BACKEND, files)
            bundle_dir = assemble_bundle(local_channel, [backend], STAMP,
                                         str(base / "work"))
            bundle = zip_bundle(local_channel, bundle_dir, COMMIT, STAMP,
                                ARCHIVER, built_on="h")
            archives.append(Path(bundle.archive_path).read_bytes())
        assert archives[0] == archives[1]
