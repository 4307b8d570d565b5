"""Deterministic archive tooling used on build and deploy hosts.

``pack`` produces byte-identical archives for identical input trees:
members are added in sorted path order, member timestamps are zeroed to
the ZIP epoch, and the compression settings are fixed. That property is
what makes release reproducibility checkable by comparing digests.

Runs as a console script (``shiplight-archiver``) so hosts only need the
package on PATH; every subcommand is also importable.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import stat
import sys
import zipfile
from pathlib import Path

ZIP_EPOCH = (1980, 1, 1, 0, 0, 0)
_CHUNK = 1024 * 1024


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(_CHUNK), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path) -> list[dict]:
    """Enumerate every regular file under ``root``: sorted relative path,
    size, sha256. Symlinks and special files are skipped."""
    root = Path(root)
    entries = []
    for path in sorted(root.rglob("*")):
        if path.is_symlink() or not path.is_file():
            continue
        rel = path.relative_to(root).as_posix()
        entries.append(
            {"path": rel, "size": path.stat().st_size, "sha256": sha256_file(path)}
        )
    return entries


def pack_tree(root: str | Path, out: str | Path, stamp: str) -> dict:
    """Zip ``root`` into ``out`` deterministically and return the manifest
    (also written beside the archive as ``<out>.manifest.json``)."""
    root = Path(root)
    out = Path(out)
    if not root.is_dir():
        raise FileNotFoundError(f"bundle directory missing: {root}")

    files: list[Path] = []
    dirs: list[Path] = []
    for path in sorted(root.rglob("*")):
        if path.is_symlink():
            continue
        if path.is_dir():
            dirs.append(path)
        elif path.is_file():
            files.append(path)

    entries = []
    with zipfile.ZipFile(out, "w", compression=zipfile.ZIP_DEFLATED,
                         compresslevel=6) as zf:
        for d in dirs:
            if any(d in f.parents for f in files):
                continue  # non-empty dirs are implied by their members
            info = zipfile.ZipInfo(d.relative_to(root).as_posix() + "/", ZIP_EPOCH)
            info.external_attr = (stat.S_IMODE(d.stat().st_mode) | stat.S_IFDIR) << 16
            zf.writestr(info, b"")
        for f in files:
            rel = f.relative_to(root).as_posix()
            info = zipfile.ZipInfo(rel, ZIP_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = stat.S_IMODE(f.stat().st_mode) << 16
            data = f.read_bytes()
            zf.writestr(info, data)
            entries.append(
                {"path": rel, "size": len(data),
                 "sha256": hashlib.sha256(data).hexdigest()}
            )

    manifest = {
        "stamp": stamp,
        "algorithm": "sha256",
        "archive_checksum": sha256_file(out),
        "entries": entries,
    }
    sidecar = Path(str(out) + ".manifest.json")
    sidecar.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def unpack_archive(archive: str | Path, dest: str | Path) -> int:
    """Extract ``archive`` under ``dest``, restoring permission bits.
    Members with absolute paths or ``..`` components are rejected."""
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    count = 0
    with zipfile.ZipFile(archive) as zf:
        for info in zf.infolist():
            name = info.filename
            if name.startswith("/") or ".." in Path(name).parts:
                raise ValueError(f"unsafe archive member: {name!r}")
            target = dest / name
            if info.is_dir():
                target.mkdir(parents=True, exist_ok=True)
                continue
            target.parent.mkdir(parents=True, exist_ok=True)
            with zf.open(info) as src, open(target, "wb") as dst:
                while True:
                    chunk = src.read(_CHUNK)
                    if not chunk:
                        break
                    dst.write(chunk)
            mode = (info.external_attr >> 16) & 0o7777
            if mode:
                os.chmod(target, mode)
            count += 1
    return count


def list_archive(archive: str | Path) -> list[str]:
    with zipfile.ZipFile(archive) as zf:
        return zf.namelist()


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="shiplight-archiver")
    sub = parser.add_subparsers(dest="cmd", required=True)

    p_pack = sub.add_parser("pack", help="deterministically zip a directory")
    p_pack.add_argument("--out", required=True)
    p_pack.add_argument("--stamp", required=True)
    p_pack.add_argument("root")

    p_unpack = sub.add_parser("unpack", help="extract an archive")
    p_unpack.add_argument("archive")
    p_unpack.add_argument("dest")

    p_hash = sub.add_parser("hash", help="hash every file under a directory")
    p_hash.add_argument("root")

    p_list = sub.add_parser("list", help="list archive members")
    p_list.add_argument("archive")

    args = parser.parse_args(argv)
    try:
        if args.cmd == "pack":
            manifest = pack_tree(args.root, args.out, args.stamp)
            json.dump(manifest, sys.stdout, sort_keys=True)
            print()
        elif args.cmd == "unpack":
            unpack_archive(args.archive, args.dest)
        elif args.cmd == "hash":
            json.dump(hash_tree(args.root), sys.stdout, sort_keys=True)
            print()
        elif args.cmd == "list":
            for name in list_archive(args.archive):
                print(name)
    except (OSError, ValueError, zipfile.BadZipFile) as exc:
        print(f"shiplight-archiver: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
