"""Shared test utilities: tree builders, independent checksum oracle,
stub health endpoint, git repo factory, and pipeline spec scaffolding."""

from __future__ import annotations

import hashlib
import http.server
import os
import random
import socket
import stat
import string
import subprocess
import threading
from pathlib import Path

import yaml


def make_tree(root: Path, files: dict[str, bytes | str]) -> Path:
    """Create files under root from {relative path: content}."""
    root.mkdir(parents=True, exist_ok=True)
    for rel, content in files.items():
        path = root / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(content, str):
            content = content.encode()
        path.write_bytes(content)
    return root


def random_tree(rng: random.Random, root: Path, max_files: int = 6,
                max_depth: int = 3, max_size: int = 2048) -> dict[str, bytes]:
    """Small random file tree; returns {relative path: content}."""
    files = {}
    count = rng.randint(1, max_files)
    for _ in range(count):
        depth = rng.randint(0, max_depth)
        parts = [
            "".join(rng.choices(string.ascii_lowercase, k=rng.randint(1, 8)))
            for _ in range(depth + 1)
        ]
        rel = "/".join(parts)
        if rel in files or any(existing.startswith(rel + "/") or
                               rel.startswith(existing + "/")
                               for existing in files):
            continue
        files[rel] = rng.randbytes(rng.randint(0, max_size))
    if not files:
        files["single"] = rng.randbytes(16)
    make_tree(root, files)
    return files


def tree_checksums(root: Path) -> dict[str, str]:
    """Independent oracle: plain hashlib walk, no shiplight code."""
    sums = {}
    root = Path(root)
    for path in sorted(root.rglob("*")):
        if path.is_file() and not path.is_symlink():
            sums[path.relative_to(root).as_posix()] = hashlib.sha256(
                path.read_bytes()).hexdigest()
    return sums


def free_port() -> int:
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


class StubHealthServer:
    """HTTP endpoint whose status code is flippable mid-test."""

    def __init__(self):
        self.status = 200
        self.hits = 0
        outer = self

        class Handler(http.server.BaseHTTPRequestHandler):
            def do_GET(self):
                outer.hits += 1
                self.send_response(outer.status)
                self.send_header("Content-Length", "2")
                self.end_headers()
                self.wfile.write(b"ok")

            def log_message(self, *args):
                pass

        self.server = http.server.ThreadingHTTPServer(("127.0.0.1", 0), Handler)
        self.port = self.server.server_address[1]
        self.url = f"http://127.0.0.1:{self.port}/health"
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        daemon=True)

    def __enter__(self):
        self._thread.start()
        return self

    def __exit__(self, *exc):
        self.server.shutdown()
        self.server.server_close()


def make_git_repo(path: Path, files: dict[str, str],
                  message: str = "initial commit",
                  branch: str = "main") -> str:
    """Initialize a repo with one commit; returns the commit id."""
    path.mkdir(parents=True, exist_ok=True)
    env = {
        **os.environ,
        "GIT_AUTHOR_NAME": "tester", "GIT_AUTHOR_EMAIL": "t@example.org",
        "GIT_COMMITTER_NAME": "tester", "GIT_COMMITTER_EMAIL": "t@example.org",
    }

    def git(*args):
        return subprocess.run(["git", "-C", str(path), *args],
                              capture_output=True, text=True, env=env,
                              check=True)

    subprocess.run(["git", "init", "-q", "-b", branch, str(path)],
                   capture_output=True, check=True)
    make_tree(path, files)
    git("add", "-A")
    git("commit", "-qm", message)
    return git("rev-parse", "HEAD").stdout.strip()


def write_service_scripts(dir_: Path, marker: Path) -> tuple[str, str]:
    """Stop/start scripts that journal invocations to ``marker``; start is
    non-blocking by construction."""
    dir_.mkdir(parents=True, exist_ok=True)
    stop = dir_ / "stop.sh"
    start = dir_ / "start.sh"
    stop.write_text(
        f"#!/bin/sh\necho \"stop $1 $2\" >> {marker}\nexit 0\n")
    start.write_text(
        f"#!/bin/sh\necho \"start $1 $2\" >> {marker}\nexit 0\n")
    for script in (stop, start):
        script.chmod(script.stat().st_mode | stat.S_IEXEC)
    return str(stop), str(start)


def write_pipeline_config(path: Path, *, source: Path, work_root: Path,
                          deploy_root: Path, store_root: Path,
                          runs_root: Path, health_url: str,
                          scripts: tuple[str, str] | None = None,
                          backend_build: list[str] | None = None,
                          frontend_build: list[str] | None = None,
                          notifications_dir: Path | None = None,
                          executor: str = "local",
                          extra: dict | None = None) -> Path:
    """Write a complete pipeline config for desk-scale runs. Components
    with a build command of None are omitted."""
    if backend_build is None:
        backend_build = [
            "sh", "-c",
            "mkdir -p out && cp -r . out/src 2>/dev/null; "
            "printf backend > out/app.bin",
        ]
    components: dict = {}
    if backend_build:
        components["backend"] = {
            "source": ".",
            "image": {"name": "stub-builder", "tag": "1.0"},
            "build": backend_build,
            "output_dir": "out",
            "timeout_s": 120,
        }
    if frontend_build:
        components["frontend"] = {
            "source": ".",
            "image": {"name": "stub-builder", "tag": "1.0"},
            "build": frontend_build,
            "output_dir": "out",
            "timeout_s": 120,
        }
    doc: dict = {
        "components": components,
        "source": {"path": str(source)},
        "hosts": {"build": {"address": "local"},
                  "deploy": {"address": "local"}},
        "paths": {"work_root": str(work_root),
                  "deploy_root": str(deploy_root),
                  "runs_root": str(runs_root)},
        "store": {"root": str(store_root)},
        "health_check": {"url": health_url, "timeout_s": 2,
                         "attempts": 2, "delay_between_s": 0.05},
        "executor": executor,
        "connect_timeout_s": 5,
    }
    if scripts is not None:
        doc["scripts"] = {"backend": {"stop": scripts[0], "start": scripts[1]}}
    if notifications_dir is not None:
        doc["notifications"] = [{"type": "file",
                                 "path": str(notifications_dir)}]
    if extra:
        doc.update(extra)
    if "backend" not in components:
        doc.pop("health_check", None)
        doc.pop("scripts", None)
    path.write_text(yaml.safe_dump(doc, sort_keys=True))
    return path
