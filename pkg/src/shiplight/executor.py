"""Command execution and file transfer channels.

Two implementations of one contract: :class:`LocalChannel` runs everything
in subprocesses on this machine, :class:`SshChannel` drives the OpenSSH
client and multiplexes commands over a single authenticated session (see
``_agent``). Pipeline code never needs to know which one it holds, and the
test suite runs the same contract assertions against both.

Channels enforce the host allow-list locally: a command whose argv[0] is
not allow-listed is refused before any byte reaches the wire. Commands are
argv vectors end to end; nothing is ever interpolated through a shell by
the channel itself.
"""

from __future__ import annotations

import errno
import json
import os
import shlex
import shutil
import struct
import subprocess
import tarfile
import tempfile
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

from . import _agent
from .archiver import hash_tree
from .errors import (
    AuthFailure,
    ChannelBroken,
    ChannelClosed,
    CommandDenied,
    CommandTimeout,
    ConnectTimeout,
    InsufficientSpace,
    RemotePathMissing,
    TransferInterrupted,
)
from .model import RemoteHost

_TIMEOUT_GRACE_S = 30.0


@dataclass(frozen=True, slots=True)
class CommandResult:
    """Outcome of one remote command: exit code plus fully captured
    streams, even when the command failed or was killed."""

    exit_code: int
    stdout: bytes
    stderr: bytes
    duration_s: float

    @property
    def ok(self) -> bool:
        return self.exit_code == 0

    def text(self) -> str:
        return self.stdout.decode(errors="replace")


class Channel:
    """Base channel: allow-list gate, open/closed state, log streaming,
    and transfer retry policy. Subclasses supply the transport."""

    def __init__(self, host_label: str, allow_list=None,
                 transfer_retries: int = 2, retry_backoff_s: float = 1.0):
        self.host_label = host_label
        self.session_id = uuid.uuid4().hex[:12]
        self.allow_list = frozenset(allow_list) if allow_list is not None else None
        self.transfer_retries = transfer_retries
        self.retry_backoff_s = retry_backoff_s
        self._open = True
        self._log_sink = None
        self._busy = threading.Lock()

    # -- state ---------------------------------------------------------------

    @property
    def state(self) -> str:
        return "open" if self._open else "closed"

    def _require_open(self) -> None:
        if not self._open:
            raise ChannelClosed(f"channel {self.session_id} is closed")

    def close(self) -> None:
        """Idempotent; a second close is a no-op."""
        if not self._open:
            return
        self._open = False
        self._close_impl()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- logging ---------------------------------------------------------------

    def set_log_sink(self, sink) -> None:
        """``sink(stream_name, chunk_bytes)`` is called with output as it
        arrives; the run's aggregated log hangs off this."""
        self._log_sink = sink

    def _emit(self, stream: str, chunk: bytes) -> None:
        if self._log_sink is not None and chunk:
            self._log_sink(stream, chunk)

    # -- commands --------------------------------------------------------------

    def _check_allowed(self, argv) -> None:
        if not argv:
            raise ValueError("empty argv")
        if self.allow_list is None:
            return
        head = argv[0]
        if head in self.allow_list or os.path.basename(head) in self.allow_list:
            return
        raise CommandDenied(
            f"{head!r} is not on the allow-list for {self.host_label}"
        )

    def run_command(self, argv, timeout_s: float | None = None,
                    env: dict | None = None) -> CommandResult:
        self._require_open()
        self._check_allowed(list(argv))
        with self._busy:
            return self._run_impl(list(argv), timeout_s, dict(env or {}))

    # -- transfers -------------------------------------------------------------

    def copy_to_host(self, local_path, remote_path, verify: bool = False) -> int:
        """Replicate a local file or tree at ``remote_path``. Returns file
        content bytes moved. Retries transient interruptions."""
        self._require_open()
        local_path = str(local_path)
        if not os.path.exists(local_path):
            raise FileNotFoundError(local_path)
        moved = self._with_retries(
            lambda: self._copy_to_impl(local_path, str(remote_path))
        )
        if verify:
            self._verify_transfer(local_path, str(remote_path))
        return moved

    def copy_from_host(self, remote_path, local_path) -> int:
        self._require_open()
        return self._with_retries(
            lambda: self._copy_from_impl(str(remote_path), str(local_path))
        )

    def hash_remote(self, remote_path) -> list[dict]:
        """Size and sha256 of every regular file under a host path."""
        self._require_open()
        return self._hash_impl(str(remote_path))

    def _with_retries(self, op):
        attempts = self.transfer_retries + 1
        backoff = self.retry_backoff_s
        for attempt in range(attempts):
            try:
                return op()
            except (RemotePathMissing, InsufficientSpace, ChannelClosed):
                raise
            except (TransferInterrupted, ChannelBroken, OSError) as exc:
                if attempt == attempts - 1:
                    if isinstance(exc, ChannelBroken):
                        raise
                    raise TransferInterrupted(str(exc)) from exc
                time.sleep(backoff)
                backoff *= 2

    def _verify_transfer(self, local_path: str, remote_path: str) -> None:
        if os.path.isfile(local_path):
            import hashlib

            local = [{
                "path": os.path.basename(local_path),
                "size": os.path.getsize(local_path),
                "sha256": hashlib.sha256(
                    Path(local_path).read_bytes()).hexdigest(),
            }]
        else:
            local = hash_tree(local_path)
        remote = self._hash_impl(remote_path)
        if local != remote:
            raise TransferInterrupted(
                f"post-transfer verification mismatch for {remote_path}"
            )

    # -- transport hooks ---------------------------------------------------------

    def _run_impl(self, argv, timeout_s, env) -> CommandResult:
        raise NotImplementedError

    def _copy_to_impl(self, local_path: str, remote_path: str) -> int:
        raise NotImplementedError

    def _copy_from_impl(self, remote_path: str, local_path: str) -> int:
        raise NotImplementedError

    def _hash_impl(self, remote_path: str) -> list[dict]:
        raise NotImplementedError

    def _close_impl(self) -> None:
        raise NotImplementedError


class LocalChannel(Channel):
    """Subprocess-backed channel: the desk-scale double for a remote host.
    Paths behave exactly like remote paths that happen to be local."""

    def __init__(self, allow_list=None, transfer_retries: int = 2,
                 retry_backoff_s: float = 1.0):
        super().__init__("local", allow_list, transfer_retries, retry_backoff_s)
        self._procs: set[subprocess.Popen] = set()

    def _run_impl(self, argv, timeout_s, env) -> CommandResult:
        merged = dict(os.environ)
        merged.update(env)
        started = time.monotonic()
        try:
            # session per command so kill on timeout or close takes the
            # whole process tree (children would otherwise hold the pipes)
            proc = subprocess.Popen(
                argv, stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                env=merged, start_new_session=True,
            )
        except OSError as exc:
            return CommandResult(127, b"", f"{exc}\n".encode(),
                                 time.monotonic() - started)
        self._procs.add(proc)
        out_buf, err_buf = bytearray(), bytearray()

        def pump(stream, name, buf):
            while True:
                chunk = stream.read(65536)
                if not chunk:
                    return
                buf.extend(chunk)
                self._emit(name, chunk)

        threads = [
            threading.Thread(target=pump, args=(proc.stdout, "stdout", out_buf),
                             daemon=True),
            threading.Thread(target=pump, args=(proc.stderr, "stderr", err_buf),
                             daemon=True),
        ]
        for t in threads:
            t.start()
        timed_out = False
        try:
            rc = proc.wait(timeout=timeout_s)
        except subprocess.TimeoutExpired:
            timed_out = True
            _kill_session(proc)
            rc = proc.wait()
        # a killed command may leave orphans in other sessions holding the
        # pipes; take what has arrived rather than waiting on their EOF
        join_timeout = 2.0 if (timed_out or not self._open) else None
        for t in threads:
            t.join(timeout=join_timeout)
        self._procs.discard(proc)
        duration = time.monotonic() - started
        if rc < 0:
            rc = 128 - rc
        result = CommandResult(rc, bytes(out_buf), bytes(err_buf), duration)
        if timed_out:
            raise CommandTimeout(
                f"{argv[0]} exceeded {timeout_s}s and was killed", result
            )
        if not self._open:
            raise ChannelBroken("channel closed while command was in flight")
        return result

    def _copy_to_impl(self, local_path: str, remote_path: str) -> int:
        return _copy_path(local_path, remote_path)

    def _copy_from_impl(self, remote_path: str, local_path: str) -> int:
        if not os.path.exists(remote_path):
            raise RemotePathMissing(remote_path)
        return _copy_path(remote_path, local_path)

    def _hash_impl(self, remote_path: str) -> list[dict]:
        if not os.path.exists(remote_path):
            raise RemotePathMissing(remote_path)
        if os.path.isfile(remote_path):
            import hashlib

            return [{
                "path": os.path.basename(remote_path),
                "size": os.path.getsize(remote_path),
                "sha256": hashlib.sha256(
                    Path(remote_path).read_bytes()).hexdigest(),
            }]
        return hash_tree(remote_path)

    def _close_impl(self) -> None:
        for proc in list(self._procs):
            _kill_session(proc)


def _kill_session(proc: subprocess.Popen) -> None:
    try:
        os.killpg(proc.pid, 9)
    except (OSError, ProcessLookupError):
        try:
            proc.kill()
        except OSError:
            pass


def _copy_path(src: str, dst: str) -> int:
    """File or tree copy preserving relative layout and permission bits
    (not timestamps). Returns file content bytes moved."""
    try:
        if os.path.isfile(src):
            os.makedirs(os.path.dirname(dst) or ".", exist_ok=True)
            shutil.copy(src, dst)
            return os.path.getsize(src)
        moved = 0
        os.makedirs(dst, exist_ok=True)
        for root, dirs, files in os.walk(src):
            rel = os.path.relpath(root, src)
            target_root = os.path.join(dst, rel) if rel != "." else dst
            os.makedirs(target_root, exist_ok=True)
            shutil.copymode(root, target_root)
            for name in files:
                full = os.path.join(root, name)
                if os.path.islink(full) or not os.path.isfile(full):
                    continue
                shutil.copy(full, os.path.join(target_root, name))
                moved += os.path.getsize(full)
        return moved
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise InsufficientSpace(str(exc)) from exc
        raise


_SSH_AUTH_PATTERNS = (
    "permission denied", "host key verification failed",
    "no supported authentication", "too many authentication failures",
)
_SSH_CONNECT_PATTERNS = (
    "timed out", "connection refused", "could not resolve",
    "network is unreachable", "no route to host", "connection reset",
)


class SshChannel(Channel):
    """OpenSSH-client-backed channel. One ssh process, authenticated once
    with key-based auth only, carries every command and transfer of the
    session as length-prefixed frames to a bootstrapped remote agent."""

    def __init__(self, host: RemoteHost, connect_timeout_s: float = 10.0,
                 allow_list=None, transfer_retries: int = 2,
                 retry_backoff_s: float = 1.0, ssh_binary: str = "ssh"):
        super().__init__(f"{host.user}@{host.address}" if host.user else host.address,
                         allow_list, transfer_retries, retry_backoff_s)
        self.host = host
        self._wlock = threading.Lock()
        argv = [
            ssh_binary,
            "-o", "BatchMode=yes",
            "-o", "StrictHostKeyChecking=yes",
            "-o", f"ConnectTimeout={max(1, int(connect_timeout_s))}",
            "-o", "LogLevel=ERROR",
            "-p", str(host.port),
        ]
        if host.identity:
            argv += ["-o", "IdentitiesOnly=yes", "-i", host.identity]
        if host.known_hosts:
            argv += ["-o", f"UserKnownHostsFile={host.known_hosts}"]
        target = f"{host.user}@{host.address}" if host.user else host.address
        bootstrap = (
            "python3 -c " + shlex.quote(
                "import sys;"
                "src=sys.stdin.buffer.read(int(sys.stdin.buffer.readline()));"
                "exec(compile(src,'shiplight-agent','exec'))"
            )
        )
        argv += [target, "--", bootstrap]

        try:
            self._proc = subprocess.Popen(
                argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                stderr=subprocess.PIPE,
            )
        except OSError as exc:
            self._open = False
            raise ConnectTimeout(f"cannot launch ssh: {exc}") from exc

        src = _agent.AGENT_SOURCE.encode()
        try:
            self._proc.stdin.write(str(len(src)).encode() + b"\n")
            self._proc.stdin.write(src)
            self._proc.stdin.flush()
        except (BrokenPipeError, OSError):
            self._fail_open(connect_timeout_s)

        deadline = time.monotonic() + connect_timeout_s + _TIMEOUT_GRACE_S
        try:
            ftype, payload = self._recv_frame(deadline)
        except ChannelBroken:
            self._fail_open(connect_timeout_s)
        if ftype != _agent.HELLO:
            self._fail_open(connect_timeout_s)

    def _fail_open(self, connect_timeout_s: float):
        self._open = False
        try:
            stderr = b""
            if self._proc.poll() is None:
                self._proc.kill()
            if self._proc.stderr is not None:
                stderr = self._proc.stderr.read() or b""
        except OSError:
            stderr = b""
        text = stderr.decode(errors="replace").strip()
        lowered = text.lower()
        if any(p in lowered for p in _SSH_AUTH_PATTERNS):
            raise AuthFailure(f"{self.host_label}: {text}")
        if any(p in lowered for p in _SSH_CONNECT_PATTERNS) or not text:
            raise ConnectTimeout(
                f"{self.host_label}: no connection within "
                f"{connect_timeout_s}s: {text or 'no response'}"
            )
        raise ChannelBroken(f"{self.host_label}: {text}")

    # -- framing -----------------------------------------------------------------

    def _send_frame(self, ftype: int, payload: bytes = b"") -> None:
        with self._wlock:
            try:
                self._proc.stdin.write(struct.pack(">BI", ftype, len(payload)))
                if payload:
                    self._proc.stdin.write(payload)
                self._proc.stdin.flush()
            except (BrokenPipeError, OSError) as exc:
                raise ChannelBroken(f"ssh session lost: {exc}") from exc

    def _send_json(self, ftype: int, obj: dict) -> None:
        self._send_frame(ftype, json.dumps(obj).encode())

    def _recv_frame(self, deadline: float | None = None):
        # The agent always answers promptly; the deadline is a safety net
        # against a wedged transport, enforced by killing the ssh process.
        def read_exact(n: int) -> bytes:
            buf = b""
            while len(buf) < n:
                if deadline is not None and time.monotonic() > deadline:
                    self._proc.kill()
                    raise ChannelBroken("ssh session deadline exceeded")
                chunk = self._proc.stdout.read(n - len(buf))
                if not chunk:
                    raise ChannelBroken("ssh session ended unexpectedly")
                buf += chunk
            return buf

        try:
            hdr = read_exact(5)
            ftype, n = struct.unpack(">BI", hdr)
            return ftype, (read_exact(n) if n else b"")
        except ChannelBroken:
            if self._open:
                raise
            raise ChannelBroken("channel closed while command was in flight")

    # -- transport implementation ---------------------------------------------------

    def _run_impl(self, argv, timeout_s, env) -> CommandResult:
        self._send_json(_agent.EXEC, {
            "argv": argv, "env": env, "timeout_s": timeout_s,
        })
        deadline = None
        if timeout_s is not None:
            deadline = time.monotonic() + timeout_s + _TIMEOUT_GRACE_S
        out_buf, err_buf = bytearray(), bytearray()
        while True:
            ftype, payload = self._recv_frame(deadline)
            if ftype == _agent.OUT:
                out_buf.extend(payload)
                self._emit("stdout", payload)
            elif ftype == _agent.ERR:
                err_buf.extend(payload)
                self._emit("stderr", payload)
            elif ftype == _agent.EXIT:
                info = json.loads(payload)
                result = CommandResult(
                    info["exit_code"], bytes(out_buf), bytes(err_buf),
                    info["duration_s"],
                )
                if info.get("timed_out"):
                    raise CommandTimeout(
                        f"{argv[0]} exceeded {timeout_s}s and was killed", result
                    )
                return result
            else:
                raise ChannelBroken(f"unexpected frame {ftype} during exec")

    def _copy_to_impl(self, local_path: str, remote_path: str) -> int:
        kind = "file" if os.path.isfile(local_path) else "tree"
        self._send_json(_agent.PUT, {"dest": remote_path, "kind": kind})
        with tempfile.TemporaryFile() as spool:
            with tarfile.open(fileobj=spool, mode="w") as tf:
                if kind == "file":
                    tf.add(local_path, arcname=os.path.basename(remote_path))
                else:
                    tf.add(local_path, arcname=".")
            spool.seek(0)
            while True:
                chunk = spool.read(65536)
                if not chunk:
                    break
                self._send_frame(_agent.DATA, chunk)
        self._send_frame(_agent.DATA_END)
        return self._expect_result()["bytes"]

    def _copy_from_impl(self, remote_path: str, local_path: str) -> int:
        self._send_json(_agent.GET, {"src": remote_path})
        with tempfile.TemporaryFile() as spool:
            while True:
                ftype, payload = self._recv_frame()
                if ftype == _agent.DATA:
                    spool.write(payload)
                elif ftype == _agent.DATA_END:
                    break
                elif ftype == _agent.ERROR:
                    self._raise_agent_error(json.loads(payload))
                else:
                    raise ChannelBroken(f"unexpected frame {ftype} during get")
            info = self._expect_result()
            spool.seek(0)
            with tarfile.open(fileobj=spool, mode="r|*") as tf:
                if info.get("kind") == "file":
                    os.makedirs(os.path.dirname(local_path) or ".", exist_ok=True)
                    member = tf.next()
                    member.name = os.path.basename(local_path)
                    tf.extract(member, os.path.dirname(local_path) or ".")
                else:
                    os.makedirs(local_path, exist_ok=True)
                    for member in tf:
                        name_parts = member.name.split("/")
                        if member.name.startswith("/") or ".." in name_parts:
                            raise TransferInterrupted(
                                f"unsafe member from host: {member.name!r}"
                            )
                        if member.isdir() or member.isreg():
                            tf.extract(member, local_path)
        return info["bytes"]

    def _hash_impl(self, remote_path: str) -> list[dict]:
        self._send_json(_agent.HASH, {"path": remote_path})
        return self._expect_result()["entries"]

    def _expect_result(self) -> dict:
        ftype, payload = self._recv_frame()
        if ftype == _agent.ERROR:
            self._raise_agent_error(json.loads(payload))
        if ftype != _agent.RESULT:
            raise ChannelBroken(f"unexpected frame {ftype}, wanted result")
        return json.loads(payload)

    @staticmethod
    def _raise_agent_error(info: dict):
        kind = info.get("error", "")
        message = info.get("message", "")
        if kind == "RemotePathMissing":
            raise RemotePathMissing(message)
        if kind == "InsufficientSpace":
            raise InsufficientSpace(message)
        raise TransferInterrupted(f"{kind}: {message}")

    def _close_impl(self) -> None:
        try:
            self._send_frame(_agent.CLOSE)
        except ChannelBroken:
            pass
        try:
            self._proc.stdin.close()
        except OSError:
            pass
        try:
            self._proc.wait(timeout=5)
        except subprocess.TimeoutExpired:
            self._proc.kill()
            self._proc.wait()


def open_channel(host: RemoteHost, connect_timeout_s: float = 10.0,
                 allow_list=None, transfer_retries: int = 2,
                 retry_backoff_s: float = 1.0) -> Channel:
    """Open a channel to ``host``; ``address == "local"`` yields the
    subprocess channel, anything else the SSH channel."""
    if host.is_local:
        return LocalChannel(allow_list=allow_list,
                            transfer_retries=transfer_retries,
                            retry_backoff_s=retry_backoff_s)
    return SshChannel(host, connect_timeout_s=connect_timeout_s,
                      allow_list=allow_list, transfer_retries=transfer_retries,
                      retry_backoff_s=retry_backoff_s)
