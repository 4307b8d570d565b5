import ctypes
import subprocess
import sys
import time
from pathlib import Path

import pytest

SUPPORT = Path(__file__).parent / "support"
sys.path.insert(0, str(SUPPORT))


def _libssh_available() -> bool:
    try:
        ctypes.CDLL("libssh.so.4")
        return True
    except OSError:
        return False


HAVE_LIBSSH = _libssh_available()


@pytest.fixture(autouse=True)
def engine_state(tmp_path, monkeypatch):
    """Isolate the container engine simulator's state per test."""
    state = tmp_path / "engine-state"
    monkeypatch.setenv("SHIPLIGHT_ENGINE_STATE", str(state))
    return state


@pytest.fixture
def local_channel():
    from shiplight.executor import LocalChannel

    ch = LocalChannel(retry_backoff_s=0.01)
    yield ch
    ch.close()


class SshStub:
    """A running throwaway SSH daemon plus everything a client needs."""

    def __init__(self, port, host_key, client_key, wrong_key, known_hosts,
                 proc):
        self.port = port
        self.host_key = host_key
        self.client_key = client_key
        self.wrong_key = wrong_key
        self.known_hosts = known_hosts
        self.proc = proc

    def host(self, identity=None):
        from shiplight.model import HostRole, RemoteHost

        return RemoteHost(
            address="127.0.0.1", role=HostRole.BUILD, port=self.port,
            user="tester", identity=str(identity or self.client_key),
            known_hosts=str(self.known_hosts),
        )


def start_ssh_stub(base_dir: Path) -> SshStub:
    keygen = lambda name: subprocess.run(
        ["ssh-keygen", "-q", "-t", "ed25519", "-N", "", "-f",
         str(base_dir / name)], check=True)
    base_dir.mkdir(parents=True, exist_ok=True)
    keygen("host_key")
    keygen("client_key")
    keygen("wrong_key")

    from helpers import free_port

    for _ in range(5):
        port = free_port()
        proc = subprocess.Popen(
            [sys.executable, str(SUPPORT / "sshstubd.py"),
             "--port", str(port),
             "--host-key", str(base_dir / "host_key"),
             "--authorized-key", str(base_dir / "client_key.pub")],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
        line = proc.stdout.readline()
        if line.startswith("READY"):
            break
        proc.kill()
    else:
        raise RuntimeError("cannot start ssh stub")

    host_key_pub = (base_dir / "host_key.pub").read_text().split()
    known_hosts = base_dir / "known_hosts"
    known_hosts.write_text(
        f"[127.0.0.1]:{port} {host_key_pub[0]} {host_key_pub[1]}\n")
    return SshStub(port, base_dir / "host_key", base_dir / "client_key",
                   base_dir / "wrong_key", known_hosts, proc)


@pytest.fixture(scope="session")
def ssh_stub(tmp_path_factory):
    if not HAVE_LIBSSH:
        pytest.skip("libssh.so.4 not available for the throwaway SSH daemon")
    stub = start_ssh_stub(tmp_path_factory.mktemp("sshstub"))
    yield stub
    stub.proc.kill()
    stub.proc.wait()


@pytest.fixture
def ssh_channel(ssh_stub):
    from shiplight.executor import SshChannel

    ch = SshChannel(ssh_stub.host(), connect_timeout_s=10,
                    retry_backoff_s=0.01)
    yield ch
    ch.close()
