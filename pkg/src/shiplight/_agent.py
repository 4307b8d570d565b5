"""Source of the remote command agent.

The SSH channel authenticates once, bootstraps this program on the far
side of the connection, and then multiplexes every command and file
transfer over the surviving stdin/stdout pair using length-prefixed
frames. Keeping the agent to the standard library means the only remote
prerequisite for the channel itself is a python3 interpreter.

Frame layout: 1 byte type, 4 bytes big-endian payload length, payload.
"""

# frame types, shared by agent and controller
HELLO = 1
EXEC = 10
OUT = 20
ERR = 21
EXIT = 22
PUT = 30
GET = 31
DATA = 32
DATA_END = 33
HASH = 34
RESULT = 40
ERROR = 41
CLOSE = 99

AGENT_SOURCE = r'''
import hashlib
import json
import os
import struct
import subprocess
import sys
import tarfile
import tempfile
import threading
import time

HELLO, EXEC, OUT, ERR, EXIT = 1, 10, 20, 21, 22
PUT, GET, DATA, DATA_END, HASH = 30, 31, 32, 33, 34
RESULT, ERROR, CLOSE = 40, 41, 99

stdin = sys.stdin.buffer
stdout = sys.stdout.buffer
wlock = threading.Lock()


def send(ftype, payload=b""):
    with wlock:
        stdout.write(struct.pack(">BI", ftype, len(payload)))
        if payload:
            stdout.write(payload)
        stdout.flush()


def send_json(ftype, obj):
    send(ftype, json.dumps(obj).encode())


def recv():
    hdr = stdin.read(5)
    if len(hdr) < 5:
        return None, b""
    ftype, n = struct.unpack(">BI", hdr)
    payload = b""
    while len(payload) < n:
        chunk = stdin.read(n - len(payload))
        if not chunk:
            return None, b""
        payload += chunk
    return ftype, payload


def kill_session(proc):
    try:
        os.killpg(proc.pid, 9)
    except OSError:
        try:
            proc.kill()
        except OSError:
            pass


def do_exec(req):
    env = dict(os.environ)
    env.update(req.get("env") or {})
    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            req["argv"], stdout=subprocess.PIPE, stderr=subprocess.PIPE,
            env=env, start_new_session=True,
        )
    except OSError as exc:
        send(ERR, ("agent: cannot exec: %s\n" % exc).encode())
        send_json(EXIT, {"exit_code": 127, "timed_out": False,
                         "duration_s": time.monotonic() - started})
        return

    def pump(stream, ftype):
        while True:
            chunk = stream.read(65536)
            if not chunk:
                return
            send(ftype, chunk)

    threads = [
        threading.Thread(target=pump, args=(proc.stdout, OUT), daemon=True),
        threading.Thread(target=pump, args=(proc.stderr, ERR), daemon=True),
    ]
    for t in threads:
        t.start()
    timed_out = False
    timeout = req.get("timeout_s")
    try:
        rc = proc.wait(timeout=timeout)
    except subprocess.TimeoutExpired:
        timed_out = True
        kill_session(proc)
        rc = proc.wait()
    for t in threads:
        t.join(timeout=2.0 if timed_out else None)
    if rc < 0:
        rc = 128 - rc
    send_json(EXIT, {"exit_code": rc, "timed_out": timed_out,
                     "duration_s": time.monotonic() - started})


def check_member(member):
    name = member.name
    parts = name.split("/")
    if name.startswith("/") or ".." in parts:
        raise ValueError("unsafe tar member: %r" % name)


def recv_data_to(fobj):
    while True:
        ftype, payload = recv()
        if ftype == DATA:
            fobj.write(payload)
        elif ftype == DATA_END:
            return True
        else:
            return False


def do_put(req):
    dest = req["dest"]
    kind = req.get("kind", "tree")
    spool = tempfile.TemporaryFile()
    if not recv_data_to(spool):
        send_json(ERROR, {"error": "protocol", "message": "transfer aborted"})
        return
    spool.seek(0)
    moved = 0
    try:
        with tarfile.open(fileobj=spool, mode="r|*") as tf:
            if kind == "file":
                parent = os.path.dirname(dest) or "."
                os.makedirs(parent, exist_ok=True)
                member = tf.next()
                if member is None or not member.isreg():
                    raise ValueError("expected a single file member")
                member.name = os.path.basename(dest)
                tf.extract(member, parent)
                moved = member.size
            else:
                os.makedirs(dest, exist_ok=True)
                for member in tf:
                    check_member(member)
                    if member.isdir() or member.isreg():
                        tf.extract(member, dest)
                        if member.isreg():
                            moved += member.size
    except (OSError, ValueError, tarfile.TarError) as exc:
        err = "InsufficientSpace" if getattr(exc, "errno", 0) == 28 else "transfer"
        send_json(ERROR, {"error": err, "message": str(exc)})
        return
    finally:
        spool.close()
    send_json(RESULT, {"bytes": moved})


def do_get(req):
    src = req["src"]
    if not os.path.exists(src):
        send_json(ERROR, {"error": "RemotePathMissing", "message": src})
        return
    moved = 0
    spool = tempfile.TemporaryFile()
    try:
        with tarfile.open(fileobj=spool, mode="w") as tf:
            if os.path.isfile(src):
                tf.add(src, arcname=os.path.basename(src))
                moved = os.path.getsize(src)
            else:
                for root, dirs, files in os.walk(src):
                    rel = os.path.relpath(root, src)
                    tf.add(root, arcname=rel, recursive=False)
                    for name in sorted(files):
                        full = os.path.join(root, name)
                        if not os.path.isfile(full) or os.path.islink(full):
                            continue
                        arc = name if rel == "." else rel + "/" + name
                        tf.add(full, arcname=arc)
                        moved += os.path.getsize(full)
    except OSError as exc:
        spool.close()
        send_json(ERROR, {"error": "transfer", "message": str(exc)})
        return
    spool.seek(0)
    while True:
        chunk = spool.read(65536)
        if not chunk:
            break
        send(DATA, chunk)
    spool.close()
    send(DATA_END)
    send_json(RESULT, {"bytes": moved, "kind": "file" if os.path.isfile(src) else "tree"})


def do_hash(req):
    root = req["path"]
    if not os.path.exists(root):
        send_json(ERROR, {"error": "RemotePathMissing", "message": root})
        return
    entries = []
    if os.path.isfile(root):
        h = hashlib.sha256(open(root, "rb").read()).hexdigest()
        entries.append({"path": os.path.basename(root),
                        "size": os.path.getsize(root), "sha256": h})
    else:
        for dirpath, dirs, files in os.walk(root):
            for name in files:
                full = os.path.join(dirpath, name)
                if os.path.islink(full) or not os.path.isfile(full):
                    continue
                rel = os.path.relpath(full, root).replace(os.sep, "/")
                h = hashlib.sha256()
                with open(full, "rb") as f:
                    for chunk in iter(lambda: f.read(1 << 20), b""):
                        h.update(chunk)
                entries.append({"path": rel, "size": os.path.getsize(full),
                                "sha256": h.hexdigest()})
    entries.sort(key=lambda e: e["path"])
    send_json(RESULT, {"entries": entries})


def main():
    send_json(HELLO, {"agent": "shiplight", "version": 1, "pid": os.getpid()})
    while True:
        ftype, payload = recv()
        if ftype is None or ftype == CLOSE:
            return
        try:
            req = json.loads(payload) if payload else {}
            if ftype == EXEC:
                do_exec(req)
            elif ftype == PUT:
                do_put(req)
            elif ftype == GET:
                do_get(req)
            elif ftype == HASH:
                do_hash(req)
            else:
                send_json(ERROR, {"error": "protocol",
                                  "message": "unknown frame %d" % ftype})
        except Exception as exc:  # keep the session alive for the next op
            send_json(ERROR, {"error": "agent", "message": str(exc)})


main()
'''
