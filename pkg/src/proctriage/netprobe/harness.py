"""Loopback TLS scenarios and client classification.

Each scenario serves one kind of certificate (or refuses the TLS port
outright) to a client launched as a subprocess, then classifies what the
client did from the server side. Every listener binds 127.0.0.1.
"""

from __future__ import annotations

import errno
import json
import logging
import os
import selectors
import shlex
import socket
import ssl
import subprocess
import sys
import tempfile
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from ..errors import ProbeError
from .certs import CertMaterial, generate_ca, generate_test_cert

log = logging.getLogger(__name__)

HOST = "127.0.0.1"
DEFAULT_TIMEOUT = 15.0

WRONG_CN = "WRONG_CN"
SELF_SIGNED_CORRECT_CN = "SELF_SIGNED_CORRECT_CN"
PORT_BLOCK_DOWNGRADE = "PORT_BLOCK_DOWNGRADE"
KINDS = (WRONG_CN, SELF_SIGNED_CORRECT_CN, PORT_BLOCK_DOWNGRADE)

ABORTED = "ABORTED_HANDSHAKE"
COMPLETED = "COMPLETED_HANDSHAKE"
PLAINTEXT_RETRY = "PLAINTEXT_RETRY_OBSERVED"
NO_CONNECTION = "NO_CONNECTION"

SECURE = "SECURE"
INSECURE_CERT_VALIDATION = "INSECURE_CERT_VALIDATION"
DOWNGRADE_VULNERABLE = "DOWNGRADE_VULNERABLE"
PLAINTEXT_ONLY = "PLAINTEXT_ONLY"
INCONCLUSIVE = "INCONCLUSIVE"

HTTP_METHODS = (b"GET", b"POST", b"PUT", b"HEAD", b"DELETE", b"OPTIONS", b"PATCH", b"CONNECT", b"TRACE")
FIXTURE_CLIENTS = ("strict", "lax", "downgrade", "plaintext")
_PEEK = 16
_GRACE = 2.0


@dataclass(frozen=True)
class ProbeScenario:
    kind: str
    tls_port: int
    plaintext_watch_port: int
    expected_cn: str = "exam.test"
    timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ProbeError(f"unknown scenario kind {self.kind!r}", "BAD_SCENARIO")
        if self.tls_port == self.plaintext_watch_port:
            raise ProbeError("tls_port and plaintext_watch_port must differ", "BAD_SCENARIO")
        for port in (self.tls_port, self.plaintext_watch_port):
            if not 0 < port < 65536:
                raise ProbeError(f"port {port} out of range", "BAD_SCENARIO")
        if not self.timeout > 0:
            raise ProbeError("timeout must be positive", "BAD_SCENARIO")
        if not self.expected_cn:
            raise ProbeError("expected_cn must be non-empty", "BAD_SCENARIO")


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    detail: str = ""


@dataclass(frozen=True)
class TlsVerdict:
    scenario: str
    client_behavior: str
    transcript: tuple = ()

    def __post_init__(self):
        if self.client_behavior == PLAINTEXT_RETRY and self.scenario != PORT_BLOCK_DOWNGRADE:
            raise ValueError("plaintext retries are only classified under PORT_BLOCK_DOWNGRADE")


class _Transcript:
    def __init__(self):
        self._t0 = time.monotonic()
        self._lock = threading.Lock()
        self.events = []

    def add(self, kind: str, detail: str = ""):
        with self._lock:
            self.events.append(Event(time.monotonic() - self._t0, kind, detail))
        log.debug("%s %s", kind, detail)

    def kinds(self) -> list:
        with self._lock:
            return [e.kind for e in self.events]


def is_http_shaped(first: bytes) -> bool:
    return any(first.startswith(m + b" ") for m in HTTP_METHODS)


def _bind(port: int) -> socket.socket:
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    # lets repeated runs reuse ports left in TIME_WAIT; a live listener still conflicts
    sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    try:
        sock.bind((HOST, port))
    except OSError as exc:
        sock.close()
        if exc.errno == errno.EADDRINUSE:
            raise ProbeError(f"port {port} already in use", "PORT_IN_USE") from None
        raise ProbeError(f"cannot bind {HOST}:{port}: {exc}", "PORT_IN_USE") from None
    return sock


def _peek(conn: socket.socket, timeout: float) -> bytes:
    """First bytes of the stream without consuming them."""
    conn.settimeout(timeout)
    deadline = time.monotonic() + timeout
    data = b""
    while time.monotonic() < deadline:
        try:
            data = conn.recv(_PEEK, socket.MSG_PEEK)
        except (socket.timeout, OSError):
            break
        # a short peek may be a partial write; wait for enough to classify
        if not data or len(data) >= 5 or b" " in data:
            break
        time.sleep(0.01)
    return data


def _drain(conn, timeout: float = 0.5):
    conn.settimeout(timeout)
    try:
        while conn.recv(4096):
            pass
    except (socket.timeout, OSError, ssl.SSLError):
        pass


class _Server:
    """Accept loop for the TLS port and the plaintext watch port."""

    def __init__(self, scenario: ProbeScenario, transcript: _Transcript, ctx: Optional[ssl.SSLContext]):
        self.scenario = scenario
        self.tr = transcript
        self.ctx = ctx
        self.stop = threading.Event()
        self.sel = selectors.DefaultSelector()
        self.sockets = []
        self.handlers = []
        self.thread = threading.Thread(target=self._loop, daemon=True)

    def open(self):
        sc = self.scenario
        try:
            tls = _bind(sc.tls_port)
            self.sockets.append(tls)
            watch = _bind(sc.plaintext_watch_port)
            self.sockets.append(watch)
        except ProbeError:
            self.close()
            raise
        if sc.kind == PORT_BLOCK_DOWNGRADE:
            # bound but never listening: the kernel answers SYNs with RST
            self.tr.add("TLS_PORT_BLOCKED", f"{HOST}:{sc.tls_port}")
        else:
            tls.listen(8)
            tls.setblocking(False)
            self.sel.register(tls, selectors.EVENT_READ, self._handle_tls)
            self.tr.add("TLS_LISTENING", f"{HOST}:{sc.tls_port}")
        watch.listen(8)
        watch.setblocking(False)
        self.sel.register(watch, selectors.EVENT_READ, self._handle_plain)
        self.tr.add("WATCH_LISTENING", f"{HOST}:{sc.plaintext_watch_port}")
        self.thread.start()

    def _loop(self):
        while not self.stop.is_set():
            for key, _ in self.sel.select(timeout=0.05):
                try:
                    conn, peer = key.fileobj.accept()
                except (BlockingIOError, OSError):
                    continue
                conn.setblocking(True)
                t = threading.Thread(target=key.data, args=(conn, peer), daemon=True)
                self.handlers.append(t)
                t.start()

    def _handle_tls(self, conn, peer):
        self.tr.add("TLS_PORT_CONNECT", f"{peer[0]}:{peer[1]}")
        timeout = self.scenario.timeout
        try:
            first = _peek(conn, timeout)
            if first and first[0] != 0x16:
                kind = "HTTP" if is_http_shaped(first) else "UNKNOWN_PLAINTEXT"
                self.tr.add("PLAINTEXT_ON_TLS_PORT", f"{kind} {first[:8]!r}")
                return
            conn.settimeout(timeout)
            tls = self.ctx.wrap_socket(conn, server_side=True, do_handshake_on_connect=False)
            try:
                tls.do_handshake()
            except (ssl.SSLError, OSError) as exc:
                self.tr.add("HANDSHAKE_FAILED", _reason(exc))
                return
            self.tr.add("HANDSHAKE_COMPLETE", tls.version() or "")
            try:
                tls.settimeout(1.0)
                request = tls.recv(1024)
                if request:
                    tls.sendall(b"HTTP/1.1 204 No Content\r\nContent-Length: 0\r\nConnection: close\r\n\r\n")
            except (ssl.SSLError, OSError):
                pass
            _drain(tls)
            tls.close()
        finally:
            conn.close()

    def _handle_plain(self, conn, peer):
        self.tr.add("WATCH_PORT_CONNECT", f"{peer[0]}:{peer[1]}")
        try:
            first = _peek(conn, self.scenario.timeout)
            if is_http_shaped(first):
                line = first.split(b"\r\n", 1)[0][:_PEEK]
                self.tr.add("PLAINTEXT_HTTP", line.decode("latin-1"))
                try:
                    conn.recv(65536)
                    conn.sendall(b"HTTP/1.1 503 Service Unavailable\r\nContent-Length: 0\r\n"
                                 b"Connection: close\r\n\r\n")
                except OSError:
                    pass
            else:
                self.tr.add("UNKNOWN_PLAINTEXT", repr(first[:8]))
            _drain(conn)
        finally:
            conn.close()

    def finish(self, grace: float = _GRACE):
        deadline = time.monotonic() + grace
        # let the loop pick up connections the client made just before exiting
        time.sleep(0.05)
        self.stop.set()
        self.thread.join(max(0.0, deadline - time.monotonic()))
        for t in list(self.handlers):
            t.join(max(0.0, deadline - time.monotonic()))
        self.close()

    def close(self):
        try:
            self.sel.close()
        except Exception:  # noqa: BLE001 - selector may already be closed
            pass
        for s in self.sockets:
            s.close()


def _reason(exc: Exception) -> str:
    if isinstance(exc, ssl.SSLError) and exc.reason:
        return exc.reason
    return type(exc).__name__


def _server_context(material: CertMaterial, workdir: Path) -> ssl.SSLContext:
    cert, key = material.write(workdir, "server")
    ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
    ctx.minimum_version = ssl.TLSVersion.TLSv1_2
    ctx.load_cert_chain(cert, key)
    return ctx


def fixture_client_cmd(name: str) -> list:
    """Command template for one of the bundled fixture clients."""
    if name not in FIXTURE_CLIENTS:
        raise ProbeError(f"unknown fixture client {name!r}", "BAD_SCENARIO")
    return [sys.executable, "-m", f"proctriage.netprobe.clients.{name}",
            "--host", "{host}", "--tls-port", "{tls_port}", "--watch-port", "{watch_port}",
            "--cafile", "{cafile}", "--cn", "{cn}"]


def _expand(cmd, values: dict) -> list:
    if isinstance(cmd, str):
        if cmd.startswith("fixture:"):
            cmd = fixture_client_cmd(cmd.split(":", 1)[1])
        else:
            cmd = shlex.split(cmd)
    return [str(part).format(**values) for part in cmd]


def _classify(kind: str, kinds: list) -> str:
    if kind == PORT_BLOCK_DOWNGRADE:
        plain = {"PLAINTEXT_HTTP", "UNKNOWN_PLAINTEXT"}
        return PLAINTEXT_RETRY if plain & set(kinds) else NO_CONNECTION
    if "HANDSHAKE_COMPLETE" in kinds:
        return COMPLETED
    # a TCP connection that never completed a handshake was abandoned by the client
    if "HANDSHAKE_FAILED" in kinds or "TLS_PORT_CONNECT" in kinds:
        return ABORTED
    return NO_CONNECTION


def run_scenario(scenario: ProbeScenario, client_launch, ca_material: Optional[CertMaterial] = None,
                 workdir=None) -> TlsVerdict:
    """Serve the scenario to one client run and classify its behavior.

    ``client_launch`` is an argv list or string; ``{host}``, ``{tls_port}``,
    ``{watch_port}``, ``{cafile}`` and ``{cn}`` are substituted. The client
    is given a CA bundle it trusts. WRONG_CN serves a leaf chained to that
    CA for another name; SELF_SIGNED_CORRECT_CN serves an untrusted leaf for
    the expected name.
    """
    tr = _Transcript()
    with tempfile.TemporaryDirectory(prefix="proctriage-probe-", dir=workdir) as tmp:
        tmp = Path(tmp)
        ca = ca_material or generate_ca()
        cafile, _ = ca.write(tmp, "ca")
        ctx = None
        if scenario.kind == WRONG_CN:
            wrong = "wrong." + scenario.expected_cn.split(".", 1)[-1]
            if wrong == scenario.expected_cn:
                wrong = "wrong-" + scenario.expected_cn
            ctx = _server_context(generate_test_cert(wrong, self_signed=False, ca_material=ca), tmp)
            tr.add("SERVE_CERT", f"CA-signed CN={wrong}")
        elif scenario.kind == SELF_SIGNED_CORRECT_CN:
            ctx = _server_context(generate_test_cert(scenario.expected_cn, self_signed=True), tmp)
            tr.add("SERVE_CERT", f"self-signed CN={scenario.expected_cn}")

        server = _Server(scenario, tr, ctx)
        server.open()
        argv = _expand(client_launch, {
            "host": HOST, "tls_port": scenario.tls_port, "watch_port": scenario.plaintext_watch_port,
            "cafile": str(cafile), "cn": scenario.expected_cn,
        })
        try:
            try:
                proc = subprocess.Popen(argv, stdout=subprocess.DEVNULL, stderr=subprocess.PIPE,
                                        env={**os.environ, "PYTHONUNBUFFERED": "1"})
            except OSError as exc:
                raise ProbeError(f"cannot launch {argv[0]}: {exc}", "CLIENT_LAUNCH_FAILED") from None
            tr.add("CLIENT_STARTED", shlex.join(argv[:3]))
            try:
                _, err = proc.communicate(timeout=scenario.timeout)
                tr.add("CLIENT_EXITED", str(proc.returncode))
                if err:
                    log.debug("client stderr: %s", err.decode(errors="replace").strip())
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.communicate()
                tr.add("TIMEOUT", f"client still running after {scenario.timeout}s")
        finally:
            server.finish()
    kinds = tr.kinds()
    behavior = _classify(scenario.kind, kinds)
    tr.add("VERDICT", behavior)
    return TlsVerdict(scenario.kind, behavior, tuple(tr.events))


def assess_client(verdicts) -> str:
    """Grade a client from its scenario verdicts.

    Precedence is PLAINTEXT_ONLY, DOWNGRADE_VULNERABLE,
    INSECURE_CERT_VALIDATION, SECURE. A client never seen attempting TLS
    under either certificate scenario but seen speaking plaintext is
    PLAINTEXT_ONLY. When nothing applies (for instance the client never
    connected at all) the grade is INCONCLUSIVE rather than SECURE.
    """
    verdicts = list(verdicts)
    if not verdicts:
        raise ValueError("at least one verdict is required")
    by_kind = {}
    for v in verdicts:
        by_kind.setdefault(v.scenario, []).append(v.client_behavior)
    retry = PLAINTEXT_RETRY in by_kind.get(PORT_BLOCK_DOWNGRADE, [])
    tls_seen = [b for k in (WRONG_CN, SELF_SIGNED_CORRECT_CN) for b in by_kind.get(k, [])]
    if retry and tls_seen and all(b == NO_CONNECTION for b in tls_seen):
        return PLAINTEXT_ONLY
    if retry:
        return DOWNGRADE_VULNERABLE
    if COMPLETED in tls_seen:
        return INSECURE_CERT_VALIDATION
    wrong, selfsigned = by_kind.get(WRONG_CN, []), by_kind.get(SELF_SIGNED_CORRECT_CN, [])
    if wrong and selfsigned and all(b == ABORTED for b in wrong + selfsigned):
        return SECURE
    return INCONCLUSIVE


# -- scenario files -------------------------------------------------------------

def load_scenario_file(path) -> tuple:
    """Parse {kind, tls_port, watch_port, expected_cn, timeout_s, client_cmd}.

    ``kind`` may also be a list or ``"ALL"`` to run several scenarios
    against the same client.
    """
    try:
        doc = json.loads(Path(path).read_text("utf-8"))
    except FileNotFoundError:
        raise ProbeError(f"{path}: no such file", "FILE_NOT_FOUND") from None
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProbeError(f"{path}: not JSON ({exc})", "BAD_SCENARIO") from None
    if not isinstance(doc, dict):
        raise ProbeError(f"{path}: expected an object", "BAD_SCENARIO")
    allowed = {"kind", "tls_port", "watch_port", "expected_cn", "timeout_s", "client_cmd"}
    extra = set(doc) - allowed
    if extra:
        raise ProbeError(f"{path}: unknown field(s) {sorted(extra)}", "BAD_SCENARIO")
    missing = {"kind", "tls_port", "watch_port", "client_cmd"} - set(doc)
    if missing:
        raise ProbeError(f"{path}: missing field(s) {sorted(missing)}", "BAD_SCENARIO")
    kinds = doc["kind"]
    if kinds == "ALL":
        kinds = list(KINDS)
    elif isinstance(kinds, str):
        kinds = [kinds]
    try:
        scenarios = [ProbeScenario(k, int(doc["tls_port"]), int(doc["watch_port"]),
                                   doc.get("expected_cn", "exam.test"),
                                   float(doc.get("timeout_s", DEFAULT_TIMEOUT))) for k in kinds]
    except (TypeError, ValueError) as exc:
        raise ProbeError(f"{path}: {exc}", "BAD_SCENARIO") from None
    return scenarios, doc["client_cmd"]


def free_port_pair() -> tuple:
    """Two currently free loopback ports."""
    socks = []
    try:
        for _ in range(2):
            s = socket.socket()
            s.bind((HOST, 0))
            socks.append(s)
        return tuple(s.getsockname()[1] for s in socks)
    finally:
        for s in socks:
            s.close()
