"""JSON-over-HTTP plumbing shared by every service.

Servers are thread-per-connection (`ThreadingHTTPServer`), so request
handlers may block on outbound calls to other services without deadlock;
handlers must be thread-safe. The client keeps one persistent connection
per (thread, host) and records every exchange in the process-wide wire log,
which doubles as the byte-counting middleware for transmission measurements
and as the audit trail for token-confinement scans.
"""

from __future__ import annotations

import http.client
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from urllib.parse import urlsplit

from .errors import (
    AuthError,
    DtapError,
    InvalidGrantError,
    NotFoundError,
    ScopeError,
    ValidationError,
)

logger = logging.getLogger(__name__)

_JSON_SEPARATORS = (",", ":")


def json_dumps(obj) -> str:
    """Deterministic JSON: sorted keys, no whitespace.

    Used for every wire body so that parse/serialize round-trips are
    byte-stable (forwarded blobs must leave the cloud byte-identical).
    """
    return json.dumps(obj, sort_keys=True, separators=_JSON_SEPARATORS)


# ---------------------------------------------------------------------------
# Clocks
# ---------------------------------------------------------------------------


class SystemClock:
    def now_ms(self) -> int:
        return time.time_ns() // 1_000_000


class VirtualClock:
    """Settable clock so TTL and expiry scenarios are deterministic in tests."""

    def __init__(self, start_ms: int | None = None):
        self._now = SystemClock().now_ms() if start_ms is None else start_ms
        self._lock = threading.Lock()

    def now_ms(self) -> int:
        with self._lock:
            return self._now

    def advance_ms(self, delta: int) -> None:
        with self._lock:
            self._now += delta

    def advance_s(self, delta: float) -> None:
        self.advance_ms(int(delta * 1000))


# ---------------------------------------------------------------------------
# Wire log
# ---------------------------------------------------------------------------


@dataclass
class WireRecord:
    source: str
    method: str
    url: str
    path: str
    status: int | None
    request_bytes: int
    response_bytes: int
    request_text: str
    response_text: str
    elapsed_ms: float

    @property
    def total_bytes(self) -> int:
        return self.request_bytes + self.response_bytes


class WireLog:
    """Append-only record of every HTTP exchange made through `request`."""

    def __init__(self):
        self._records: list[WireRecord] = []
        self._lock = threading.Lock()

    def append(self, record: WireRecord) -> None:
        with self._lock:
            self._records.append(record)

    def mark(self) -> int:
        with self._lock:
            return len(self._records)

    def since(self, mark: int) -> list[WireRecord]:
        with self._lock:
            return list(self._records[mark:])

    def snapshot(self) -> list[WireRecord]:
        with self._lock:
            return list(self._records)

    def drop_texts(self, upto: int) -> None:
        """Free request/response text for audited records; byte counts stay."""
        with self._lock:
            for record in self._records[:upto]:
                record.request_text = ""
                record.response_text = ""


WIRE_LOG = WireLog()


# ---------------------------------------------------------------------------
# Client
# ---------------------------------------------------------------------------

_thread_local = threading.local()


class TransportError(DtapError):
    """The peer was unreachable or the connection failed mid-exchange."""


def _connection(netloc: str, timeout: float) -> http.client.HTTPConnection:
    pool = getattr(_thread_local, "pool", None)
    if pool is None:
        pool = _thread_local.pool = {}
    conn = pool.get(netloc)
    if conn is None:
        conn = http.client.HTTPConnection(netloc, timeout=timeout)
        pool[netloc] = conn
    return conn


def _drop_connection(netloc: str) -> None:
    pool = getattr(_thread_local, "pool", None)
    if pool is not None:
        conn = pool.pop(netloc, None)
        if conn is not None:
            conn.close()


def request(
    method: str,
    url: str,
    body: dict | None = None,
    headers: dict[str, str] | None = None,
    source: str = "client",
    timeout: float = 10.0,
) -> tuple[int, dict | None]:
    """One JSON exchange; logs bytes and text to the process wire log.

    Raises TransportError when no HTTP response was obtained. A stale
    keep-alive connection is retried once on a fresh socket.
    """
    parts = urlsplit(url)
    netloc = parts.netloc
    path = parts.path or "/"
    if parts.query:
        path += "?" + parts.query

    payload = json_dumps(body).encode("utf-8") if body is not None else b""
    send_headers = {"Host": netloc, "Content-Length": str(len(payload))}
    if body is not None:
        send_headers["Content-Type"] = "application/json"
    if headers:
        send_headers.update(headers)

    request_bytes = len(f"{method} {path} HTTP/1.1\r\n") + len(payload) + 2
    head_lines = [f"{k}: {v}" for k, v in send_headers.items()]
    request_bytes += sum(len(line) + 2 for line in head_lines)
    request_text = "\n".join([f"{method} {path}"] + head_lines) + "\n" + payload.decode(
        "utf-8", "replace"
    )

    start = time.perf_counter()
    last_error: Exception | None = None
    for attempt in (0, 1):
        conn = _connection(netloc, timeout)
        reused = conn.sock is not None
        try:
            conn.putrequest(method, path, skip_host=True, skip_accept_encoding=True)
            for header_name, header_value in send_headers.items():
                conn.putheader(header_name, header_value)
            conn.endheaders(payload if payload else None)
            response = conn.getresponse()
            raw = response.read()
            break
        except (http.client.HTTPException, OSError) as exc:
            _drop_connection(netloc)
            last_error = exc
            # Retry only when a previously idle keep-alive socket went stale.
            if attempt == 1 or not reused:
                raise TransportError(f"{method} {url}: {exc}") from exc
    else:  # pragma: no cover
        raise TransportError(f"{method} {url}: {last_error}")

    response_headers = response.getheaders()
    response_bytes = len(f"HTTP/1.1 {response.status} {response.reason}\r\n") + 2
    response_bytes += sum(len(k) + len(v) + 4 for k, v in response_headers)
    response_bytes += len(raw)
    if response.will_close:
        _drop_connection(netloc)

    text = raw.decode("utf-8", "replace")
    WIRE_LOG.append(
        WireRecord(
            source=source,
            method=method,
            url=url,
            path=parts.path,
            status=response.status,
            request_bytes=request_bytes,
            response_bytes=response_bytes,
            request_text=request_text,
            response_text=text,
            elapsed_ms=(time.perf_counter() - start) * 1000,
        )
    )
    parsed = json.loads(text) if raw else None
    return response.status, parsed


# ---------------------------------------------------------------------------
# Server
# ---------------------------------------------------------------------------

_PLACEHOLDER_RE = re.compile(r"\{([a-z_]+)\}")


def _compile_route(pattern: str) -> re.Pattern:
    regex = _PLACEHOLDER_RE.sub(lambda m: f"(?P<{m.group(1)}>[^/]+)", pattern)
    return re.compile("^" + regex + "$")


_ERROR_STATUS = {
    AuthError: 401,
    ScopeError: 403,
    ValidationError: 400,
    InvalidGrantError: 400,
    NotFoundError: 404,
}


class JsonApp:
    """Route table plus error mapping; services subclass and register routes."""

    app_name = "service"

    def __init__(self):
        self._routes: list[tuple[str, re.Pattern, object]] = []

    def add_route(self, method: str, pattern: str, handler) -> None:
        self._routes.append((method, _compile_route(pattern), handler))

    def route_surface(self) -> list[tuple[str, str]]:
        return [(method, regex.pattern) for method, regex, _ in self._routes]

    def handle(
        self, method: str, path: str, headers: dict[str, str], body: dict | None
    ) -> tuple[int, dict]:
        for route_method, regex, handler in self._routes:
            if route_method != method:
                continue
            match = regex.match(path)
            if match is None:
                continue
            try:
                return handler(headers, body, **match.groupdict())
            except DtapError as exc:
                status = _ERROR_STATUS.get(type(exc))
                if status is None:
                    for err_type, mapped in _ERROR_STATUS.items():
                        if isinstance(exc, err_type):
                            status = mapped
                            break
                if status is None:
                    status = 400
                return status, {"error": type(exc).__name__, "message": str(exc)}
            except Exception:
                logger.exception("unhandled error in %s %s %s", self.app_name, method, path)
                return 500, {"error": "internal", "message": "internal error"}
        return 404, {"error": "not_found", "message": f"no route {method} {path}"}


def bearer_token(headers: dict[str, str]) -> str:
    auth = headers.get("authorization", "")
    if not auth.startswith("Bearer "):
        raise AuthError("missing bearer token")
    return auth[len("Bearer ") :]


class _Server(ThreadingHTTPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 512


class ServiceHost:
    """Serves one JsonApp on a loopback port in a background thread."""

    def __init__(self, app: JsonApp, port: int = 0):
        self.app = app
        outer = self

        class Handler(BaseHTTPRequestHandler):
            protocol_version = "HTTP/1.1"

            def _dispatch(self):
                length = int(self.headers.get("Content-Length") or 0)
                raw = self.rfile.read(length) if length else b""
                body = None
                if raw:
                    try:
                        body = json.loads(raw)
                    except json.JSONDecodeError:
                        self._reply(400, {"error": "bad_json", "message": "body is not JSON"})
                        return
                headers = {k.lower(): v for k, v in self.headers.items()}
                status, obj = outer.app.handle(self.command, self.path, headers, body)
                self._reply(status, obj)

            def _reply(self, status: int, obj: dict):
                payload = json_dumps(obj).encode("utf-8")
                self.send_response(status)
                self.send_header("Content-Type", "application/json")
                self.send_header("Content-Length", str(len(payload)))
                self.end_headers()
                self.wfile.write(payload)

            do_GET = do_POST = do_DELETE = do_PUT = _dispatch

            def log_message(self, fmt, *args):
                logger.debug("%s %s", self.address_string(), fmt % args)

        self._server = _Server(("127.0.0.1", port), Handler)
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        host, port = self._server.server_address[:2]
        return f"http://{host}:{port}"

    def start(self) -> "ServiceHost":
        self._thread = threading.Thread(
            target=self._server.serve_forever, kwargs={"poll_interval": 0.1}, daemon=True
        )
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)
