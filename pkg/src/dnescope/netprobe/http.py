"""Just enough HTTP/1.1 for DoH, liveness checks and page fetches."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

from dnescope.tls import AppConn

MAX_BODY = 4 * 1024 * 1024


class HTTPError(Exception):
    pass


@dataclass
class Response:
    status: int
    headers: dict[str, str] = field(default_factory=dict)
    body: bytes = b""


@dataclass
class Request:
    method: str
    target: str
    headers: dict[str, str]
    body: bytes = b""

    @property
    def host(self) -> str:
        return self.headers.get("host", "").split(":")[0].lower()


def build_request(method: str, host: str, target: str, *, body: bytes = b"",
                  headers: Optional[dict[str, str]] = None) -> bytes:
    lines = [f"{method} {target} HTTP/1.1", f"Host: {host}", "Connection: close",
             "User-Agent: dnescope/0.1"]
    for k, v in (headers or {}).items():
        lines.append(f"{k}: {v}")
    if body or method == "POST":
        lines.append(f"Content-Length: {len(body)}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + body


def _parse_head(head: bytes):
    lines = head.decode("latin-1").split("\r\n")
    start = lines[0]
    headers = {}
    for line in lines[1:]:
        if ":" in line:
            k, v = line.split(":", 1)
            headers[k.strip().lower()] = v.strip()
    return start, headers


def _dechunk(data: bytes) -> Optional[bytes]:
    out = b""
    pos = 0
    while True:
        eol = data.find(b"\r\n", pos)
        if eol < 0:
            return None
        try:
            size = int(data[pos:eol].split(b";")[0], 16)
        except ValueError:
            raise HTTPError("bad chunk size") from None
        if size == 0:
            return out
        if len(data) < eol + 2 + size + 2:
            return None
        out += data[eol + 2:eol + 2 + size]
        pos = eol + 2 + size + 2


def read_response(channel) -> Response:
    """Read one response from ``channel`` (anything with ``recv() -> bytes``)."""
    buf = b""
    while b"\r\n\r\n" not in buf:
        chunk = channel.recv()
        if not chunk:
            raise HTTPError("connection closed before response headers")
        buf += chunk
    head, _, body = buf.partition(b"\r\n\r\n")
    start, headers = _parse_head(head)
    parts = start.split(" ", 2)
    if len(parts) < 2 or not parts[0].startswith("HTTP/"):
        raise HTTPError(f"bad status line {start!r}")
    try:
        status = int(parts[1])
    except ValueError:
        raise HTTPError(f"bad status line {start!r}") from None
    chunked = "chunked" in headers.get("transfer-encoding", "").lower()
    length = headers.get("content-length")
    while True:
        if chunked:
            done = _dechunk(body)
            if done is not None:
                return Response(status, headers, done)
        elif length is not None and len(body) >= int(length):
            return Response(status, headers, body[:int(length)])
        try:
            chunk = channel.recv()
        except ConnectionResetError:
            if length is None and not chunked:
                chunk = b""
            else:
                raise
        if not chunk:
            if length is None and not chunked:
                return Response(status, headers, body)
            raise HTTPError("connection closed mid-body")
        body += chunk
        if len(body) > MAX_BODY:
            raise HTTPError("body too large")


def build_response(status: int, body: bytes = b"", content_type: str = "text/html",
                   headers: Optional[dict[str, str]] = None) -> bytes:
    reason = {200: "OK", 301: "Moved Permanently", 302: "Found", 400: "Bad Request",
              403: "Forbidden", 404: "Not Found", 415: "Unsupported Media Type"}.get(status, "Status")
    lines = [f"HTTP/1.1 {status} {reason}", f"Content-Type: {content_type}",
             f"Content-Length: {len(body)}", "Connection: close"]
    for k, v in (headers or {}).items():
        lines.append(f"{k}: {v}")
    return ("\r\n".join(lines) + "\r\n\r\n").encode() + body


class HTTPApp(AppConn):
    """Buffers one request, hands it to ``handler``, then closes."""

    def __init__(self, handler: Callable[[Request], bytes]):
        self.handler = handler
        self.buf = b""

    def feed(self, data: bytes) -> bytes:
        if self.closed:
            return b""
        self.buf += data
        if b"\r\n\r\n" not in self.buf:
            return b""
        head, _, body = self.buf.partition(b"\r\n\r\n")
        start, headers = _parse_head(head)
        need = int(headers.get("content-length", "0") or 0)
        if len(body) < need:
            return b""
        parts = start.split(" ")
        if len(parts) != 3:
            self.closed = True
            return build_response(400)
        self.closed = True
        return self.handler(Request(parts[0], parts[1], headers, body[:need]))
