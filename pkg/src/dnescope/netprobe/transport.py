"""Pluggable transports: the real network via sockets, or anything that quacks alike.

A transport gives probers three things: a UDP request/response exchange that
returns *every* datagram received before the deadline, a TCP stream opener,
and a clock.  Interference surfaces as exceptions on those primitives:

* ``ConnectionResetError`` -- an RST (at connect time or mid-stream)
* ``TimeoutError``         -- nothing arrived before the deadline
* :class:`ProbeError`      -- a local failure that says nothing about the path
"""
from __future__ import annotations

import ipaddress
import select
import socket
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Mapping, Optional, Union


class ProbeError(OSError):
    """Local socket failure (no route, bad address, ...), not a censorship signal."""


@dataclass(frozen=True, order=True)
class Endpoint:
    ip: str
    port: int

    def __str__(self):
        if ":" in self.ip:
            return f"[{self.ip}]:{self.port}"
        return f"{self.ip}:{self.port}"

    @classmethod
    def parse(cls, text: str, default_port: int = 53) -> "Endpoint":
        text = text.strip()
        if text.startswith("["):
            host, _, rest = text[1:].partition("]")
            port = int(rest[1:]) if rest.startswith(":") else default_port
        elif text.count(":") == 1:
            host, port_s = text.split(":")
            port = int(port_s)
        else:
            host, port = text, default_port
        ipaddress.ip_address(host)
        return cls(host, port)


@dataclass(frozen=True)
class Datagram:
    data: bytes
    offset_ms: float


class Stream(ABC):
    @abstractmethod
    def send(self, data: bytes) -> None: ...

    @abstractmethod
    def recv(self, max_bytes: int = 65536, timeout_ms: Optional[int] = None) -> bytes:
        """Return available bytes, ``b""`` on orderly EOF."""

    @abstractmethod
    def close(self) -> None: ...

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class Transport(ABC):
    """Capability bundle a prober runs over."""

    #: address the far end sees as our source
    source_ip: str = "0.0.0.0"

    @abstractmethod
    def udp_exchange(self, endpoint: Endpoint, payload: bytes, wait_ms: int) -> list[Datagram]:
        """Send one datagram, then collect all replies until ``wait_ms`` elapses."""

    @abstractmethod
    def connect(self, endpoint: Endpoint, timeout_ms: int) -> Stream: ...

    def now(self) -> datetime:
        return datetime.now(timezone.utc)

    def resolve_host(self, name: str) -> str:
        """Bootstrap lookup (system resolver); not itself a measurement."""
        try:
            return socket.getaddrinfo(name, None, type=socket.SOCK_STREAM)[0][4][0]
        except socket.gaierror as exc:
            raise ProbeError(f"cannot resolve {name}: {exc}") from None


# ---------------------------------------------------------------------------
# sockets


@dataclass(frozen=True)
class Route:
    """Where a destination endpoint is actually reached.

    ``target=None`` is a null route: traffic is silently discarded.  With
    ``proxy_header`` a PROXY protocol v1 line announcing the original
    source/destination is sent before any payload, so a front-end listener
    can dispatch on the intended destination.
    """

    target: Optional[Endpoint]
    proxy_header: bool = False


class _SocketStream(Stream):
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send(self, data: bytes) -> None:
        try:
            self.sock.sendall(data)
        except (BrokenPipeError, ConnectionResetError) as exc:
            raise ConnectionResetError(str(exc)) from None

    def recv(self, max_bytes=65536, timeout_ms=None) -> bytes:
        self.sock.settimeout(None if timeout_ms is None else timeout_ms / 1000)
        try:
            return self.sock.recv(max_bytes)
        except socket.timeout:
            raise TimeoutError("read timed out") from None

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class SocketTransport(Transport):
    """Direct access to the host network, optionally through a route map."""

    def __init__(self, source_ip: Optional[str] = None,
                 routes: Optional[Mapping[Endpoint, Route]] = None):
        self.routes = dict(routes or {})
        self.source_ip = source_ip or self._guess_source_ip()

    @staticmethod
    def _guess_source_ip() -> str:
        try:
            with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as s:
                s.connect(("192.0.2.1", 9))
                return s.getsockname()[0]
        except OSError:
            return "127.0.0.1"

    def _route(self, endpoint: Endpoint) -> Route:
        route = self.routes.get(endpoint)
        if route is None:
            route = self.routes.get(Endpoint(endpoint.ip, 0))
        return route or Route(endpoint)

    def udp_exchange(self, endpoint, payload, wait_ms):
        route = self._route(endpoint)
        if route.target is None:
            time.sleep(wait_ms / 1000)
            return []
        target = route.target
        family = socket.AF_INET6 if ":" in target.ip else socket.AF_INET
        out = []
        try:
            with socket.socket(family, socket.SOCK_DGRAM) as sock:
                sock.connect((target.ip, target.port))
                start = time.monotonic()
                sock.send(payload)
                deadline = start + wait_ms / 1000
                while True:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        break
                    ready, _, _ = select.select([sock], [], [], remaining)
                    if not ready:
                        break
                    try:
                        data = sock.recv(65535)
                    except ConnectionRefusedError:
                        # ICMP port unreachable; keep listening for late/injected replies
                        continue
                    out.append(Datagram(data, round((time.monotonic() - start) * 1000, 3)))
        except OSError as exc:
            if isinstance(exc, (ConnectionRefusedError,)):
                return out
            raise ProbeError(str(exc)) from None
        return out

    def connect(self, endpoint, timeout_ms):
        route = self._route(endpoint)
        if route.target is None:
            time.sleep(timeout_ms / 1000)
            raise TimeoutError(f"connect to {endpoint} timed out")
        target = route.target
        family = socket.AF_INET6 if ":" in target.ip else socket.AF_INET
        sock = socket.socket(family, socket.SOCK_STREAM)
        sock.settimeout(timeout_ms / 1000)
        try:
            sock.connect((target.ip, target.port))
        except socket.timeout:
            sock.close()
            raise TimeoutError(f"connect to {endpoint} timed out") from None
        except (ConnectionRefusedError, ConnectionResetError):
            sock.close()
            raise ConnectionResetError(f"connect to {endpoint} reset") from None
        except OSError as exc:
            sock.close()
            raise ProbeError(f"connect to {endpoint}: {exc}") from None
        stream = _SocketStream(sock)
        if route.proxy_header:
            fam = "TCP6" if ":" in endpoint.ip else "TCP4"
            stream.send(f"PROXY {fam} {self.source_ip} {endpoint.ip} 0 {endpoint.port}\r\n".encode())
        return stream


def load_routes(data: Mapping[str, Union[str, None, dict]]) -> dict[Endpoint, Route]:
    """Build a route map from its JSON form.

    ``{"198.51.100.7:443": {"target": "127.0.0.1:40000", "proxy": true},
       "198.51.100.8:0": null}``  -- port 0 matches any port of that IP.
    """
    routes = {}
    for key, value in data.items():
        ep = Endpoint.parse(key, default_port=0)
        if value is None:
            routes[ep] = Route(None)
        elif isinstance(value, str):
            routes[ep] = Route(Endpoint.parse(value))
        else:
            tgt = value.get("target")
            routes[ep] = Route(Endpoint.parse(tgt) if tgt else None, bool(value.get("proxy", False)))
    return routes
