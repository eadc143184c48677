"""Server-side behavior of the simulated hosts, as feed-driven connection objects.

Each factory returns an object with ``feed(bytes) -> bytes`` and ``closed``;
the simulated transport pumps client bytes through it.  The same objects
back the loopback servers of ``dnescope sim``.
"""
from __future__ import annotations

import base64
import binascii
import struct
from dataclasses import dataclass
from typing import Callable, Optional
from urllib.parse import parse_qs, urlsplit

from dnescope.censorsim.world import GEOBLOCK_PAGE, SimWorld, Site, forged_response
from dnescope.netprobe.http import HTTPApp, Request, build_response
from dnescope.netprobe.transport import Endpoint
from dnescope.tls import (
    CT_HANDSHAKE,
    AppConn,
    CertAuthority,
    EsniTLSServerConn,
    StdlibTLSServerConn,
    parse_client_hello,
    split_record,
)

DNS_MESSAGE = "application/dns-message"

Answerer = Callable[[bytes], Optional[bytes]]


@dataclass(frozen=True)
class Client:
    ip: str
    country: str


# ---------------------------------------------------------------------------
# application handlers


def site_handler(site: Site, client: Client):
    def handle(req: Request) -> bytes:
        if client.country in site.geoblock:
            return build_response(403, GEOBLOCK_PAGE)
        return build_response(200, site.body)
    return handle


def echo_handler(client: Client):
    def handle(req: Request) -> bytes:
        return build_response(200, client.ip.encode(), content_type="text/plain")
    return handle


def doh_handler(answer: Answerer, path: str = "/dns-query"):
    def handle(req: Request) -> bytes:
        parts = urlsplit(req.target)
        if parts.path != path:
            return build_response(404)
        if req.method == "POST":
            if req.headers.get("content-type", "").split(";")[0].strip() != DNS_MESSAGE:
                return build_response(415)
            wire = req.body
        elif req.method == "GET":
            q = parse_qs(parts.query).get("dns", [""])[0]
            try:
                wire = base64.urlsafe_b64decode(q + "=" * (-len(q) % 4))
            except (binascii.Error, ValueError):
                return build_response(400)
        else:
            return build_response(400)
        resp = answer(wire)
        if resp is None:
            return build_response(400)
        return build_response(200, resp, content_type=DNS_MESSAGE)
    return handle


class DoTApp(AppConn):
    """Length-prefixed DNS over a stream; serves until the client goes away."""

    def __init__(self, answer: Answerer):
        self.answer = answer
        self.buf = b""

    def feed(self, data: bytes) -> bytes:
        self.buf += data
        out = b""
        while len(self.buf) >= 2:
            (n,) = struct.unpack("!H", self.buf[:2])
            if len(self.buf) < 2 + n:
                break
            wire, self.buf = self.buf[2:2 + n], self.buf[2 + n:]
            resp = self.answer(wire)
            if resp is None:
                self.closed = True
                break
            out += struct.pack("!H", len(resp)) + resp
        return out


# ---------------------------------------------------------------------------
# TLS front


class TLSFront:
    """Dispatches a TLS connection to the ESNI or the standard server by peeking at the ClientHello."""

    def __init__(self, make_stdlib: Callable[[], object], make_esni: Optional[Callable[[], object]]):
        self.make_stdlib = make_stdlib
        self.make_esni = make_esni
        self.buf = b""
        self.inner = None

    @property
    def closed(self) -> bool:
        return self.inner.closed if self.inner is not None else False

    def feed(self, data: bytes) -> bytes:
        if self.inner is not None:
            return self.inner.feed(data)
        self.buf += data
        rec = split_record(self.buf)
        if rec is None:
            return b""
        info = parse_client_hello(self.buf) if rec[0] == CT_HANDSHAKE else None
        if info is not None and info.has_esni and self.make_esni is not None:
            self.inner = self.make_esni()
        else:
            self.inner = self.make_stdlib()
        data, self.buf = self.buf, b""
        return self.inner.feed(data)


def tls_server(ca: CertAuthority, names: tuple[str, ...], app: Callable[[Optional[str]], Optional[AppConn]],
               esni_keys=None, hosted: Optional[Callable[[str], bool]] = None) -> TLSFront:
    """A TLS endpoint presenting a certificate for ``names``.

    With ``esni_keys`` (digest -> (private, keys)) it also accepts ESNI
    handshakes for names ``hosted`` approves.
    """
    def cert_names(sni):
        if sni and sni in names:
            return (sni,) + tuple(n for n in names if n != sni)
        return names

    make_std = lambda: StdlibTLSServerConn(ca, cert_names, app)  # noqa: E731
    make_esni = None
    if esni_keys:
        make_esni = lambda: EsniTLSServerConn(esni_keys, hosted or (lambda n: n in names), app)  # noqa: E731
    return TLSFront(make_std, make_esni)


def tcp_service(world: SimWorld, endpoint: Endpoint, client: Client):
    """The server accepting connections at ``endpoint``.

    Returns ``None`` when the host exists but the port is closed and raises
    ``LookupError`` for addresses no simulated host owns.
    """
    ip, port = endpoint.ip, endpoint.port
    esni = {world.esni_keys.keys.digest(): (world.esni_keys.private, world.esni_keys.keys)}
    answer = world.zone.respond

    site = world.site_at(ip)
    if site is not None:
        if port == 80:
            return HTTPApp(site_handler(site, client))
        if port == 443 and site.https:
            return tls_server(world.ca, (site.domain,), lambda _n: HTTPApp(site_handler(site, client)),
                              esni if site.esni else None)
        return None

    resolver = world.doth_at(ip)
    if resolver is not None:
        if port == 853:
            return tls_server(world.ca, (resolver.host,), lambda _n: DoTApp(answer))
        if port == 443:
            return tls_server(world.ca, (resolver.host,), lambda _n: HTTPApp(doh_handler(answer, resolver.path)))
        return None

    if ip == world.private_doh.ip:
        if port == world.private_doh.port:
            return tls_server(world.ca, (world.private_doh.host,),
                              lambda _n: HTTPApp(doh_handler(answer, world.private_doh.path)))
        return None

    if ip == world.esni_control.ip:
        if port == world.esni_control.port:
            return tls_server(world.ca, (world.esni_control.name,), lambda _n: HTTPApp(echo_handler(client)),
                              esni)
        return None

    if ip in {e.ip for e in world.dns_servers()}:
        return None
    raise LookupError(ip)


def interceptor(ca: CertAuthority, host: str, path: str, forged_ip: str):
    """Censor-operated TLS endpoint impersonating a DoT/DoH resolver."""
    def answer(wire):
        return forged_response(wire, forged_ip)

    def app(_name):
        return _SniffApp(answer, path)

    return tls_server(ca, (host,), app)


class _SniffApp(AppConn):
    """DoT or DoH, whichever the client speaks first."""

    def __init__(self, answer: Answerer, path: str):
        self.answer = answer
        self.path = path
        self.inner: Optional[AppConn] = None

    @property
    def closed(self):
        return self.inner.closed if self.inner is not None else False

    def feed(self, data: bytes) -> bytes:
        if self.inner is None:
            looks_http = data[:4] in (b"GET ", b"POST")
            self.inner = HTTPApp(doh_handler(self.answer, self.path)) if looks_http else DoTApp(self.answer)
        return self.inner.feed(data)
