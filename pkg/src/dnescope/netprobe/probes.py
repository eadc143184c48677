"""Stage-aware probers: Do53, DoT/DoH, TLS (SNI, ESNI, none) and HTTP(S) fetches.

Every prober runs over a :class:`~dnescope.netprobe.transport.Transport` and
turns interference into data instead of exceptions.
"""
from __future__ import annotations

import base64
import enum
import hashlib
import ipaddress
import logging
import random
import struct
from dataclasses import dataclass
from typing import Iterable, Optional
from urllib.parse import urljoin, urlsplit

from cryptography import x509

from dnescope import dnsmsg
from dnescope.esni.keys import EsniError, EsniKeys
from dnescope.model import (
    CrawlOutcome,
    FetchResult,
    Observation,
    ObservationSet,
    Outcome,
    Stage,
    StagedResult,
)
from dnescope.netprobe.http import HTTPError, build_request, read_response
from dnescope.netprobe.transport import Endpoint, ProbeError, Transport
from dnescope.tls import EsniTLSClient, PlainChannel, StdlibTLSClient, TLSError

log = logging.getLogger(__name__)

DOT_PORT = 853
DNS_MESSAGE = "application/dns-message"
DEFAULT_WAIT_MS = 3000
DEFAULT_TIMEOUT_MS = 3000


class Protocol(str, enum.Enum):
    DOT = "DOT"
    DOH_POST = "DOH_POST"
    DOH_GET = "DOH_GET"


class TLSMode(str, enum.Enum):
    PLAIN_SNI = "PLAIN_SNI"
    ESNI = "ESNI"
    NO_SNI = "NO_SNI"


class ResolveVia(str, enum.Enum):
    SYSTEM = "SYSTEM"
    FIXED_IP = "FIXED_IP"
    PRIVATE_DOH = "PRIVATE_DOH"


@dataclass(frozen=True)
class DoTHEndpoint:
    """An encrypted resolver, written ``proto://host[:port][/path]``.

    ``proto`` is ``dot``, ``doh`` (POST) or ``doh-get``.  ``ip`` pins the
    address; when absent it is bootstrapped with the transport's resolver.
    """

    proto: str
    host: str
    port: int
    path: str = "/dns-query"
    ip: Optional[str] = None

    @classmethod
    def parse(cls, text: str) -> "DoTHEndpoint":
        text = text.strip()
        ip = None
        if "@" in text:
            text, ip = text.rsplit("@", 1)
            ipaddress.ip_address(ip)
        parts = urlsplit(text)
        proto = parts.scheme.lower()
        if proto not in ("dot", "doh", "doh-get", "https"):
            raise ValueError(f"unknown resolver protocol {parts.scheme!r} in {text!r}")
        if proto == "https":
            proto = "doh"
        if not parts.hostname:
            raise ValueError(f"missing host in {text!r}")
        port = parts.port or (DOT_PORT if proto == "dot" else 443)
        path = parts.path or "/dns-query"
        return cls(proto, parts.hostname.lower(), port, path, ip)

    @property
    def protocol(self) -> Protocol:
        return {"dot": Protocol.DOT, "doh": Protocol.DOH_POST, "doh-get": Protocol.DOH_GET}[self.proto]

    def __str__(self):
        default = DOT_PORT if self.proto == "dot" else 443
        port = "" if self.port == default else f":{self.port}"
        path = "" if self.proto == "dot" or self.path == "/dns-query" else self.path
        return f"{self.proto}://{self.host}{port}{path}"

    def with_ip(self, ip: str) -> "DoTHEndpoint":
        return DoTHEndpoint(self.proto, self.host, self.port, self.path, ip)


def load_doth_list(path) -> list[DoTHEndpoint]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                out.append(DoTHEndpoint.parse(line))
    return out


# ---------------------------------------------------------------------------
# Do53


def _query_id(qid: Optional[int], rng: Optional[random.Random]) -> int:
    if qid is not None:
        return qid & 0xFFFF
    return (rng or random).getrandbits(16)


def resolve_do53(t: Transport, resolver: Endpoint, qname: str, qtype: str = "A",
                 wait_ms: int = DEFAULT_WAIT_MS, *, qid: Optional[int] = None,
                 rng: Optional[random.Random] = None) -> ObservationSet:
    """Send one query and keep every matching response until ``wait_ms`` runs out."""
    qname = dnsmsg.normalize(qname)
    qid = _query_id(qid, rng)
    wire = dnsmsg.build_query(qname, qtype, qid)
    sent_at = t.now()
    try:
        datagrams = t.udp_exchange(resolver, wire, wait_ms)
    except ProbeError as exc:
        return ObservationSet(qname, qtype, str(resolver), sent_at, (), error=str(exc))
    obs = []
    for dg in datagrams:
        msg = dnsmsg.parse_message(dg.data)
        if msg is None or msg.id != qid or not msg.question:
            continue
        if dnsmsg.question_of(msg) != (qname, qtype):
            continue
        obs.append(Observation(dnsmsg.address_answers(msg), dg.offset_ms, msg.id, dnsmsg.rcode_text(msg)))
    obs.sort(key=lambda o: o.arrival_offset_ms)
    return ObservationSet(qname, qtype, str(resolver), sent_at, tuple(obs))


def query_first(t: Transport, resolver: Endpoint, qname: str, qtype: str,
                wait_ms: int = DEFAULT_WAIT_MS, *, rng: Optional[random.Random] = None):
    """First well-formed response message to a Do53 query, or ``None`` on timeout."""
    qid = _query_id(None, rng)
    wire = dnsmsg.build_query(qname, qtype, qid)
    for dg in t.udp_exchange(resolver, wire, wait_ms):
        msg = dnsmsg.parse_message(dg.data)
        if msg is not None and msg.id == qid:
            return msg
    return None


# ---------------------------------------------------------------------------
# connection staging


class _Failed(Exception):
    def __init__(self, result: StagedResult):
        self.result = result


def _connect(t: Transport, ep: Endpoint, timeout_ms: int):
    try:
        return t.connect(ep, timeout_ms)
    except ConnectionResetError as exc:
        raise _Failed(StagedResult(Stage.TCP, Outcome.RST, str(exc))) from None
    except TimeoutError as exc:
        raise _Failed(StagedResult(Stage.TCP, Outcome.TIMEOUT, str(exc) or "connect timeout")) from None
    except ProbeError as exc:
        raise _Failed(StagedResult(Stage.TCP, Outcome.PROBE_ERROR, str(exc))) from None


def _handshake(channel) -> None:
    try:
        channel.handshake()
    except ConnectionResetError as exc:
        raise _Failed(StagedResult(Stage.TLS, Outcome.RST, str(exc))) from None
    except TimeoutError:
        raise _Failed(StagedResult(Stage.TLS, Outcome.TIMEOUT, "handshake timeout")) from None
    except (TLSError, EsniError) as exc:
        raise _Failed(StagedResult(Stage.TLS, Outcome.TLS_ERROR, str(exc))) from None


def _app_failure(exc: BaseException) -> StagedResult:
    if isinstance(exc, ConnectionResetError):
        return StagedResult(Stage.APP, Outcome.RST, str(exc))
    if isinstance(exc, TimeoutError):
        return StagedResult(Stage.APP, Outcome.TIMEOUT, "response timeout")
    return StagedResult(Stage.APP, Outcome.HTTP_ERROR, str(exc))


def _cert_note(channel) -> str:
    if channel.cert_ok is None:
        return ""
    return "cert=ok" if channel.cert_ok else f"cert=bad ({channel.cert_detail})"


def _open_tls(t: Transport, ep: Endpoint, server_name: Optional[str], mode: TLSMode,
              esni_keys: Optional[EsniKeys], timeout_ms: int,
              trust: Optional[list[x509.Certificate]], alpn: Optional[list[str]],
              strict_cert: bool, now: Optional[float] = None):
    if mode is TLSMode.ESNI and esni_keys is None:
        raise ValueError("ESNI mode requires esni_keys")
    stream = _connect(t, ep, timeout_ms)
    if mode is TLSMode.ESNI:
        channel = EsniTLSClient(stream, server_name, esni_keys, timeout_ms, now=now)
    else:
        sni = server_name if mode is TLSMode.PLAIN_SNI else None
        channel = StdlibTLSClient(stream, sni, timeout_ms, trust=trust, alpn=alpn)
    try:
        _handshake(channel)
    except _Failed:
        stream.close()
        raise
    if strict_cert and not channel.cert_ok:
        stream.close()
        raise _Failed(StagedResult(Stage.TLS, Outcome.CERT_ERROR, channel.cert_detail))
    return stream, channel


# ---------------------------------------------------------------------------
# encrypted DNS


def _dot_exchange(channel, wire: bytes) -> bytes:
    channel.send(struct.pack("!H", len(wire)) + wire)
    buf = b""
    while True:
        if len(buf) >= 2:
            (n,) = struct.unpack("!H", buf[:2])
            if len(buf) >= 2 + n:
                return buf[2:2 + n]
        chunk = channel.recv()
        if not chunk:
            raise ConnectionResetError("DoT connection closed before answer")
        buf += chunk


def _doh_exchange(channel, ep: DoTHEndpoint, wire: bytes, protocol: Protocol) -> bytes:
    headers = {"Accept": DNS_MESSAGE}
    if protocol is Protocol.DOH_GET:
        q = base64.urlsafe_b64encode(wire).rstrip(b"=").decode()
        req = build_request("GET", ep.host, f"{ep.path}?dns={q}", headers=headers)
    else:
        headers["Content-Type"] = DNS_MESSAGE
        req = build_request("POST", ep.host, ep.path, body=wire, headers=headers)
    channel.send(req)
    resp = read_response(channel)
    if resp.status != 200:
        raise HTTPError(f"HTTP {resp.status}")
    return resp.body


def query_encrypted(t: Transport, resolver: DoTHEndpoint, qname: str, qtype: str = "A", *,
                    protocol: Optional[Protocol] = None, timeout_ms: int = DEFAULT_TIMEOUT_MS,
                    trust: Optional[list[x509.Certificate]] = None, strict_cert: bool = False,
                    qid: Optional[int] = None):
    """One DoT/DoH exchange.  Returns ``(result, message)``; ``message`` is
    ``None`` unless the exchange completed."""
    protocol = protocol or resolver.protocol
    try:
        ip = resolver.ip or t.resolve_host(resolver.host)
    except ProbeError as exc:
        return StagedResult(Stage.NONE, Outcome.PROBE_ERROR, str(exc)), None
    ep = Endpoint(ip, resolver.port)
    alpn = ["dot"] if protocol is Protocol.DOT else ["http/1.1"]
    try:
        stream, channel = _open_tls(t, ep, resolver.host, TLSMode.PLAIN_SNI, None, timeout_ms,
                                    trust, alpn, strict_cert)
    except _Failed as f:
        return f.result, None
    note = _cert_note(channel)
    wire = dnsmsg.build_query(qname, qtype, _query_id(qid, None))
    try:
        if protocol is Protocol.DOT:
            raw = _dot_exchange(channel, wire)
        else:
            raw = _doh_exchange(channel, resolver, wire, protocol)
    except (ConnectionResetError, TimeoutError, HTTPError, TLSError) as exc:
        res = _app_failure(exc)
        return StagedResult(res.stage_reached, res.outcome, "; ".join(filter(None, [res.detail, note]))), None
    finally:
        stream.close()
    msg = dnsmsg.parse_message(raw)
    if msg is None:
        return StagedResult(Stage.APP, Outcome.HTTP_ERROR, "undecodable DNS answer"), None
    detail = "; ".join(filter(None, [f"rcode={dnsmsg.rcode_text(msg)}", note]))
    return StagedResult(Stage.APP, Outcome.OK, detail, dnsmsg.address_answers(msg)), msg


def resolve_encrypted(t: Transport, resolver: DoTHEndpoint, qname: str, *,
                      protocol: Optional[Protocol] = None,
                      expected: Iterable[str] = (), qtype: str = "A",
                      timeout_ms: int = DEFAULT_TIMEOUT_MS,
                      trust: Optional[list[x509.Certificate]] = None,
                      strict_cert: bool = False, qid: Optional[int] = None) -> StagedResult:
    """Resolve ``qname`` through a DoT/DoH resolver, recording how far it got.

    With ``expected`` answers, a completed resolution that returns none of them
    is WRONG_ANSWER.
    """
    result, msg = query_encrypted(t, resolver, qname, qtype, protocol=protocol, timeout_ms=timeout_ms,
                                  trust=trust, strict_cert=strict_cert, qid=qid)
    expected = set(expected)
    if msg is not None and expected and not expected.intersection(result.answers or ()):
        return StagedResult(Stage.APP, Outcome.WRONG_ANSWER, result.detail, result.answers)
    return result


# ---------------------------------------------------------------------------
# TLS and HTTP


def tls_probe(t: Transport, endpoint: Endpoint, server_name: str, mode: TLSMode = TLSMode.PLAIN_SNI,
              esni_keys: Optional[EsniKeys] = None, *, timeout_ms: int = DEFAULT_TIMEOUT_MS,
              trust: Optional[list[x509.Certificate]] = None, path: str = "/",
              now: Optional[float] = None) -> StagedResult:
    """Handshake with ``endpoint`` then GET ``path``.

    For the control site the body is the client address the server saw; it
    is returned in ``answers``.
    """
    try:
        stream, channel = _open_tls(t, endpoint, server_name, mode, esni_keys, timeout_ms,
                                    trust, ["http/1.1"], False, now)
    except _Failed as f:
        return f.result
    try:
        channel.send(build_request("GET", server_name, path))
        resp = read_response(channel)
    except (ConnectionResetError, TimeoutError, HTTPError, TLSError) as exc:
        return _app_failure(exc)
    finally:
        stream.close()
    note = _cert_note(channel)
    if resp.status != 200:
        return StagedResult(Stage.APP, Outcome.HTTP_ERROR, f"HTTP {resp.status}; {note}")
    echoed = resp.body.decode("ascii", errors="replace").strip()
    try:
        ipaddress.ip_address(echoed)
        answers = (echoed,)
    except ValueError:
        answers = None
    return StagedResult(Stage.APP, Outcome.OK, note, answers)


def body_digest(body: bytes) -> str:
    return hashlib.sha256(body).hexdigest()


def fetch_http(t: Transport, url: str, resolve_via: ResolveVia = ResolveVia.SYSTEM, *,
               doh: Optional[DoTHEndpoint] = None, fixed_ip: Optional[str] = None,
               esni: bool = False, esni_keys: Optional[EsniKeys] = None,
               timeout_ms: int = DEFAULT_TIMEOUT_MS,
               trust: Optional[list[x509.Certificate]] = None,
               max_redirects: int = 0, max_body: int = 65536) -> CrawlOutcome:
    """Resolve, connect (TCP, TLS with SNI or ESNI) and GET ``url``."""
    parts = urlsplit(url)
    scheme = parts.scheme.lower()
    if scheme not in ("http", "https") or not parts.hostname:
        raise ValueError(f"unsupported URL {url!r}")
    host = parts.hostname.lower()
    target = (parts.path or "/") + (f"?{parts.query}" if parts.query else "")
    port = parts.port or (443 if scheme == "https" else 80)
    not_started = StagedResult(Stage.NONE, Outcome.PROBE_ERROR, "not attempted")

    if resolve_via is ResolveVia.FIXED_IP:
        if not fixed_ip:
            raise ValueError("FIXED_IP needs fixed_ip")
        resolved = StagedResult(Stage.APP, Outcome.OK, "fixed", (fixed_ip,))
    elif resolve_via is ResolveVia.PRIVATE_DOH:
        if doh is None:
            raise ValueError("PRIVATE_DOH needs a doh endpoint")
        resolved = resolve_encrypted(t, doh, host, timeout_ms=timeout_ms, trust=trust)
    else:
        try:
            resolved = StagedResult(Stage.APP, Outcome.OK, "system", (t.resolve_host(host),))
        except ProbeError as exc:
            resolved = StagedResult(Stage.NONE, Outcome.PROBE_ERROR, str(exc))
    v4 = [a for a in resolved.answers or () if ":" not in a]
    if not resolved.ok or not (resolved.answers or ()):
        return CrawlOutcome(host, scheme, resolved, not_started, None, False)
    ip = (v4 or list(resolved.answers))[0]

    use_esni = scheme == "https" and esni and esni_keys is not None
    try:
        if scheme == "https":
            mode = TLSMode.ESNI if use_esni else TLSMode.PLAIN_SNI
            stream, channel = _open_tls(t, Endpoint(ip, port), host, mode, esni_keys, timeout_ms,
                                        trust, ["http/1.1"], False)
        else:
            stream = _connect(t, Endpoint(ip, port), timeout_ms)
            channel = PlainChannel(stream, timeout_ms)
    except _Failed as f:
        return CrawlOutcome(host, scheme, resolved, f.result, None, use_esni)
    try:
        channel.send(build_request("GET", host, target))
        resp = read_response(channel)
    except (ConnectionResetError, TimeoutError, HTTPError, TLSError) as exc:
        return CrawlOutcome(host, scheme, resolved, _app_failure(exc), None, use_esni)
    finally:
        stream.close()

    location = resp.headers.get("location")
    if max_redirects > 0 and resp.status in (301, 302, 303, 307, 308) and location:
        return fetch_http(t, urljoin(url, location), resolve_via, doh=doh, fixed_ip=None
                          if resolve_via is not ResolveVia.FIXED_IP else fixed_ip,
                          esni=esni, esni_keys=esni_keys, timeout_ms=timeout_ms, trust=trust,
                          max_redirects=max_redirects - 1, max_body=max_body)
    connect = StagedResult(Stage.APP, Outcome.OK, _cert_note(channel))
    fetch = FetchResult(resp.status, body_digest(resp.body), len(resp.body), resp.body[:max_body])
    return CrawlOutcome(host, scheme, resolved, connect, fetch, use_esni)
