"""The adversarial transport: a vantage point's view of the simulated world through a censor."""
from __future__ import annotations

import threading
from datetime import datetime, timezone
from typing import Optional

from dnescope import dnsmsg
from dnescope.censorsim.profile import DROP, RST, CensorProfile, name_listed
from dnescope.censorsim.services import Client, interceptor, tcp_service
from dnescope.censorsim.world import BLOCKPAGE, SimWorld, forged_response
from dnescope.model import VantageContext
from dnescope.netprobe.http import build_response
from dnescope.netprobe.transport import Datagram, Endpoint, ProbeError, Stream, Transport
from dnescope.tls import CT_HANDSHAKE, CertAuthority, parse_client_hello, split_record

# forged replies leave the censor's box right away; genuine ones follow by the rule's lead
INJECT_OFFSET_MS = 1.0
_MAX_PEEK = 16384

_censor_ca: Optional[CertAuthority] = None
_censor_ca_lock = threading.Lock()


def censor_ca() -> CertAuthority:
    global _censor_ca
    with _censor_ca_lock:
        if _censor_ca is None:
            _censor_ca = CertAuthority("regulator interception CA")
        return _censor_ca


class _Closed:
    closed = True

    def feed(self, data):
        return b""


class SimStream(Stream):
    """A TCP connection through the censor.

    The censor holds the client's first bytes until it has seen a whole
    ClientHello (or HTTP request head), decides, then lets the flow through,
    resets it, or answers in the server's stead.
    """

    def __init__(self, transport: "SimTransport", endpoint: Endpoint, server):
        self.t = transport
        self.endpoint = endpoint
        self.server = server
        self.out = bytearray()
        self.reset = False
        self.closed = False
        self.inspected = False
        self.pending = b""

    def send(self, data: bytes) -> None:
        if self.reset:
            raise ConnectionResetError("connection reset by peer")
        if self.closed:
            raise ProbeError("send on closed stream")
        if not self.inspected:
            self.pending += data
            decision = self.t.inspect(self.pending, self.endpoint)
            if decision is None:
                return
            self.inspected = True
            data, self.pending = self.pending, b""
            action, arg = decision
            if action == "rst":
                self.reset = True
                self.out.clear()
                return
            if action == "replace":
                self.server = arg
            elif action == "respond":
                self.out += arg
                self.server = _Closed()
                return
        if self.server.closed:
            return
        self.out += self.server.feed(data)

    def recv(self, max_bytes: int = 65536, timeout_ms: Optional[int] = None) -> bytes:
        if self.reset:
            raise ConnectionResetError("connection reset by peer")
        if self.out:
            chunk = bytes(self.out[:max_bytes])
            del self.out[:max_bytes]
            return chunk
        if self.closed or self.server.closed:
            return b""
        raise TimeoutError("read timed out")

    def close(self) -> None:
        self.closed = True


class SimTransport(Transport):
    """What ``vp`` sees of ``world`` when ``profile`` sits on its path.

    Deterministic and in-process; time is virtual (``clock``), so timeouts
    and drops cost nothing.  Every request is appended to ``log``.
    """

    def __init__(self, world: SimWorld, vp: VantageContext, profile: Optional[CensorProfile] = None,
                 clock: Optional[datetime] = None):
        self.world = world
        self.vp = vp
        self.profile = profile or CensorProfile()
        self.source_ip = vp.ip
        self.client = Client(vp.ip, vp.country)
        self.clock = clock or datetime(2020, 3, 1, 12, tzinfo=timezone.utc)
        self.log: list[tuple] = []
        self._lock = threading.Lock()

    def now(self) -> datetime:
        return self.clock

    def _record(self, *event) -> None:
        with self._lock:
            self.log.append(event)

    def resolve_host(self, name: str) -> str:
        rcode, values = self.world.zone.lookup(name, "A")
        if not values:
            raise ProbeError(f"cannot resolve {name}: {rcode}")
        return values[0]

    # UDP ------------------------------------------------------------------

    def udp_exchange(self, endpoint: Endpoint, payload: bytes, wait_ms: int) -> list[Datagram]:
        msg = dnsmsg.parse_message(payload)
        q = dnsmsg.question_of(msg) if msg is not None and msg.question else ("", "")
        self._record("udp", str(endpoint), *q)
        p = self.profile
        if endpoint.ip in p.ip_blocklist:
            return []
        if endpoint not in self.world.dns_servers():
            return []
        qname, qtype = q
        genuine = self.world.zone.respond(payload)
        if genuine is None:
            return []
        local = endpoint == self.world.local_resolver
        rule = p.inject_rule(qname) if qtype == "A" else None
        out = []
        if local:
            if rule is not None:
                # the resolver's own upstream lookup was answered by the injector
                genuine = forged_response(payload, rule.answer)
            elif qtype == "A" and name_listed(qname, p.local_resolver_poison):
                genuine = forged_response(payload, p.local_poison_answer)
            out.append(Datagram(genuine, self.world.rtt_ms))
        elif rule is not None:
            out.append(Datagram(forged_response(payload, rule.answer), INJECT_OFFSET_MS))
            if not rule.genuine_suppressed:
                out.append(Datagram(genuine, INJECT_OFFSET_MS + rule.inject_lead_ms))
        else:
            out.append(Datagram(genuine, self.world.rtt_ms))
        return [d for d in out if d.offset_ms <= wait_ms]

    # TCP ------------------------------------------------------------------

    def connect(self, endpoint: Endpoint, timeout_ms: int) -> Stream:
        self._record("tcp", str(endpoint))
        action = self.profile.ip_blocklist.get(endpoint.ip)
        if action == RST:
            raise ConnectionResetError(f"connect to {endpoint} reset")
        if action == DROP:
            raise TimeoutError(f"connect to {endpoint} timed out")
        try:
            server = tcp_service(self.world, endpoint, self.client)
        except LookupError:
            raise TimeoutError(f"connect to {endpoint} timed out") from None
        if server is None:
            raise ConnectionResetError(f"connect to {endpoint} refused")
        return SimStream(self, endpoint, server)

    def inspect(self, data: bytes, endpoint: Endpoint):
        """Censor decision on a flow's opening bytes, or ``None`` to wait for more."""
        p = self.profile
        if data[:1] == bytes([CT_HANDSHAKE]):
            if split_record(data) is None and len(data) < _MAX_PEEK:
                return None
            info = parse_client_hello(data)
            if info is None:
                return ("pass", None)
            sni = info.sni
            self._record("tls", str(endpoint), sni or "", info.has_esni)
            if sni and name_listed(sni, p.rst_on_sni):
                return ("rst", None)
            if info.has_esni and p.rst_on_esni:
                return ("rst", None)
            if sni and sni in p.doth_intercept:
                host = sni
                resolver = next((r for r in self.world.doth if r.host == host), None)
                path = resolver.path if resolver else "/dns-query"
                return ("replace", interceptor(censor_ca(), host, path, p.doth_intercept[host]))
            return ("pass", None)
        if data[:4] in (b"GET ", b"POST", b"HEAD"):
            if b"\r\n\r\n" not in data and len(data) < _MAX_PEEK:
                return None
            host = ""
            for line in data.split(b"\r\n\r\n", 1)[0].split(b"\r\n")[1:]:
                k, _, v = line.partition(b":")
                if k.strip().lower() == b"host":
                    host = v.strip().decode("latin-1").split(":")[0]
            self._record("http", str(endpoint), host)
            if name_listed(host, p.http_blockpage):
                return ("respond", build_response(200, BLOCKPAGE))
            return ("pass", None)
        return ("pass", None)

    def queried_names(self) -> list[str]:
        """Names looked up over plaintext Do53 so far."""
        return [e[2] for e in self.log if e[0] == "udp"]
