import json
import socket
import threading

import pytest

from dnescope import dnsmsg
from dnescope.censorsim.profile import DROP, RST, CensorProfile, InjectRule
from dnescope.censorsim.transport import SimTransport
from dnescope.censorsim.world import BLOCKPAGE, GEOBLOCK_PAGE
from dnescope.model import Outcome, Stage
from dnescope.netprobe.http import HTTPError, build_request, build_response, read_response
from dnescope.netprobe.probes import (
    DoTHEndpoint,
    Protocol,
    ResolveVia,
    TLSMode,
    fetch_http,
    load_doth_list,
    query_first,
    resolve_do53,
    resolve_encrypted,
    tls_probe,
)
from dnescope.netprobe.transport import Endpoint, ProbeError, Route, SocketTransport, load_routes


def sim(world, profile=None, vp_id="vp-a1"):
    return SimTransport(world, world.vp(vp_id), profile)


# Do53 -------------------------------------------------------------------

def test_do53_clean(world):
    t = sim(world)
    res = resolve_do53(t, world.public_resolvers[0], "site03.example", qid=99)
    assert [o.answers for o in res.observations] == [(world.sites["site03.example"].ip,)]
    assert res.observations[0].arrival_offset_ms == world.rtt_ms and not res.timed_out


def test_do53_injection_then_genuine(world):
    t = sim(world, CensorProfile(dns_inject={"site03.example": InjectRule("10.10.34.35", 20.0)}))
    res = resolve_do53(t, world.public_resolvers[0], "site03.example")
    assert [(o.answers, o.arrival_offset_ms) for o in res.observations] == [
        (("10.10.34.35",), 1.0), ((world.sites["site03.example"].ip,), 21.0)]


def test_do53_injection_suppressed_and_nxdomain(world):
    t = sim(world, CensorProfile(dns_inject={"site03.example": InjectRule("NXDOMAIN", 20.0, True)}))
    res = resolve_do53(t, world.public_resolvers[0], "site03.example")
    assert [(o.answers, o.rcode) for o in res.observations] == [((), "NXDOMAIN")]


def test_do53_short_wait_drops_late_genuine(world):
    t = sim(world, CensorProfile(dns_inject={"site03.example": InjectRule("10.10.34.35", 100.0)}))
    res = resolve_do53(t, world.public_resolvers[0], "site03.example", wait_ms=50)
    assert len(res.observations) == 1


def test_do53_unknown_endpoint_times_out(world):
    res = resolve_do53(sim(world), Endpoint("203.0.113.1", 53), "site03.example")
    assert res.timed_out and res.error is None


def test_do53_ignores_mismatched_id(world):
    class Wrong(SimTransport):
        def udp_exchange(self, endpoint, payload, wait_ms):
            out = super().udp_exchange(endpoint, payload, wait_ms)
            return [type(d)(b"\x00\x00" + d.data[2:], d.offset_ms) for d in out]

    t = Wrong(world, world.vp("vp-a1"))
    assert resolve_do53(t, world.public_resolvers[0], "site03.example", qid=5).timed_out


def test_do53_local_resolver_poison(world):
    t = sim(world, CensorProfile(local_resolver_poison=frozenset({"site05.example"}),
                                 local_poison_answer="10.0.0.1"))
    local = resolve_do53(t, world.local_resolver, "site05.example")
    public = resolve_do53(t, world.public_resolvers[0], "site05.example")
    assert local.observations[0].answers == ("10.0.0.1",)
    assert public.observations[0].answers == (world.sites["site05.example"].ip,)


def test_query_first_returns_message(world):
    msg = query_first(sim(world), world.public_resolvers[0], "_esni.site00.example", "TXT")
    assert dnsmsg.rcode_text(msg) == "NOERROR"


# encrypted DNS ----------------------------------------------------------

@pytest.mark.parametrize("proto", list(Protocol))
def test_doth_each_protocol_ok(world, proto):
    r = next(r for r in world.doth if r.protocol is proto)
    res = resolve_encrypted(sim(world), r, world.control_domain,
                            expected=[world.control_ip], trust=[world.ca.cert], strict_cert=True)
    assert res.ok and res.answers == (world.control_ip,)
    assert "cert=ok" in res.detail


def test_doth_bootstraps_address(world):
    r = DoTHEndpoint(world.doth[1].proto, world.doth[1].host, world.doth[1].port)
    assert resolve_encrypted(sim(world), r, world.control_domain).ok


def test_doth_sni_reset(world):
    r = world.doth[0]
    res = resolve_encrypted(sim(world, CensorProfile(rst_on_sni=frozenset({r.host}))), r, world.control_domain)
    assert (res.stage_reached, res.outcome) == (Stage.TLS, Outcome.RST)


@pytest.mark.parametrize("action, outcome", [(RST, Outcome.RST), (DROP, Outcome.TIMEOUT)])
def test_doth_ip_block(world, action, outcome):
    r = world.doth[1]
    res = resolve_encrypted(sim(world, CensorProfile(ip_blocklist={r.ip: action})), r, world.control_domain)
    assert (res.stage_reached, res.outcome) == (Stage.TCP, outcome)


def test_doth_intercept(world):
    r = world.doth[2]
    t = sim(world, CensorProfile(doth_intercept={r.host: "198.51.100.53"}))
    res = resolve_encrypted(t, r, world.control_domain, expected=[world.control_ip], trust=[world.ca.cert])
    assert (res.outcome, res.answers) == (Outcome.WRONG_ANSWER, ("198.51.100.53",))
    assert "cert=bad" in res.detail
    strict = resolve_encrypted(t, r, world.control_domain, trust=[world.ca.cert], strict_cert=True)
    assert (strict.stage_reached, strict.outcome) == (Stage.TLS, Outcome.CERT_ERROR)


def test_doth_wrong_protocol_for_server(world):
    dot_only = next(r for r in world.doth if r.protocol is Protocol.DOT)
    res = resolve_encrypted(sim(world), dot_only, world.control_domain, protocol=Protocol.DOH_POST)
    assert (res.stage_reached, res.outcome) == (Stage.APP, Outcome.TIMEOUT)


def test_doth_unresolvable_host(world):
    res = resolve_encrypted(sim(world), DoTHEndpoint.parse("dot://nowhere.example"), world.control_domain)
    assert res.outcome is Outcome.PROBE_ERROR


def test_doth_endpoint_parse_and_str():
    e = DoTHEndpoint.parse("https://DNS.Example/q@192.0.2.1")
    assert (e.proto, e.host, e.port, e.path, e.ip) == ("doh", "dns.example", 443, "/q", "192.0.2.1")
    assert str(e) == "doh://dns.example/q"
    assert str(DoTHEndpoint.parse("dot://a.example")) == "dot://a.example"
    assert str(DoTHEndpoint.parse("dot://a.example:8853")) == "dot://a.example:8853"
    assert DoTHEndpoint.parse("doh-get://a.example").protocol is Protocol.DOH_GET
    assert DoTHEndpoint.parse("dot://a.example").with_ip("192.0.2.9").ip == "192.0.2.9"


@pytest.mark.parametrize("text", ["ftp://a.example", "dot://", "dot://a.example@not-an-ip"])
def test_doth_endpoint_parse_rejects(text):
    with pytest.raises(ValueError):
        DoTHEndpoint.parse(text)


def test_load_doth_list(tmp_path):
    p = tmp_path / "doth.txt"
    p.write_text("# resolvers\ndot://a.example\n\ndoh://b.example:8443/x  # comment\n")
    assert [str(e) for e in load_doth_list(p)] == ["dot://a.example", "doh://b.example:8443/x"]


# TLS probes ----------------------------------------------------------------

def test_tls_probe_echoes_client_address(world):
    c = world.esni_control
    res = tls_probe(sim(world), c.endpoint, c.name, TLSMode.ESNI, world.esni_keys.keys, now=1583064000)
    assert res.ok and res.answers == (world.vp("vp-a1").ip,)


def test_tls_probe_esni_reset_but_plain_passes(world):
    c = world.esni_control
    t = sim(world, CensorProfile(rst_on_esni=True))
    esni = tls_probe(t, c.endpoint, c.name, TLSMode.ESNI, world.esni_keys.keys, now=1583064000)
    plain = tls_probe(t, c.endpoint, c.name, TLSMode.PLAIN_SNI)
    assert (esni.stage_reached, esni.outcome) == (Stage.TLS, Outcome.RST)
    assert plain.ok


def test_tls_probe_esni_needs_keys(world):
    with pytest.raises(ValueError):
        tls_probe(sim(world), world.esni_control.endpoint, "x", TLSMode.ESNI)


# page fetches ---------------------------------------------------------------

def test_fetch_https_ok(world):
    site = world.sites["site12.example"]
    out = fetch_http(sim(world), "https://site12.example/", trust=[world.ca.cert])
    assert out.connect.ok and out.fetch.status == 200 and out.fetch.body.startswith(site.body[:64])
    assert out.resolve.answers == (site.ip,) and not out.used_esni


def test_fetch_https_esni_hides_name(world):
    t = sim(world, CensorProfile(rst_on_sni=frozenset({"site02.example"})))
    plain = fetch_http(t, "https://site02.example/")
    esni = fetch_http(t, "https://site02.example/", esni=True, esni_keys=world.esni_keys.keys)
    assert (plain.connect.stage_reached, plain.connect.outcome) == (Stage.TLS, Outcome.RST)
    assert esni.connect.ok and esni.used_esni and esni.fetch.status == 200


def test_fetch_http_blockpage(world):
    t = sim(world, CensorProfile(http_blockpage=frozenset({"site15.example"})))
    out = fetch_http(t, "http://site15.example/")
    assert out.fetch.body == BLOCKPAGE


def test_fetch_geoblocked(world):
    censored = fetch_http(sim(world), "https://site19.example/")
    clean = fetch_http(sim(world, vp_id="control"), "https://site19.example/")
    assert (censored.fetch.status, censored.fetch.body) == (403, GEOBLOCK_PAGE)
    assert clean.fetch.status == 200


def test_fetch_via_private_doh_and_fixed_ip(world):
    t = sim(world, CensorProfile(dns_inject={"site12.example": InjectRule("10.10.34.35")}))
    via_doh = fetch_http(t, "https://site12.example/", ResolveVia.PRIVATE_DOH, doh=world.private_doh)
    fixed = fetch_http(t, "https://site12.example/", ResolveVia.FIXED_IP, fixed_ip=world.sites["site12.example"].ip)
    assert via_doh.fetch.status == 200 and fixed.fetch.status == 200


def test_fetch_unresolvable_skips_connect(world):
    out = fetch_http(sim(world), "https://missing.example/")
    assert out.resolve.outcome is Outcome.PROBE_ERROR and out.connect.outcome is Outcome.PROBE_ERROR


@pytest.mark.parametrize("url, kw", [("ftp://a.example/", {}),
                                     ("https://a.example/", {"resolve_via": ResolveVia.FIXED_IP}),
                                     ("https://a.example/", {"resolve_via": ResolveVia.PRIVATE_DOH})])
def test_fetch_argument_errors(world, url, kw):
    with pytest.raises(ValueError):
        fetch_http(sim(world), url, **kw)


# HTTP framing --------------------------------------------------------------

class Chunks:
    def __init__(self, *parts, reset=False):
        self.parts = list(parts)
        self.reset = reset

    def recv(self):
        if self.parts:
            return self.parts.pop(0)
        if self.reset:
            raise ConnectionResetError("reset")
        return b""


def test_build_request_post_has_length():
    req = build_request("POST", "a.example", "/q", body=b"xyz", headers={"Accept": "x"})
    assert req.startswith(b"POST /q HTTP/1.1\r\nHost: a.example\r\n")
    assert b"Content-Length: 3\r\n" in req and req.endswith(b"\r\n\r\nxyz")


def test_read_response_content_length_split():
    wire = build_response(200, b"hello world")
    r = read_response(Chunks(wire[:10], wire[10:30], wire[30:]))
    assert (r.status, r.body, r.headers["content-type"]) == (200, b"hello world", "text/html")


def test_read_response_chunked():
    wire = (b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\n"
            b"5\r\nhello\r\n6;ext=1\r\n world\r\n0\r\n\r\n")
    assert read_response(Chunks(wire[:50], wire[50:])).body == b"hello world"


def test_read_response_until_close_tolerates_reset():
    r = read_response(Chunks(b"HTTP/1.0 200 OK\r\n\r\nabc", b"def", reset=True))
    assert r.body == b"abcdef"


@pytest.mark.parametrize("parts", [
    (b"HTTP/1.1 200",),
    (b"SPDY 200 OK\r\n\r\n",),
    (b"HTTP/1.1 abc OK\r\n\r\n",),
    (b"HTTP/1.1 200 OK\r\nContent-Length: 10\r\n\r\nabc",),
    (b"HTTP/1.1 200 OK\r\nTransfer-Encoding: chunked\r\n\r\nzz\r\n",),
])
def test_read_response_errors(parts):
    with pytest.raises(HTTPError):
        read_response(Chunks(*parts))


# real sockets -------------------------------------------------------------

@pytest.fixture
def udp_twice():
    """A UDP server answering every datagram twice, 30 ms apart."""
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    sock.bind(("127.0.0.1", 0))
    sock.settimeout(0.05)
    stop = threading.Event()

    def serve():
        while not stop.is_set():
            try:
                data, addr = sock.recvfrom(2048)
            except socket.timeout:
                continue
            sock.sendto(b"first" + data, addr)
            threading.Timer(0.03, sock.sendto, (b"second" + data, addr)).start()

    th = threading.Thread(target=serve, daemon=True)
    th.start()
    yield sock.getsockname()[1]
    stop.set()
    th.join()
    sock.close()


def test_socket_udp_collects_every_datagram(udp_twice):
    t = SocketTransport("127.0.0.1", {Endpoint("192.0.2.53", 53): Route(Endpoint("127.0.0.1", udp_twice))})
    got = t.udp_exchange(Endpoint("192.0.2.53", 53), b"q", 300)
    assert [d.data for d in got] == [b"firstq", b"secondq"]
    assert got[0].offset_ms <= got[1].offset_ms and got[1].offset_ms >= 25


def test_socket_null_route():
    t = SocketTransport("127.0.0.1", {Endpoint("192.0.2.9", 0): Route(None)})
    assert t.udp_exchange(Endpoint("192.0.2.9", 53), b"q", 10) == []
    with pytest.raises(TimeoutError):
        t.connect(Endpoint("192.0.2.9", 443), 10)


def test_socket_refused_is_reset():
    s = socket.socket()
    s.bind(("127.0.0.1", 0))
    port = s.getsockname()[1]
    s.close()
    t = SocketTransport("127.0.0.1", {Endpoint("192.0.2.9", 0): Route(Endpoint("127.0.0.1", port))})
    with pytest.raises(ConnectionResetError):
        t.connect(Endpoint("192.0.2.9", 443), 500)


def test_socket_proxy_header():
    lsock = socket.socket()
    lsock.bind(("127.0.0.1", 0))
    lsock.listen(1)
    routes = {Endpoint("192.0.2.9", 0): Route(Endpoint("127.0.0.1", lsock.getsockname()[1]), True)}
    stream = SocketTransport("10.1.2.3", routes).connect(Endpoint("192.0.2.9", 443), 1000)
    conn, _ = lsock.accept()
    stream.send(b"hi")
    conn.settimeout(1)
    data = b""
    while not data.endswith(b"hi"):
        data += conn.recv(100)
    assert data == b"PROXY TCP4 10.1.2.3 192.0.2.9 0 443\r\nhi"
    conn.sendall(b"back")
    assert stream.recv(100, 1000) == b"back"
    conn.close()
    stream.close()
    lsock.close()


def test_socket_bad_address_is_probe_error():
    t = SocketTransport("127.0.0.1", {Endpoint("192.0.2.9", 0): Route(Endpoint("0.0.0.0", 1))})
    with pytest.raises((ProbeError, ConnectionResetError)):
        t.connect(Endpoint("192.0.2.9", 443), 200)


def test_load_routes():
    routes = load_routes(json.loads(
        '{"192.0.2.1:0": null, "192.0.2.2:53": "127.0.0.1:5353",'
        ' "192.0.2.3:0": {"target": "127.0.0.1:9000", "proxy": true}, "[2001:db8::1]:53": "127.0.0.1:1"}'))
    assert routes[Endpoint("192.0.2.1", 0)] == Route(None)
    assert routes[Endpoint("192.0.2.2", 53)] == Route(Endpoint("127.0.0.1", 5353))
    assert routes[Endpoint("192.0.2.3", 0)] == Route(Endpoint("127.0.0.1", 9000), True)
    assert Endpoint("2001:db8::1", 53) in routes
    assert str(Endpoint("2001:db8::1", 53)) == "[2001:db8::1]:53"
