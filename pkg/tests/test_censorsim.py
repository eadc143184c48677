import json
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dnescope import dnsmsg
from dnescope.censorsim.profile import (
    DROP,
    NXDOMAIN,
    RST,
    CensorProfile,
    InjectRule,
    composite_profile,
    dump_profile,
    load_profile,
    name_listed,
    random_profile,
)
from dnescope.censorsim.serve import SimServer
from dnescope.censorsim.transport import SimTransport
from dnescope.censorsim.world import SimWorld, Zone, forged_response
from dnescope.model import ConfigError, Kind, RunConfig
from dnescope.netprobe.transport import Endpoint, SocketTransport, load_routes
from dnescope.pipeline import run, sim_plan


def test_zone_lookup():
    z = Zone()
    z.add("a.example", "A", "192.0.2.1")
    z.add("a.example", "TXT", "hello")
    z.add_wildcard("wild.example", "TXT", "any")
    assert z.lookup("A.Example.", "A") == ("NOERROR", ["192.0.2.1"])
    assert z.lookup("a.example", "AAAA") == ("NOERROR", [])
    assert z.lookup("b.example", "A") == ("NXDOMAIN", [])
    assert z.lookup("x.wild.example", "TXT") == ("NOERROR", ["any"])


def test_zone_respond_and_forgery():
    z = Zone()
    z.add("a.example", "A", "192.0.2.1")
    q = dnsmsg.build_query("a.example", "A", 77)
    genuine = dnsmsg.parse_message(z.respond(q))
    assert (genuine.id, dnsmsg.address_answers(genuine)) == (77, ("192.0.2.1",))
    forged = dnsmsg.parse_message(forged_response(q, "10.10.34.35"))
    assert (forged.id, dnsmsg.address_answers(forged)) == (77, ("10.10.34.35",))
    assert dnsmsg.rcode_text(dnsmsg.parse_message(forged_response(q, NXDOMAIN))) == "NXDOMAIN"
    assert z.respond(b"junk") is None


# profiles -------------------------------------------------------------------

def test_name_listed_matches_subdomains():
    assert name_listed("www.a.example", {"a.example"})
    assert name_listed("A.EXAMPLE.", {"a.example"})
    assert not name_listed("ba.example", {"a.example"})
    assert not name_listed(None, {"a.example"})


def test_inject_rule_longest_suffix():
    p = CensorProfile(dns_inject={"example": InjectRule("10.0.0.1"), "a.example": InjectRule("10.0.0.2")})
    assert p.inject_rule("www.a.example").answer == "10.0.0.2"
    assert p.inject_rule("b.example").answer == "10.0.0.1"
    assert p.inject_rule("other.test") is None


def test_profile_json_round_trip(world, tmp_path):
    for seed in range(20):
        p = random_profile(world, random.Random(seed))
        path = tmp_path / f"{seed}.json"
        dump_profile(p, path)
        assert load_profile(path) == p
    assert CensorProfile.from_dict(json.loads(composite_profile(world).to_json())) == composite_profile(world)


def test_profile_shorthand_forms():
    p = CensorProfile.from_dict({"dns_inject": {"a.example": "10.0.0.1"}, "ip_blocklist": ["192.0.2.1"]})
    assert p.dns_inject["a.example"] == InjectRule("10.0.0.1")
    assert p.ip_blocklist == {"192.0.2.1": RST}
    assert CensorProfile().empty and not p.empty


@pytest.mark.parametrize("data", [
    {"bogus": 1},
    {"ip_blocklist": {"192.0.2.1": "REJECT"}},
    {"ip_blocklist": {"not-ip": "RST"}},
    {"local_poison_answer": "nowhere"},
    {"doth_intercept": {"a.example": "x"}},
])
def test_profile_validation(data):
    with pytest.raises((ConfigError, ValueError)):
        CensorProfile.from_dict(data)


@pytest.mark.parametrize("text", ["{", "[1, 2]"])
def test_load_profile_rejects_bad_json(tmp_path, text):
    path = tmp_path / "p.json"
    path.write_text(text)
    with pytest.raises(ConfigError):
        load_profile(path)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32))
def test_random_profile_spares_infrastructure(world, seed):
    p = random_profile(world, random.Random(seed))
    infra = {e.ip for e in world.dns_servers()} | {world.private_doh.ip}
    assert not infra & set(p.ip_blocklist)
    assert not name_listed(world.private_doh.host, p.rst_on_sni)
    assert world.private_doh.host not in p.doth_intercept
    assert set(p.dns_inject) <= set(world.sites)


def test_composite_profile_groups(world):
    p = composite_profile(world)
    assert len(p.dns_inject) == 20
    assert sorted(p.rst_on_sni) == [f"site{i}.example" for i in range(10, 15)]
    assert sorted(p.http_blockpage) == ["site15.example", "site16.example"]
    assert set(p.ip_blocklist.values()) == {RST} and len(p.ip_blocklist) == 2


def test_world_build_rejects_unknown_site():
    with pytest.raises(ValueError):
        SimWorld.build(3, esni=["site09.example"])


# the simulated path ------------------------------------------------------------

def test_sim_transport_log_and_queried_names(world):
    t = SimTransport(world, world.vp("vp-a1"))
    run(RunConfig(parallelism=1), ["site00.example"], t, world.vp("vp-a1"), plan=sim_plan(world))
    assert t.queried_names() == ["site00.example"] * 3
    assert {e[0] for e in t.log} == {"udp", "tcp", "tls"}
    # ESNI hellos are logged without a name
    assert ("tls", str(world.esni_control.endpoint), "", True) in t.log


def test_sim_transport_blocked_resolver_ip(world):
    ep = world.public_resolvers[0]
    t = SimTransport(world, world.vp("vp-a1"), CensorProfile(ip_blocklist={ep.ip: DROP}))
    assert t.udp_exchange(ep, dnsmsg.build_query("site00.example", "A", 1), 3000) == []


def test_sim_transport_unknown_host(world):
    t = SimTransport(world, world.vp("vp-a1"))
    with pytest.raises(TimeoutError):
        t.connect(Endpoint("203.0.113.77", 443), 1000)


def test_injected_public_query_sees_both_replies(world):
    p = composite_profile(world)
    censored = run(RunConfig(parallelism=1), ["site12.example"], SimTransport(world, world.vp("vp-a1"), p),
                   world.vp("vp-a1"), plan=sim_plan(world))
    public = censored.records[1]
    assert public.kind is Kind.DNS_PUBLIC
    assert [o.arrival_offset_ms for o in public.payload.observations] == [1.0, 51.0]


# live loopback serving --------------------------------------------------------

def _shape(rec):
    """Record content that must not depend on the transport; timings excluded."""
    p = rec.payload
    if rec.kind in (Kind.DNS_LOCAL, Kind.DNS_PUBLIC):
        return rec.kind, rec.subject, p.error, tuple((o.answers, o.rcode) for o in p.observations)
    return rec.kind, rec.subject, p.stage_reached, p.outcome, p.answers


@pytest.mark.parametrize("which", ["empty", "composite", "random"])
def test_live_server_matches_simulation(world, which, tmp_path):
    profile = {"empty": CensorProfile(), "composite": composite_profile(world),
               "random": random_profile(world, random.Random(7))}[which]
    vp = world.vp("vp-a1")
    cfg = RunConfig(parallelism=8, response_wait_ms=400)
    domains = world.test_list[8:14] + world.test_list[15:20]
    expected = run(cfg, domains, SimTransport(world, vp, profile), vp, plan=sim_plan(world))
    with SimServer(world, "vp-a1", profile) as server:
        paths = server.write_artifacts(tmp_path)
        routes = load_routes(json.loads(paths["routes"].read_text()))
        live = run(cfg, domains, SocketTransport(vp.ip, routes), vp, plan=sim_plan(world))
    assert [_shape(r) for r in live.records] == [_shape(r) for r in expected.records]
    assert {p.name for p in paths.values()} >= {"run.conf", "routes.json", "ca.pem", "doth.txt"}


def test_simulation_is_deterministic(world):
    profile = random_profile(world, random.Random(3))
    vp = world.vp("vp-a1")

    def go():
        t = SimTransport(world, vp, profile)
        store = run(RunConfig(parallelism=1), world.test_list[:6], t, vp, plan=sim_plan(world))
        return t.log, [_shape(r) for r in store.records], [r.record_id for r in store.records]

    assert go() == go()
