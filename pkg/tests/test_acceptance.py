"""Exit criteria.  Each test prints exactly one PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v``.
"""
import base64
import ipaddress
import random
import string
import time

import pytest
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey

from dnescope import detect
from dnescope.asmap import build_prefix_table
from dnescope.censorsim.profile import (
    FORGED_ANSWERS,
    CensorProfile,
    InjectRule,
    composite_profile,
    random_profile,
)
from dnescope.censorsim.transport import SimTransport
from dnescope.censorsim.truth import expected_category, profile_ground_truth
from dnescope.censorsim.world import SimWorld, Zone
from dnescope.circumvent import summarize
from dnescope.esni.keys import (
    ClientEncryptedSNI,
    EsniError,
    EsniFormatError,
    decode_esni_keys,
    esni_open,
    esni_seal,
    generate_esni_keys,
    parse_esni_keys,
    raw_public,
)
from dnescope.esni.scan import scan_esni_txt, summarize_adoption
from dnescope.model import Kind, Outcome, RunConfig, Stage, day_of
from dnescope.netprobe.probes import TLSMode, resolve_do53, tls_probe
from dnescope.netprobe.transport import Endpoint
from dnescope.pipeline import simulate_campaign

from helpers import BASE, ZoneTransport, conn_result, dns_record, record, vp

pytestmark = pytest.mark.acceptance

N_PROFILES = 100
COMPOSITE_ROW = ("10/20", 2, 2, 5, 1)   # (circumvented/total, TCP, HTTP, TLS, SS)
NOW = 1583064000.0                      # 2020-03-01 12:00 UTC, inside every generated validity window


def test_master_oracle(world, verdict_line):
    cfg = RunConfig(parallelism=1)
    profiles = [CensorProfile(), composite_profile(world)]
    profiles += [random_profile(world, random.Random(seed)) for seed in range(N_PROFILES)]
    start = time.perf_counter()
    fp = fn = as_err = summary_err = 0
    blocked_total = 0
    for p in profiles:
        camp = simulate_campaign(world, p, cfg, days=3)
        truth = profile_ground_truth(p, world, days=3, cfg=cfg)
        got = camp.analysis.blocked()
        fp += len(got - truth.blocked)
        fn += len(truth.blocked - got)
        as_err += len(camp.analysis.as_blocked() ^ truth.as_blocked)
        row = camp.summary.get("XA")
        summary_err += (row.as_tuple() if row else None) != (truth.summary.as_tuple() if truth.summary.total
                                                            else None)
        blocked_total += len(truth.blocked)
    elapsed = time.perf_counter() - start
    ok = fp == fn == as_err == summary_err == 0 and elapsed < 300 and len(profiles) >= 100
    verdict_line("master oracle equivalence", ok,
                 f"{len(profiles)} profiles, {blocked_total} blocked subjects, FP={fp} FN={fn} "
                 f"AS mismatches={as_err} summary mismatches={summary_err}, {elapsed:.1f}s")
    assert ok


def _rate_records(k, n=100):
    """``n`` public-resolver lookups at one VP on one day, ``k`` of them forged."""
    target, control = vp("vp1"), vp("control", "62.50.1.10", 64550, "XB")
    recs = [dns_record(control, "site00.example", "45.10.0.10")]
    recs += [dns_record(target, "site00.example", "10.10.34.35" if i < k else "45.10.0.10") for i in range(n)]
    return recs


def _availability_records(k, n=100):
    """One DoT probe from each of ``n`` VPs on one day, ``k`` of them successful."""
    return [record(vp(f"v{i}", f"62.{50 + i // 250}.{i % 250}.10", 64550, "XB"), Kind.DOT, "dot://r.example",
                   conn_result(i < k)) for i in range(n)]


def test_threshold_fidelity(world, verdict_line):
    cfg = RunConfig()
    got_rate = []
    for k in (79, 80, 81):
        analysis = detect.analyze(_rate_records(k), cfg, world.prefix, world.orgs)
        got_rate.append(next(v.status for v in analysis.vp_verdicts if v.vp_id == "vp1"))
    got_avail = []
    for k in (69, 70, 71):
        analysis = detect.analyze(_availability_records(k), cfg, world.prefix, world.orgs)
        got_avail.append(analysis.availability[("dot://r.example", day_of(BASE))])
    got_resolver = [detect.resolver_block_verdict([r] * 3).status for r in (0.79, 0.80, 0.81)]
    want_rate = [detect.Status.CLEAR, detect.Status.CLEAR, detect.Status.BLOCKED]
    ok = got_rate == want_rate and got_avail == [False, False, True] and got_resolver == want_rate
    verdict_line("threshold fidelity", ok,
                 f"rates 0.79/0.80/0.81 -> {[s.value for s in got_rate]}, resolver p90 -> "
                 f"{[s.value for s in got_resolver]}, availability 0.69/0.70/0.71 -> {got_avail}")
    assert ok


def _as_records(n_subnets, n_days):
    recs = [dns_record(vp("control", "62.50.1.10", 64550, "XB"), "site00.example", "45.10.0.10")]
    for s in range(n_subnets):
        v = vp(f"vp{s}", f"61.40.{s + 1}.10", 64540, "XA")
        for d in range(n_days):
            recs.append(dns_record(v, "site00.example", "10.10.34.35", day=d))
    return recs


def test_as_rule_fidelity(world, verdict_line):
    cfg = RunConfig()
    cases = [(1, 2), (2, 1), (2, 2)]
    direct, end_to_end = [], []
    for subnets, days in cases:
        evidence = [(f"vp{s}", f"61.40.{s}.0/24", d) for s in range(subnets) for d in range(days)]
        direct.append(detect.as_level_verdict(64540, "site00.example", evidence).blocked)
        analysis = detect.analyze(_as_records(subnets, days), cfg, world.prefix, world.orgs)
        end_to_end.append((64540, Kind.DNS_PUBLIC, "site00.example") in analysis.as_blocked())
    ok = direct == end_to_end == [False, False, True]
    verdict_line("AS-rule fidelity", ok, f"(subnets, days) {cases} -> direct {direct}, pipeline {end_to_end}")
    assert ok


def test_injection_discernment(world, verdict_line):
    rng = random.Random(2020)
    censored = world.vp("vp-a1")
    public, local = world.public_resolvers[0], world.local_resolver
    controls = {d: {world.sites[d].ip} for d in world.sites}
    on_path_ok = local_ok = 0
    trials = 1000
    for i in range(trials):
        domain = rng.choice(world.test_list)
        answer = rng.choice(FORGED_ANSWERS)
        inject = CensorProfile(dns_inject={domain: InjectRule(answer, float(rng.choice((2, 20, 80, 400))))})
        t = SimTransport(world, censored, inject)
        o = resolve_do53(t, public, domain, "A", 3000, qid=i)
        first = o.observations[0] if o.observations else None
        forged_first = first is not None and (first.answers == (answer,) if answer != "NXDOMAIN"
                                              else first.rcode == "NXDOMAIN")
        v = detect.classify_dns(o, controls[domain], detect.ResolverKind.PUBLIC, world.prefix, world.orgs)
        on_path_ok += len(o.observations) >= 2 and forged_first and v.injection_source is detect.Source.ON_PATH

        poison = CensorProfile(local_resolver_poison=frozenset({domain}),
                               local_poison_answer=rng.choice(("10.0.0.1", "180.180.255.130", "127.0.0.1")))
        t = SimTransport(world, censored, poison)
        o = resolve_do53(t, local, domain, "A", 3000, qid=i)
        v = detect.classify_dns(o, controls[domain], detect.ResolverKind.LOCAL, world.prefix, world.orgs)
        local_ok += len(o.observations) == 1 and v.tampered and v.injection_source is detect.Source.LOCAL_RESOLVER
    ok = on_path_ok == trials and local_ok == trials
    verdict_line("injection discernment", ok, f"on-path {on_path_ok}/{trials}, local resolver {local_ok}/{trials}")
    assert ok


def test_esnikeys_format(verdict_line):
    rng = random.Random(7)
    roundtrip = 0
    for _ in range(1000):
        pub = bytes(rng.getrandbits(8) for _ in range(32))
        nb = rng.randrange(0, 2 ** 40)
        keys, text = generate_esni_keys(pub, (nb, nb + rng.randrange(0, 2 ** 30)),
                                        padded_length=rng.randrange(1, 0x10000))
        roundtrip += parse_esni_keys(text) == keys and parse_esni_keys(text).to_text() == text
    keys, text = generate_esni_keys(bytes(32), (1546300800, 2145916800))
    raw = base64.b64decode(text)
    sizes = (len(raw), len(text))
    rejected = 0
    for bit in range(len(raw) * 8):
        flipped = bytearray(raw)
        flipped[bit // 8] ^= 1 << (bit % 8)
        try:
            decode_esni_keys(bytes(flipped))
        except EsniFormatError:
            rejected += 1
    ok = roundtrip == 1000 and sizes == (68, 92) and rejected == len(raw) * 8
    verdict_line("ESNIKeys format", ok, f"round-trip {roundtrip}/1000, minimal record {sizes[0]} bytes / "
                                        f"{sizes[1]} base64 chars, bit flips rejected {rejected}/{len(raw) * 8}")
    assert ok


def test_esni_handshake(world, verdict_line):
    rng = random.Random(11)
    server = X25519PrivateKey.generate()
    keys, _ = generate_esni_keys(raw_public(server.public_key()), (1546300800, 2145916800))
    alphabet = string.ascii_lowercase + string.digits + "-."
    recovered = tampered = 0
    for _ in range(1000):
        name = "".join(rng.choice(alphabet) for _ in range(rng.randint(1, keys.padded_length)))
        client_random = bytes(rng.getrandbits(8) for _ in range(32))
        ext = esni_seal(keys, name, client_random, X25519PrivateKey.generate(), now=NOW)
        recovered += esni_open(server, ext, client_random, keys=keys) == name
        parsed = ClientEncryptedSNI.from_bytes(ext)
        ct = bytearray(parsed.encrypted_sni)
        ct[rng.randrange(len(ct))] ^= rng.randrange(1, 256)
        bad = ClientEncryptedSNI(parsed.suite, parsed.key_share, parsed.record_digest, bytes(ct)).to_bytes()
        try:
            esni_open(server, bad, client_random, keys=keys)
        except EsniError as exc:
            tampered += exc.reason == "auth_failed"

    trust = [world.ca.cert]
    site = world.sites["site12.example"]
    ctrl = world.esni_control
    reset = SimTransport(world, world.vp("vp-a1"), CensorProfile(rst_on_esni=True))
    esni_under_censor = tls_probe(reset, ctrl.endpoint, ctrl.name, TLSMode.ESNI, world.esni_keys.keys,
                                  trust=trust, now=NOW)
    plain_under_censor = tls_probe(reset, Endpoint(site.ip, 443), site.domain, TLSMode.PLAIN_SNI, trust=trust)
    esni_clean = tls_probe(SimTransport(world, world.vp("vp-a1")), ctrl.endpoint, ctrl.name, TLSMode.ESNI,
                           world.esni_keys.keys, trust=trust, now=NOW)
    behaviour = ((esni_under_censor.stage_reached, esni_under_censor.outcome) == (Stage.TLS, Outcome.RST)
                 and plain_under_censor.ok and esni_clean.ok)
    ok = recovered == 1000 and tampered == 1000 and behaviour
    verdict_line("ESNI handshake", ok,
                 f"seal/open {recovered}/1000, tamper rejected {tampered}/1000, rst_on_esni: ESNI "
                 f"{esni_under_censor.stage_reached.value}/{esni_under_censor.outcome.value}, plain SNI "
                 f"{plain_under_censor.outcome.value}, ESNI without censor {esni_clean.outcome.value}")
    assert ok


def _bracket(esni_sites):
    w = SimWorld.build(20, esni=esni_sites, ca=_bracket.ca, esni_keys=_bracket.keys)
    domains = sorted(w.sites)
    p = CensorProfile(dns_inject={d: InjectRule("180.180.255.130") for d in domains},
                      rst_on_sni=frozenset(domains))
    return simulate_campaign(w, p, RunConfig(parallelism=1), days=1).summary["XA"]


def test_circumvention_summary(world, verdict_line):
    p = composite_profile(world)
    counted = summarize(("XA", expected_category(p, world, d)) for d in world.test_list)["XA"]
    camp = simulate_campaign(world, p, RunConfig(parallelism=1), days=3)
    row = camp.summary["XA"]
    _bracket.ca, _bracket.keys = world.ca, world.esni_keys
    full = _bracket([f"site{i:02d}.example" for i in range(20)])
    none = _bracket([])
    ok = (row.as_tuple() == counted.as_tuple() == COMPOSITE_ROW
          and (full.circumvented, full.total) == (20, 20) and (none.circumvented, none.total) == (0, 20))
    verdict_line("circumvention summary", ok,
                 f"composite {row}; universal ESNI {full.ratio}; no ESNI {none.ratio} (TLS {none.tls})")
    assert ok


def _linear_lookup(prefixes, ip):
    addr = ipaddress.ip_address(ip)
    best = None
    for net, asn in prefixes:
        if addr.version == net.version and addr in net and (best is None or net.prefixlen > best[0].prefixlen):
            best = (net, asn)
    return best[1] if best else None


def test_asmap_lookup(verdict_line):
    rng = random.Random(99)
    prefixes = {}
    while len(prefixes) < 1000:
        if rng.random() < 0.8:
            length = rng.randint(8, 32)
            net = ipaddress.ip_network((rng.getrandbits(32), length), strict=False)
        else:
            length = rng.randint(16, 64)
            net = ipaddress.ip_network((rng.getrandbits(128), length), strict=False)
        prefixes[net] = rng.randint(1, 400000)
    rows = list(prefixes.items())
    queries = []
    for _ in range(10000):
        if rng.random() < 0.5:
            net = rng.choice(rows)[0]
            queries.append(str(net[rng.randrange(min(net.num_addresses, 2 ** 20))]))
        elif rng.random() < 0.8:
            queries.append(str(ipaddress.IPv4Address(rng.getrandbits(32))))
        else:
            queries.append(str(ipaddress.IPv6Address(rng.getrandbits(128))))
    expected = [_linear_lookup(rows, q) for q in queries]
    start = time.perf_counter()
    table = build_prefix_table((str(n), a) for n, a in rows)
    got = [table.lookup(q) for q in queries]
    elapsed = time.perf_counter() - start
    mismatches = sum(g != e for g, e in zip(got, expected))
    hits = sum(e is not None for e in expected)
    ok = mismatches == 0 and elapsed < 1.0
    verdict_line("asmap longest-prefix lookup", ok,
                 f"10000 queries ({hits} covered) over 1000 prefixes, {mismatches} mismatches, "
                 f"build+lookup {elapsed * 1000:.0f} ms")
    assert ok


def test_adoption_scan_shape(verdict_line):
    zone = Zone()
    keys_text = generate_esni_keys(bytes(range(32)), (1546300800, 2145916800))[1]
    domains = [f"d{i:04d}.test" for i in range(1000)]
    for d in domains[:30]:
        zone.add(f"_esni.{d}", "TXT", keys_text)
    for d in domains[30:45]:
        zone.add_wildcard(d, "TXT", "v=spf1 include:_spf.mail.test ~all")
    for d in domains:
        zone.add(d, "A", "45.10.0.10")
    records = list(scan_esni_txt(domains, Endpoint("46.20.100.1", 53), ZoneTransport(zone), seed=1))
    s = summarize_adoption(records)
    ok = (s.total, s.responded, s.valid, s.wildcard) == (1000, 45, 30, 15) \
        and f"{s.respond_rate:.1%}" == "4.5%" and f"{s.valid_share:.1%}" == "66.7%"
    verdict_line("adoption-scan shape", ok, f"respond-rate {s.respond_rate:.1%}, valid-share {s.valid_share:.1%}, "
                                            f"wildcard-flagged {s.wildcard}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
