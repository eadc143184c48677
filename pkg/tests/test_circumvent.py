import pytest
from hypothesis import given
from hypothesis import strategies as st

from dnescope.censorsim.profile import DROP, CensorProfile, InjectRule, composite_profile
from dnescope.censorsim.transport import SimTransport
from dnescope.censorsim.truth import expected_category
from dnescope.censorsim.world import site_body
from dnescope.circumvent import (
    FailureCategory,
    SummaryRow,
    classify,
    control_crawl,
    crawl,
    esni_keys_via_doh,
    shingles,
    similarity,
    summarize,
    summary_csv,
)
from dnescope.model import CrawlOutcome, FetchResult, Outcome, Stage, StagedResult
from dnescope.netprobe.probes import body_digest

OK = StagedResult(Stage.APP, Outcome.OK, "", ("45.10.0.10",))
PAGE = site_body("a.example")


def outcome(scheme="https", connect=OK, body=PAGE, status=200, resolve=OK):
    fetch = FetchResult(status, body_digest(body), len(body), body) if connect.ok else None
    return CrawlOutcome("a.example", scheme, resolve, connect, fetch)


CONTROL = outcome()


@pytest.mark.parametrize("crawled, category", [
    (outcome(), FailureCategory.CIRCUMVENTED),
    (outcome(body=PAGE[:-20] + b"tail differs"), FailureCategory.CIRCUMVENTED),
    (outcome(connect=StagedResult(Stage.TCP, Outcome.RST)), FailureCategory.TCP_INJ),
    (outcome(connect=StagedResult(Stage.TCP, Outcome.TIMEOUT)), FailureCategory.TCP_INJ),
    (outcome("http", body=b"<html>blocked</html>"), FailureCategory.HTTP_ONLY),
    (outcome("http", connect=StagedResult(Stage.TCP, Outcome.RST)), FailureCategory.TCP_INJ),
    (outcome(connect=StagedResult(Stage.TLS, Outcome.RST)), FailureCategory.SNI_FILTERED),
    (outcome(connect=StagedResult(Stage.TLS, Outcome.TIMEOUT)), FailureCategory.SNI_FILTERED),
    (outcome(status=403, body=b"no"), FailureCategory.SERVER_SIDE),
    (outcome(status=403, body=PAGE), FailureCategory.SERVER_SIDE),
    (outcome(connect=StagedResult(Stage.APP, Outcome.RST)), FailureCategory.SERVER_SIDE),
])
def test_classify(crawled, category):
    assert classify(crawled, CONTROL) is category


def test_classify_without_control_fetch():
    failed = outcome(connect=StagedResult(Stage.TCP, Outcome.TIMEOUT))
    assert classify(outcome(), None) is FailureCategory.UNKNOWN
    assert classify(outcome(), failed) is FailureCategory.UNKNOWN


def test_shingles():
    assert shingles(b"") == set()
    assert shingles(b"abc") == {b"abc"}
    assert shingles(b"abcdefghij", 8) == {b"abcdefgh", b"bcdefghi", b"cdefghij"}


@given(st.binary(max_size=200), st.binary(max_size=200))
def test_similarity_properties(a, b):
    s = similarity(a, b)
    assert 0.0 <= s <= 1.0
    assert s == similarity(b, a)
    assert similarity(a, a) == 1.0


def test_summarize_and_csv():
    rows = summarize([("XA", FailureCategory.CIRCUMVENTED), ("XA", FailureCategory.TCP_INJ),
                      ("XA", FailureCategory.SNI_FILTERED), ("XA", FailureCategory.UNKNOWN),
                      ("XB", FailureCategory.CIRCUMVENTED), ("XA", FailureCategory.SERVER_SIDE),
                      ("XA", FailureCategory.HTTP_ONLY)])
    assert rows["XA"] == SummaryRow("XA", 1, 5, 1, 1, 1, 1)
    assert rows["XB"].as_tuple() == ("1/1", 0, 0, 0, 0)
    assert str(rows["XA"]) == "XA 1/5, TCP 1, HTTP 1, TLS 1, SS 1"
    assert summary_csv(rows.values()) == ("country,circumvented/total,TCP,HTTP,TLS,SS\n"
                                          "XA,1/5,1,1,1,1\nXB,1/1,0,0,0,0\n")


# crawling the simulated world ------------------------------------------------------

def test_esni_keys_via_doh(world):
    t = SimTransport(world, world.vp("vp-a1"))
    assert esni_keys_via_doh(t, world.private_doh, "site00.example") == world.esni_keys.keys
    assert esni_keys_via_doh(t, world.private_doh, "site12.example") is None


def test_crawl_uses_esni_only_when_published(world):
    t = SimTransport(world, world.vp("vp-a1"))
    assert crawl("site00.example", world.private_doh, t).used_esni
    assert not crawl("site12.example", world.private_doh, t).used_esni
    assert not crawl("site00.example", world.private_doh, t, esni_keys_source=lambda d: None).used_esni


def test_control_crawl_falls_back_to_http(world):
    t = SimTransport(world, world.vp("control"))
    assert control_crawl("site15.example", world.private_doh, t).scheme == "http"
    assert control_crawl("site12.example", world.private_doh, t).scheme == "https"


def test_crawl_categories_match_truth(world):
    profile = composite_profile(world)
    t = SimTransport(world, world.vp("vp-a1"), profile)
    ref = SimTransport(world, world.vp("control"))
    for d in world.test_list:
        control = control_crawl(d, world.private_doh, ref)
        got = classify(crawl(d, world.private_doh, t, scheme=control.scheme), control)
        assert got is expected_category(profile, world, d), d


def test_drop_counts_as_tcp_injection(world):
    site = world.sites["site12.example"]
    profile = CensorProfile(dns_inject={site.domain: InjectRule("10.10.34.35")}, ip_blocklist={site.ip: DROP})
    t = SimTransport(world, world.vp("vp-a1"), profile)
    control = control_crawl(site.domain, world.private_doh, SimTransport(world, world.vp("control")))
    out = crawl(site.domain, world.private_doh, t)
    assert (out.connect.stage_reached, out.connect.outcome) == (Stage.TCP, Outcome.TIMEOUT)
    assert classify(out, control) is FailureCategory.TCP_INJ


def test_crawl_sends_no_plaintext_query_for_target(world):
    t = SimTransport(world, world.vp("vp-a1"), composite_profile(world))
    for d in world.test_list:
        crawl(d, world.private_doh, t)
    assert t.queried_names() == []
    assert all(e[0] != "udp" for e in t.log)
