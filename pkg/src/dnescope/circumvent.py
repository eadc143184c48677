"""Does domain-name encryption get a blocked page through?

A crawl resolves the domain over a private DoH endpoint, connects with ESNI
when the domain publishes usable keys, and fetches the page.  The result is
compared with a fetch from an unfiltered network and sorted into one of the
failure categories.
"""
from __future__ import annotations

import csv
import enum
import io
import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional

from cryptography import x509

from dnescope import dnsmsg
from dnescope.esni.keys import EsniFormatError, EsniKeys, parse_esni_keys
from dnescope.model import CrawlOutcome, Outcome, Stage, StagedResult
from dnescope.netprobe.probes import DEFAULT_TIMEOUT_MS, DoTHEndpoint, ResolveVia, fetch_http, query_encrypted
from dnescope.netprobe.transport import Transport

log = logging.getLogger(__name__)

SHINGLE = 8
SIMILARITY_THRESHOLD = 0.8


class FailureCategory(str, enum.Enum):
    CIRCUMVENTED = "CIRCUMVENTED"
    TCP_INJ = "TCP_INJ"
    HTTP_ONLY = "HTTP_ONLY"
    SNI_FILTERED = "SNI_FILTERED"
    SERVER_SIDE = "SERVER_SIDE"
    UNKNOWN = "UNKNOWN"


def shingles(body: bytes, k: int = SHINGLE) -> set[bytes]:
    if len(body) <= k:
        return {body} if body else set()
    return {body[i:i + k] for i in range(len(body) - k + 1)}


def similarity(a: bytes, b: bytes, k: int = SHINGLE) -> float:
    """Jaccard similarity of the two bodies' ``k``-byte shingle sets."""
    sa, sb = shingles(a, k), shingles(b, k)
    if not sa and not sb:
        return 1.0
    return len(sa & sb) / len(sa | sb)


def esni_keys_via_doh(t: Transport, doh: DoTHEndpoint, domain: str, *, timeout_ms: int = DEFAULT_TIMEOUT_MS,
                      trust: Optional[list[x509.Certificate]] = None) -> Optional[EsniKeys]:
    """The domain's ESNI keys, looked up through ``doh``; ``None`` unless a record parses."""
    result, msg = query_encrypted(t, doh, f"_esni.{dnsmsg.normalize(domain)}", "TXT",
                                  timeout_ms=timeout_ms, trust=trust)
    if msg is None:
        return None
    for txt in dnsmsg.txt_answers(msg):
        try:
            return parse_esni_keys(txt)
        except EsniFormatError:
            continue
    return None


KeySource = Callable[[str], Optional[EsniKeys]]


def crawl(domain: str, doh: DoTHEndpoint, t: Transport, *, scheme: str = "https",
          esni_keys_source: Optional[KeySource] = None, timeout_ms: int = DEFAULT_TIMEOUT_MS,
          trust: Optional[list[x509.Certificate]] = None, path: str = "/") -> CrawlOutcome:
    """Fetch ``scheme://domain/`` resolving only through ``doh``.

    ESNI is used iff ``esni_keys_source`` (by default: a TXT lookup through
    the same DoH endpoint) yields valid keys.
    """
    domain = dnsmsg.normalize(domain)
    keys = None
    if scheme == "https":
        source = esni_keys_source or (lambda d: esni_keys_via_doh(t, doh, d, timeout_ms=timeout_ms, trust=trust))
        keys = source(domain)
    return fetch_http(t, f"{scheme}://{domain}{path}", ResolveVia.PRIVATE_DOH, doh=doh,
                      esni=keys is not None, esni_keys=keys, timeout_ms=timeout_ms, trust=trust)


def control_crawl(domain: str, doh: DoTHEndpoint, t: Transport, **kw) -> CrawlOutcome:
    """Reference fetch from an unfiltered network: HTTPS, falling back to plain HTTP."""
    out = crawl(domain, doh, t, scheme="https", **kw)
    if out.fetch is None and out.resolve.ok:
        plain = crawl(domain, doh, t, scheme="http", **kw)
        if plain.fetch is not None:
            return plain
    return out


def _first_failure(outcome: CrawlOutcome) -> Optional[StagedResult]:
    if not outcome.resolve.ok:
        return outcome.resolve
    if not outcome.connect.ok:
        return outcome.connect
    return None


def classify(outcome: CrawlOutcome, control: Optional[CrawlOutcome]) -> FailureCategory:
    if control is None or control.fetch is None:
        return FailureCategory.UNKNOWN
    fetched = outcome.fetch
    if (fetched is not None and fetched.status == control.fetch.status
            and similarity(fetched.body, control.fetch.body) >= SIMILARITY_THRESHOLD):
        return FailureCategory.CIRCUMVENTED
    failure = _first_failure(outcome)
    if failure is not None and failure.stage_reached is Stage.TCP and failure.outcome in (Outcome.RST,
                                                                                          Outcome.TIMEOUT):
        return FailureCategory.TCP_INJ
    if outcome.scheme == "http":
        return FailureCategory.HTTP_ONLY
    if failure is not None and failure.stage_reached is Stage.TLS:
        return FailureCategory.SNI_FILTERED
    return FailureCategory.SERVER_SIDE


@dataclass(frozen=True)
class SummaryRow:
    country: str
    circumvented: int = 0
    total: int = 0
    tcp: int = 0
    http: int = 0
    tls: int = 0
    ss: int = 0

    @property
    def ratio(self) -> str:
        return f"{self.circumvented}/{self.total}"

    def as_tuple(self):
        return (self.ratio, self.tcp, self.http, self.tls, self.ss)

    def __str__(self):
        return f"{self.country} {self.ratio}, TCP {self.tcp}, HTTP {self.http}, TLS {self.tls}, SS {self.ss}"


_COLUMN = {
    FailureCategory.TCP_INJ: "tcp",
    FailureCategory.HTTP_ONLY: "http",
    FailureCategory.SNI_FILTERED: "tls",
    FailureCategory.SERVER_SIDE: "ss",
}


def summarize(classified: Iterable[tuple[str, FailureCategory]]) -> dict[str, SummaryRow]:
    """Per-country counts; UNKNOWN outcomes are left out."""
    counts: dict[str, dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for country, cat in classified:
        if cat is FailureCategory.UNKNOWN:
            continue
        c = counts[country]
        c["total"] += 1
        if cat is FailureCategory.CIRCUMVENTED:
            c["circumvented"] += 1
        else:
            c[_COLUMN[cat]] += 1
    return {k: SummaryRow(k, **v) for k, v in sorted(counts.items())}


def summary_csv(rows: Iterable[SummaryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["country", "circumvented/total", "TCP", "HTTP", "TLS", "SS"])
    for r in rows:
        w.writerow([r.country, r.ratio, r.tcp, r.http, r.tls, r.ss])
    return buf.getvalue()
