"""ESNI adoption scanning over ``_esni`` TXT records and ECH probing via HTTPS RRs."""
from __future__ import annotations

import enum
import logging
import random
import string
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional

import dns.rdtypes.svcbbase

from dnescope import dnsmsg
from dnescope.esni.keys import EsniFormatError, parse_esni_keys
from dnescope.model import EsniScanRecord, ScanStatus
from dnescope.netprobe.probes import query_first
from dnescope.netprobe.transport import Endpoint, ProbeError, Transport

log = logging.getLogger(__name__)

WILDCARD_LABEL_LEN = 12


class RateLimiter:
    """Spaces out calls to at most ``rate`` per second across threads."""

    def __init__(self, rate: Optional[float]):
        self.interval = 1.0 / rate if rate else 0.0
        self._next = 0.0
        self._lock = threading.Lock()

    def wait(self):
        if not self.interval:
            return
        with self._lock:
            now = time.monotonic()
            slot = max(now, self._next)
            self._next = slot + self.interval
        if slot > now:
            time.sleep(slot - now)


def _random_label(rng: random.Random) -> str:
    return "".join(rng.choice(string.ascii_lowercase + string.digits) for _ in range(WILDCARD_LABEL_LEN))


def scan_domain(t: Transport, resolver: Endpoint, domain: str, *, wait_ms: int = 3000,
                wildcard_check: bool = True, rng: Optional[random.Random] = None) -> EsniScanRecord:
    rng = rng or random.Random()
    domain = dnsmsg.normalize(domain)
    try:
        msg = query_first(t, resolver, f"_esni.{domain}", "TXT", wait_ms, rng=rng)
    except ProbeError as exc:
        return EsniScanRecord(domain, ScanStatus.NO_RECORD, reason=f"error: {exc}")
    if msg is None:
        return EsniScanRecord(domain, ScanStatus.NO_RECORD, reason="timeout")
    txts = dnsmsg.txt_answers(msg)
    if not txts:
        return EsniScanRecord(domain, ScanStatus.NO_RECORD, reason=dnsmsg.rcode_text(msg))

    first_error = None
    for txt in txts:
        try:
            parse_esni_keys(txt)
            return EsniScanRecord(domain, ScanStatus.VALID, len(txt))
        except EsniFormatError as exc:
            first_error = first_error or exc

    wildcard = False
    if wildcard_check:
        probe = f"_esni.{_random_label(rng)}.{domain}"
        try:
            wmsg = query_first(t, resolver, probe, "TXT", wait_ms, rng=rng)
            wildcard = wmsg is not None and bool(dnsmsg.txt_answers(wmsg))
        except ProbeError:
            pass
    return EsniScanRecord(domain, ScanStatus.INVALID_FORMAT, len(txts[0]), wildcard,
                          reason=first_error.reason)


def scan_esni_txt(domains: Iterable[str], resolver: Endpoint, t: Transport, *,
                  wait_ms: int = 3000, wildcard_check: bool = True, workers: int = 1,
                  rate: Optional[float] = None, seed: Optional[int] = None) -> Iterator[EsniScanRecord]:
    """Classify each domain's ``_esni`` TXT record, in input order.

    Failures are reported per domain (as NO_RECORD with a reason) and never
    stop the stream.
    """
    limiter = RateLimiter(rate)
    base = random.Random(seed)

    def one(item):
        idx, domain = item
        limiter.wait()
        rng = random.Random(base.random() if seed is None else f"{seed}:{idx}")
        try:
            return scan_domain(t, resolver, domain, wait_ms=wait_ms,
                               wildcard_check=wildcard_check, rng=rng)
        except Exception as exc:  # one bad domain must not end the scan
            log.warning("scan of %s failed: %s", domain, exc)
            return EsniScanRecord(dnsmsg.normalize(domain), ScanStatus.NO_RECORD, reason=f"error: {exc}")

    items = enumerate(domains)
    if workers <= 1:
        yield from map(one, items)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        yield from pool.map(one, items)


@dataclass(frozen=True)
class AdoptionSummary:
    total: int
    responded: int
    valid: int
    invalid: int
    wildcard: int

    @property
    def respond_rate(self) -> float:
        return self.responded / self.total if self.total else 0.0

    @property
    def valid_share(self) -> float:
        """Valid records among domains that answered the TXT query."""
        return self.valid / self.responded if self.responded else 0.0

    @property
    def adoption_rate(self) -> float:
        return self.valid / self.total if self.total else 0.0


def summarize_adoption(records: Iterable[EsniScanRecord]) -> AdoptionSummary:
    total = responded = valid = invalid = wildcard = 0
    for rec in records:
        total += 1
        if rec.status is ScanStatus.NO_RECORD:
            continue
        responded += 1
        if rec.status is ScanStatus.VALID:
            valid += 1
        else:
            invalid += 1
            wildcard += rec.wildcard_suspect
    return AdoptionSummary(total, responded, valid, invalid, wildcard)


class HttpsRR(str, enum.Enum):
    NO_RR = "NO_RR"
    RR_WITHOUT_ECH = "RR_WITHOUT_ECH"
    RR_WITH_ECH = "RR_WITH_ECH"


@dataclass(frozen=True)
class HttpsProbe:
    domain: str
    status: HttpsRR
    note: str = ""


def probe_https_rr(domain: str, resolver: Endpoint, t: Transport, *, wait_ms: int = 3000,
                   rng: Optional[random.Random] = None) -> HttpsProbe:
    """Query the HTTPS RR (type 65) and look for the ``ech`` SvcParam (key 5)."""
    domain = dnsmsg.normalize(domain)
    try:
        msg = query_first(t, resolver, domain, "HTTPS", wait_ms, rng=rng)
    except ProbeError as exc:
        return HttpsProbe(domain, HttpsRR.NO_RR, f"error: {exc}")
    if msg is None:
        return HttpsProbe(domain, HttpsRR.NO_RR, "timeout")
    rdatas = dnsmsg.https_answers(msg)
    if not rdatas:
        return HttpsProbe(domain, HttpsRR.NO_RR, dnsmsg.rcode_text(msg))
    for rd in rdatas:
        if dns.rdtypes.svcbbase.ParamKey.ECH in rd.params:
            return HttpsProbe(domain, HttpsRR.RR_WITH_ECH)
    return HttpsProbe(domain, HttpsRR.RR_WITHOUT_ECH)
