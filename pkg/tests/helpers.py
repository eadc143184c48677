"""Builders shared by the test modules."""
from __future__ import annotations

from datetime import datetime, timedelta, timezone
from typing import Optional

from dnescope.censorsim.world import Zone
from dnescope.model import (
    Kind,
    MeasurementRecord,
    Observation,
    ObservationSet,
    Outcome,
    Stage,
    StagedResult,
    VantageContext,
)
from dnescope.netprobe.transport import Datagram, Transport

BASE = datetime(2020, 3, 1, 12, tzinfo=timezone.utc)


def obs(*answers, qname="site00.example", rcodes=None, resolver="46.20.100.1:53") -> ObservationSet:
    """An ObservationSet with one observation per entry of ``answers`` (a tuple of IPs each)."""
    rcodes = rcodes or ["NOERROR"] * len(answers)
    items = tuple(Observation(tuple(a), 1.0 + 10 * i, 7, rc) for i, (a, rc) in enumerate(zip(answers, rcodes)))
    return ObservationSet(qname, "A", resolver, BASE, items)


def vp(vp_id="vp1", ip="61.40.1.10", asn=64540, country="XA") -> VantageContext:
    return VantageContext.make(vp_id, ip, asn, country)


_counter = [0]


def record(vantage: VantageContext, kind: Kind, subject: str, payload, day: int = 0,
           at: Optional[datetime] = None) -> MeasurementRecord:
    _counter[0] += 1
    ts = at or BASE + timedelta(days=day)
    return MeasurementRecord(f"r{_counter[0]}", vantage, ts, kind, subject, payload)


def dns_record(vantage, domain, answer, day=0, kind=Kind.DNS_PUBLIC):
    return record(vantage, kind, domain, obs((answer,), qname=domain), day)


def conn_result(ok: bool, stage=Stage.TLS, outcome=Outcome.RST) -> StagedResult:
    if ok:
        return StagedResult(Stage.APP, Outcome.OK, "", ("192.0.2.10",))
    return StagedResult(stage, outcome, "")


class ZoneTransport(Transport):
    """An honest Do53 path straight to an authoritative :class:`Zone`."""

    def __init__(self, zone: Zone, rtt_ms: float = 5.0):
        self.zone = zone
        self.rtt_ms = rtt_ms
        self.queries = 0

    def udp_exchange(self, endpoint, payload, wait_ms):
        self.queries += 1
        reply = self.zone.respond(payload)
        return [Datagram(reply, self.rtt_ms)] if reply is not None and self.rtt_ms <= wait_ms else []

    def connect(self, endpoint, timeout_ms):
        raise TimeoutError("no TCP in a zone-only transport")
