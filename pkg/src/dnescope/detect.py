"""From raw observations to tampering classifications and blocking verdicts.

Three layers:

* :func:`classify_dns` judges one DNS observation set against control answers.
* Per (vantage point, subject) window rates turn record streams into
  :class:`BlockVerdict` values; connectivity probes (DoT, DoH, the ESNI
  control site) additionally go through the resolver-availability mask and
  the percentile rule of :func:`resolver_block_verdict`.
* :func:`as_level_verdict` and :func:`centralization_flag` aggregate further.

:func:`analyze` wires all of it over a list of measurement records.
"""
from __future__ import annotations

import csv
import enum
import io
import ipaddress
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

from dnescope.asmap import OrgTable, PrefixTable, same_org
from dnescope.model import (
    Kind,
    MeasurementRecord,
    ObservationSet,
    Outcome,
    RunConfig,
    Stage,
    StagedResult,
)

log = logging.getLogger(__name__)

NON_ROUTABLE = tuple(ipaddress.ip_network(n) for n in (
    "10.0.0.0/8", "172.16.0.0/12", "192.168.0.0/16", "0.0.0.0/8", "127.0.0.0/8",
    "100.64.0.0/10", "169.254.0.0/16", "192.0.2.0/24", "198.51.100.0/24", "203.0.113.0/24",
    "240.0.0.0/4",
))

CONNECTIVITY_KINDS = (Kind.DOT, Kind.DOH, Kind.ESNI_CONTROL)
DNS_KINDS = (Kind.DNS_LOCAL, Kind.DNS_PUBLIC)


def is_routable(ip: str) -> bool:
    addr = ipaddress.ip_address(ip)
    if addr.version == 6:
        return addr.is_global
    return not any(addr in net for net in NON_ROUTABLE)


class Heuristic(str, enum.Enum):
    MULTI_AS = "MULTI_AS"
    NXDOMAIN_NONROUTABLE = "NXDOMAIN_NONROUTABLE"
    CONTROL_MISMATCH = "CONTROL_MISMATCH"
    NONE = "NONE"


class Source(str, enum.Enum):
    ON_PATH = "ON_PATH"
    LOCAL_RESOLVER = "LOCAL_RESOLVER"
    NONE = "NONE"


class ResolverKind(str, enum.Enum):
    LOCAL = "LOCAL"
    PUBLIC = "PUBLIC"


class Status(str, enum.Enum):
    BLOCKED = "BLOCKED"
    PROBABLY_BLOCKED = "PROBABLY_BLOCKED"
    CLEAR = "CLEAR"
    INSUFFICIENT_DATA = "INSUFFICIENT_DATA"


class Technique(str, enum.Enum):
    TCP_RST = "TCP_RST"
    TLS_RST = "TLS_RST"
    DROP = "DROP"
    WRONG_ANSWER = "WRONG_ANSWER"
    DNS_INJECT = "DNS_INJECT"


@dataclass(frozen=True)
class TamperVerdict:
    tampered: bool
    heuristic: Heuristic = Heuristic.NONE
    injection_source: Source = Source.NONE
    forged_answer: Optional[str] = None
    insufficient: bool = False

    def __post_init__(self):
        if not self.tampered and (self.heuristic is not Heuristic.NONE
                                  or self.injection_source is not Source.NONE):
            raise ValueError("an untampered verdict carries no heuristic or source")


@dataclass(frozen=True)
class BlockVerdict:
    subject: str
    vp_id: str
    window: tuple[int, int]
    rate: float
    status: Status
    kind: Optional[Kind] = None
    count: int = 0

    def __post_init__(self):
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError(f"rate {self.rate} outside [0, 1]")


@dataclass(frozen=True)
class ASVerdict:
    asn: int
    subject: str
    evidence: frozenset
    blocked: bool
    technique_histogram: Mapping[str, int] = field(default_factory=dict)
    kind: Optional[Kind] = None

    @property
    def subnets(self) -> set[str]:
        return {e[1] for e in self.evidence}

    @property
    def days(self) -> set[int]:
        return {e[2] for e in self.evidence}


# ---------------------------------------------------------------------------
# DNS tampering


def _asn(ip: str, prefix: PrefixTable) -> Optional[int]:
    return prefix.lookup(ip)


def _different_as(a: str, b: str, prefix: PrefixTable, orgs: OrgTable) -> bool:
    if a == b:
        return False
    asn_a, asn_b = _asn(a, prefix), _asn(b, prefix)
    if asn_a is None or asn_b is None:
        return True
    return asn_a != asn_b and not same_org(asn_a, asn_b, orgs)


def classify_dns(obs: ObservationSet, control_answers: Iterable[str], resolver_kind: ResolverKind,
                 prefix: PrefixTable, orgs: OrgTable,
                 control_asns: Optional[Iterable[Optional[int]]] = None) -> TamperVerdict:
    """Apply the tampering heuristics, in precedence order, to one query's responses."""
    if not obs.observations:
        return TamperVerdict(False, insufficient=True)
    control = set(control_answers)
    if not control:
        raise ValueError("control_answers must be nonempty")
    if control_asns is None:
        control_asns = {_asn(a, prefix) for a in control}
    control_asns = set(control_asns) - {None}
    control_routable = all(is_routable(a) for a in control)

    heuristic = Heuristic.NONE
    with_answers = [o for o in obs.observations if o.answers]
    if len(with_answers) >= 2:
        for i, first in enumerate(with_answers):
            for second in with_answers[i + 1:]:
                if any(_different_as(a, b, prefix, orgs) for a in first.answers for b in second.answers):
                    heuristic = Heuristic.MULTI_AS
                    break
            if heuristic is not Heuristic.NONE:
                break

    if heuristic is Heuristic.NONE and control_routable:
        if any(o.rcode == "NXDOMAIN" for o in obs.observations) or any(
                not is_routable(a) for o in obs.observations for a in o.answers):
            heuristic = Heuristic.NXDOMAIN_NONROUTABLE

    if heuristic is Heuristic.NONE:
        for o in obs.observations:
            for a in o.answers:
                if a in control or not is_routable(a):
                    continue
                asn = _asn(a, prefix)
                if asn is not None and (asn in control_asns
                                        or any(same_org(asn, c, orgs) for c in control_asns)):
                    continue
                heuristic = Heuristic.CONTROL_MISMATCH
                break
            if heuristic is not Heuristic.NONE:
                break

    if heuristic is Heuristic.NONE:
        return TamperVerdict(False)
    if resolver_kind is ResolverKind.PUBLIC or len(obs.observations) >= 2:
        source = Source.ON_PATH
    else:
        source = Source.LOCAL_RESOLVER
    first = obs.observations[0]
    return TamperVerdict(True, heuristic, source, first.answers[0] if first.answers else None)


# ---------------------------------------------------------------------------
# window rates and verdicts


@dataclass(frozen=True)
class WindowRate:
    rate: Optional[float]
    count: int
    hits: int


def filtering_rate(points: Iterable[tuple[int, bool]], center_day: int, half_window: int = 3) -> WindowRate:
    """Share of ``True`` points with day in ``[center_day - h, center_day + h]``."""
    hits = count = 0
    for day, flagged in points:
        if center_day - half_window <= day <= center_day + half_window:
            count += 1
            hits += bool(flagged)
    return WindowRate(hits / count if count else None, count, hits)


def rate_status(rate: WindowRate, threshold: float) -> Status:
    if not rate.count:
        return Status.INSUFFICIENT_DATA
    return Status.BLOCKED if rate.rate > threshold else Status.CLEAR


def resolver_available(successes: Iterable[bool], threshold: float = 0.70) -> Optional[bool]:
    """``None`` when there is nothing to judge, else success share ``> threshold``."""
    results = list(successes)
    if not results:
        return None
    return sum(results) / len(results) > threshold


def nearest_rank(values: Sequence[float], p: float) -> float:
    ordered = sorted(values)
    rank = max(1, math.ceil(p * len(ordered) - 1e-9))
    return ordered[rank - 1]


def resolver_block_verdict(rates: Sequence[float], *, subject: str = "", vp_id: str = "",
                           window: tuple[int, int] = (0, 0), threshold: float = 0.80,
                           percentile: float = 0.90, min_windows: int = 3,
                           kind: Optional[Kind] = None) -> BlockVerdict:
    """Per-window failure rates at one VP -> PROBABLY_BLOCKED / BLOCKED / CLEAR."""
    rates = list(rates)
    if len(rates) < min_windows:
        top = max(rates) if rates else 0.0
        return BlockVerdict(subject, vp_id, window, top, Status.INSUFFICIENT_DATA, kind, len(rates))
    p = nearest_rank(rates, percentile)
    if p > threshold:
        status = Status.BLOCKED
    elif any(r > threshold for r in rates):
        status = Status.PROBABLY_BLOCKED
    else:
        status = Status.CLEAR
    return BlockVerdict(subject, vp_id, window, p, status, kind, len(rates))


def as_level_verdict(asn: int, subject: str, evidence: Iterable[tuple[str, str, int]],
                     techniques: Optional[Mapping[str, int]] = None, *, min_subnets: int = 2,
                     min_days: int = 2, kind: Optional[Kind] = None) -> ASVerdict:
    """Blocked iff BLOCKED evidence spans enough distinct subnets and days.

    ``evidence`` holds ``(vp_id, subnet, day)`` triples.
    """
    ev = frozenset(evidence)
    subnets = {e[1] for e in ev}
    days = {e[2] for e in ev}
    blocked = len(subnets) >= min_subnets and len(days) >= min_days
    return ASVerdict(asn, subject, ev, blocked, dict(techniques or {}), kind)


def jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def centralization_flag(verdicts: Iterable[ASVerdict], threshold: float = 0.8) -> bool:
    """True iff two blocking ASes in one country block near-identical subject sets."""
    sets: dict[int, set] = defaultdict(set)
    for v in verdicts:
        if v.blocked:
            sets[v.asn].add((v.kind.value if v.kind else "", v.subject))
    asns = sorted(sets)
    for i, a in enumerate(asns):
        for b in asns[i + 1:]:
            if jaccard(sets[a], sets[b]) >= threshold:
                return True
    return False


def technique_of(result: StagedResult) -> Optional[Technique]:
    if result.outcome is Outcome.WRONG_ANSWER:
        return Technique.WRONG_ANSWER
    if result.outcome is Outcome.RST:
        return Technique.TCP_RST if result.stage_reached is Stage.TCP else Technique.TLS_RST
    if result.outcome is Outcome.TIMEOUT and result.stage_reached in (Stage.TCP, Stage.TLS):
        return Technique.DROP
    return None


# ---------------------------------------------------------------------------
# driver


@dataclass
class Analysis:
    tamper: dict[str, TamperVerdict]
    window_verdicts: list[BlockVerdict]
    vp_verdicts: list[BlockVerdict]
    availability: dict[tuple[str, int], Optional[bool]]
    as_verdicts: list[ASVerdict]
    centralization: dict[str, bool]
    on_path: dict[str, set[str]]

    def blocked(self, statuses=(Status.BLOCKED,)) -> set[tuple[str, Kind, str]]:
        return {(v.vp_id, v.kind, v.subject) for v in self.vp_verdicts if v.status in statuses}

    def as_blocked(self) -> set[tuple[int, Kind, str]]:
        return {(v.asn, v.kind, v.subject) for v in self.as_verdicts if v.blocked}


def control_answer_map(records: Iterable[MeasurementRecord], control_vps: Iterable[str]) -> dict[str, set[str]]:
    """Answers the control vantage points saw, per queried name."""
    control_vps = set(control_vps)
    out: dict[str, set[str]] = defaultdict(set)
    for rec in records:
        if rec.kind in DNS_KINDS and rec.vp.vp_id in control_vps:
            for o in rec.payload.observations:
                out[rec.payload.qname].update(o.answers)
    return dict(out)


def _failed(result: StagedResult) -> Optional[bool]:
    """Interference signal of a connectivity probe; ``None`` for local probe errors."""
    if result.outcome is Outcome.PROBE_ERROR:
        return None
    return not result.ok


def analyze(records: Sequence[MeasurementRecord], cfg: RunConfig, prefix: PrefixTable, orgs: OrgTable,
            control_vps: Iterable[str] = ("control",)) -> Analysis:
    h = cfg.half_window
    thr = cfg.block_rate_threshold
    controls = control_answer_map(records, control_vps)
    vps = {}
    tamper: dict[str, TamperVerdict] = {}
    # (vp, kind, subject) -> [(day, flagged)]
    points: dict[tuple[str, Kind, str], list[tuple[int, bool]]] = defaultdict(list)
    flagged_records: dict[tuple[str, Kind, str], list[MeasurementRecord]] = defaultdict(list)
    on_path: dict[str, set[str]] = defaultdict(set)
    conn_by_subject_day: dict[tuple[str, int], list[bool]] = defaultdict(list)

    for rec in records:
        vps[rec.vp.vp_id] = rec.vp
        key = (rec.vp.vp_id, rec.kind, rec.subject)
        if rec.kind in DNS_KINDS:
            ctrl = controls.get(rec.payload.qname)
            if not ctrl:
                continue
            rk = ResolverKind.LOCAL if rec.kind is Kind.DNS_LOCAL else ResolverKind.PUBLIC
            verdict = classify_dns(rec.payload, ctrl, rk, prefix, orgs)
            tamper[rec.record_id] = verdict
            if verdict.insufficient:
                continue
            points[key].append((rec.day, verdict.tampered))
            if verdict.tampered:
                flagged_records[key].append(rec)
                if verdict.injection_source is Source.ON_PATH:
                    on_path[rec.vp.vp_id].add(rec.subject)
        elif rec.kind in CONNECTIVITY_KINDS:
            failed = _failed(rec.payload)
            if failed is None:
                continue
            points[key].append((rec.day, failed))
            conn_by_subject_day[(rec.subject, rec.day)].append(not failed)
            if failed:
                flagged_records[key].append(rec)

    availability = {k: resolver_available(v, cfg.availability_threshold)
                    for k, v in conn_by_subject_day.items()}

    window_verdicts: list[BlockVerdict] = []
    vp_verdicts: list[BlockVerdict] = []
    for key in sorted(points, key=lambda k: (k[0], k[1].value, k[2])):
        vp_id, kind, subject = key
        pts = points[key]
        if kind in CONNECTIVITY_KINDS:
            pts = [p for p in pts if availability.get((subject, p[0]))]
        days = sorted({d for d, _ in pts})
        span = (days[0], days[-1]) if days else (0, 0)
        rates = []
        for d in days:
            wr = filtering_rate(pts, d, h)
            rates.append(wr.rate)
            window_verdicts.append(BlockVerdict(subject, vp_id, (d - h, d + h), wr.rate, rate_status(wr, thr),
                                                kind, wr.count))
        if kind in CONNECTIVITY_KINDS:
            vp_verdicts.append(resolver_block_verdict(rates, subject=subject, vp_id=vp_id, window=span,
                                                      threshold=thr, percentile=cfg.percentile, kind=kind))
        elif not rates:
            vp_verdicts.append(BlockVerdict(subject, vp_id, span, 0.0, Status.INSUFFICIENT_DATA, kind, 0))
        else:
            top = max(rates)
            vp_verdicts.append(BlockVerdict(subject, vp_id, span, top,
                                            Status.BLOCKED if top > thr else Status.CLEAR, kind, len(pts)))

    as_verdicts = _as_verdicts(vp_verdicts, vps, flagged_records, tamper, cfg)
    by_country: dict[str, list[ASVerdict]] = defaultdict(list)
    as_country = {v.asn: v.country for v in vps.values() if v.asn is not None}
    for v in as_verdicts:
        by_country[as_country.get(v.asn, "ZZ")].append(v)
    centralization = {c: centralization_flag(vs) for c, vs in sorted(by_country.items())}
    return Analysis(tamper, window_verdicts, vp_verdicts, availability, as_verdicts, centralization,
                    dict(on_path))


def _as_verdicts(vp_verdicts, vps, flagged_records, tamper, cfg) -> list[ASVerdict]:
    groups: dict[tuple[int, Kind, str], list[BlockVerdict]] = defaultdict(list)
    for v in vp_verdicts:
        asn = vps[v.vp_id].asn
        if asn is not None:
            groups[(asn, v.kind, v.subject)].append(v)
    out = []
    for (asn, kind, subject), verdicts in sorted(groups.items(), key=lambda g: (g[0][0], g[0][1].value, g[0][2])):
        evidence = set()
        hist: Counter = Counter()
        for v in verdicts:
            if v.status is not Status.BLOCKED:
                continue
            for rec in flagged_records.get((v.vp_id, kind, subject), ()):
                evidence.add((v.vp_id, rec.vp.subnet, rec.day))
                if kind in DNS_KINDS:
                    hist[Technique.DNS_INJECT.value] += 1
                else:
                    tech = technique_of(rec.payload)
                    if tech is not None:
                        hist[tech.value] += 1
        out.append(as_level_verdict(asn, subject, evidence, hist, min_subnets=cfg.as_min_vps,
                                    min_days=cfg.as_min_days, kind=kind))
    return out


# ---------------------------------------------------------------------------
# output


def _plain(value):
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, (set, frozenset)):
        return sorted((_plain(v) for v in value), key=lambda x: json.dumps(x, sort_keys=True))
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    if isinstance(value, Mapping):
        return {str(k): _plain(v) for k, v in value.items()}
    if hasattr(value, "__dataclass_fields__"):
        return {k: _plain(getattr(value, k)) for k in value.__dataclass_fields__}
    return value


def verdicts_jsonl(verdicts: Iterable) -> str:
    return "".join(json.dumps(_plain(v), sort_keys=True) + "\n" for v in verdicts)


def pivot_csv(analysis: Analysis, records: Iterable[MeasurementRecord]) -> str:
    """Subject x ASN matrix of connectivity blocking plus TCP/TLS stage shares.

    A cell is ``X`` for an AS-level block, ``x`` when only individual VPs
    saw it.  The two trailing rows give, per AS, the share of failed
    measurements of blocked subjects that failed at the TCP and TLS stage.
    """
    asns = sorted({v.asn for v in analysis.as_verdicts})
    vp_asn = {}
    subjects = set()
    stage_counts: dict[int, Counter] = defaultdict(Counter)
    blocked_pairs = {(v.vp_id, v.kind, v.subject) for v in analysis.vp_verdicts if v.status is Status.BLOCKED}
    for rec in records:
        vp_asn[rec.vp.vp_id] = rec.vp.asn
        if rec.kind not in CONNECTIVITY_KINDS:
            continue
        subjects.add((rec.kind, rec.subject))
        if (rec.vp.vp_id, rec.kind, rec.subject) in blocked_pairs and not rec.payload.ok:
            stage_counts[rec.vp.asn]["all"] += 1
            stage_counts[rec.vp.asn][rec.payload.stage_reached.value] += 1
    as_cells = {(v.asn, v.kind, v.subject): v.blocked for v in analysis.as_verdicts}
    vp_cells = {(vp_asn.get(vp), k, s) for vp, k, s in blocked_pairs}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject", "kind"] + [f"AS{a}" for a in asns])
    for kind, subject in sorted(subjects, key=lambda x: (x[0].value, x[1])):
        row = [subject, kind.value]
        for a in asns:
            if as_cells.get((a, kind, subject)):
                row.append("X")
            elif (a, kind, subject) in vp_cells:
                row.append("x")
            else:
                row.append("")
        w.writerow(row)
    for stage in ("TCP", "TLS"):
        row = [f"Block (%) {stage}", ""]
        for a in asns:
            c = stage_counts.get(a)
            row.append(f"{100.0 * c[stage] / c['all']:.1f}" if c and c["all"] else "")
        w.writerow(row)
    return buf.getvalue()
