"""Orchestration: test-list curation, measurement runs, analysis, crawling and reports."""
from __future__ import annotations

import csv
import enum
import hashlib
import logging
import uuid
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import date, datetime, time, timedelta, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence, Union

from cryptography import x509

from dnescope import detect
from dnescope.asmap import OrgTable, PrefixTable
from dnescope.circumvent import (
    FailureCategory,
    SummaryRow,
    classify,
    control_crawl,
    crawl,
    summarize,
    summary_csv,
)
from dnescope.esni.keys import EsniFormatError, EsniKeys, parse_esni_keys
from dnescope.model import (
    ConfigError,
    CrawlOutcome,
    Kind,
    MeasurementRecord,
    ObservationSet,
    Outcome,
    RecordStore,
    RunConfig,
    StagedResult,
    VantageContext,
    day_of,
    format_ts,
    parse_ts,
)
from dnescope.netprobe.probes import (
    DoTHEndpoint,
    ResolveVia,
    TLSMode,
    fetch_http,
    load_doth_list,
    resolve_do53,
    resolve_encrypted,
    tls_probe,
)
from dnescope.netprobe.transport import Endpoint, Transport

log = logging.getLogger(__name__)

RECORD_NS = uuid.UUID("6f1c7b0e-2d0a-4b7e-9a51-3c8e2f4d9b10")
LIVENESS_REDIRECTS = 3


# ---------------------------------------------------------------------------
# curation


class Platform(str, enum.Enum):
    OONI = "OONI"
    ICLAB = "ICLAB"
    CENSORED_PLANET = "CENSORED_PLANET"
    OTHER = "OTHER"


@dataclass(frozen=True)
class PlatformReport:
    platform: Platform
    country: str
    asn: int
    domain: str
    observed_at: datetime
    anomaly: bool


def parse_report(row: Mapping[str, str]) -> PlatformReport:
    """Build a report from a CSV row; raises ``ValueError`` on bad input."""
    try:
        platform = Platform(row["platform"].strip().upper().replace(" ", "_").replace("-", "_"))
    except ValueError:
        platform = Platform.OTHER
    country = row["country"].strip().upper()
    if len(country) != 2 or not country.isalpha():
        raise ValueError(f"bad country {country!r}")
    asn_text = row["asn"].strip().upper()
    asn = int(asn_text[2:] if asn_text.startswith("AS") else asn_text)
    domain = row["domain"].strip().rstrip(".").lower()
    if not domain or " " in domain:
        raise ValueError(f"bad domain {domain!r}")
    anomaly = row.get("anomaly", "true").strip().lower() in ("1", "true", "yes", "y")
    return PlatformReport(platform, country, asn, domain, parse_ts(row["observed_at"]), anomaly)


def load_reports(path) -> tuple[list[PlatformReport], int]:
    """Reports from a CSV with columns platform,country,asn,domain,observed_at,anomaly."""
    out, skipped = [], 0
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            try:
                out.append(parse_report(row))
            except (KeyError, ValueError, AttributeError) as exc:
                skipped += 1
                log.debug("skipping report row %r: %s", row, exc)
    return out, skipped


@dataclass
class TestList:
    entries: list[tuple[str, tuple[str, ...]]]
    provenance: dict[tuple[str, int], int] = field(default_factory=dict)
    skipped: int = 0

    __test__ = False  # not a pytest class

    @property
    def domains(self) -> list[str]:
        return [d for d, _ in self.entries]

    def dump(self) -> str:
        return "".join(f"{d}\t{','.join(c)}\n" for d, c in self.entries)

    @classmethod
    def load(cls, path) -> "TestList":
        entries = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            domain, _, countries = line.partition("\t")
            entries.append((domain.strip().lower(), tuple(c for c in countries.split(",") if c)))
        return cls(entries)


def curate(reports: Iterable[Union[PlatformReport, Mapping[str, str]]], cfg: RunConfig,
           liveness: Optional[Callable[[str], bool]] = None, *, now: Optional[datetime] = None,
           resolver_domains: Iterable[str] = ()) -> TestList:
    """Keep domains reported anomalous from enough ASes and platforms in one country.

    Reports older than ``cfg.curation_window_days`` before ``now`` are ignored.
    Qualifying domains that fail ``liveness`` are dropped; resolver domains
    are appended unconditionally.
    """
    now = now or datetime.now(timezone.utc)
    since = now - timedelta(days=cfg.curation_window_days)
    skipped = 0
    asns: dict[tuple[str, str], set[int]] = defaultdict(set)
    platforms: dict[tuple[str, str], set[Platform]] = defaultdict(set)
    provenance: dict[tuple[str, int], int] = defaultdict(int)
    for item in reports:
        try:
            rep = item if isinstance(item, PlatformReport) else parse_report(item)
        except (KeyError, ValueError, AttributeError):
            skipped += 1
            continue
        if not rep.anomaly or not since <= rep.observed_at <= now:
            continue
        key = (rep.domain, rep.country)
        asns[key].add(rep.asn)
        platforms[key].add(rep.platform)
        provenance[(rep.platform.value, rep.asn)] += 1

    qualified: dict[str, set[str]] = defaultdict(set)
    for key in asns:
        if len(asns[key]) >= cfg.curation_min_ases and len(platforms[key]) >= cfg.curation_min_platforms:
            qualified[key[0]].add(key[1])
    entries = []
    for domain in sorted(qualified):
        if liveness is not None and not liveness(domain):
            log.info("dropping %s: liveness check failed", domain)
            continue
        entries.append((domain, tuple(sorted(qualified[domain]))))
    seen = {d for d, _ in entries}
    for d in resolver_domains:
        d = d.strip().rstrip(".").lower()
        if d and d not in seen:
            entries.append((d, ()))
            seen.add(d)
    return TestList(entries, dict(provenance), skipped)


def liveness_check(t: Transport, *, timeout_ms: int = 5000,
                   trust: Optional[list[x509.Certificate]] = None) -> Callable[[str], bool]:
    """A domain is alive when HTTPS, or failing that plain HTTP, yields a status below 400."""
    def alive(domain: str) -> bool:
        for scheme in ("https", "http"):
            try:
                out = fetch_http(t, f"{scheme}://{domain}/", ResolveVia.SYSTEM, timeout_ms=timeout_ms,
                                 trust=trust, max_redirects=LIVENESS_REDIRECTS)
            except ValueError:
                continue
            if out.fetch is not None and out.fetch.status < 400:
                return True
        return False
    return alive


# ---------------------------------------------------------------------------
# measurement


@dataclass
class MeasurementPlan:
    domains: list[str]
    public_resolvers: list[Endpoint]
    local_resolver: Optional[Endpoint]
    doth: list[DoTHEndpoint]
    control_domain: str
    control_answers: tuple[str, ...]
    esni_control: Optional[Endpoint] = None
    esni_control_name: str = ""
    esni_keys: Optional[EsniKeys] = None
    trust: Optional[list[x509.Certificate]] = None


def plan_from_config(cfg: RunConfig, domains: Sequence[str]) -> MeasurementPlan:
    try:
        public = [Endpoint.parse(r) for r in cfg.public_resolvers]
        local = Endpoint.parse(cfg.local_resolver) if cfg.local_resolver else None
        doth = load_doth_list(cfg.doth_list) if cfg.doth_list else []
        esni_ep = Endpoint.parse(cfg.esni_control, default_port=443) if cfg.esni_control else None
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    keys = None
    if cfg.esni_keys:
        text = cfg.esni_keys
        if Path(text).is_file():
            text = Path(text).read_text(encoding="utf-8").strip()
        try:
            keys = parse_esni_keys(text)
        except EsniFormatError as exc:
            raise ConfigError(f"esni_keys: {exc}") from None
    trust = None
    if cfg.trust_anchors:
        try:
            trust = x509.load_pem_x509_certificates(Path(cfg.trust_anchors).read_bytes())
        except (OSError, ValueError) as exc:
            raise ConfigError(f"trust_anchors: {exc}") from None
    if doth and not cfg.control_domain:
        raise ConfigError("control_domain is required to probe encrypted resolvers")
    if esni_ep and (keys is None or not cfg.esni_control_name):
        raise ConfigError("esni_control needs esni_control_name and esni_keys")
    return MeasurementPlan(list(domains), public, local, doth, cfg.control_domain, tuple(cfg.control_answers),
                           esni_ep, cfg.esni_control_name, keys, trust)


def _qid(*parts) -> int:
    return int.from_bytes(hashlib.sha256("|".join(map(str, parts)).encode()).digest()[:2], "big")


def record_id(vp: VantageContext, ts: datetime, kind: Kind, subject: str, extra: str) -> str:
    return str(uuid.uuid5(RECORD_NS, f"{vp.vp_id}|{format_ts(ts)}|{kind.value}|{subject}|{extra}"))


@dataclass
class RunResult:
    records: list[MeasurementRecord]
    probe_failures: int = 0


def _is_probe_failure(payload) -> bool:
    if isinstance(payload, ObservationSet):
        return payload.error is not None
    if isinstance(payload, StagedResult):
        return payload.outcome is Outcome.PROBE_ERROR
    return False


def run(cfg: RunConfig, test_list: Union[TestList, Sequence[str]], transport: Transport, vp: VantageContext, *,
        plan: Optional[MeasurementPlan] = None, store: Optional[RecordStore] = None) -> RunResult:
    """One measurement round from ``vp``: Do53 (local then public), DoT/DoH, ESNI control."""
    domains = test_list.domains if isinstance(test_list, TestList) else list(test_list)
    plan = plan or plan_from_config(cfg, domains)
    wait = cfg.response_wait_ms
    ts = transport.now()
    day = day_of(ts)
    tasks: list[tuple[Kind, str, str, Callable[[], object]]] = []

    for d in domains:
        if plan.local_resolver is not None:
            r = plan.local_resolver
            tasks.append((Kind.DNS_LOCAL, d, str(r), lambda d=d, r=r: resolve_do53(
                transport, r, d, "A", wait, qid=_qid(vp.vp_id, day, "local", d, r))))
        for r in plan.public_resolvers:
            tasks.append((Kind.DNS_PUBLIC, d, str(r), lambda d=d, r=r: resolve_do53(
                transport, r, d, "A", wait, qid=_qid(vp.vp_id, day, "public", d, r))))
    for ep in plan.doth:
        kind = Kind.DOT if ep.proto == "dot" else Kind.DOH
        tasks.append((kind, str(ep), "", lambda ep=ep: resolve_encrypted(
            transport, ep, plan.control_domain, expected=plan.control_answers, timeout_ms=wait,
            trust=plan.trust, qid=_qid(vp.vp_id, day, "doth", ep))))
    if plan.esni_control is not None:
        tasks.append((Kind.ESNI_CONTROL, plan.esni_control_name, str(plan.esni_control), lambda: tls_probe(
            transport, plan.esni_control, plan.esni_control_name, TLSMode.ESNI, plan.esni_keys,
            timeout_ms=wait, trust=plan.trust)))

    def execute(task):
        kind, subject, extra, fn = task
        payload = fn()
        return MeasurementRecord(record_id(vp, ts, kind, subject, extra), vp, ts, kind, subject, payload)

    if cfg.parallelism > 1 and len(tasks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            records = list(pool.map(execute, tasks))
    else:
        records = [execute(t) for t in tasks]
    if store is not None:
        store.append(records)
    failures = sum(_is_probe_failure(r.payload) for r in records)
    return RunResult(records, failures)


# ---------------------------------------------------------------------------
# analysis and crawling


def analyze(records: Sequence[MeasurementRecord], cfg: RunConfig, prefix: PrefixTable, orgs: OrgTable,
            control_vps: Iterable[str] = ("control",)) -> detect.Analysis:
    return detect.analyze(records, cfg, prefix, orgs, control_vps)


@dataclass(frozen=True)
class CrawlRow:
    vp: VantageContext
    outcome: CrawlOutcome
    control: Optional[CrawlOutcome]
    category: FailureCategory


def crawl_stage(on_path: Mapping[str, set[str]], vps: Mapping[str, VantageContext],
                transports: Mapping[str, Transport], control: Transport, doh: DoTHEndpoint, *,
                trust=None, timeout_ms: int = 3000) -> tuple[list[CrawlRow], list[MeasurementRecord]]:
    """Crawl on-path-filtered domains once per country, plus a control fetch for each."""
    rows, records = [], []
    controls: dict[str, CrawlOutcome] = {}
    done: set[tuple[str, str]] = set()
    control_vp = getattr(control, "vp", None)
    for vp_id in sorted(on_path):
        vp = vps[vp_id]
        t = transports.get(vp_id)
        if t is None:
            continue
        for domain in sorted(on_path[vp_id]):
            if (vp.country, domain) in done:
                continue
            done.add((vp.country, domain))
            if domain not in controls:
                controls[domain] = control_crawl(domain, doh, control, trust=trust, timeout_ms=timeout_ms)
                if control_vp is not None:
                    ts = control.now()
                    records.append(MeasurementRecord(record_id(control_vp, ts, Kind.CRAWL, domain, "control"),
                                                     control_vp, ts, Kind.CRAWL, domain, controls[domain]))
            ref = controls[domain]
            scheme = ref.scheme if ref.fetch is not None else "https"
            out = crawl(domain, doh, t, scheme=scheme, trust=trust, timeout_ms=timeout_ms)
            ts = t.now()
            records.append(MeasurementRecord(record_id(vp, ts, Kind.CRAWL, domain, "crawl"), vp, ts,
                                             Kind.CRAWL, domain, out))
            rows.append(CrawlRow(vp, out, ref, classify(out, ref)))
    return rows, records


# ---------------------------------------------------------------------------
# simulation campaign


@dataclass
class Campaign:
    records: list[MeasurementRecord]
    analysis: detect.Analysis
    crawls: list[CrawlRow]
    summary: dict[str, SummaryRow]
    transports: dict


def sim_plan(world) -> MeasurementPlan:
    return MeasurementPlan(world.test_list, list(world.public_resolvers), world.local_resolver, list(world.doth),
                           world.control_domain, (world.control_ip,), world.esni_control.endpoint,
                           world.esni_control.name, world.esni_keys.keys, [world.ca.cert])


def simulate_campaign(world, profile, cfg: Optional[RunConfig] = None, *, days: int = 3,
                      start: date = date(2020, 3, 1), crawl_domains: bool = True,
                      store: Optional[RecordStore] = None,
                      schedule: Optional[Callable[[int], object]] = None) -> Campaign:
    """Measure ``world`` from every VP for ``days`` days with ``profile`` in front of the censored VPs.

    ``schedule(day_index)``, when given, returns the profile in force on that
    day instead of the fixed ``profile``.
    """
    from dnescope.censorsim.transport import SimTransport

    cfg = cfg or RunConfig(parallelism=1)
    plan = sim_plan(world)
    censored = {v.vp_id for v in world.censored_vps}
    transports = {}
    records: list[MeasurementRecord] = []
    for i in range(days):
        clock = datetime.combine(start + timedelta(days=i), time(12), tzinfo=timezone.utc)
        today = schedule(i) if schedule is not None else profile
        for vp in world.vps:
            t = SimTransport(world, vp, today if vp.vp_id in censored else None, clock)
            transports[vp.vp_id] = t
            records.extend(run(cfg, plan.domains, t, vp, plan=plan).records)
    analysis = analyze(records, cfg, world.prefix, world.orgs)
    rows: list[CrawlRow] = []
    if crawl_domains:
        vps = {v.vp_id: v for v in world.vps}
        on_path = {k: v for k, v in analysis.on_path.items() if k in censored}
        rows, crawl_records = crawl_stage(on_path, vps, transports, transports["control"], world.private_doh,
                                          trust=[world.ca.cert])
        records.extend(crawl_records)
    if store is not None:
        store.append(records)
    summary = summarize((r.vp.country, r.category) for r in rows)
    return Campaign(records, analysis, rows, summary, transports)


# ---------------------------------------------------------------------------
# reports


def doth_timeseries(records: Iterable[MeasurementRecord]) -> list[tuple[str, str, float, int]]:
    """(date, country, % correct DoT/DoH resolutions, n) per day and VP country."""
    counts: dict[tuple[int, str], list[int]] = defaultdict(lambda: [0, 0])
    for rec in records:
        if rec.kind in (Kind.DOT, Kind.DOH) and rec.payload.outcome is not Outcome.PROBE_ERROR:
            c = counts[(rec.day, rec.vp.country)]
            c[0] += rec.payload.ok
            c[1] += 1
    out = []
    for (day, country), (ok, n) in sorted(counts.items()):
        out.append((date.fromordinal(day + 719163).isoformat(), country, round(100.0 * ok / n, 2), n))
    return out


def crawl_pairs(records: Iterable[MeasurementRecord], control_vps: Iterable[str] = ("control",)):
    """Pair each crawl with the latest control crawl of the same domain."""
    control_vps = set(control_vps)
    controls: dict[str, MeasurementRecord] = {}
    crawls = []
    for rec in records:
        if rec.kind is not Kind.CRAWL:
            continue
        if rec.vp.vp_id in control_vps:
            prev = controls.get(rec.subject)
            if prev is None or prev.timestamp <= rec.timestamp:
                controls[rec.subject] = rec
        else:
            crawls.append(rec)
    out = []
    for rec in crawls:
        ctrl = controls.get(rec.subject)
        out.append((rec, ctrl.payload if ctrl else None, classify(rec.payload, ctrl.payload if ctrl else None)))
    return out


def _plot_timeseries(rows, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(7, 3.5))
    by_country: dict[str, list] = defaultdict(list)
    for day, country, pct, _n in rows:
        by_country[country].append((date.fromisoformat(day), pct))
    for country, pts in sorted(by_country.items()):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", label=country)
    ax.set_ylabel("correct DoT/DoH resolutions (%)")
    ax.set_ylim(-5, 105)
    ax.legend(loc="lower left", fontsize="small")
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def report(records: Sequence[MeasurementRecord], outdir, cfg: RunConfig, prefix: PrefixTable, orgs: OrgTable,
           control_vps: Iterable[str] = ("control",)) -> dict[str, Path]:
    """Write the time series (CSV and PNG), blocking matrix, circumvention summary and verdicts."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    control_vps = tuple(control_vps)
    artifacts = {}

    series = doth_timeseries(records)
    p = outdir / "doth_timeseries.csv"
    with p.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["date", "country", "correct_pct", "n"])
        w.writerows(series)
    artifacts["timeseries_csv"] = p
    if series:
        p = outdir / "doth_timeseries.png"
        _plot_timeseries(series, p)
        artifacts["timeseries_png"] = p

    analysis = analyze(records, cfg, prefix, orgs, control_vps)
    p = outdir / "blocking_matrix.csv"
    p.write_text(detect.pivot_csv(analysis, records), encoding="utf-8")
    artifacts["matrix_csv"] = p

    p = outdir / "verdicts.jsonl"
    p.write_text(detect.verdicts_jsonl(analysis.vp_verdicts) + detect.verdicts_jsonl(analysis.as_verdicts),
                 encoding="utf-8")
    artifacts["verdicts_jsonl"] = p

    pairs = crawl_pairs(records, control_vps)
    rows = summarize((rec.vp.country, cat) for rec, _ctrl, cat in pairs)
    p = outdir / "circumvention.csv"
    p.write_text(summary_csv(rows.values()), encoding="utf-8")
    artifacts["circumvention_csv"] = p
    return artifacts
