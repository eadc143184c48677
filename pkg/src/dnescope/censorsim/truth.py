"""What a correct measurement pipeline must conclude, derived from the profile alone."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Optional

from dnescope.censorsim.profile import CensorProfile, name_listed
from dnescope.censorsim.world import CENSORED_COUNTRY, SimWorld
from dnescope.circumvent import FailureCategory, SummaryRow, summarize
from dnescope.detect import Heuristic, Source, Status, TamperVerdict
from dnescope.model import Kind, RunConfig


@dataclass(frozen=True)
class ExpectedDomain:
    domain: str
    public: TamperVerdict
    local: TamperVerdict
    public_status: Status
    local_status: Status
    category: Optional[FailureCategory]


@dataclass(frozen=True)
class GroundTruth:
    domains: dict
    blocked: frozenset          # (vp_id, Kind, subject)
    as_blocked: frozenset       # (asn, Kind, subject)
    categories: dict            # crawled domain -> FailureCategory
    summary: SummaryRow


def _tamper(answer: Optional[str], source: Source) -> TamperVerdict:
    # the heuristic that fires depends on the forged value; only the verdict shape is asserted
    return TamperVerdict(True, Heuristic.CONTROL_MISMATCH, source, None if answer == "NXDOMAIN" else answer)


def expected_category(profile: CensorProfile, world: SimWorld, domain: str,
                      country: str = CENSORED_COUNTRY) -> FailureCategory:
    site = world.sites[domain]
    geoblocked = country in site.geoblock
    if site.ip in profile.ip_blocklist:
        return FailureCategory.TCP_INJ
    if not site.https:
        if name_listed(domain, profile.http_blockpage) or geoblocked:
            return FailureCategory.HTTP_ONLY
        return FailureCategory.CIRCUMVENTED
    if site.esni:
        if profile.rst_on_esni:
            return FailureCategory.SNI_FILTERED
    elif name_listed(domain, profile.rst_on_sni):
        return FailureCategory.SNI_FILTERED
    if geoblocked:
        return FailureCategory.SERVER_SIDE
    return FailureCategory.CIRCUMVENTED


def profile_ground_truth(profile: CensorProfile, world: SimWorld, test_list: Optional[Iterable[str]] = None,
                         *, days: int = 3, cfg: Optional[RunConfig] = None,
                         censored_vps=None) -> GroundTruth:
    """Expected verdicts when ``profile`` sits in front of ``censored_vps``.

    Assumes the campaign of :func:`dnescope.pipeline.simulate_campaign`:
    every VP probes every day, clean VPs see no interference.
    """
    cfg = cfg or RunConfig()
    test_list = sorted(test_list if test_list is not None else world.test_list)
    censored = list(censored_vps if censored_vps is not None else world.censored_vps)
    n_all = len(world.vps)
    # a subject blocked at the censored VPs still counts as globally available
    available = (n_all - len(censored)) / n_all > cfg.availability_threshold if n_all else False
    enough_windows = days >= 3

    domains = {}
    dns_blocked: set[tuple[Kind, str]] = set()
    categories = {}
    for d in test_list:
        rule = profile.inject_rule(d)
        poisoned = name_listed(d, profile.local_resolver_poison)
        public = _tamper(rule.answer, Source.ON_PATH) if rule else TamperVerdict(False)
        if rule:
            local = _tamper(rule.answer, Source.LOCAL_RESOLVER)
        elif poisoned:
            local = _tamper(profile.local_poison_answer, Source.LOCAL_RESOLVER)
        else:
            local = TamperVerdict(False)
        cat = expected_category(profile, world, d) if rule else None
        if cat is not None:
            categories[d] = cat
        if public.tampered:
            dns_blocked.add((Kind.DNS_PUBLIC, d))
        if local.tampered:
            dns_blocked.add((Kind.DNS_LOCAL, d))
        domains[d] = ExpectedDomain(d, public, local,
                                    Status.BLOCKED if public.tampered else Status.CLEAR,
                                    Status.BLOCKED if local.tampered else Status.CLEAR, cat)

    conn_blocked: set[tuple[Kind, str]] = set()
    if available and enough_windows:
        for r in world.doth:
            if (r.ip in profile.ip_blocklist or name_listed(r.host, profile.rst_on_sni)
                    or r.host in profile.doth_intercept):
                conn_blocked.add((Kind.DOT if r.proto == "dot" else Kind.DOH, str(r)))
        if profile.rst_on_esni or world.esni_control.ip in profile.ip_blocklist:
            conn_blocked.add((Kind.ESNI_CONTROL, world.esni_control.name))

    subjects = dns_blocked | conn_blocked
    blocked = frozenset((vp.vp_id, k, s) for vp in censored for k, s in subjects)

    as_blocked = set()
    by_asn: dict[int, set[str]] = {}
    for vp in censored:
        by_asn.setdefault(vp.asn, set()).add(vp.subnet)
    for asn, subnets in by_asn.items():
        if len(subnets) >= cfg.as_min_vps and days >= cfg.as_min_days:
            as_blocked |= {(asn, k, s) for k, s in subjects}

    summary = summarize((CENSORED_COUNTRY, c) for c in categories.values()).get(
        CENSORED_COUNTRY, SummaryRow(CENSORED_COUNTRY))
    return GroundTruth(domains, blocked, frozenset(as_blocked), categories, summary)
