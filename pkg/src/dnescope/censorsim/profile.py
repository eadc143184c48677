"""Declarative description of an on-path adversary."""
from __future__ import annotations

import ipaddress
import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional

from dnescope import dnsmsg
from dnescope.model import ConfigError

NXDOMAIN = "NXDOMAIN"
RST = "RST"
DROP = "DROP"
DEFAULT_BLOCKPAGE_IP = "180.180.255.130"


def name_listed(name: Optional[str], names: Iterable[str]) -> bool:
    """True when ``name`` equals a listed name or sits below one."""
    if not name:
        return False
    name = dnsmsg.normalize(name)
    return any(name == n or name.endswith("." + n) for n in names)


@dataclass(frozen=True)
class InjectRule:
    answer: str
    inject_lead_ms: float = 50.0
    genuine_suppressed: bool = False

    def __post_init__(self):
        if self.inject_lead_ms <= 0:
            raise ConfigError("inject_lead_ms must be > 0")
        if self.answer != NXDOMAIN:
            try:
                ipaddress.ip_address(self.answer)
            except ValueError:
                raise ConfigError(f"forged answer must be an IP or NXDOMAIN, got {self.answer!r}") from None


@dataclass(frozen=True, eq=True)
class CensorProfile:
    dns_inject: Mapping[str, InjectRule] = field(default_factory=dict)
    rst_on_sni: frozenset = frozenset()
    rst_on_esni: bool = False
    ip_blocklist: Mapping[str, str] = field(default_factory=dict)
    http_blockpage: frozenset = frozenset()
    local_resolver_poison: frozenset = frozenset()
    local_poison_answer: str = DEFAULT_BLOCKPAGE_IP
    # TLS interception of encrypted resolvers: host -> forged A answer
    doth_intercept: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        norm = dnsmsg.normalize
        object.__setattr__(self, "dns_inject", {norm(k): v for k, v in self.dns_inject.items()})
        for attr in ("rst_on_sni", "http_blockpage", "local_resolver_poison"):
            object.__setattr__(self, attr, frozenset(norm(n) for n in getattr(self, attr)))
        object.__setattr__(self, "doth_intercept", {norm(k): v for k, v in self.doth_intercept.items()})
        for ip, action in self.ip_blocklist.items():
            ipaddress.ip_address(ip)
            if action not in (RST, DROP):
                raise ConfigError(f"ip_blocklist action must be RST or DROP, got {action!r}")
        for ip in [self.local_poison_answer, *self.doth_intercept.values()]:
            if ip != NXDOMAIN:
                ipaddress.ip_address(ip)

    def __hash__(self):
        return hash(self.to_json())

    @property
    def empty(self) -> bool:
        return not (self.dns_inject or self.rst_on_sni or self.rst_on_esni or self.ip_blocklist
                    or self.http_blockpage or self.local_resolver_poison or self.doth_intercept)

    def inject_rule(self, qname: str) -> Optional[InjectRule]:
        qname = dnsmsg.normalize(qname)
        best = None
        for domain, rule in self.dns_inject.items():
            if qname == domain or qname.endswith("." + domain):
                if best is None or len(domain) > len(best[0]):
                    best = (domain, rule)
        return best[1] if best else None

    def to_dict(self) -> dict:
        return {
            "dns_inject": {d: {"answer": r.answer, "inject_lead_ms": r.inject_lead_ms,
                               "genuine_suppressed": r.genuine_suppressed}
                           for d, r in sorted(self.dns_inject.items())},
            "rst_on_sni": sorted(self.rst_on_sni),
            "rst_on_esni": self.rst_on_esni,
            "ip_blocklist": dict(sorted(self.ip_blocklist.items())),
            "http_blockpage": sorted(self.http_blockpage),
            "local_resolver_poison": sorted(self.local_resolver_poison),
            "local_poison_answer": self.local_poison_answer,
            "doth_intercept": dict(sorted(self.doth_intercept.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "CensorProfile":
        known = {"dns_inject", "rst_on_sni", "rst_on_esni", "ip_blocklist", "http_blockpage",
                 "local_resolver_poison", "local_poison_answer", "doth_intercept"}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown profile keys: {sorted(unknown)}")
        inject = {}
        for domain, rule in (data.get("dns_inject") or {}).items():
            if isinstance(rule, str):
                rule = {"answer": rule}
            inject[domain] = InjectRule(str(rule["answer"]), float(rule.get("inject_lead_ms", 50.0)),
                                        bool(rule.get("genuine_suppressed", False)))
        blocklist = data.get("ip_blocklist") or {}
        if isinstance(blocklist, list):
            blocklist = {ip: RST for ip in blocklist}
        return cls(
            dns_inject=inject,
            rst_on_sni=frozenset(data.get("rst_on_sni") or ()),
            rst_on_esni=bool(data.get("rst_on_esni", False)),
            ip_blocklist={str(k): str(v).upper() for k, v in blocklist.items()},
            http_blockpage=frozenset(data.get("http_blockpage") or ()),
            local_resolver_poison=frozenset(data.get("local_resolver_poison") or ()),
            local_poison_answer=str(data.get("local_poison_answer", DEFAULT_BLOCKPAGE_IP)),
            doth_intercept={str(k): str(v) for k, v in (data.get("doth_intercept") or {}).items()},
        )


def load_profile(path) -> CensorProfile:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed profile JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: profile must be a JSON object")
    return CensorProfile.from_dict(data)


def dump_profile(profile: CensorProfile, path) -> None:
    Path(path).write_text(json.dumps(profile.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")


# forged answers a detector can tell apart from a genuine hosting answer
FORGED_ANSWERS = (DEFAULT_BLOCKPAGE_IP, "198.51.100.7", "10.10.34.35", "127.0.0.1",
                  "0.0.0.0", "203.0.113.9", NXDOMAIN)


def random_profile(world, rng: random.Random, *, p_inject=0.3, p_poison=0.15, p_sni=0.25,
                   p_esni=0.5, p_ip=0.15, p_blockpage=0.2, p_intercept=0.15) -> CensorProfile:
    """Draw a profile over ``world``'s sites and resolvers.

    Infrastructure the measurement itself depends on (Do53 resolvers and the
    private DoH endpoint) is never targeted.
    """
    domains = sorted(world.sites)
    inject = {}
    for d in domains:
        if rng.random() < p_inject:
            inject[d] = InjectRule(rng.choice(FORGED_ANSWERS), float(rng.choice((5, 20, 50, 120))),
                                   rng.random() < 0.2)
    poison = {d for d in domains if rng.random() < p_poison}
    sni = {d for d in domains if rng.random() < p_sni}
    sni |= {r.host for r in world.doth if rng.random() < p_sni}
    blocklist = {}
    for ip in [s.ip for s in world.sites.values()] + [r.ip for r in world.doth] + [world.esni_control.ip]:
        if rng.random() < p_ip:
            blocklist[ip] = rng.choice((RST, DROP))
    blockpage = {d for d in domains if rng.random() < p_blockpage}
    intercept = {r.host: rng.choice((DEFAULT_BLOCKPAGE_IP, "198.51.100.53"))
                 for r in world.doth if rng.random() < p_intercept}
    return CensorProfile(
        dns_inject=inject,
        rst_on_sni=frozenset(sni),
        rst_on_esni=rng.random() < p_esni,
        ip_blocklist=blocklist,
        http_blockpage=frozenset(blockpage),
        local_resolver_poison=frozenset(poison),
        local_poison_answer=rng.choice((DEFAULT_BLOCKPAGE_IP, "10.0.0.1")),
        doth_intercept=intercept,
    )


def composite_profile(world) -> CensorProfile:
    """Every domain of :func:`standard_world` DNS-injected, with one extra mechanism per group.

    site00-09 (ESNI) get nothing more; site10-14 are SNI-filtered; the two
    HTTP-only sites get a blockpage; site17/18 are IP-reset; site19 is left
    to its own server-side geoblock.
    """
    domains = sorted(world.sites)
    return CensorProfile(
        dns_inject={d: InjectRule(DEFAULT_BLOCKPAGE_IP) for d in domains},
        rst_on_sni=frozenset(domains[10:15]),
        http_blockpage=frozenset(domains[15:17]),
        ip_blocklist={world.sites[d].ip: RST for d in domains[17:19]},
    )
