"""IP-to-ASN (longest-prefix match) and ASN-to-organization tables."""
from __future__ import annotations

import ipaddress
import logging
from pathlib import Path
from typing import Iterable, Mapping, Optional

log = logging.getLogger(__name__)

UNKNOWN_ORG = "unknown"


class PrefixTable:
    """Longest-prefix-match index from CIDR prefixes to origin ASNs.

    Prefixes are bucketed by (family, length) in plain dicts keyed by the
    integer network address; a lookup masks the address once per populated
    length, longest first.  That is at most 33 (or 129) dict probes and in
    practice a handful.
    """

    def __init__(self):
        self._by_len: dict[int, dict[int, dict[int, int]]] = {4: {}, 6: {}}
        self._lengths: dict[int, list[int]] = {4: [], 6: []}
        self._bits = {4: 32, 6: 128}

    def __len__(self):
        return sum(len(b) for fam in self._by_len.values() for b in fam.values())

    def entries(self):
        for fam, buckets in self._by_len.items():
            bits = self._bits[fam]
            cls = ipaddress.IPv4Network if fam == 4 else ipaddress.IPv6Network
            for plen, bucket in buckets.items():
                for net, asn in bucket.items():
                    yield cls((net << (bits - plen), plen)), asn

    def add(self, prefix, asn: int) -> None:
        net = ipaddress.ip_network(prefix, strict=True) if isinstance(prefix, str) else prefix
        fam = net.version
        plen = net.prefixlen
        key = int(net.network_address) >> (self._bits[fam] - plen)
        bucket = self._by_len[fam].setdefault(plen, {})
        old = bucket.get(key)
        if old is not None and old != asn:
            raise ValueError(f"conflicting ASN for {net}: {old} vs {asn}")
        bucket[key] = int(asn)
        if plen not in self._lengths[fam]:
            self._lengths[fam] = sorted(self._by_len[fam], reverse=True)

    def lookup(self, ip) -> Optional[int]:
        addr = ipaddress.ip_address(ip)
        fam = addr.version
        bits = self._bits[fam]
        value = int(addr)
        buckets = self._by_len[fam]
        for plen in self._lengths[fam]:
            asn = buckets[plen].get(value >> (bits - plen))
            if asn is not None:
                return asn
        return None


def build_prefix_table(rows: Iterable[tuple[str, int]]) -> PrefixTable:
    table = PrefixTable()
    for prefix, asn in rows:
        try:
            net = ipaddress.ip_network(str(prefix).strip(), strict=True)
        except ValueError as exc:
            raise ValueError(f"malformed CIDR {prefix!r}: {exc}") from None
        table.add(net, int(asn))
    return table


def lookup_asn(table: PrefixTable, ip) -> Optional[int]:
    return table.lookup(ip)


class OrgTable:
    """ASN -> organization id; unmapped ASNs belong to :data:`UNKNOWN_ORG`."""

    def __init__(self, mapping: Optional[Mapping[int, str]] = None):
        self._orgs = {int(k): str(v) for k, v in (mapping or {}).items()}

    def __len__(self):
        return len(self._orgs)

    def __contains__(self, asn):
        return asn in self._orgs

    def org(self, asn: Optional[int]) -> str:
        if asn is None:
            return UNKNOWN_ORG
        return self._orgs.get(int(asn), UNKNOWN_ORG)

    def items(self):
        return self._orgs.items()


def same_org(a: Optional[int], b: Optional[int], orgs: OrgTable) -> bool:
    oa, ob = orgs.org(a), orgs.org(b)
    return oa != UNKNOWN_ORG and oa == ob


def _parse_asn(text: str) -> int:
    text = text.strip()
    if text.upper().startswith("AS"):
        text = text[2:]
    # routeviews multi-origin "123_456" / AS-set "{123,456}": keep the first origin
    for sep in ("_", ",", "{", "}"):
        text = text.replace(sep, " ")
    return int(text.split()[0])


def load_prefix_table(path) -> PrefixTable:
    """Load a routeviews-style ``prefix<TAB>asn`` file.

    Also accepts the pfx2as three-column form ``addr<TAB>len<TAB>asn``.
    """
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        try:
            if len(parts) == 2:
                rows.append((parts[0], _parse_asn(parts[1])))
            elif len(parts) == 3:
                rows.append((f"{parts[0]}/{parts[1]}", _parse_asn(parts[2])))
            else:
                raise ValueError("expected 2 or 3 columns")
        except (ValueError, IndexError) as exc:
            raise ValueError(f"{path}:{lineno}: {exc}") from None
    dedup = dict.fromkeys(rows)
    return build_prefix_table(dedup)


def load_org_table(path) -> OrgTable:
    """Load a CAIDA-style ``asn<TAB>org`` file (``|``-separated also accepted)."""
    mapping = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        sep = "|" if "|" in line and "\t" not in line else "\t"
        parts = [p.strip() for p in line.split(sep)]
        if len(parts) < 2:
            raise ValueError(f"{path}:{lineno}: expected asn and org columns")
        try:
            mapping[_parse_asn(parts[0])] = parts[1]
        except ValueError:
            raise ValueError(f"{path}:{lineno}: bad ASN {parts[0]!r}") from None
    return OrgTable(mapping)


def dump_prefix_table(table: PrefixTable) -> str:
    return "".join(f"{net}\t{asn}\n" for net, asn in sorted(table.entries(), key=lambda e: (e[0].version, e[0])))
