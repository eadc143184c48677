"""DNS message helpers on top of dnspython, shared by probers and simulated servers."""
from __future__ import annotations

from typing import Iterable, Optional

import dns.exception
import dns.flags
import dns.message
import dns.name
import dns.rcode
import dns.rdataclass
import dns.rdatatype
import dns.rrset

TTL = 300


def normalize(name: str) -> str:
    return name.strip().rstrip(".").lower()


def build_query(qname: str, qtype: str = "A", qid: int = 0) -> bytes:
    msg = dns.message.make_query(qname, qtype, use_edns=False)
    msg.id = qid & 0xFFFF
    return msg.to_wire()


def parse_message(wire: bytes) -> Optional[dns.message.Message]:
    try:
        return dns.message.from_wire(wire, ignore_trailing=True)
    except (dns.exception.DNSException, ValueError):
        return None


def question_of(msg: dns.message.Message) -> tuple[str, str]:
    q = msg.question[0]
    return normalize(q.name.to_text()), dns.rdatatype.to_text(q.rdtype)


def rcode_text(msg: dns.message.Message) -> str:
    return dns.rcode.to_text(msg.rcode())


def address_answers(msg: dns.message.Message) -> tuple[str, ...]:
    out = []
    for rrset in msg.answer:
        if rrset.rdtype in (dns.rdatatype.A, dns.rdatatype.AAAA):
            out.extend(rd.address for rd in rrset)
    return tuple(out)


def txt_answers(msg: dns.message.Message) -> list[str]:
    out = []
    for rrset in msg.answer:
        if rrset.rdtype == dns.rdatatype.TXT:
            for rd in rrset:
                out.append(b"".join(rd.strings).decode("utf-8", errors="replace"))
    return out


def https_answers(msg: dns.message.Message) -> list:
    return [rd for rrset in msg.answer if rrset.rdtype == dns.rdatatype.HTTPS for rd in rrset]


def make_response(query: dns.message.Message, *, addresses: Iterable[str] = (),
                  txt: Iterable[str] = (), https: Iterable[str] = (),
                  rcode: str = "NOERROR", owner: Optional[str] = None) -> bytes:
    """Answer ``query``.  ``https`` entries are rdata text, e.g. ``'1 . alpn=h2'``."""
    resp = dns.message.make_response(query)
    resp.flags |= dns.flags.RA
    resp.set_rcode(dns.rcode.from_text(rcode))
    name = dns.name.from_text(owner) if owner else query.question[0].name
    v4 = [a for a in addresses if ":" not in a]
    v6 = [a for a in addresses if ":" in a]
    if v4:
        resp.answer.append(dns.rrset.from_text_list(name, TTL, "IN", "A", v4))
    if v6:
        resp.answer.append(dns.rrset.from_text_list(name, TTL, "IN", "AAAA", v6))
    txt = list(txt)
    if txt:
        resp.answer.append(dns.rrset.from_text_list(name, TTL, "IN", "TXT", [_txt_rdata(t) for t in txt]))
    https = list(https)
    if https:
        resp.answer.append(dns.rrset.from_text_list(name, TTL, "IN", "HTTPS", https))
    return resp.to_wire()


def _txt_rdata(text: str) -> str:
    # TXT character-strings are capped at 255 bytes; split long payloads
    chunks = [text[i:i + 255] for i in range(0, len(text), 255)] or [""]
    return " ".join('"' + c.replace("\\", "\\\\").replace('"', '\\"') + '"' for c in chunks)
