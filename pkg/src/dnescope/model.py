"""Core record types, run configuration and the JSONL measurement store.

Every probe result is persisted as a :class:`MeasurementRecord`, one JSON
object per line.  The payload dataclasses for each record kind live here
(rather than next to the probers that fill them) so that serialization has a
single home and no module needs to import the network code just to read a
store.
"""
from __future__ import annotations

import base64
import dataclasses
import enum
import ipaddress
import json
import logging
import threading
import typing
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Optional, Union

log = logging.getLogger(__name__)


class RecordError(ValueError):
    """Raised when a record line cannot be decoded.  ``field`` names the culprit."""

    def __init__(self, message: str, field: str = ""):
        super().__init__(f"{field}: {message}" if field else message)
        self.field = field


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# enums


class Kind(str, enum.Enum):
    DNS_LOCAL = "DNS_LOCAL"
    DNS_PUBLIC = "DNS_PUBLIC"
    DOT = "DOT"
    DOH = "DOH"
    ESNI_CONTROL = "ESNI_CONTROL"
    CRAWL = "CRAWL"
    ESNI_SCAN = "ESNI_SCAN"


class Stage(str, enum.Enum):
    NONE = "NONE"
    TCP = "TCP"
    TLS = "TLS"
    APP = "APP"


class Outcome(str, enum.Enum):
    OK = "OK"
    TIMEOUT = "TIMEOUT"
    RST = "RST"
    CERT_ERROR = "CERT_ERROR"
    WRONG_ANSWER = "WRONG_ANSWER"
    HTTP_ERROR = "HTTP_ERROR"
    # not interference: TLS alert/protocol failure, local socket failure
    TLS_ERROR = "TLS_ERROR"
    PROBE_ERROR = "PROBE_ERROR"


class ScanStatus(str, enum.Enum):
    NO_RECORD = "NO_RECORD"
    INVALID_FORMAT = "INVALID_FORMAT"
    VALID = "VALID"


_STAGE_ORDER = {Stage.NONE: 0, Stage.TCP: 1, Stage.TLS: 2, Stage.APP: 3}


def stage_index(stage: Stage) -> int:
    return _STAGE_ORDER[stage]


# ---------------------------------------------------------------------------
# time helpers


def utc(dt: datetime) -> datetime:
    if dt.tzinfo is None:
        return dt.replace(tzinfo=timezone.utc)
    return dt.astimezone(timezone.utc)


def format_ts(dt: datetime) -> str:
    dt = utc(dt)
    if dt.microsecond:
        return dt.strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    return dt.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_ts(text: str) -> datetime:
    if not isinstance(text, str):
        raise ValueError(f"expected RFC 3339 string, got {type(text).__name__}")
    s = text.strip()
    if s.endswith("Z") or s.endswith("z"):
        s = s[:-1] + "+00:00"
    dt = datetime.fromisoformat(s)
    if dt.tzinfo is None:
        raise ValueError(f"timestamp without offset: {text!r}")
    return dt.astimezone(timezone.utc)


def day_of(dt: datetime) -> int:
    """Day number (days since epoch) of ``dt`` in UTC."""
    return utc(dt).date().toordinal() - 719163


# ---------------------------------------------------------------------------
# domain types


def subnet_of(ip: str) -> str:
    """The /24 (IPv4) or /48 (IPv6) prefix that contains ``ip``."""
    addr = ipaddress.ip_address(ip)
    plen = 24 if addr.version == 4 else 48
    return str(ipaddress.ip_network(f"{addr}/{plen}", strict=False))


@dataclass(frozen=True)
class VantageContext:
    vp_id: str
    ip: str
    asn: Optional[int]
    subnet: str
    country: str
    first_seen: datetime
    last_seen: datetime

    def __post_init__(self):
        addr = ipaddress.ip_address(self.ip)
        net = ipaddress.ip_network(self.subnet, strict=True)
        if addr not in net:
            raise ValueError(f"subnet {self.subnet} does not contain {self.ip}")
        if self.asn is not None and self.asn <= 0:
            raise ValueError("asn must be positive when known")
        if len(self.country) != 2 or not self.country.isalpha():
            raise ValueError(f"country must be ISO-3166 alpha-2, got {self.country!r}")

    @classmethod
    def make(cls, vp_id, ip, asn=None, country="ZZ", first_seen=None, last_seen=None):
        epoch = datetime(1970, 1, 1, tzinfo=timezone.utc)
        return cls(
            vp_id=vp_id,
            ip=ip,
            asn=asn,
            subnet=subnet_of(ip),
            country=country.upper(),
            first_seen=utc(first_seen) if first_seen else epoch,
            last_seen=utc(last_seen) if last_seen else epoch,
        )


@dataclass(frozen=True)
class Observation:
    """One DNS response datagram seen for a query."""

    answers: tuple[str, ...]
    arrival_offset_ms: float
    dns_id: int
    rcode: str = "NOERROR"


@dataclass(frozen=True)
class ObservationSet:
    qname: str
    qtype: str
    resolver: str
    sent_at: datetime
    observations: tuple[Observation, ...] = ()
    error: Optional[str] = None

    def __post_init__(self):
        offsets = [o.arrival_offset_ms for o in self.observations]
        if any(b < a for a, b in zip(offsets, offsets[1:])):
            raise ValueError("arrival offsets must be non-decreasing")

    @property
    def timed_out(self) -> bool:
        return not self.observations and self.error is None


@dataclass(frozen=True)
class StagedResult:
    """Outcome of a staged connection attempt.

    ``stage_reached`` is the stage the probe was in when it ended: APP for a
    completed exchange, otherwise the stage that failed.
    """

    stage_reached: Stage
    outcome: Outcome
    detail: str = ""
    answers: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        if self.outcome is Outcome.OK and self.stage_reached is not Stage.APP:
            raise ValueError("outcome OK requires stage APP")
        if self.outcome in (Outcome.WRONG_ANSWER, Outcome.HTTP_ERROR) and self.stage_reached is not Stage.APP:
            raise ValueError(f"{self.outcome.value} only occurs at stage APP")

    @property
    def ok(self) -> bool:
        return self.outcome is Outcome.OK


@dataclass(frozen=True)
class EsniScanRecord:
    domain: str
    status: ScanStatus
    txt_len_chars: int = 0
    wildcard_suspect: bool = False
    reason: str = ""

    def __post_init__(self):
        if self.wildcard_suspect and self.status is not ScanStatus.INVALID_FORMAT:
            raise ValueError("wildcard_suspect only applies to INVALID_FORMAT")


@dataclass(frozen=True)
class FetchResult:
    status: int
    digest: str
    length: int
    body: bytes = b""


@dataclass(frozen=True)
class CrawlOutcome:
    domain: str
    scheme: str
    resolve: StagedResult
    connect: StagedResult
    fetch: Optional[FetchResult] = None
    used_esni: bool = False

    def __post_init__(self):
        if self.scheme not in ("http", "https"):
            raise ValueError(f"scheme must be http or https, got {self.scheme!r}")
        if self.fetch is not None and not self.connect.ok:
            raise ValueError("fetch present requires a successful connect stage")


Payload = Union[ObservationSet, StagedResult, EsniScanRecord, CrawlOutcome]

PAYLOAD_TYPES: dict[Kind, type] = {
    Kind.DNS_LOCAL: ObservationSet,
    Kind.DNS_PUBLIC: ObservationSet,
    Kind.DOT: StagedResult,
    Kind.DOH: StagedResult,
    Kind.ESNI_CONTROL: StagedResult,
    Kind.CRAWL: CrawlOutcome,
    Kind.ESNI_SCAN: EsniScanRecord,
}


@dataclass(frozen=True)
class MeasurementRecord:
    record_id: str
    vp: VantageContext
    timestamp: datetime
    kind: Kind
    subject: str
    payload: Payload

    def __post_init__(self):
        expected = PAYLOAD_TYPES[self.kind]
        if not isinstance(self.payload, expected):
            raise ValueError(
                f"payload {type(self.payload).__name__} does not match kind {self.kind.value}"
            )

    @property
    def day(self) -> int:
        return day_of(self.timestamp)


# ---------------------------------------------------------------------------
# JSON codec


def _encode(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _encode(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, enum.Enum):
        return value.value
    if isinstance(value, datetime):
        return format_ts(value)
    if isinstance(value, bytes):
        return base64.b64encode(value).decode("ascii")
    if isinstance(value, (tuple, list)):
        return [_encode(v) for v in value]
    return value


_HINTS: dict[type, dict] = {}


def _hints(cls):
    if cls not in _HINTS:
        _HINTS[cls] = typing.get_type_hints(cls)
    return _HINTS[cls]


def _decode(tp, data, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        non_none = [a for a in args if a is not type(None)]
        if data is None:
            if len(non_none) != len(args):
                return None
            raise RecordError("must not be null", path)
        if len(non_none) == 1:
            return _decode(non_none[0], data, path)
        raise RecordError("ambiguous union", path)
    if origin is tuple:
        if not isinstance(data, list):
            raise RecordError("expected a list", path)
        inner = args[0]
        return tuple(_decode(inner, v, f"{path}[{i}]") for i, v in enumerate(data))
    if dataclasses.is_dataclass(tp):
        if not isinstance(data, dict):
            raise RecordError("expected an object", path)
        kwargs = {}
        hints = _hints(tp)
        for f in dataclasses.fields(tp):
            sub = f"{path}.{f.name}" if path else f.name
            if f.name not in data:
                if f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING:
                    continue
                raise RecordError("missing", sub)
            kwargs[f.name] = _decode(hints[f.name], data[f.name], sub)
        unknown = set(data) - {f.name for f in dataclasses.fields(tp)}
        if unknown:
            raise RecordError(f"unknown fields {sorted(unknown)}", path)
        try:
            return tp(**kwargs)
        except (ValueError, TypeError) as exc:
            raise RecordError(str(exc), path) from exc
    if isinstance(tp, type) and issubclass(tp, enum.Enum):
        try:
            return tp(data)
        except ValueError:
            raise RecordError(f"invalid value {data!r}", path) from None
    if tp is datetime:
        try:
            return parse_ts(data)
        except ValueError as exc:
            raise RecordError(str(exc), path) from None
    if tp is bytes:
        if not isinstance(data, str):
            raise RecordError("expected base64 text", path)
        try:
            return base64.b64decode(data, validate=True)
        except ValueError:
            raise RecordError("bad base64", path) from None
    if tp is float:
        if isinstance(data, bool) or not isinstance(data, (int, float)):
            raise RecordError("expected a number", path)
        return data
    if tp in (int, str, bool):
        if not isinstance(data, tp) or (tp is int and isinstance(data, bool)):
            raise RecordError(f"expected {tp.__name__}", path)
        return data
    raise RecordError(f"unsupported type {tp!r}", path)


def to_json(obj) -> str:
    """Single-line JSON for any of the dataclasses in this module."""
    return json.dumps(_encode(obj), separators=(",", ":"), ensure_ascii=False)


def from_json(cls, data):
    """Inverse of :func:`to_json` for an already-decoded JSON object."""
    return _decode(cls, data, "")


def serialize_record(rec: MeasurementRecord) -> str:
    return to_json(rec)


def parse_record(line: str) -> MeasurementRecord:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as exc:
        raise RecordError(f"malformed JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise RecordError("record must be a JSON object")
    if "kind" not in data:
        raise RecordError("missing", "kind")
    try:
        kind = Kind(data["kind"])
    except ValueError:
        raise RecordError(f"unknown kind {data['kind']!r}", "kind") from None
    if "payload" not in data or data["payload"] is None:
        raise RecordError("payload missing", "payload")
    payload = _decode(PAYLOAD_TYPES[kind], data["payload"], "payload")
    rest = {k: v for k, v in data.items() if k != "payload"}
    rest["payload"] = None
    hints = _hints(MeasurementRecord)
    kwargs = {}
    for f in dataclasses.fields(MeasurementRecord):
        if f.name == "payload":
            continue
        if f.name not in rest:
            raise RecordError("missing", f.name)
        kwargs[f.name] = _decode(hints[f.name], rest[f.name], f.name)
    unknown = set(data) - {f.name for f in dataclasses.fields(MeasurementRecord)}
    if unknown:
        raise RecordError(f"unknown fields {sorted(unknown)}")
    try:
        return MeasurementRecord(payload=payload, **kwargs)
    except ValueError as exc:
        raise RecordError(str(exc), "payload") from None


# ---------------------------------------------------------------------------
# store


class RecordStore:
    """Append-only JSONL file of measurement records.

    One writer, many readers: appends are serialized by a lock and each record
    is written as a single line so that concurrent readers never see a torn
    record except possibly an incomplete final line, which they skip.
    """

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()

    def append(self, records: Iterable[MeasurementRecord]) -> int:
        lines = [serialize_record(r) + "\n" for r in records]
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open("a", encoding="utf-8") as fh:
                fh.writelines(lines)
        return len(lines)

    def __iter__(self) -> Iterator[MeasurementRecord]:
        return self.read(strict=False)

    def read(self, strict: bool = True) -> Iterator[MeasurementRecord]:
        if not self.path.exists():
            return
        with self.path.open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    yield parse_record(line)
                except RecordError as exc:
                    if strict:
                        raise RecordError(f"line {lineno}: {exc}", exc.field) from None
                    log.warning("skipping %s:%d: %s", self.path, lineno, exc)


def read_records(path) -> list[MeasurementRecord]:
    return list(RecordStore(path).read())


def write_records(path, records: Iterable[MeasurementRecord]) -> int:
    return RecordStore(path).append(records)


# ---------------------------------------------------------------------------
# run configuration


def _fraction(name, value):
    if not 0.0 < value <= 1.0:
        raise ConfigError(f"{name} must be in (0, 1], got {value}")


@dataclass(frozen=True)
class RunConfig:
    window_days: int = 7
    block_rate_threshold: float = 0.80
    availability_threshold: float = 0.70
    percentile: float = 0.90
    as_min_vps: int = 2
    as_min_days: int = 2
    curation_window_days: int = 30
    curation_min_ases: int = 2
    curation_min_platforms: int = 2
    response_wait_ms: int = 3000
    # measurement plan; not thresholds
    control_domain: str = ""
    control_answers: tuple[str, ...] = ()
    public_resolvers: tuple[str, ...] = ()
    local_resolver: str = ""
    doth_list: str = ""
    esni_control: str = ""
    esni_control_name: str = ""
    esni_keys: str = ""
    private_doh: str = ""
    trust_anchors: str = ""     # PEM file; empty means hostname-only certificate checks
    parallelism: int = 8

    def __post_init__(self):
        for name in ("block_rate_threshold", "availability_threshold", "percentile"):
            _fraction(name, getattr(self, name))
        if self.window_days < 1 or self.window_days % 2 == 0:
            raise ConfigError(f"window_days must be a positive odd integer, got {self.window_days}")
        for name in ("as_min_vps", "as_min_days", "curation_window_days", "curation_min_ases",
                     "curation_min_platforms", "parallelism"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.response_wait_ms <= 0:
            raise ConfigError("response_wait_ms must be positive")

    @property
    def half_window(self) -> int:
        return (self.window_days - 1) // 2

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def load_config(path) -> RunConfig:
    """Read a flat ``key = value`` file whose keys mirror :class:`RunConfig`.

    Blank lines and ``#`` comments are ignored; tuple fields take
    comma-separated values.
    """
    hints = _hints(RunConfig)
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        tp = hints[key]
        try:
            if tp is int:
                values[key] = int(value)
            elif tp is float:
                values[key] = float(value)
            elif typing.get_origin(tp) is tuple:
                values[key] = tuple(v.strip() for v in value.split(",") if v.strip())
            else:
                values[key] = value
        except ValueError:
            raise ConfigError(f"{path}:{lineno}: bad value for {key}: {value!r}") from None
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
