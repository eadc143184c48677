"""TLS plumbing for probes and for the simulator's servers.

Two client handshakes are supported over any :class:`~dnescope.netprobe.transport.Stream`:

* :class:`StdlibTLSClient` -- genuine TLS via :mod:`ssl` memory BIOs, with a
  plaintext SNI or none at all.  Certificate problems are recorded on the
  channel instead of aborting, so forged certificates stay observable.
* :class:`EsniTLSClient` -- a TLS-1.3-shaped handshake whose ClientHello
  carries the encrypted_server_name extension (0xffce) and no plaintext SNI.
  Only our own control servers speak it; both ends live in this module.

Servers are push-style (``feed(bytes) -> bytes``) so they can sit behind an
in-process transport or a real socket alike.
"""
from __future__ import annotations

import atexit
import datetime as _dt
import hashlib
import hmac
import os
import shutil
import ssl
import struct
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional

from cryptography import x509
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.x509.oid import NameOID

from dnescope.esni.keys import (
    EXT_ENCRYPTED_SERVER_NAME,
    ClientEncryptedSNI,
    EsniError,
    EsniKeys,
    GROUP_X25519,
    TLS_AES_128_GCM_SHA256,
    esni_seal,
    hkdf_expand_label,
    hkdf_extract,
    open_sni,
    raw_public,
)

CT_ALERT = 21
CT_HANDSHAKE = 22
CT_APPLICATION = 23
HS_CLIENT_HELLO = 1
HS_SERVER_HELLO = 2

EXT_SERVER_NAME = 0x0000
EXT_SUPPORTED_GROUPS = 0x000A
EXT_SIGNATURE_ALGORITHMS = 0x000D
EXT_SUPPORTED_VERSIONS = 0x002B
EXT_KEY_SHARE = 0x0033

OFFERED_SUITES = (0x1301, 0x1302, 0x1303)

ALERT_HANDSHAKE_FAILURE = 40
ALERT_DECRYPT_ERROR = 51
ALERT_UNRECOGNIZED_NAME = 112


class TLSError(Exception):
    """Handshake or record-layer failure that is not a reset or a timeout."""

    def __init__(self, message: str, alert: Optional[int] = None):
        super().__init__(message)
        self.alert = alert


# ---------------------------------------------------------------------------
# ClientHello


def record(content_type: int, payload: bytes) -> bytes:
    return struct.pack("!BHH", content_type, 0x0303, len(payload)) + payload


def _ext(ext_type: int, body: bytes) -> bytes:
    return struct.pack("!HH", ext_type, len(body)) + body


def sni_extension(name: str) -> bytes:
    host = name.encode()
    entry = b"\x00" + struct.pack("!H", len(host)) + host
    return struct.pack("!H", len(entry)) + entry


def key_share_extension(public: bytes) -> bytes:
    entry = struct.pack("!HH", GROUP_X25519, len(public)) + public
    return struct.pack("!H", len(entry)) + entry


def build_client_hello(client_random: bytes, key_share_public: bytes, *,
                       server_name: Optional[str] = None,
                       esni_extension: Optional[bytes] = None,
                       session_id: bytes = b"") -> bytes:
    """ClientHello handshake message (without the record header)."""
    exts = [
        _ext(EXT_SUPPORTED_VERSIONS, b"\x02\x03\x04"),
        _ext(EXT_SUPPORTED_GROUPS, struct.pack("!HH", 2, GROUP_X25519)),
        _ext(EXT_SIGNATURE_ALGORITHMS, struct.pack("!HHH", 4, 0x0403, 0x0804)),
        _ext(EXT_KEY_SHARE, key_share_extension(key_share_public)),
    ]
    if server_name:
        exts.insert(0, _ext(EXT_SERVER_NAME, sni_extension(server_name)))
    if esni_extension is not None:
        exts.append(_ext(EXT_ENCRYPTED_SERVER_NAME, esni_extension))
    ext_blob = b"".join(exts)
    suites = b"".join(struct.pack("!H", s) for s in OFFERED_SUITES)
    body = (struct.pack("!H", 0x0303) + client_random
            + bytes([len(session_id)]) + session_id
            + struct.pack("!H", len(suites)) + suites
            + b"\x01\x00"
            + struct.pack("!H", len(ext_blob)) + ext_blob)
    return struct.pack("!B", HS_CLIENT_HELLO) + len(body).to_bytes(3, "big") + body


@dataclass
class ClientHelloInfo:
    random: bytes
    cipher_suites: tuple[int, ...]
    extensions: dict[int, bytes]
    handshake: bytes = field(repr=False)

    @property
    def sni(self) -> Optional[str]:
        body = self.extensions.get(EXT_SERVER_NAME)
        if not body or len(body) < 5:
            return None
        pos = 2
        while pos + 3 <= len(body):
            kind = body[pos]
            (n,) = struct.unpack("!H", body[pos + 1:pos + 3])
            if kind == 0:
                return body[pos + 3:pos + 3 + n].decode("ascii", errors="replace").lower()
            pos += 3 + n
        return None

    @property
    def has_esni(self) -> bool:
        return EXT_ENCRYPTED_SERVER_NAME in self.extensions

    def key_share(self) -> Optional[bytes]:
        body = self.extensions.get(EXT_KEY_SHARE)
        if not body:
            return None
        pos = 2
        while pos + 4 <= len(body):
            group, n = struct.unpack("!HH", body[pos:pos + 4])
            if group == GROUP_X25519:
                return body[pos + 4:pos + 4 + n]
            pos += 4 + n
        return None


def split_record(buf: bytes) -> Optional[tuple[int, bytes, bytes]]:
    """``(content_type, payload, rest)`` if ``buf`` starts with a full record."""
    if len(buf) < 5:
        return None
    ctype, _ver, n = struct.unpack("!BHH", buf[:5])
    if len(buf) < 5 + n:
        return None
    return ctype, buf[5:5 + n], buf[5 + n:]


def parse_client_hello(data: bytes) -> Optional[ClientHelloInfo]:
    """Parse the first TLS record of a stream; ``None`` if it is no ClientHello."""
    rec = split_record(data)
    if rec is None or rec[0] != CT_HANDSHAKE:
        return None
    hs = rec[1]
    try:
        if hs[0] != HS_CLIENT_HELLO:
            return None
        n = int.from_bytes(hs[1:4], "big")
        body = hs[4:4 + n]
        pos = 2 + 32
        random = body[2:34]
        sid_len = body[pos]
        pos += 1 + sid_len
        (cs_len,) = struct.unpack("!H", body[pos:pos + 2])
        suites = struct.unpack(f"!{cs_len // 2}H", body[pos + 2:pos + 2 + cs_len])
        pos += 2 + cs_len
        pos += 1 + body[pos]
        exts = {}
        if pos + 2 <= len(body):
            (ext_len,) = struct.unpack("!H", body[pos:pos + 2])
            pos += 2
            end = pos + ext_len
            while pos + 4 <= end:
                etype, elen = struct.unpack("!HH", body[pos:pos + 4])
                exts[etype] = body[pos + 4:pos + 4 + elen]
                pos += 4 + elen
    except (IndexError, struct.error):
        return None
    return ClientHelloInfo(random, tuple(suites), exts, hs[:4 + n])


# ---------------------------------------------------------------------------
# channels


class RecordReader:
    """Accumulates stream bytes and yields whole TLS records."""

    def __init__(self, stream, timeout_ms: int):
        self.stream = stream
        self.timeout_ms = timeout_ms
        self.buf = b""

    def next(self) -> tuple[int, bytes]:
        while True:
            rec = split_record(self.buf)
            if rec is not None:
                self.buf = rec[2]
                return rec[0], rec[1]
            chunk = self.stream.recv(65536, self.timeout_ms)
            if not chunk:
                raise ConnectionResetError("connection closed during TLS exchange")
            self.buf += chunk


class PlainChannel:
    """Cleartext TCP with the same surface as the TLS channels."""

    used_esni = False
    cert_ok: Optional[bool] = None
    cert_detail = ""

    def __init__(self, stream, timeout_ms: int):
        self.stream = stream
        self.timeout_ms = timeout_ms

    def send(self, data: bytes) -> None:
        self.stream.send(data)

    def recv(self) -> bytes:
        return self.stream.recv(65536, self.timeout_ms)


def _dns_names(cert: x509.Certificate) -> list[str]:
    try:
        san = cert.extensions.get_extension_for_class(x509.SubjectAlternativeName)
        return [n.lower() for n in san.value.get_values_for_type(x509.DNSName)]
    except x509.ExtensionNotFound:
        return []


def name_matches(name: str, patterns) -> bool:
    name = name.lower().rstrip(".")
    for pat in patterns:
        if pat == name:
            return True
        if pat.startswith("*.") and name.count(".") == pat.count(".") and name.endswith(pat[1:]):
            return True
    return False


def check_certificate(der: Optional[bytes], server_name: Optional[str],
                      trust: Optional[list[x509.Certificate]]) -> tuple[bool, str]:
    if not der:
        return False, "no certificate"
    cert = x509.load_der_x509_certificate(der)
    names = _dns_names(cert)
    if server_name and not name_matches(server_name, names):
        return False, f"name mismatch: {server_name} not in {names}"
    if trust is None:
        return True, "hostname ok; chain not checked"
    for anchor in trust:
        if anchor.subject != cert.issuer:
            continue
        try:
            anchor.public_key().verify(cert.signature, cert.tbs_certificate_bytes,
                                       ec.ECDSA(cert.signature_hash_algorithm))
            return True, "ok"
        except (InvalidSignature, TypeError, AttributeError):
            continue
    return False, f"untrusted issuer {cert.issuer.rfc4514_string()}"


class StdlibTLSClient:
    """Real TLS client on memory BIOs, usable over any stream."""

    used_esni = False

    def __init__(self, stream, server_name: Optional[str], timeout_ms: int, *,
                 trust: Optional[list[x509.Certificate]] = None,
                 alpn: Optional[list[str]] = None):
        self.stream = stream
        self.server_name = server_name
        self.timeout_ms = timeout_ms
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_CLIENT)
        ctx.check_hostname = False
        ctx.verify_mode = ssl.CERT_NONE
        ctx.minimum_version = ssl.TLSVersion.TLSv1_2
        if alpn:
            ctx.set_alpn_protocols(alpn)
        self._in = ssl.MemoryBIO()
        self._out = ssl.MemoryBIO()
        self._obj = ctx.wrap_bio(self._in, self._out, server_side=False,
                                 server_hostname=server_name or None)
        self._trust = trust
        self.cert_ok: Optional[bool] = None
        self.cert_detail = ""

    def _flush(self):
        data = self._out.read()
        if data:
            self.stream.send(data)

    def _pull(self):
        data = self.stream.recv(65536, self.timeout_ms)
        if not data:
            self._in.write_eof()
            raise ConnectionResetError("connection closed by peer")
        self._in.write(data)

    def handshake(self) -> None:
        while True:
            try:
                self._obj.do_handshake()
                break
            except ssl.SSLWantReadError:
                self._flush()
                self._pull()
            except ssl.SSLError as exc:
                raise TLSError(f"TLS handshake failed: {exc.reason or exc}") from None
        self._flush()
        self.cert_ok, self.cert_detail = check_certificate(
            self._obj.getpeercert(binary_form=True), self.server_name, self._trust)

    def send(self, data: bytes) -> None:
        self._obj.write(data)
        self._flush()

    def recv(self) -> bytes:
        while True:
            try:
                return self._obj.read(65536)
            except ssl.SSLWantReadError:
                self._flush()
                self._pull()
            except ssl.SSLZeroReturnError:
                return b""
            except ssl.SSLError as exc:
                raise TLSError(f"TLS read failed: {exc.reason or exc}") from None


def _nonce(iv: bytes, seq: int) -> bytes:
    return bytes(a ^ b for a, b in zip(iv, seq.to_bytes(12, "big")))


@dataclass
class _Keys:
    key: bytes
    iv: bytes
    seq: int = 0

    def seal(self, data: bytes) -> bytes:
        out = AESGCM(self.key).encrypt(_nonce(self.iv, self.seq), data, None)
        self.seq += 1
        return out

    def open(self, data: bytes) -> bytes:
        try:
            out = AESGCM(self.key).decrypt(_nonce(self.iv, self.seq), data, None)
        except InvalidTag:
            raise TLSError("record authentication failed", ALERT_DECRYPT_ERROR) from None
        self.seq += 1
        return out


def _schedule(shared: bytes, transcript: bytes):
    secret = hkdf_extract(hashlib.sha256(transcript).digest(), shared)
    client = _Keys(hkdf_expand_label(secret, "c ap key", b"", 16), hkdf_expand_label(secret, "c ap iv", b"", 12))
    server = _Keys(hkdf_expand_label(secret, "s ap key", b"", 16), hkdf_expand_label(secret, "s ap iv", b"", 12))
    finished_key = hkdf_expand_label(secret, "finished", b"", 32)
    return client, server, finished_key


def _server_hello(random: bytes, public: bytes) -> bytes:
    exts = (_ext(EXT_SUPPORTED_VERSIONS, b"\x03\x04")
            + _ext(EXT_KEY_SHARE, struct.pack("!HH", GROUP_X25519, len(public)) + public))
    body = (struct.pack("!H", 0x0303) + random + b"\x00"
            + struct.pack("!H", TLS_AES_128_GCM_SHA256) + b"\x00"
            + struct.pack("!H", len(exts)) + exts)
    return struct.pack("!B", HS_SERVER_HELLO) + len(body).to_bytes(3, "big") + body


def _parse_server_hello(hs: bytes) -> bytes:
    if not hs or hs[0] != HS_SERVER_HELLO:
        raise TLSError("expected ServerHello")
    body = hs[4:]
    try:
        pos = 2 + 32
        pos += 1 + body[pos]
        pos += 2 + 1
        (ext_len,) = struct.unpack("!H", body[pos:pos + 2])
        pos += 2
        end = pos + ext_len
        while pos + 4 <= end:
            etype, elen = struct.unpack("!HH", body[pos:pos + 4])
            if etype == EXT_KEY_SHARE:
                group, n = struct.unpack("!HH", body[pos + 4:pos + 8])
                if group == GROUP_X25519 and n == 32:
                    return body[pos + 8:pos + 8 + n]
            pos += 4 + elen
    except (IndexError, struct.error):
        pass
    raise TLSError("ServerHello without X25519 key share")


def _alert_of(payload: bytes) -> int:
    return payload[1] if len(payload) >= 2 else 0


class EsniTLSClient:
    """Client half of the ESNI handshake; the protected name never appears in clear."""

    used_esni = True

    def __init__(self, stream, server_name: str, esni_keys: EsniKeys, timeout_ms: int, *,
                 now: Optional[float] = None):
        self.stream = stream
        self.server_name = server_name
        self.keys = esni_keys
        self.timeout_ms = timeout_ms
        self.now = now
        self.reader = RecordReader(stream, timeout_ms)
        self.cert_ok: Optional[bool] = None
        self.cert_detail = ""
        self._client: Optional[_Keys] = None
        self._server: Optional[_Keys] = None

    def handshake(self) -> None:
        client_random = os.urandom(32)
        eph = X25519PrivateKey.generate()
        pub = raw_public(eph.public_key())
        nonce = os.urandom(16)
        ext = esni_seal(self.keys, self.server_name, client_random, X25519PrivateKey.generate(),
                        nonce=nonce, aad=key_share_extension(pub), now=self.now)
        ch = build_client_hello(client_random, pub, esni_extension=ext, session_id=os.urandom(32))
        self.stream.send(record(CT_HANDSHAKE, ch))

        ctype, payload = self.reader.next()
        if ctype == CT_ALERT:
            raise TLSError("server alert", _alert_of(payload))
        if ctype != CT_HANDSHAKE:
            raise TLSError(f"unexpected record type {ctype}")
        server_pub = _parse_server_hello(payload)
        shared = eph.exchange(X25519PublicKey.from_public_bytes(server_pub))
        self._client, self._server, fkey = _schedule(shared, ch + payload)

        ctype, enc = self.reader.next()
        if ctype == CT_ALERT:
            raise TLSError("server alert", _alert_of(enc))
        flight = self._server.open(enc)
        echoed, names, finished = _unpack_flight(flight)
        expected = hmac.new(fkey, hashlib.sha256(ch + payload + echoed + names).digest(),
                            hashlib.sha256).digest()
        if not hmac.compare_digest(finished, expected):
            raise TLSError("bad server Finished", ALERT_DECRYPT_ERROR)
        if echoed != nonce:
            raise TLSError("server did not echo the ESNI nonce", ALERT_HANDSHAKE_FAILURE)
        served = names.decode().split(",") if names else []
        if name_matches(self.server_name, served):
            self.cert_ok, self.cert_detail = True, "ok"
        else:
            self.cert_ok, self.cert_detail = False, f"name mismatch: {self.server_name} not in {served}"

    def send(self, data: bytes) -> None:
        self.stream.send(record(CT_APPLICATION, self._client.seal(data)))

    def recv(self) -> bytes:
        try:
            ctype, payload = self.reader.next()
        except ConnectionResetError:
            if self.reader.buf:
                raise
            return b""
        if ctype == CT_ALERT:
            return b""
        return self._server.open(payload)


def _pack_flight(nonce: bytes, names: bytes, finished: bytes) -> bytes:
    return (struct.pack("!B", len(nonce)) + nonce + struct.pack("!H", len(names)) + names + finished)


def _unpack_flight(flight: bytes) -> tuple[bytes, bytes, bytes]:
    try:
        n = flight[0]
        nonce = flight[1:1 + n]
        (m,) = struct.unpack("!H", flight[1 + n:3 + n])
        names = flight[3 + n:3 + n + m]
        finished = flight[3 + n + m:]
    except (IndexError, struct.error):
        raise TLSError("malformed server flight") from None
    if len(finished) != 32:
        raise TLSError("malformed server flight")
    return nonce, names, finished


# ---------------------------------------------------------------------------
# servers

App = Callable[[bytes], bytes]
AppFactory = Callable[[Optional[str]], Optional["AppConn"]]


class AppConn:
    """Plaintext application endpoint behind a (TLS) server connection."""

    closed = False

    def feed(self, data: bytes) -> bytes:
        raise NotImplementedError


class CertAuthority:
    """Throwaway CA issuing ECDSA leaf certificates on demand.

    :mod:`ssl` only loads key material from files, so issued pairs are
    written to a private temp directory removed at interpreter exit.
    """

    def __init__(self, common_name: str = "dnescope sim CA"):
        self.key = ec.generate_private_key(ec.SECP256R1())
        subject = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, common_name)])
        now = _dt.datetime(2020, 1, 1, tzinfo=_dt.timezone.utc)
        self.cert = (
            x509.CertificateBuilder()
            .subject_name(subject).issuer_name(subject)
            .public_key(self.key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now).not_valid_after(now + _dt.timedelta(days=3650 * 3))
            .add_extension(x509.BasicConstraints(ca=True, path_length=0), critical=True)
            .sign(self.key, hashes.SHA256())
        )
        self._dir = tempfile.mkdtemp(prefix="dnescope-ca-")
        atexit.register(shutil.rmtree, self._dir, True)
        self._contexts: dict[tuple[str, ...], ssl.SSLContext] = {}
        self._leaf_key = ec.generate_private_key(ec.SECP256R1())
        self._lock = threading.Lock()

    def server_context(self, names: tuple[str, ...]) -> ssl.SSLContext:
        with self._lock:
            ctx = self._contexts.get(names)
            if ctx is None:
                ctx = self._make_context(names)
                self._contexts[names] = ctx
            return ctx

    def _make_context(self, names: tuple[str, ...]) -> ssl.SSLContext:
        now = _dt.datetime(2020, 1, 1, tzinfo=_dt.timezone.utc)
        leaf = (
            x509.CertificateBuilder()
            .subject_name(x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, names[0])]))
            .issuer_name(self.cert.subject)
            .public_key(self._leaf_key.public_key())
            .serial_number(x509.random_serial_number())
            .not_valid_before(now).not_valid_after(now + _dt.timedelta(days=3650 * 3))
            .add_extension(x509.SubjectAlternativeName([x509.DNSName(n) for n in names]), critical=False)
            .sign(self.key, hashes.SHA256())
        )
        stem = os.path.join(self._dir, hashlib.sha1("|".join(names).encode()).hexdigest())
        with open(stem + ".crt", "wb") as fh:
            fh.write(leaf.public_bytes(serialization.Encoding.PEM))
        with open(stem + ".key", "wb") as fh:
            fh.write(self._leaf_key.private_bytes(serialization.Encoding.PEM,
                                                  serialization.PrivateFormat.PKCS8,
                                                  serialization.NoEncryption()))
        ctx = ssl.SSLContext(ssl.PROTOCOL_TLS_SERVER)
        ctx.load_cert_chain(stem + ".crt", stem + ".key")
        ctx.set_alpn_protocols(["http/1.1", "dot"])
        ctx.sni_callback = _sni_dispatch
        return ctx


def _sni_dispatch(obj, name, _ctx):
    hook = getattr(obj, "_sni_hook", None)
    if hook is not None:
        hook(obj, name)


class StdlibTLSServerConn:
    """Server side of :class:`StdlibTLSClient`.

    ``cert_names(sni)`` picks the names the presented certificate covers;
    ``app_factory(sni)`` builds the plaintext application once the
    handshake completes.
    """

    def __init__(self, ca: CertAuthority, cert_names: Callable[[Optional[str]], tuple[str, ...]],
                 app_factory: AppFactory):
        self.ca = ca
        self.cert_names = cert_names
        self.app_factory = app_factory
        self.sni: Optional[str] = None
        self._in = ssl.MemoryBIO()
        self._out = ssl.MemoryBIO()
        self._obj = ca.server_context(cert_names(None)).wrap_bio(self._in, self._out, server_side=True)
        self._obj._sni_hook = self._on_sni
        self._app: Optional[AppConn] = None
        self._done = False
        self.closed = False

    def _on_sni(self, obj, name):
        self.sni = name.lower() if name else None
        obj.context = self.ca.server_context(self.cert_names(self.sni))

    def feed(self, data: bytes) -> bytes:
        if self.closed:
            return b""
        self._in.write(data)
        if not self._done:
            try:
                self._obj.do_handshake()
                self._done = True
                self._app = self.app_factory(self.sni)
                if self._app is None:
                    self.closed = True
            except ssl.SSLWantReadError:
                return self._out.read()
            except ssl.SSLError:
                self.closed = True
                return self._out.read()
        plain = b""
        while True:
            try:
                chunk = self._obj.read(65536)
            except (ssl.SSLWantReadError, ssl.SSLZeroReturnError):
                break
            except ssl.SSLError:
                self.closed = True
                break
            if not chunk:
                break
            plain += chunk
        if plain and self._app is not None:
            resp = self._app.feed(plain)
            if resp:
                self._obj.write(resp)
            if self._app.closed:
                try:
                    self._obj.unwrap()
                except ssl.SSLError:
                    pass
                self.closed = True
        return self._out.read()


class EsniTLSServerConn:
    """Server side of :class:`EsniTLSClient`.

    ``esni_keys`` maps record digests to ``(private key, EsniKeys)``;
    ``hosted(name)`` tells whether we serve the decrypted name.
    """

    def __init__(self, esni_keys: dict[bytes, tuple[X25519PrivateKey, EsniKeys]],
                 hosted: Callable[[str], bool], app_factory: AppFactory):
        self.esni_keys = esni_keys
        self.hosted = hosted
        self.app_factory = app_factory
        self.buf = b""
        self.server_name: Optional[str] = None
        self.closed = False
        self._client: Optional[_Keys] = None
        self._server: Optional[_Keys] = None
        self._app: Optional[AppConn] = None

    def _alert(self, code: int) -> bytes:
        self.closed = True
        return record(CT_ALERT, bytes([2, code]))

    def feed(self, data: bytes) -> bytes:
        if self.closed:
            return b""
        self.buf += data
        out = b""
        while not self.closed:
            rec = split_record(self.buf)
            if rec is None:
                break
            ctype, payload, self.buf = rec
            if self._client is None:
                out += self._handshake(ctype, payload)
            elif ctype == CT_APPLICATION:
                try:
                    plain = self._client.open(payload)
                except TLSError:
                    return out + self._alert(ALERT_DECRYPT_ERROR)
                resp = self._app.feed(plain) if self._app else b""
                if resp:
                    out += record(CT_APPLICATION, self._server.seal(resp))
                if self._app is None or self._app.closed:
                    self.closed = True
            else:
                self.closed = True
        return out

    def _handshake(self, ctype: int, payload: bytes) -> bytes:
        if ctype != CT_HANDSHAKE:
            return self._alert(ALERT_HANDSHAKE_FAILURE)
        info = parse_client_hello(record(ctype, payload))
        if info is None or not info.has_esni:
            return self._alert(ALERT_HANDSHAKE_FAILURE)
        client_pub = info.key_share()
        if client_pub is None or len(client_pub) != 32:
            return self._alert(ALERT_HANDSHAKE_FAILURE)
        ext = info.extensions[EXT_ENCRYPTED_SERVER_NAME]
        try:
            digest = ClientEncryptedSNI.from_bytes(ext).record_digest
        except EsniError:
            return self._alert(ALERT_DECRYPT_ERROR)
        entry = self.esni_keys.get(digest)
        if entry is None:
            return self._alert(ALERT_DECRYPT_ERROR)
        private, keys = entry
        try:
            name, nonce = open_sni(private, ext, info.random, keys=keys,
                                   aad=key_share_extension(client_pub))
        except EsniError:
            return self._alert(ALERT_DECRYPT_ERROR)
        if not self.hosted(name):
            return self._alert(ALERT_UNRECOGNIZED_NAME)
        self.server_name = name
        eph = X25519PrivateKey.generate()
        sh = _server_hello(os.urandom(32), raw_public(eph.public_key()))
        shared = eph.exchange(X25519PublicKey.from_public_bytes(client_pub))
        self._client, self._server, fkey = _schedule(shared, info.handshake + sh)
        names = name.encode()
        finished = hmac.new(fkey, hashlib.sha256(info.handshake + sh + nonce + names).digest(),
                            hashlib.sha256).digest()
        self._app = self.app_factory(name)
        return record(CT_HANDSHAKE, sh) + record(CT_APPLICATION,
                                                 self._server.seal(_pack_flight(nonce, names, finished)))
