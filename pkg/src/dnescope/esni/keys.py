"""ESNIKeys records (draft-02 layout) and SNI sealing for the control handshake.

Wire layout of a record, all integers big-endian::

    uint16 version                      0xff01
    uint8  checksum[4]                  SHA-256(record with checksum zeroed)[:4]
    KeyShareEntry keys<4..2^16-1>       (uint16 group, opaque key<1..2^16-1>)
    CipherSuite cipher_suites<2..2^16-2>
    uint16 padded_length
    uint64 not_before, not_after        POSIX seconds
    Extension extensions<0..2^16-1>

A record with a single X25519 share and one suite is 68 bytes, 92 base64
characters.
"""
from __future__ import annotations

import base64
import binascii
import hashlib
import hmac
import os
import struct
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

ESNI_VERSION = 0xFF01
GROUP_X25519 = 0x001D
TLS_AES_128_GCM_SHA256 = 0x1301
EXT_ENCRYPTED_SERVER_NAME = 0xFFCE
NONCE_LEN = 16
DEFAULT_PADDED_LENGTH = 260


class EsniFormatError(ValueError):
    """A TXT payload that is not a well-formed ESNIKeys record.

    ``reason`` is one of ``bad_base64``, ``short_buffer``, ``bad_version``,
    ``checksum``, ``no_key_shares``, ``no_cipher_suites``, ``validity``,
    ``trailing_data``.
    """

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


class EsniError(ValueError):
    """Seal/open failure: ``expired``, ``name_too_long``, ``unsupported``,
    ``unknown_keys`` or ``auth_failed``."""

    def __init__(self, reason: str, message: str = ""):
        super().__init__(message or reason)
        self.reason = reason


@dataclass(frozen=True)
class KeyShare:
    group: int
    key_exchange: bytes

    def to_bytes(self) -> bytes:
        return struct.pack("!HH", self.group, len(self.key_exchange)) + self.key_exchange


@dataclass(frozen=True)
class EsniKeys:
    version: int
    checksum: bytes
    key_shares: tuple[KeyShare, ...]
    cipher_suites: tuple[int, ...]
    padded_length: int
    not_before: int
    not_after: int
    extensions: bytes = b""

    def to_bytes(self, checksum: Optional[bytes] = None) -> bytes:
        shares = b"".join(k.to_bytes() for k in self.key_shares)
        suites = b"".join(struct.pack("!H", s) for s in self.cipher_suites)
        return b"".join((
            struct.pack("!H", self.version),
            self.checksum if checksum is None else checksum,
            struct.pack("!H", len(shares)), shares,
            struct.pack("!H", len(suites)), suites,
            struct.pack("!HQQ", self.padded_length, self.not_before, self.not_after),
            struct.pack("!H", len(self.extensions)), self.extensions,
        ))

    def to_text(self) -> str:
        return base64.b64encode(self.to_bytes()).decode("ascii")

    def compute_checksum(self) -> bytes:
        return hashlib.sha256(self.to_bytes(checksum=b"\0\0\0\0")).digest()[:4]

    def digest(self) -> bytes:
        """``record_digest`` a client puts in its extension."""
        return hashlib.sha256(self.to_bytes()).digest()

    def x25519_share(self) -> Optional[KeyShare]:
        for ks in self.key_shares:
            if ks.group == GROUP_X25519 and len(ks.key_exchange) == 32:
                return ks
        return None

    def valid_at(self, when: float) -> bool:
        return self.not_before <= when <= self.not_after


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise EsniFormatError("short_buffer", f"need {n} bytes at offset {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("!H", self.take(2))[0]

    def u64(self) -> int:
        return struct.unpack("!Q", self.take(8))[0]

    def vec16(self) -> bytes:
        return self.take(self.u16())

    @property
    def done(self) -> bool:
        return self.pos == len(self.buf)


def decode_esni_keys(raw: bytes) -> EsniKeys:
    r = _Reader(raw)
    version = r.u16()
    if version != ESNI_VERSION:
        raise EsniFormatError("bad_version", f"version 0x{version:04x}")
    checksum = r.take(4)
    shares_raw = _Reader(r.vec16())
    shares = []
    while not shares_raw.done:
        group = shares_raw.u16()
        shares.append(KeyShare(group, shares_raw.vec16()))
    suites_raw = r.vec16()
    if len(suites_raw) % 2:
        raise EsniFormatError("short_buffer", "odd cipher_suites length")
    suites = tuple(struct.unpack(f"!{len(suites_raw) // 2}H", suites_raw))
    padded_length = r.u16()
    not_before = r.u64()
    not_after = r.u64()
    extensions = r.vec16()
    if not r.done:
        raise EsniFormatError("trailing_data", f"{len(raw) - r.pos} trailing bytes")
    keys = EsniKeys(version, checksum, tuple(shares), suites, padded_length,
                    not_before, not_after, extensions)
    if keys.compute_checksum() != checksum:
        raise EsniFormatError("checksum", "checksum mismatch")
    if not shares:
        raise EsniFormatError("no_key_shares")
    if not suites:
        raise EsniFormatError("no_cipher_suites")
    if not_before > not_after:
        raise EsniFormatError("validity", "not_before after not_after")
    return keys


def parse_esni_keys(b64_txt: str) -> EsniKeys:
    try:
        raw = base64.b64decode(b64_txt.strip(), validate=True)
    except (binascii.Error, ValueError):
        raise EsniFormatError("bad_base64") from None
    return decode_esni_keys(raw)


def generate_esni_keys(public_key: bytes, validity: tuple[int, int],
                       padded_length: int = DEFAULT_PADDED_LENGTH,
                       cipher_suites: tuple[int, ...] = (TLS_AES_128_GCM_SHA256,),
                       extensions: bytes = b"") -> tuple[EsniKeys, str]:
    if len(public_key) != 32:
        raise ValueError("X25519 public key must be 32 bytes")
    not_before, not_after = (int(v) for v in validity)
    if not_before > not_after:
        raise ValueError("validity window out of order")
    if not 0 < padded_length <= 0xFFFF:
        raise ValueError("padded_length out of range")
    keys = EsniKeys(ESNI_VERSION, b"\0\0\0\0", (KeyShare(GROUP_X25519, bytes(public_key)),),
                    tuple(cipher_suites), padded_length, not_before, not_after, extensions)
    keys = replace(keys, checksum=keys.compute_checksum())
    return keys, keys.to_text()


def raw_public(key: X25519PublicKey) -> bytes:
    return key.public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)


# ---------------------------------------------------------------------------
# sealing


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.new(salt or b"\0" * 32, ikm, hashlib.sha256).digest()


def hkdf_expand_label(secret: bytes, label: str, context: bytes, length: int) -> bytes:
    full = b"tls13 " + label.encode()
    info = struct.pack("!HB", length, len(full)) + full + struct.pack("!B", len(context)) + context
    return HKDFExpand(hashes.SHA256(), length, info).derive(secret)


@dataclass(frozen=True)
class ClientEncryptedSNI:
    suite: int
    key_share: KeyShare
    record_digest: bytes
    encrypted_sni: bytes

    def to_bytes(self) -> bytes:
        return (struct.pack("!H", self.suite) + self.key_share.to_bytes()
                + struct.pack("!H", len(self.record_digest)) + self.record_digest
                + struct.pack("!H", len(self.encrypted_sni)) + self.encrypted_sni)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ClientEncryptedSNI":
        try:
            r = _Reader(raw)
            suite = r.u16()
            group = r.u16()
            share = KeyShare(group, r.vec16())
            digest = r.vec16()
            enc = r.vec16()
        except EsniFormatError:
            raise EsniError("auth_failed", "truncated encrypted_server_name extension") from None
        if not r.done:
            raise EsniError("auth_failed", "trailing bytes in extension")
        return cls(suite, share, digest, enc)


def _key_iv(shared: bytes, record_digest: bytes, esni_share: KeyShare, client_random: bytes):
    zx = hkdf_extract(b"", shared)
    contents = (struct.pack("!H", len(record_digest)) + record_digest
                + esni_share.to_bytes() + client_random)
    context = hashlib.sha256(contents).digest()
    return hkdf_expand_label(zx, "esni key", context, 16), hkdf_expand_label(zx, "esni iv", context, 12)


def esni_seal(keys: EsniKeys, server_name: str, client_random: bytes,
              client_ephemeral: X25519PrivateKey, *, nonce: Optional[bytes] = None,
              aad: bytes = b"", now: Optional[float] = None) -> bytes:
    """Encrypt ``server_name`` under ``keys``; returns the 0xffce extension body.

    The inner plaintext is ``nonce || uint16 len || name || zeros`` padded to
    ``padded_length`` name bytes, so every name under one record yields the
    same ciphertext length.
    """
    when = time.time() if now is None else now
    if not keys.valid_at(when):
        raise EsniError("expired", "ESNI keys outside their validity window")
    name = server_name.encode("idna") if not server_name.isascii() else server_name.encode()
    if len(name) > keys.padded_length:
        raise EsniError("name_too_long", f"{len(name)} > padded_length {keys.padded_length}")
    share = keys.x25519_share()
    if share is None or TLS_AES_128_GCM_SHA256 not in keys.cipher_suites:
        raise EsniError("unsupported", "need an X25519 share and TLS_AES_128_GCM_SHA256")
    if len(client_random) != 32:
        raise ValueError("client_random must be 32 bytes")
    nonce = os.urandom(NONCE_LEN) if nonce is None else nonce
    if len(nonce) != NONCE_LEN:
        raise ValueError("nonce must be 16 bytes")

    shared = client_ephemeral.exchange(X25519PublicKey.from_public_bytes(share.key_exchange))
    client_share = KeyShare(GROUP_X25519, raw_public(client_ephemeral.public_key()))
    record_digest = keys.digest()
    key, iv = _key_iv(shared, record_digest, client_share, client_random)
    inner = nonce + struct.pack("!H", len(name)) + name + bytes(keys.padded_length - len(name))
    sealed = AESGCM(key).encrypt(iv, inner, aad)
    return ClientEncryptedSNI(TLS_AES_128_GCM_SHA256, client_share, record_digest, sealed).to_bytes()


def open_sni(server_private: X25519PrivateKey, extension: bytes, client_random: bytes, *,
             keys: Optional[EsniKeys] = None, aad: bytes = b"") -> tuple[str, bytes]:
    """Server side of :func:`esni_seal`; returns ``(server_name, nonce)``."""
    ext = ClientEncryptedSNI.from_bytes(extension)
    if keys is not None and not hmac.compare_digest(ext.record_digest, keys.digest()):
        raise EsniError("unknown_keys", "record_digest does not match our ESNIKeys")
    if ext.suite != TLS_AES_128_GCM_SHA256 or ext.key_share.group != GROUP_X25519 \
            or len(ext.key_share.key_exchange) != 32:
        raise EsniError("unsupported")
    shared = server_private.exchange(X25519PublicKey.from_public_bytes(ext.key_share.key_exchange))
    key, iv = _key_iv(shared, ext.record_digest, ext.key_share, client_random)
    try:
        inner = AESGCM(key).decrypt(iv, ext.encrypted_sni, aad)
    except InvalidTag:
        raise EsniError("auth_failed", "AEAD authentication failed") from None
    if len(inner) < NONCE_LEN + 2:
        raise EsniError("auth_failed", "inner plaintext too short")
    nonce = inner[:NONCE_LEN]
    (n,) = struct.unpack("!H", inner[NONCE_LEN:NONCE_LEN + 2])
    name = inner[NONCE_LEN + 2:NONCE_LEN + 2 + n]
    if len(name) != n or any(inner[NONCE_LEN + 2 + n:]):
        raise EsniError("auth_failed", "malformed padding")
    return name.decode("ascii", errors="replace"), nonce


def esni_open(server_private: X25519PrivateKey, extension: bytes, client_random: bytes, *,
              keys: Optional[EsniKeys] = None, aad: bytes = b"") -> str:
    return open_sni(server_private, extension, client_random, keys=keys, aad=aad)[0]


@dataclass
class EsniServerKeys:
    """A private key together with its published record."""

    private: X25519PrivateKey
    keys: EsniKeys
    text: str = field(repr=False, default="")

    @classmethod
    def create(cls, not_before: int, not_after: int, padded_length: int = DEFAULT_PADDED_LENGTH,
               private: Optional[X25519PrivateKey] = None) -> "EsniServerKeys":
        private = private or X25519PrivateKey.generate()
        keys, text = generate_esni_keys(raw_public(private.public_key()), (not_before, not_after),
                                        padded_length)
        return cls(private, keys, text)
