"""Cryptographic primitives shared by the handshake, session and identity layers.

Key agreement (MODP-2048/256 finite-field DH and ECDH over P-256), ECDSA
P-256 signatures, HKDF-SHA256, AES-GCM / GMAC and an HMAC-DRBG.  Nothing in
here touches the network or the filesystem.

AES and the elliptic-curve arithmetic come from ``cryptography``; HKDF, the
DRBG and the finite-field group are implemented here.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import os
from dataclasses import dataclass
from typing import Callable, Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import ec
from cryptography.hazmat.primitives.asymmetric.utils import (
    decode_dss_signature,
    encode_dss_signature,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

HASH_LEN = 32
IV_LEN = 12
TAG_LEN = 16
SIGNATURE_LEN = 64
P256_PUBLIC_LEN = 65

# Order of the P-256 base point.
P256_ORDER = 0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551


class CryptoError(Exception):
    """Base class for errors raised by this module."""


class InvalidPeerPublic(CryptoError):
    pass


class MalformedSignature(CryptoError):
    pass


class OutputTooLong(CryptoError):
    pass


class AuthenticationFailure(CryptoError):
    pass


class ReseedRequired(CryptoError):
    pass


class Suite(enum.Enum):
    DH_MODP_2048_256 = "DH+MODP-2048-256"
    ECDH_P256 = "ECDH+prime256v1-CEUM"

    @property
    def wire_id(self) -> int:
        return _SUITE_IDS[self]

    @classmethod
    def from_wire_id(cls, value: int) -> "Suite":
        for suite, ident in _SUITE_IDS.items():
            if ident == value:
                return suite
        raise ValueError(f"unknown suite id {value:#x}")


_SUITE_IDS = {Suite.DH_MODP_2048_256: 0x01, Suite.ECDH_P256: 0x02}


@dataclass(frozen=True)
class ModpGroup:
    """A finite-field DH group: prime modulus, generator and subgroup order."""

    p: int
    g: int
    q: int

    @property
    def element_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def encode(self, value: int) -> bytes:
        return value.to_bytes(self.element_len, "big")


# RFC 5114 section 2.3.
MODP_2048_256 = ModpGroup(
    p=int(
        "87A8E61DB4B6663CFFBBD19C651959998CEEF608660DD0F25D2CEED4435E3B00"
        "E00DF8F1D61957D4FAF7DF4561B2AA3016C3D91134096FAA3BF4296D830E9A7C"
        "209E0C6497517ABD5A8A9D306BCF67ED91F9E6725B4758C022E0B1EF4275BF7B"
        "6C5BFC11D45F9088B941F54EB1E59BB8BC39A0BF12307F5C4FDB70C581B23F76"
        "B63ACAE1CAA6B7902D52526735488A0EF13C6D9A51BFA4AB3AD8347796524D8E"
        "F6A167B5A41825D967E144E5140564251CCACB83E6B486F6B3CA3F7971506026"
        "C0B857F689962856DED4010ABD0BE621C3A3960A54E710C375F26375D7014103"
        "A4B54330C198AF126116D2276E11715F693877FAD7EF09CADB094AE91E1A1597",
        16,
    ),
    g=int(
        "3FB32C9B73134D0B2E77506660EDBD484CA7B18F21EF205407F4793A1A0BA125"
        "10DBC15077BE463FFF4FED4AAC0BB555BE3A6C1B0C6B47B1BC3773BF7E8C6F62"
        "901228F8C28CBB18A55AE31341000A650196F931C77A57F2DDF463E5E9EC144B"
        "777DE62AAAB8A8628AC376D282D6ED3864E67982428EBC831D14348F6F2F9193"
        "B5045AF2767164E1DFC967C1FB3F2E55A4BD1BFFE83B9C80D052B985D182EA0A"
        "DB2A3B7313D3FE14C8484B1E052588B9B7D2BBD2DF016199ECD06E1557CD0915"
        "B3353BBB64E0EC377FD028370DF92B52C7891428CDC67EB6184B523D1DB246C3"
        "2F63078490F00EF8D647D148D47954515E2327CFEF98C582664B4C0F6CC41659",
        16,
    ),
    q=0x8CF83642A709A097B447997640129DA299B1A47D1EB3750BA308B0FE64F5FBD3,
)


# --------------------------------------------------------------------------
# HMAC-DRBG (SHA-256)

RESEED_INTERVAL = 1 << 48
MAX_BYTES_PER_REQUEST = 1 << 16
SECURITY_STRENGTH_BYTES = 32


def _os_entropy(n: int) -> bytes:
    return os.urandom(n)


class HmacDrbg:
    """HMAC_DRBG over SHA-256 without prediction resistance.

    The state is mutated by every call and must not be shared between
    threads.  ``entropy_source`` is consulted on instantiation when no
    explicit entropy is given, and again whenever the reseed interval runs out.
    """

    def __init__(
        self,
        entropy: Optional[bytes] = None,
        nonce: Optional[bytes] = None,
        personalization: bytes = b"",
        *,
        entropy_source: Callable[[int], bytes] = _os_entropy,
        reseed_interval: int = RESEED_INTERVAL,
    ):
        self._entropy_source = entropy_source
        self.reseed_interval = reseed_interval
        if entropy is None:
            entropy = entropy_source(SECURITY_STRENGTH_BYTES)
        if nonce is None:
            nonce = entropy_source(SECURITY_STRENGTH_BYTES // 2)
        if len(entropy) < SECURITY_STRENGTH_BYTES:
            raise ValueError("HMAC-DRBG needs at least 256 bits of entropy")
        self.key = b"\x00" * HASH_LEN
        self.value = b"\x01" * HASH_LEN
        self._update(entropy + nonce + personalization)
        self.reseed_counter = 1

    @classmethod
    def from_seed(cls, seed: bytes) -> "HmacDrbg":
        """Deterministic instance for tests and reproducible benchmarks."""
        material = hashlib.sha256(b"sentrybus-seed" + seed).digest()
        return cls(material, b"\x00" * 16, seed)

    def _update(self, data: bytes) -> None:
        self.key = hmac.digest(self.key, self.value + b"\x00" + data, "sha256")
        self.value = hmac.digest(self.key, self.value, "sha256")
        if data:
            self.key = hmac.digest(self.key, self.value + b"\x01" + data, "sha256")
            self.value = hmac.digest(self.key, self.value, "sha256")

    def reseed(self, entropy: Optional[bytes] = None, additional: bytes = b"") -> None:
        if entropy is None:
            entropy = self._entropy_source(SECURITY_STRENGTH_BYTES)
        self._update(entropy + additional)
        self.reseed_counter = 1

    def _generate_once(self, n: int, additional: bytes) -> bytes:
        if self.reseed_counter > self.reseed_interval:
            raise ReseedRequired()
        if additional:
            self._update(additional)
        out = bytearray()
        while len(out) < n:
            self.value = hmac.digest(self.key, self.value, "sha256")
            out += self.value
        self._update(additional)
        self.reseed_counter += 1
        return bytes(out[:n])

    def generate(self, n: int, additional: bytes = b"") -> bytes:
        if n < 0:
            raise ValueError("negative length")
        chunks = []
        remaining = n
        while True:
            take = min(remaining, MAX_BYTES_PER_REQUEST)
            try:
                chunks.append(self._generate_once(take, additional))
            except ReseedRequired:
                self.reseed(additional=additional)
                additional = b""
                chunks.append(self._generate_once(take, b""))
            remaining -= take
            if remaining <= 0:
                return b"".join(chunks)

    def random_below(self, upper: int) -> int:
        """Uniform integer in [1, upper) by rejection sampling."""
        nbytes = (upper.bit_length() + 7) // 8
        excess = nbytes * 8 - upper.bit_length()
        while True:
            candidate = int.from_bytes(self.generate(nbytes), "big") >> excess
            if 0 < candidate < upper:
                return candidate


def drbg_generate(state: HmacDrbg, n: int) -> bytes:
    return state.generate(n)


# --------------------------------------------------------------------------
# Key agreement


@dataclass(frozen=True)
class KeyAgreementKeypair:
    suite: Suite
    private_scalar: bytes
    public_value: bytes
    # Finite-field group for MODP keypairs; tests substitute toy groups here.
    group: Optional[ModpGroup] = None

    def __repr__(self) -> str:
        return f"KeyAgreementKeypair(suite={self.suite.name}, public={self.public_value[:8].hex()}...)"


def modp_keypair(group: ModpGroup, scalar: int, suite: Suite = Suite.DH_MODP_2048_256) -> KeyAgreementKeypair:
    if not 0 < scalar < group.q:
        raise ValueError("private scalar out of range")
    return KeyAgreementKeypair(
        suite=suite,
        private_scalar=scalar.to_bytes((group.q.bit_length() + 7) // 8, "big"),
        public_value=group.encode(pow(group.g, scalar, group.p)),
        group=group,
    )


def p256_keypair(scalar: int) -> KeyAgreementKeypair:
    if not 0 < scalar < P256_ORDER:
        raise ValueError("private scalar out of range")
    key = ec.derive_private_key(scalar, ec.SECP256R1())
    return KeyAgreementKeypair(
        suite=Suite.ECDH_P256,
        private_scalar=scalar.to_bytes(32, "big"),
        public_value=_p256_encode(key.public_key()),
    )


def keypair_from_private(suite: Suite, private_scalar: bytes) -> KeyAgreementKeypair:
    scalar = int.from_bytes(private_scalar, "big")
    if suite is Suite.ECDH_P256:
        return p256_keypair(scalar)
    return modp_keypair(MODP_2048_256, scalar)


def keyagree_generate(suite: Suite, entropy: HmacDrbg) -> KeyAgreementKeypair:
    if suite is Suite.ECDH_P256:
        return p256_keypair(entropy.random_below(P256_ORDER))
    return modp_keypair(MODP_2048_256, entropy.random_below(MODP_2048_256.q))


def _p256_encode(public_key: ec.EllipticCurvePublicKey) -> bytes:
    nums = public_key.public_numbers()
    return b"\x04" + nums.x.to_bytes(32, "big") + nums.y.to_bytes(32, "big")


def _p256_decode(data: bytes) -> ec.EllipticCurvePublicKey:
    if len(data) != P256_PUBLIC_LEN or data[0] != 0x04:
        raise InvalidPeerPublic("P-256 public value must be a 65-byte uncompressed point")
    try:
        return ec.EllipticCurvePublicKey.from_encoded_point(ec.SECP256R1(), data)
    except ValueError as exc:
        raise InvalidPeerPublic("point is not on P-256") from exc


def validate_public(suite: Suite, public: bytes, group: Optional[ModpGroup] = None) -> None:
    """Raise InvalidPeerPublic unless ``public`` is a usable group element."""
    if suite is Suite.ECDH_P256:
        _p256_decode(public)
        return
    group = group or MODP_2048_256
    if len(public) != group.element_len:
        raise InvalidPeerPublic("wrong element length")
    y = int.from_bytes(public, "big")
    if not 2 <= y <= group.p - 2:
        raise InvalidPeerPublic("element outside [2, p-2]")
    if pow(y, group.q, group.p) != 1:
        raise InvalidPeerPublic("element outside the prime-order subgroup")


def keyagree_shared(own: KeyAgreementKeypair, peer_public: bytes) -> bytes:
    """Raw shared secret: the x coordinate for ECDH, the full element for MODP."""
    if own.suite is Suite.ECDH_P256:
        peer = _p256_decode(peer_public)
        key = ec.derive_private_key(int.from_bytes(own.private_scalar, "big"), ec.SECP256R1())
        return key.exchange(ec.ECDH(), peer)
    group = own.group or MODP_2048_256
    validate_public(own.suite, peer_public, group)
    shared = pow(int.from_bytes(peer_public, "big"), int.from_bytes(own.private_scalar, "big"), group.p)
    if shared in (0, 1, group.p - 1):
        raise InvalidPeerPublic("degenerate shared secret")
    return group.encode(shared)


# --------------------------------------------------------------------------
# Signatures (ECDSA P-256 / SHA-256, raw r || s encoding, RFC 6979 nonces)

_ECDSA = ec.ECDSA(hashes.SHA256(), deterministic_signing=True)


@dataclass(frozen=True)
class SigningKeypair:
    private: bytes
    public: bytes

    def __repr__(self) -> str:
        return f"SigningKeypair(public={self.public[:8].hex()}...)"


def signing_keypair_from_private(private: bytes) -> SigningKeypair:
    key = ec.derive_private_key(int.from_bytes(private, "big"), ec.SECP256R1())
    return SigningKeypair(private=bytes(private), public=_p256_encode(key.public_key()))


def generate_signing_keypair(entropy: HmacDrbg) -> SigningKeypair:
    return signing_keypair_from_private(entropy.random_below(P256_ORDER).to_bytes(32, "big"))


def sign(signing_private: bytes, message: bytes) -> bytes:
    key = ec.derive_private_key(int.from_bytes(signing_private, "big"), ec.SECP256R1())
    r, s = decode_dss_signature(key.sign(message, _ECDSA))
    return r.to_bytes(32, "big") + s.to_bytes(32, "big")


def verify(signing_public: bytes, message: bytes, signature: bytes) -> bool:
    if len(signature) != SIGNATURE_LEN:
        raise MalformedSignature(f"signature must be {SIGNATURE_LEN} bytes, got {len(signature)}")
    r = int.from_bytes(signature[:32], "big")
    s = int.from_bytes(signature[32:], "big")
    if not (0 < r < P256_ORDER and 0 < s < P256_ORDER):
        return False
    try:
        public = _p256_decode(signing_public)
    except InvalidPeerPublic:
        return False
    try:
        public.verify(encode_dss_signature(r, s), message, _ECDSA)
    except InvalidSignature:
        return False
    return True


# --------------------------------------------------------------------------
# HKDF-SHA256


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    return hmac.digest(salt or b"\x00" * HASH_LEN, ikm, "sha256")


def hkdf_expand(prk: bytes, info: bytes, length: int) -> bytes:
    if length > 255 * HASH_LEN:
        raise OutputTooLong(f"HKDF output limited to {255 * HASH_LEN} bytes")
    okm = b""
    block = b""
    counter = 1
    while len(okm) < length:
        block = hmac.digest(prk, block + info + bytes([counter]), "sha256")
        okm += block
        counter += 1
    return okm[:length]


def hkdf(ikm: bytes, salt: bytes, info: bytes, length: int) -> bytes:
    if length > 255 * HASH_LEN:
        raise OutputTooLong(f"HKDF output limited to {255 * HASH_LEN} bytes")
    return hkdf_expand(hkdf_extract(salt, ikm), info, length)


# --------------------------------------------------------------------------
# AES-GCM and GMAC


class AesGcm:
    """AES-GCM bound to one key; reuse the instance on hot paths."""

    def __init__(self, key: bytes):
        if len(key) not in (16, 32):
            raise ValueError("AES-GCM key must be 16 or 32 bytes")
        self._aead = AESGCM(key)

    def seal(self, iv: bytes, aad: bytes, plaintext: bytes) -> bytes:
        if len(iv) != IV_LEN:
            raise ValueError("GCM IV must be 96 bits")
        return self._aead.encrypt(iv, plaintext, aad)

    def open(self, iv: bytes, aad: bytes, sealed: bytes) -> bytes:
        if len(iv) != IV_LEN:
            raise ValueError("GCM IV must be 96 bits")
        if len(sealed) < TAG_LEN:
            raise AuthenticationFailure("record shorter than a tag")
        try:
            return self._aead.decrypt(iv, sealed, aad)
        except InvalidTag:
            raise AuthenticationFailure("GCM tag mismatch") from None

    def gmac(self, iv: bytes, data: bytes) -> bytes:
        return self.seal(iv, data, b"")


def aead_seal(key: bytes, iv: bytes, aad: bytes, plaintext: bytes) -> bytes:
    return AesGcm(key).seal(iv, aad, plaintext)


def aead_open(key: bytes, iv: bytes, aad: bytes, sealed: bytes) -> bytes:
    return AesGcm(key).open(iv, aad, sealed)


def gmac_tag(key: bytes, iv: bytes, data: bytes) -> bytes:
    return AesGcm(key).gmac(iv, data)


def tags_equal(a: bytes, b: bytes) -> bool:
    return hmac.compare_digest(a, b)
