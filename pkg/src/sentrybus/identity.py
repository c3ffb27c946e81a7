"""Minimal single-level PKI: a root CA issuing participant certificates.

A certificate binds a subject name to an ECDSA P-256 signing key, the
key-agreement suite the participant speaks, and optionally a long-term
key-agreement public value (needed for static-DH handshakes).
"""
from __future__ import annotations

import base64
import re
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional, Union

from . import crypto_core as cc
from . import tlv
from .crypto_core import HmacDrbg, Suite

MAX_NAME_LEN = 255

# Certificate TLV tags, in canonical order.
T_SUBJECT = 0x01
T_SIGNING_PUBLIC = 0x02
T_AGREEMENT_PUBLIC = 0x03
T_SUITE = 0x04
T_ISSUER = 0x05
T_SERIAL = 0x06
T_SIGNATURE = 0x07

_CERT_LAYOUT = [
    (T_SUBJECT, True),
    (T_SIGNING_PUBLIC, True),
    (T_AGREEMENT_PUBLIC, False),
    (T_SUITE, True),
    (T_ISSUER, True),
    (T_SERIAL, True),
    (T_SIGNATURE, True),
]

# Identity file TLV tags.
T_ID_CERT = 0x20
T_ID_SIGNING_PRIVATE = 0x21
T_ID_AGREEMENT_PRIVATE = 0x22

_IDENTITY_LAYOUT = [(T_ID_CERT, True), (T_ID_SIGNING_PRIVATE, True), (T_ID_AGREEMENT_PRIVATE, False)]


class IdentityError(Exception):
    pass


class NameTooLong(IdentityError):
    pass


class CertificateFormatError(IdentityError):
    pass


def _check_name(name: str) -> bytes:
    raw = name.encode("utf-8")
    if not raw:
        raise ValueError("name must be non-empty")
    if len(raw) > MAX_NAME_LEN:
        raise NameTooLong(f"name is {len(raw)} bytes, limit {MAX_NAME_LEN}")
    return raw


def _agreement_public_len(suite: Suite) -> int:
    return cc.P256_PUBLIC_LEN if suite is Suite.ECDH_P256 else cc.MODP_2048_256.element_len


@dataclass(frozen=True)
class Certificate:
    subject_name: str
    signing_public: bytes
    long_term_agreement_public: Optional[bytes]
    suite: Suite
    issuer_name: str
    serial: int
    issuer_signature: bytes = b""

    def _fields(self) -> list[tuple[int, bytes]]:
        items = [
            (T_SUBJECT, _check_name(self.subject_name)),
            (T_SIGNING_PUBLIC, self.signing_public),
        ]
        if self.long_term_agreement_public is not None:
            items.append((T_AGREEMENT_PUBLIC, self.long_term_agreement_public))
        items += [
            (T_SUITE, bytes([self.suite.wire_id])),
            (T_ISSUER, _check_name(self.issuer_name)),
            (T_SERIAL, struct.pack("!Q", self.serial)),
        ]
        return items

    def tbs_bytes(self) -> bytes:
        """The bytes the issuer signs: every field preceding the signature."""
        return tlv.encode(self._fields())

    def to_bytes(self) -> bytes:
        return tlv.encode(self._fields() + [(T_SIGNATURE, self.issuer_signature)])

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        try:
            fields = tlv.decode_exact(data, _CERT_LAYOUT)
            subject = fields[T_SUBJECT].decode("utf-8")
            issuer = fields[T_ISSUER].decode("utf-8")
            if len(fields[T_SUITE]) != 1:
                raise CertificateFormatError("bad suite field")
            suite = Suite.from_wire_id(fields[T_SUITE][0])
        except (tlv.TlvError, UnicodeDecodeError, ValueError) as exc:
            raise CertificateFormatError(str(exc)) from exc
        if not subject or len(fields[T_SUBJECT]) > MAX_NAME_LEN:
            raise CertificateFormatError("bad subject name")
        if not issuer or len(fields[T_ISSUER]) > MAX_NAME_LEN:
            raise CertificateFormatError("bad issuer name")
        if len(fields[T_SIGNING_PUBLIC]) != cc.P256_PUBLIC_LEN:
            raise CertificateFormatError("bad signing key length")
        if len(fields[T_SERIAL]) != 8:
            raise CertificateFormatError("bad serial")
        if len(fields[T_SIGNATURE]) != cc.SIGNATURE_LEN:
            raise CertificateFormatError("bad signature length")
        agreement = fields.get(T_AGREEMENT_PUBLIC)
        if agreement is not None and len(agreement) != _agreement_public_len(suite):
            raise CertificateFormatError("agreement key length does not match suite")
        return cls(
            subject_name=subject,
            signing_public=fields[T_SIGNING_PUBLIC],
            long_term_agreement_public=agreement,
            suite=suite,
            issuer_name=issuer,
            serial=struct.unpack("!Q", fields[T_SERIAL])[0],
            issuer_signature=fields[T_SIGNATURE],
        )


@dataclass(frozen=True)
class ParticipantIdentity:
    certificate: Certificate
    signing_private: bytes
    long_term_agreement_private: Optional[bytes] = None

    @property
    def name(self) -> str:
        return self.certificate.subject_name

    @property
    def suite(self) -> Suite:
        return self.certificate.suite

    def long_term_agreement(self) -> Optional[cc.KeyAgreementKeypair]:
        if self.long_term_agreement_private is None:
            return None
        return cc.keypair_from_private(self.suite, self.long_term_agreement_private)

    def check_keys(self) -> None:
        """Raise IdentityError if the private keys do not match the certificate."""
        signing = cc.signing_keypair_from_private(self.signing_private)
        if signing.public != self.certificate.signing_public:
            raise IdentityError("signing key does not match certificate")
        pub = self.certificate.long_term_agreement_public
        if (pub is None) != (self.long_term_agreement_private is None):
            raise IdentityError("long-term agreement key presence mismatch")
        if pub is not None and self.long_term_agreement().public_value != pub:
            raise IdentityError("long-term agreement key does not match certificate")

    def to_bytes(self) -> bytes:
        items = [(T_ID_CERT, self.certificate.to_bytes()), (T_ID_SIGNING_PRIVATE, self.signing_private)]
        if self.long_term_agreement_private is not None:
            items.append((T_ID_AGREEMENT_PRIVATE, self.long_term_agreement_private))
        return tlv.encode(items)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParticipantIdentity":
        try:
            fields = tlv.decode_exact(data, _IDENTITY_LAYOUT)
        except tlv.TlvError as exc:
            raise CertificateFormatError(str(exc)) from exc
        ident = cls(
            certificate=Certificate.from_bytes(fields[T_ID_CERT]),
            signing_private=fields[T_ID_SIGNING_PRIVATE],
            long_term_agreement_private=fields.get(T_ID_AGREEMENT_PRIVATE),
        )
        ident.check_keys()
        return ident

    def __repr__(self) -> str:
        return f"ParticipantIdentity(name={self.name!r}, suite={self.suite.name})"


# A CA is just an identity whose certificate is self-signed.
CertificateAuthority = ParticipantIdentity


def ca_create(name: str, drbg: Optional[HmacDrbg] = None, suite: Suite = Suite.ECDH_P256) -> CertificateAuthority:
    drbg = drbg or HmacDrbg()
    _check_name(name)
    keys = cc.generate_signing_keypair(drbg)
    unsigned = Certificate(
        subject_name=name,
        signing_public=keys.public,
        long_term_agreement_public=None,
        suite=suite,
        issuer_name=name,
        serial=int.from_bytes(drbg.generate(8), "big"),
    )
    cert = replace(unsigned, issuer_signature=cc.sign(keys.private, unsigned.tbs_bytes()))
    return ParticipantIdentity(certificate=cert, signing_private=keys.private)


def issue_identity(
    ca: CertificateAuthority,
    name: str,
    suite: Suite,
    include_long_term_agreement_key: bool,
    drbg: Optional[HmacDrbg] = None,
) -> ParticipantIdentity:
    drbg = drbg or HmacDrbg()
    _check_name(name)
    keys = cc.generate_signing_keypair(drbg)
    agreement = cc.keyagree_generate(suite, drbg) if include_long_term_agreement_key else None
    unsigned = Certificate(
        subject_name=name,
        signing_public=keys.public,
        long_term_agreement_public=agreement.public_value if agreement else None,
        suite=suite,
        issuer_name=ca.certificate.subject_name,
        serial=int.from_bytes(drbg.generate(8), "big"),
    )
    cert = replace(unsigned, issuer_signature=cc.sign(ca.signing_private, unsigned.tbs_bytes()))
    return ParticipantIdentity(
        certificate=cert,
        signing_private=keys.private,
        long_term_agreement_private=agreement.private_scalar if agreement else None,
    )


def verify_chain(cert: Union[Certificate, bytes], trusted_root: Union[Certificate, bytes]) -> bool:
    """True iff ``cert`` was issued by ``trusted_root``.  Never raises."""
    try:
        if isinstance(cert, (bytes, bytearray)):
            cert = Certificate.from_bytes(bytes(cert))
        if isinstance(trusted_root, (bytes, bytearray)):
            trusted_root = Certificate.from_bytes(bytes(trusted_root))
        if cert.issuer_name != trusted_root.subject_name:
            return False
        return cc.verify(trusted_root.signing_public, cert.tbs_bytes(), cert.issuer_signature)
    except Exception:
        return False


# ---------------------------------------------------------------- PEM-like files

_PEM_RE = re.compile(
    r"-----BEGIN SENTRYBUS (?P<kind>[A-Z]+)-----\s*(?P<body>[A-Za-z0-9+/=\s]*?)\s*-----END SENTRYBUS (?P=kind)-----"
)


def to_pem(kind: str, payload: bytes) -> str:
    body = base64.encodebytes(payload).decode("ascii")
    return f"-----BEGIN SENTRYBUS {kind}-----\n{body}-----END SENTRYBUS {kind}-----\n"


def from_pem(text: str, kind: str) -> bytes:
    match = _PEM_RE.search(text)
    if not match or match.group("kind") != kind:
        raise CertificateFormatError(f"no SENTRYBUS {kind} block found")
    return base64.b64decode("".join(match.group("body").split()), validate=True)


def save_certificate(path: Union[str, Path], cert: Certificate) -> None:
    Path(path).write_text(to_pem("CERT", cert.to_bytes()))


def load_certificate(path: Union[str, Path]) -> Certificate:
    return Certificate.from_bytes(from_pem(Path(path).read_text(), "CERT"))


def save_identity(path: Union[str, Path], ident: ParticipantIdentity) -> None:
    path = Path(path)
    path.write_text(to_pem("IDENTITY", ident.to_bytes()))
    path.chmod(0o600)


def load_identity(path: Union[str, Path]) -> ParticipantIdentity:
    return ParticipantIdentity.from_bytes(from_pem(Path(path).read_text(), "IDENTITY"))
