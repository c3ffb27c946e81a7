"""Three-message authenticated key agreement (Request / Reply / Final).

Both sides sign what they send.  The master secret is

    HKDF-SHA256(ikm=DH shared secret, salt=nonce1 || nonce2,
                info=b"sentrybus-master-v1", L=32)

where nonce1 belongs to the initiator and nonce2 to the responder.  In
``FsMode.STATIC`` each side uses the long-term key-agreement value from its
certificate, so every session between the same pair shares one DH secret;
``FsMode.EPHEMERAL`` draws a fresh keypair per session.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Optional, Union

from . import crypto_core as cc
from . import tlv
from .crypto_core import HmacDrbg, KeyAgreementKeypair, Suite
from .identity import Certificate, CertificateFormatError, ParticipantIdentity, verify_chain

NONCE_LEN = 32
MASTER_SECRET_LEN = 32
MASTER_INFO = b"sentrybus-master-v1"


class Role(enum.Enum):
    INITIATOR = "initiator"
    RESPONDER = "responder"


class State(enum.Enum):
    IDLE = "idle"
    AWAITING_REPLY = "awaiting_reply"
    AWAITING_FINAL = "awaiting_final"
    ESTABLISHED = "established"
    FAILED = "failed"


class FsMode(enum.Enum):
    STATIC = "static"
    EPHEMERAL = "ephemeral"


class MessageKind(enum.IntEnum):
    REQUEST = 1
    REPLY = 2
    FINAL = 3


class HandshakeError(Exception):
    @property
    def reason(self) -> str:
        return type(self).__name__


class ModeIdentityMismatch(HandshakeError):
    pass


class CertificateRejected(HandshakeError):
    pass


class BadSignature(HandshakeError):
    pass


class SuiteMismatch(HandshakeError):
    pass


class MalformedMessage(HandshakeError):
    pass


class NonceMismatch(HandshakeError):
    pass


class StateError(HandshakeError):
    pass


class InvalidPeerPublic(HandshakeError):
    pass


# Message TLV tags, canonical order.
T_KIND = 0x30
T_CERT = 0x31
T_AGREEMENT = 0x32
T_NONCE1 = 0x33
T_NONCE2 = 0x34
T_SIGNATURE = 0x35
T_ALERT = 0x3F

_LAYOUT = [
    (T_KIND, True),
    (T_CERT, False),
    (T_AGREEMENT, False),
    (T_NONCE1, True),
    (T_NONCE2, False),
    (T_SIGNATURE, True),
]
_PRESENT = {
    MessageKind.REQUEST: {T_CERT, T_AGREEMENT},
    MessageKind.REPLY: {T_CERT, T_AGREEMENT, T_NONCE2},
    MessageKind.FINAL: {T_NONCE2},
}


@dataclass(frozen=True)
class HandshakeMessage:
    kind: MessageKind
    nonce1: bytes
    sender_cert: Optional[Certificate] = None
    agreement_public: Optional[bytes] = None
    nonce2: Optional[bytes] = None
    signature: bytes = b""

    def signed_bytes(self) -> bytes:
        items = [(T_KIND, bytes([self.kind]))]
        if self.sender_cert is not None:
            items.append((T_CERT, self.sender_cert.to_bytes()))
        if self.agreement_public is not None:
            items.append((T_AGREEMENT, self.agreement_public))
        items.append((T_NONCE1, self.nonce1))
        if self.nonce2 is not None:
            items.append((T_NONCE2, self.nonce2))
        return tlv.encode(items)

    def to_bytes(self) -> bytes:
        return self.signed_bytes() + tlv.encode([(T_SIGNATURE, self.signature)])

    def signed_by(self, identity: ParticipantIdentity) -> "HandshakeMessage":
        return replace(self, signature=cc.sign(identity.signing_private, self.signed_bytes()))

    @classmethod
    def from_bytes(cls, data: bytes) -> "HandshakeMessage":
        try:
            fields = tlv.decode_exact(data, _LAYOUT)
            if len(fields[T_KIND]) != 1:
                raise MalformedMessage("bad kind field")
            kind = MessageKind(fields[T_KIND][0])
        except (tlv.TlvError, ValueError) as exc:
            raise MalformedMessage(str(exc)) from exc
        optional = {T_CERT, T_AGREEMENT, T_NONCE2}
        if {t for t in fields if t in optional} != _PRESENT[kind]:
            raise MalformedMessage(f"wrong field set for {kind.name}")
        nonce2 = fields.get(T_NONCE2)
        if len(fields[T_NONCE1]) != NONCE_LEN or (nonce2 is not None and len(nonce2) != NONCE_LEN):
            raise MalformedMessage("bad nonce length")
        if len(fields[T_SIGNATURE]) != cc.SIGNATURE_LEN:
            raise MalformedMessage("bad signature length")
        cert = None
        if T_CERT in fields:
            try:
                cert = Certificate.from_bytes(fields[T_CERT])
            except CertificateFormatError as exc:
                raise MalformedMessage(f"bad certificate: {exc}") from exc
        return cls(
            kind=kind,
            nonce1=fields[T_NONCE1],
            sender_cert=cert,
            agreement_public=fields.get(T_AGREEMENT),
            nonce2=nonce2,
            signature=fields[T_SIGNATURE],
        )


MessageLike = Union[bytes, HandshakeMessage]


def _as_message(msg: MessageLike) -> tuple[HandshakeMessage, bytes]:
    if isinstance(msg, HandshakeMessage):
        return msg, msg.to_bytes()
    raw = bytes(msg)
    return HandshakeMessage.from_bytes(raw), raw


def _verify_signature(cert: Certificate, msg: HandshakeMessage) -> None:
    try:
        ok = cc.verify(cert.signing_public, msg.signed_bytes(), msg.signature)
    except cc.MalformedSignature as exc:
        raise BadSignature(str(exc)) from exc
    if not ok:
        raise BadSignature(f"{msg.kind.name} signature does not verify")


def _check_peer_cert(cert: Certificate, trusted_root: Certificate, suite: Suite) -> None:
    if not verify_chain(cert, trusted_root):
        raise CertificateRejected(f"certificate for {cert.subject_name!r} does not chain to {trusted_root.subject_name!r}")
    if cert.suite is not suite:
        raise SuiteMismatch(f"peer speaks {cert.suite.value}, we speak {suite.value}")


def _check_peer_mode(fs_mode: FsMode, cert: Certificate, agreement_public: bytes) -> None:
    long_term = cert.long_term_agreement_public
    if fs_mode is FsMode.STATIC:
        if long_term is None or agreement_public != long_term:
            raise ModeIdentityMismatch("static mode requires the certificate's key-agreement value")
    elif long_term is not None and agreement_public == long_term:
        raise ModeIdentityMismatch("ephemeral mode forbids the long-term key-agreement value")


def _own_agreement(
    identity: ParticipantIdentity,
    suite: Suite,
    fs_mode: FsMode,
    drbg: HmacDrbg,
    agreement: Optional[KeyAgreementKeypair],
) -> KeyAgreementKeypair:
    if fs_mode is FsMode.STATIC:
        long_term = identity.long_term_agreement()
        if long_term is None:
            raise ModeIdentityMismatch(f"{identity.name!r} has no long-term key-agreement key")
        return agreement or long_term
    return agreement or cc.keyagree_generate(suite, drbg)


def derive_master_secret(shared_secret: bytes, nonce1: bytes, nonce2: bytes) -> bytes:
    return cc.hkdf(shared_secret, nonce1 + nonce2, MASTER_INFO, MASTER_SECRET_LEN)


def _shared(local: KeyAgreementKeypair, peer_public: bytes) -> bytes:
    try:
        return cc.keyagree_shared(local, peer_public)
    except cc.InvalidPeerPublic as exc:
        raise InvalidPeerPublic(str(exc)) from exc


@dataclass(eq=False)
class HandshakeSession:
    role: Role
    suite: Suite
    fs_mode: FsMode
    identity: ParticipantIdentity
    local_nonce: bytes
    local_agreement: KeyAgreementKeypair
    state: State = State.IDLE
    peer_nonce: Optional[bytes] = None
    peer_agreement_public: Optional[bytes] = None
    peer_certificate: Optional[Certificate] = None
    transcript: list = field(default_factory=list)
    master_secret: Optional[bytes] = None
    # Pre-HKDF DH output; kept so forward-secrecy properties can be checked.
    shared_secret: Optional[bytes] = None
    error: Optional[HandshakeError] = None

    @property
    def nonce1(self) -> Optional[bytes]:
        return self.local_nonce if self.role is Role.INITIATOR else self.peer_nonce

    @property
    def nonce2(self) -> Optional[bytes]:
        return self.peer_nonce if self.role is Role.INITIATOR else self.local_nonce

    @property
    def handshake_id(self) -> int:
        """64-bit tag carried by HS_REPLY / HS_FINAL frames to route them."""
        return int.from_bytes(self.nonce1[:8], "big")

    @property
    def peer_name(self) -> Optional[str]:
        return self.peer_certificate.subject_name if self.peer_certificate else None

    def _fail(self, exc: HandshakeError) -> HandshakeError:
        if self.state not in (State.ESTABLISHED, State.FAILED):
            self.state = State.FAILED
            self.master_secret = None
            self.error = exc
        return exc

    def _establish(self, shared: bytes) -> bytes:
        self.shared_secret = shared
        self.master_secret = derive_master_secret(shared, self.nonce1, self.nonce2)
        self.state = State.ESTABLISHED
        return self.master_secret

    def receive(self, msg: MessageLike, trusted_root: Optional[Certificate] = None):
        """Feed the next inbound message, dispatching on its kind.

        Returns whatever the matching ``process_*`` call returns.  Anything that
        does not fit the current state fails the session with StateError.
        """
        try:
            parsed, _ = _as_message(msg)
        except MalformedMessage as exc:
            raise self._fail(exc)
        if self.role is Role.INITIATOR and parsed.kind is MessageKind.REPLY:
            if trusted_root is None:
                raise ValueError("trusted_root required to process a Reply")
            return process_reply(self, trusted_root, msg)
        if self.role is Role.RESPONDER and parsed.kind is MessageKind.FINAL:
            return process_final(self, msg)
        raise self._fail(StateError(f"{parsed.kind.name} not expected by {self.role.value} in {self.state.value}"))


def begin_request(
    identity: ParticipantIdentity,
    suite: Suite,
    fs_mode: FsMode,
    *,
    drbg: Optional[HmacDrbg] = None,
    agreement: Optional[KeyAgreementKeypair] = None,
) -> tuple[HandshakeSession, HandshakeMessage]:
    drbg = drbg or HmacDrbg()
    if suite is not identity.suite:
        raise SuiteMismatch(f"identity certificate is for {identity.suite.value}")
    local = _own_agreement(identity, suite, fs_mode, drbg, agreement)
    nonce = drbg.generate(NONCE_LEN)
    msg = HandshakeMessage(
        kind=MessageKind.REQUEST,
        nonce1=nonce,
        sender_cert=identity.certificate,
        agreement_public=local.public_value,
    ).signed_by(identity)
    session = HandshakeSession(
        role=Role.INITIATOR,
        suite=suite,
        fs_mode=fs_mode,
        identity=identity,
        local_nonce=nonce,
        local_agreement=local,
        state=State.AWAITING_REPLY,
    )
    session.transcript.append(msg.to_bytes())
    return session, msg


def process_request(
    identity: ParticipantIdentity,
    trusted_root: Certificate,
    msg: MessageLike,
    *,
    fs_mode: FsMode,
    drbg: Optional[HmacDrbg] = None,
    agreement: Optional[KeyAgreementKeypair] = None,
) -> tuple[HandshakeSession, HandshakeMessage]:
    drbg = drbg or HmacDrbg()
    request, raw = _as_message(msg)
    if request.kind is not MessageKind.REQUEST:
        raise StateError(f"responder without a session cannot accept {request.kind.name}")
    suite = identity.suite
    _check_peer_cert(request.sender_cert, trusted_root, suite)
    _verify_signature(request.sender_cert, request)
    _check_peer_mode(fs_mode, request.sender_cert, request.agreement_public)
    local = _own_agreement(identity, suite, fs_mode, drbg, agreement)
    try:
        cc.validate_public(suite, request.agreement_public, local.group)
    except cc.InvalidPeerPublic as exc:
        raise InvalidPeerPublic(str(exc)) from exc

    nonce2 = drbg.generate(NONCE_LEN)
    reply = HandshakeMessage(
        kind=MessageKind.REPLY,
        nonce1=request.nonce1,
        sender_cert=identity.certificate,
        agreement_public=local.public_value,
        nonce2=nonce2,
    ).signed_by(identity)
    session = HandshakeSession(
        role=Role.RESPONDER,
        suite=suite,
        fs_mode=fs_mode,
        identity=identity,
        local_nonce=nonce2,
        local_agreement=local,
        state=State.AWAITING_FINAL,
        peer_nonce=request.nonce1,
        peer_agreement_public=request.agreement_public,
        peer_certificate=request.sender_cert,
    )
    session.transcript += [raw, reply.to_bytes()]
    return session, reply


def process_reply(
    session: HandshakeSession, trusted_root: Certificate, msg: MessageLike
) -> tuple[HandshakeMessage, bytes]:
    if session.role is not Role.INITIATOR or session.state is not State.AWAITING_REPLY:
        raise session._fail(StateError(f"Reply not expected in {session.state.value}"))
    try:
        reply, raw = _as_message(msg)
        if reply.kind is not MessageKind.REPLY:
            raise StateError(f"expected REPLY, got {reply.kind.name}")
        if reply.nonce1 != session.local_nonce:
            raise NonceMismatch("Reply does not echo our nonce")
        _check_peer_cert(reply.sender_cert, trusted_root, session.suite)
        _verify_signature(reply.sender_cert, reply)
        _check_peer_mode(session.fs_mode, reply.sender_cert, reply.agreement_public)
        shared = _shared(session.local_agreement, reply.agreement_public)
    except HandshakeError as exc:
        raise session._fail(exc)

    session.peer_nonce = reply.nonce2
    session.peer_agreement_public = reply.agreement_public
    session.peer_certificate = reply.sender_cert
    final = HandshakeMessage(
        kind=MessageKind.FINAL, nonce1=session.local_nonce, nonce2=reply.nonce2
    ).signed_by(session.identity)
    session.transcript += [raw, final.to_bytes()]
    return final, session._establish(shared)


def process_final(session: HandshakeSession, msg: MessageLike) -> bytes:
    if session.role is not Role.RESPONDER or session.state is not State.AWAITING_FINAL:
        raise session._fail(StateError(f"Final not expected in {session.state.value}"))
    try:
        final, raw = _as_message(msg)
        if final.kind is not MessageKind.FINAL:
            raise StateError(f"expected FINAL, got {final.kind.name}")
        if final.nonce1 != session.peer_nonce or final.nonce2 != session.local_nonce:
            raise NonceMismatch("Final nonces do not match this session")
        _verify_signature(session.peer_certificate, final)
        shared = _shared(session.local_agreement, session.peer_agreement_public)
    except HandshakeError as exc:
        raise session._fail(exc)
    session.transcript.append(raw)
    return session._establish(shared)


# ---------------------------------------------------------------- alerts
# Unauthenticated rejection notice sent by a responder so the initiator can
# fail fast instead of timing out.  Spoofing one only aborts a handshake,
# which an on-path attacker could do by dropping packets anyway.


def encode_alert(reason: str) -> bytes:
    return tlv.encode([(T_ALERT, reason.encode("ascii", "replace")[:64])])


def decode_alert(data: bytes) -> Optional[str]:
    if not data or data[0] != T_ALERT:
        return None
    try:
        fields = tlv.decode_exact(data, [(T_ALERT, True)])
    except tlv.TlvError:
        return None
    return fields[T_ALERT].decode("ascii", "replace")
