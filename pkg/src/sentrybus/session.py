"""Record protection for an established session.

Keys come from the handshake master secret via HKDF (empty salt):

    i2r / r2i           32-byte AES-256-GCM keys, one per direction
    iv:i2r / iv:r2i     8-byte IV prefixes, one per direction
    gmac:<name>         16-byte per-receiver GMAC keys
    sid                 8-byte session id

IV = prefix || 32-bit big-endian counter.  The counter never wraps: once it
reaches 2**32 - 1 the session refuses to seal and must be re-handshaken.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Optional

from . import crypto_core as cc
from .crypto_core import AuthenticationFailure
from .handshake import Role

KEY_LEN = 32
IV_PREFIX_LEN = 8
GMAC_KEY_LEN = 16
COUNTER_LIMIT = 2**32 - 1
REPLAY_WINDOW = 64

__all__ = [
    "AuthenticationFailure",
    "BadReceiverTag",
    "CounterExhausted",
    "ProtectedRecord",
    "ReplayDetected",
    "ReplayWindow",
    "SessionError",
    "SessionKeyMaterial",
    "UnknownReceiver",
    "derive_session_keys",
    "next_iv",
    "protect",
    "unprotect",
]


class SessionError(Exception):
    pass


class CounterExhausted(SessionError):
    pass


class UnknownReceiver(SessionError):
    pass


class ReplayDetected(SessionError):
    pass


class BadReceiverTag(SessionError):
    pass


class ReplayWindow:
    """Sliding 64-entry bitmap anchored at the highest accepted counter."""

    def __init__(self, size: int = REPLAY_WINDOW):
        self.size = size
        self.top = -1
        self.bitmap = 0

    def seen(self, counter: int) -> bool:
        if counter > self.top:
            return False
        offset = self.top - counter
        if offset >= self.size:
            return True  # too old to tell, treat as replay
        return bool(self.bitmap >> offset & 1)

    def mark(self, counter: int) -> None:
        if counter > self.top:
            shift = counter - self.top
            self.bitmap = (self.bitmap << shift | 1) & ((1 << self.size) - 1) if shift < self.size else 1
            self.top = counter
        else:
            self.bitmap |= 1 << (self.top - counter)


@dataclass(eq=False)
class SessionKeyMaterial:
    session_id: int
    send_key: bytes
    recv_key: bytes
    iv_prefix: bytes
    peer_iv_prefix: bytes
    receiver_mac_keys: dict[str, bytes] = field(default_factory=dict)
    send_counter: int = 0
    replay_window: ReplayWindow = field(default_factory=ReplayWindow)

    def __post_init__(self):
        self._send_aead = cc.AesGcm(self.send_key)
        self._recv_aead = cc.AesGcm(self.recv_key)
        self._gmacs = {name: cc.AesGcm(key) for name, key in self.receiver_mac_keys.items()}

    def gmac_for(self, name: str) -> cc.AesGcm:
        try:
            return self._gmacs[name]
        except KeyError:
            raise UnknownReceiver(name) from None


def _expand(master: bytes, info: bytes, length: int) -> bytes:
    return cc.hkdf(master, b"", info, length)


def derive_session_keys(
    master_secret: bytes, role: Role, receiver_names: Iterable[str] = ()
) -> SessionKeyMaterial:
    out_dir, in_dir = (b"i2r", b"r2i") if role is Role.INITIATOR else (b"r2i", b"i2r")
    return SessionKeyMaterial(
        session_id=int.from_bytes(_expand(master_secret, b"sid", 8), "big"),
        send_key=_expand(master_secret, out_dir, KEY_LEN),
        recv_key=_expand(master_secret, in_dir, KEY_LEN),
        iv_prefix=_expand(master_secret, b"iv:" + out_dir, IV_PREFIX_LEN),
        peer_iv_prefix=_expand(master_secret, b"iv:" + in_dir, IV_PREFIX_LEN),
        receiver_mac_keys={
            name: _expand(master_secret, b"gmac:" + name.encode("utf-8"), GMAC_KEY_LEN)
            for name in receiver_names
        },
    )


def next_iv(skm: SessionKeyMaterial) -> bytes:
    if skm.send_counter >= COUNTER_LIMIT:
        raise CounterExhausted("send counter exhausted; re-run the handshake")
    iv = skm.iv_prefix + struct.pack("!I", skm.send_counter)
    skm.send_counter += 1
    return iv


@dataclass(frozen=True)
class ProtectedRecord:
    """iv(12) || ciphertext || tag(16) || {name, nameLen(1), rtag(16)}* || count(1)

    The receiver-tag trailer is laid out so it parses from the end; the
    ciphertext length is whatever remains.
    """

    iv: bytes
    ciphertext: bytes
    tag: bytes
    receiver_tags: tuple[tuple[str, bytes], ...] = ()

    @property
    def counter(self) -> int:
        return struct.unpack("!I", self.iv[IV_PREFIX_LEN:])[0]

    def to_bytes(self) -> bytes:
        parts = [self.iv, self.ciphertext, self.tag]
        for name, rtag in self.receiver_tags:
            raw = name.encode("utf-8")
            parts += [raw, bytes([len(raw)]), rtag]
        parts.append(bytes([len(self.receiver_tags)]))
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ProtectedRecord":
        if len(data) < cc.IV_LEN + cc.TAG_LEN + 1:
            raise ValueError("record too short")
        end = len(data) - 1
        tags = []
        for _ in range(data[end]):
            if end - cc.TAG_LEN - 1 < cc.IV_LEN + cc.TAG_LEN:
                raise ValueError("truncated receiver tag")
            rtag = data[end - cc.TAG_LEN : end]
            end -= cc.TAG_LEN + 1
            name_len = data[end]
            if name_len == 0 or end - name_len < cc.IV_LEN + cc.TAG_LEN:
                raise ValueError("bad receiver name")
            name = data[end - name_len : end].decode("utf-8")
            end -= name_len
            tags.append((name, rtag))
        tags.reverse()
        return cls(
            iv=data[: cc.IV_LEN],
            ciphertext=data[cc.IV_LEN : end - cc.TAG_LEN],
            tag=data[end - cc.TAG_LEN : end],
            receiver_tags=tuple(tags),
        )

    def __len__(self) -> int:
        return len(self.to_bytes())


def protect(
    skm: SessionKeyMaterial, aad: bytes, payload: bytes, receivers: Iterable[str] = ()
) -> ProtectedRecord:
    gmacs = [(name, skm.gmac_for(name)) for name in receivers]
    iv = next_iv(skm)
    sealed = skm._send_aead.seal(iv, aad, payload)
    ciphertext, tag = sealed[: -cc.TAG_LEN], sealed[-cc.TAG_LEN :]
    return ProtectedRecord(
        iv=iv,
        ciphertext=ciphertext,
        tag=tag,
        receiver_tags=tuple((name, gmac.gmac(iv, ciphertext)) for name, gmac in gmacs),
    )


def unprotect(
    skm: SessionKeyMaterial, aad: bytes, record: ProtectedRecord, my_name: Optional[str] = None
) -> bytes:
    if len(record.iv) != cc.IV_LEN or record.iv[:IV_PREFIX_LEN] != skm.peer_iv_prefix:
        raise AuthenticationFailure("IV prefix does not belong to this session")
    counter = record.counter
    if skm.replay_window.seen(counter):
        raise ReplayDetected(f"counter {counter}")
    plaintext = skm._recv_aead.open(record.iv, aad, record.ciphertext + record.tag)
    if my_name is not None:
        for name, rtag in record.receiver_tags:
            if name == my_name and not cc.tags_equal(skm.gmac_for(name).gmac(record.iv, record.ciphertext), rtag):
                raise BadReceiverTag(name)
    skm.replay_window.mark(counter)
    return plaintext
