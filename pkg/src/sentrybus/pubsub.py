"""Best-effort topic pub/sub over unicast UDP, one datagram per message.

Three security profiles share the same framing:

* ``none``: DATA bodies are the payload verbatim.
* ``crypto``: peers run the signed handshake, then DATA bodies are AES-GCM
  records with the frame header as AAD.
* ``tunnel``: a VPN-style wrapper.  The whole plaintext frame is encrypted
  with AES-128-CBC under a pre-shared key and authenticated with
  HMAC-SHA256 (encrypt-then-MAC), then carried in an outer DATA frame on a
  reserved topic.

A Participant is meant to be driven by one receive context (either
``run_receive_loop`` on a thread, or the caller pumping ``receive_once``)
and one send context.
"""
from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import os
import socket
import struct
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

from . import handshake as hs
from . import session as ss
from .crypto_core import AuthenticationFailure, HmacDrbg, Suite
from .handshake import FsMode, Role
from .identity import Certificate, ParticipantIdentity

log = logging.getLogger(__name__)

MAGIC = b"SBUS"
VERSION = 1
MAX_DATAGRAM = 65507
MAX_TOPIC_LEN = 255
TUNNEL_TOPIC = "\x00"

_HEAD = struct.Struct("!4sBBQIB")
_BODY_LEN = struct.Struct("!I")

TUNNEL_KEY_LEN = 16
TUNNEL_MAC_LEN = 32
TUNNEL_IV_LEN = 16

Address = tuple[str, int]
Handler = Callable[[bytes], None]


class PubSubError(Exception):
    pass


class BindFailure(PubSubError):
    pass


class ProfileConfigError(PubSubError):
    pass


class HandshakeFailed(PubSubError):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class Timeout(PubSubError):
    pass


class PayloadTooLarge(PubSubError):
    pass


class NotConnected(PubSubError):
    pass


class DuplicateSubscription(PubSubError):
    pass


class FrameError(ValueError):
    pass


class TunnelError(ValueError):
    pass


# ---------------------------------------------------------------- framing


class FrameKind(enum.IntEnum):
    DATA = 0x00
    HS_REQ = 0x01
    HS_REPLY = 0x02
    HS_FINAL = 0x03
    BENCH_CTRL = 0x04


_TOPIC_KINDS = (FrameKind.DATA, FrameKind.BENCH_CTRL)
_HS_KINDS = (FrameKind.HS_REQ, FrameKind.HS_REPLY, FrameKind.HS_FINAL)


def header_len(topic: str) -> int:
    return _HEAD.size + len(topic.encode("utf-8")) + _BODY_LEN.size


def encode_header(kind: FrameKind, session_id: int, sequence: int, topic: str, body_len: int) -> bytes:
    raw_topic = topic.encode("utf-8")
    if len(raw_topic) > MAX_TOPIC_LEN:
        raise FrameError("topic longer than 255 bytes")
    return _HEAD.pack(MAGIC, VERSION, kind, session_id, sequence, len(raw_topic)) + raw_topic + _BODY_LEN.pack(body_len)


@dataclass(frozen=True)
class Frame:
    kind: FrameKind
    session_id: int
    sequence: int
    topic: str
    body: bytes

    def header(self) -> bytes:
        return encode_header(self.kind, self.session_id, self.sequence, self.topic, len(self.body))

    def to_bytes(self) -> bytes:
        return self.header() + self.body

    @classmethod
    def from_bytes(cls, data: bytes) -> "Frame":
        if len(data) < _HEAD.size + _BODY_LEN.size:
            raise FrameError("short frame")
        magic, version, kind, sid, seq, topic_len = _HEAD.unpack_from(data)
        if magic != MAGIC or version != VERSION:
            raise FrameError("bad magic or version")
        try:
            kind = FrameKind(kind)
        except ValueError:
            raise FrameError(f"unknown frame kind {kind}") from None
        pos = _HEAD.size + topic_len
        if len(data) < pos + _BODY_LEN.size:
            raise FrameError("truncated topic")
        try:
            topic = data[_HEAD.size : pos].decode("utf-8")
        except UnicodeDecodeError:
            raise FrameError("topic is not UTF-8") from None
        if kind in _TOPIC_KINDS and not topic:
            raise FrameError("empty topic on DATA frame")
        (body_len,) = _BODY_LEN.unpack_from(data, pos)
        body = data[pos + _BODY_LEN.size :]
        if len(body) != body_len:
            raise FrameError("body length mismatch")
        return cls(kind, sid, seq, topic, body)


# ---------------------------------------------------------------- profiles


class ProfileKind(enum.Enum):
    NONE = "none"
    CRYPTO = "crypto"
    TUNNEL = "tunnel"


@dataclass(frozen=True)
class SecurityProfile:
    kind: ProfileKind
    suite: Optional[Suite] = None
    fs_mode: Optional[FsMode] = None
    preshared_key: Optional[bytes] = field(default=None, repr=False)
    mac_key: Optional[bytes] = field(default=None, repr=False)
    receiver_tags: bool = False

    @classmethod
    def none(cls) -> "SecurityProfile":
        return cls(ProfileKind.NONE)

    @classmethod
    def crypto(cls, suite: Suite, fs_mode: FsMode, receiver_tags: bool = False) -> "SecurityProfile":
        return cls(ProfileKind.CRYPTO, suite=suite, fs_mode=fs_mode, receiver_tags=receiver_tags)

    @classmethod
    def tunnel(cls, preshared_key: bytes, mac_key: bytes) -> "SecurityProfile":
        return cls(ProfileKind.TUNNEL, preshared_key=preshared_key, mac_key=mac_key)

    @property
    def label(self) -> str:
        if self.kind is ProfileKind.CRYPTO:
            suite = "p256" if self.suite is Suite.ECDH_P256 else "modp2048"
            return f"crypto-{suite}-{self.fs_mode.value}"
        return self.kind.value

    def validate(self) -> None:
        if self.kind is ProfileKind.CRYPTO:
            if self.suite is None or self.fs_mode is None:
                raise ProfileConfigError("crypto profile needs a suite and an fs mode")
        elif self.kind is ProfileKind.TUNNEL:
            if self.preshared_key is None or len(self.preshared_key) != TUNNEL_KEY_LEN:
                raise ProfileConfigError("tunnel profile needs a 16-byte pre-shared key")
            if self.mac_key is None or len(self.mac_key) != TUNNEL_MAC_LEN:
                raise ProfileConfigError("tunnel profile needs a 32-byte MAC key")


def tunnel_ciphertext_len(inner_len: int) -> int:
    # PKCS#7 always pads, so an exact multiple gains a whole block.
    return (inner_len // 16 + 1) * 16


def tunnel_seal(key: bytes, mac_key: bytes, header: bytes, inner: bytes, iv: Optional[bytes] = None) -> bytes:
    iv = iv or os.urandom(TUNNEL_IV_LEN)
    padder = padding.PKCS7(128).padder()
    padded = padder.update(inner) + padder.finalize()
    encryptor = Cipher(algorithms.AES(key), modes.CBC(iv)).encryptor()
    ct = encryptor.update(padded) + encryptor.finalize()
    mac = hmac.digest(mac_key, header + iv + ct, hashlib.sha256)
    return iv + ct + mac


def tunnel_open(key: bytes, mac_key: bytes, header: bytes, body: bytes) -> bytes:
    if len(body) < TUNNEL_IV_LEN + 16 + TUNNEL_MAC_LEN or (len(body) - TUNNEL_IV_LEN - TUNNEL_MAC_LEN) % 16:
        raise TunnelError("bad tunnel body length")
    iv, ct, mac = body[:TUNNEL_IV_LEN], body[TUNNEL_IV_LEN:-TUNNEL_MAC_LEN], body[-TUNNEL_MAC_LEN:]
    if not hmac.compare_digest(mac, hmac.digest(mac_key, header + iv + ct, hashlib.sha256)):
        raise TunnelError("tunnel MAC mismatch")
    decryptor = Cipher(algorithms.AES(key), modes.CBC(iv)).decryptor()
    padded = decryptor.update(ct) + decryptor.finalize()
    unpadder = padding.PKCS7(128).unpadder()
    try:
        return unpadder.update(padded) + unpadder.finalize()
    except ValueError:
        raise TunnelError("bad padding") from None


# ---------------------------------------------------------------- participant


@dataclass
class Counters:
    frames_sent: int = 0
    bytes_sent: int = 0
    send_errors: int = 0
    frames_received: int = 0
    delivered: int = 0
    unrouted: int = 0
    malformed: int = 0
    tampered: int = 0
    replayed: int = 0
    unknown_session: int = 0
    profile_mismatch: int = 0
    handshake_failures: int = 0


@dataclass
class Peer:
    name: str
    address: Address
    skm: Optional[ss.SessionKeyMaterial] = None
    sequence: int = 0


@dataclass(frozen=True)
class SentReport:
    bytes_on_wire: int
    datagrams: int


@dataclass(eq=False)
class _Connecting:
    session: hs.HandshakeSession
    address: Address
    expected_name: Optional[str]
    done: bool = False
    error: Optional[str] = None
    peer: Optional[Peer] = None


@dataclass(eq=False)
class _Responding:
    session: hs.HandshakeSession
    request: bytes
    reply_frame: bytes
    address: Address
    sent_at: float
    resends: int = 0


def parse_address(value: Union[str, Address]) -> Address:
    if isinstance(value, tuple):
        return value
    host, sep, port = value.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"expected host:port, got {value!r}")
    return (host.strip("[]") or "0.0.0.0", int(port))


class _Recent(OrderedDict):
    """Small bounded map for handshake ids we have already finished."""

    limit = 256

    def remember(self, key, value):
        self[key] = value
        self.move_to_end(key)
        while len(self) > self.limit:
            self.popitem(last=False)


class Participant:
    RESEND_INTERVAL = 0.5
    RESEND_LIMIT = 3
    TICK_INTERVAL = 0.05

    def __init__(
        self,
        name: str,
        profile: SecurityProfile,
        sock: socket.socket,
        identity: Optional[ParticipantIdentity] = None,
        trusted_root: Optional[Certificate] = None,
        drbg: Optional[HmacDrbg] = None,
    ):
        self.name = name
        self.profile = profile
        self.identity = identity
        self.trusted_root = trusted_root
        self.counters = Counters()
        self._sock = sock
        self._drbg = drbg
        self._lock = threading.RLock()
        self._cond = threading.Condition(self._lock)
        self._send_lock = threading.Lock()
        self._peers: dict[str, Peer] = {}
        self._by_addr: dict[Address, Peer] = {}
        self._by_sid: dict[int, Peer] = {}
        self._subs: dict[str, Handler] = {}
        self._connecting: dict[int, _Connecting] = {}
        self._responding: dict[int, _Responding] = {}
        self._finals_sent = _Recent()
        self._finished = _Recent()
        self._tunnel_windows: dict[Address, ss.ReplayWindow] = {}
        self._closed = threading.Event()
        self._loop_ident: Optional[int] = None
        self._thread: Optional[threading.Thread] = None
        self._last_tick = 0.0
        # Name of the peer whose frame is being handed to a handler right now.
        self.current_sender: Optional[str] = None

    # ------------------------------------------------------------ basics

    @property
    def address(self) -> Address:
        return self._sock.getsockname()[:2]

    @property
    def peers(self) -> dict[str, Peer]:
        with self._lock:
            return dict(self._peers)

    def subscribe(self, topic: str, handler: Handler) -> str:
        _check_topic(topic)
        with self._lock:
            if topic in self._subs:
                raise DuplicateSubscription(topic)
            self._subs[topic] = handler
        return topic

    def unsubscribe(self, topic: str) -> None:
        with self._lock:
            self._subs.pop(topic, None)

    def start(self) -> "Participant":
        """Run the receive loop on a daemon thread."""
        self._thread = threading.Thread(target=self.run_receive_loop, name=f"sentrybus-{self.name}", daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        """Ask the receive loop to exit; safe to call from a signal handler."""
        self._closed.set()

    def close(self) -> None:
        self._closed.set()
        if self._thread is not None and self._thread.ident != threading.get_ident():
            self._thread.join()
        self._sock.close()
        with self._cond:
            self._cond.notify_all()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # ------------------------------------------------------------ peers

    def _register(self, peer: Peer) -> Peer:
        with self._lock:
            old = self._peers.get(peer.name)
            if old is not None:
                self._by_addr.pop(old.address, None)
                if old.skm is not None:
                    self._by_sid.pop(old.skm.session_id, None)
            self._peers[peer.name] = peer
            self._by_addr[peer.address] = peer
            if peer.skm is not None:
                self._by_sid[peer.skm.session_id] = peer
        return peer

    def _peer_for_address(self, address: Address) -> Peer:
        peer = self._by_addr.get(address)
        if peer is None:
            peer = self._register(Peer(name=f"{address[0]}:{address[1]}", address=address))
        return peer

    def connect(
        self,
        peer_name: Optional[str],
        peer_address: Union[str, Address],
        *,
        timeout: float = 2.0,
        retries: int = 3,
    ) -> Peer:
        """Register a peer; for the crypto profile, run the handshake first.

        ``peer_name`` of None accepts whichever subject the trusted root
        vouches for.
        """
        address = parse_address(peer_address)
        if self.profile.kind is not ProfileKind.CRYPTO:
            return self._register(Peer(name=peer_name or f"{address[0]}:{address[1]}", address=address))

        try:
            session, request = hs.begin_request(
                self.identity, self.profile.suite, self.profile.fs_mode, drbg=self._drbg
            )
        except hs.HandshakeError as exc:
            raise HandshakeFailed(exc.reason) from exc
        hid = session.handshake_id
        pending = _Connecting(session, address, peer_name)
        frame = Frame(FrameKind.HS_REQ, 0, 0, "", request.to_bytes()).to_bytes()
        with self._lock:
            self._connecting[hid] = pending
        try:
            for _ in range(retries + 1):
                self._send(frame, address)
                if self.wait_for(lambda: pending.done, timeout):
                    break
            else:
                raise Timeout(f"no handshake reply from {address[0]}:{address[1]}")
        finally:
            with self._lock:
                self._connecting.pop(hid, None)
        if pending.error is not None:
            raise HandshakeFailed(pending.error)
        return pending.peer

    # ------------------------------------------------------------ sending

    def _send(self, datagram: bytes, address: Address) -> bool:
        try:
            self._sock.sendto(datagram, address)
        except OSError as exc:
            self.counters.send_errors += 1
            log.debug("send to %s failed: %s", address, exc)
            return False
        self.counters.frames_sent += 1
        self.counters.bytes_sent += len(datagram)
        return True

    def _overhead(self, peer: Peer, topic: str, payload_len: int) -> int:
        kind = self.profile.kind
        if kind is ProfileKind.NONE:
            return header_len(topic)
        if kind is ProfileKind.CRYPTO:
            extra = len(peer.name.encode("utf-8")) + 1 + 16 if self.profile.receiver_tags else 0
            return header_len(topic) + 12 + 16 + 1 + extra
        inner = header_len(topic) + payload_len
        return header_len(TUNNEL_TOPIC) + TUNNEL_IV_LEN + tunnel_ciphertext_len(inner) + TUNNEL_MAC_LEN - payload_len

    def max_payload(self, topic: str, peer: Peer) -> int:
        if self.profile.kind is ProfileKind.TUNNEL:
            room = MAX_DATAGRAM - header_len(TUNNEL_TOPIC) - TUNNEL_IV_LEN - TUNNEL_MAC_LEN
            return (room // 16) * 16 - 1 - header_len(topic)
        return MAX_DATAGRAM - self._overhead(peer, topic, 0)

    def _encode_data(self, peer: Peer, kind: FrameKind, topic: str, payload: bytes) -> bytes:
        seq = peer.sequence
        if self.profile.kind is ProfileKind.NONE:
            peer.sequence = (seq + 1) & 0xFFFFFFFF
            return encode_header(kind, 0, seq, topic, len(payload)) + payload
        if self.profile.kind is ProfileKind.CRYPTO:
            skm = peer.skm
            receivers = [peer.name] if self.profile.receiver_tags else []
            body_len = self._overhead(peer, topic, 0) - header_len(topic) + len(payload)
            header = encode_header(kind, skm.session_id, seq, topic, body_len)
            body = ss.protect(skm, header, payload, receivers).to_bytes()
            peer.sequence = (seq + 1) & 0xFFFFFFFF
            return header + body
        if seq > 0xFFFFFFFF - 1:
            raise ss.CounterExhausted("tunnel sequence exhausted")
        inner = encode_header(kind, 0, seq, topic, len(payload)) + payload
        body_len = TUNNEL_IV_LEN + tunnel_ciphertext_len(len(inner)) + TUNNEL_MAC_LEN
        header = encode_header(FrameKind.DATA, 0, seq, TUNNEL_TOPIC, body_len)
        peer.sequence = seq + 1
        return header + tunnel_seal(self.profile.preshared_key, self.profile.mac_key, header, inner)

    def publish(self, topic: str, payload: bytes, *, to: Optional[str] = None) -> SentReport:
        """Send one datagram to every peer (or just ``to``)."""
        _check_topic(topic)
        with self._lock:
            if to is not None:
                peers = [self._peers[to]] if to in self._peers else []
            else:
                peers = list(self._peers.values())
        if not peers:
            raise NotConnected("no peers")
        for peer in peers:
            if len(payload) > self.max_payload(topic, peer):
                raise PayloadTooLarge(f"{len(payload)} bytes exceeds {self.max_payload(topic, peer)}")
        total = sent = 0
        with self._send_lock:
            for peer in peers:
                datagram = self._encode_data(peer, FrameKind.DATA, topic, payload)
                if self._send(datagram, peer.address):
                    total += len(datagram)
                    sent += 1
        return SentReport(bytes_on_wire=total, datagrams=sent)

    # ------------------------------------------------------------ receiving

    def wait_for(self, predicate: Callable[[], bool], timeout: float) -> bool:
        """Block until predicate() holds, pumping the socket if no loop runs."""
        deadline = time.monotonic() + timeout
        if self._loop_ident is not None and self._loop_ident != threading.get_ident():
            with self._cond:
                return self._cond.wait_for(lambda: predicate() or self._closed.is_set(), timeout) and predicate()
        while True:
            if predicate():
                return True
            remaining = deadline - time.monotonic()
            if remaining <= 0 or self._closed.is_set():
                return False
            self.receive_once(remaining)

    def run_receive_loop(self) -> None:
        self._loop_ident = threading.get_ident()
        try:
            while not self._closed.is_set():
                self.receive_once(self.TICK_INTERVAL)
        finally:
            self._loop_ident = None

    def receive_once(self, timeout: Optional[float]) -> bool:
        """Handle at most one datagram; returns whether one arrived."""
        try:
            self._sock.settimeout(timeout)
            data, address = self._sock.recvfrom(65535)
        except socket.timeout:
            self._tick()
            return False
        except OSError:
            if self._closed.is_set():
                return False
            raise
        self.handle_datagram(data, address[:2])
        if time.monotonic() - self._last_tick > self.TICK_INTERVAL:
            self._tick()
        return True

    def handle_datagram(self, data: bytes, address: Address) -> None:
        self.counters.frames_received += 1
        delivery = None
        with self._lock:
            try:
                frame = Frame.from_bytes(data)
            except FrameError as exc:
                self.counters.malformed += 1
                log.debug("malformed frame from %s: %s", address, exc)
                frame = None
            if frame is not None:
                if frame.kind in _HS_KINDS:
                    self._on_handshake(frame, address)
                else:
                    delivery = self._on_data(frame, data, address)
            handler = self._subs.get(delivery[0]) if delivery else None
            if delivery and handler is None:
                self.counters.unrouted += 1
        if handler is not None:
            self.counters.delivered += 1
            self.current_sender = delivery[2]
            try:
                handler(delivery[1])
            finally:
                self.current_sender = None
        with self._cond:
            self._cond.notify_all()

    def _on_data(self, frame: Frame, data: bytes, address: Address) -> Optional[tuple[str, bytes, str]]:
        kind = self.profile.kind
        if kind is ProfileKind.NONE:
            if frame.session_id != 0 or frame.topic == TUNNEL_TOPIC:
                self.counters.profile_mismatch += 1
                return None
            return frame.topic, frame.body, self._peer_for_address(address).name

        if kind is ProfileKind.CRYPTO:
            peer = self._by_sid.get(frame.session_id)
            if peer is None or frame.session_id == 0:
                self.counters.unknown_session += 1
                return None
            try:
                record = ss.ProtectedRecord.from_bytes(frame.body)
            except ValueError:
                self.counters.malformed += 1
                return None
            aad = data[: len(data) - len(frame.body)]
            my_name = self.name if self.profile.receiver_tags else None
            try:
                payload = ss.unprotect(peer.skm, aad, record, my_name)
            except ss.ReplayDetected:
                self.counters.replayed += 1
                return None
            except (AuthenticationFailure, ss.BadReceiverTag, ss.UnknownReceiver):
                self.counters.tampered += 1
                return None
            return frame.topic, payload, peer.name

        if frame.topic != TUNNEL_TOPIC or frame.session_id != 0 or frame.kind is not FrameKind.DATA:
            self.counters.profile_mismatch += 1
            return None
        window = self._tunnel_windows.setdefault(address, ss.ReplayWindow())
        if window.seen(frame.sequence):
            self.counters.replayed += 1
            return None
        aad = data[: len(data) - len(frame.body)]
        try:
            inner = Frame.from_bytes(tunnel_open(self.profile.preshared_key, self.profile.mac_key, aad, frame.body))
        except TunnelError:
            self.counters.tampered += 1
            return None
        except FrameError:
            self.counters.malformed += 1
            return None
        window.mark(frame.sequence)
        if inner.kind not in _TOPIC_KINDS or inner.session_id != 0 or inner.topic == TUNNEL_TOPIC:
            self.counters.malformed += 1
            return None
        return inner.topic, inner.body, self._peer_for_address(address).name

    # ------------------------------------------------------------ handshake traffic

    def _on_handshake(self, frame: Frame, address: Address) -> None:
        if self.profile.kind is not ProfileKind.CRYPTO:
            self.counters.profile_mismatch += 1
            return
        if frame.kind is FrameKind.HS_REQ:
            self._on_request(frame, address)
        elif frame.kind is FrameKind.HS_REPLY:
            self._on_reply(frame, address)
        else:
            self._on_final(frame, address)

    def _on_request(self, frame: Frame, address: Address) -> None:
        try:
            msg = hs.HandshakeMessage.from_bytes(frame.body)
        except hs.HandshakeError:
            self.counters.malformed += 1
            return
        if msg.kind is not hs.MessageKind.REQUEST or frame.session_id != 0:
            self.counters.malformed += 1
            return
        hid = int.from_bytes(msg.nonce1[:8], "big")
        pending = self._responding.get(hid)
        if pending is not None:
            if pending.request == frame.body:
                self._send(pending.reply_frame, address)
            else:
                self.counters.malformed += 1
            return
        if hid in self._finished:
            return
        try:
            session, reply = hs.process_request(
                self.identity, self.trusted_root, msg, fs_mode=self.profile.fs_mode, drbg=self._drbg
            )
        except hs.HandshakeError as exc:
            self.counters.handshake_failures += 1
            log.info("rejected handshake from %s: %s", address, exc.reason)
            self._send(Frame(FrameKind.HS_REPLY, hid, 0, "", hs.encode_alert(exc.reason)).to_bytes(), address)
            return
        reply_frame = Frame(FrameKind.HS_REPLY, hid, 0, "", reply.to_bytes()).to_bytes()
        self._responding[hid] = _Responding(session, frame.body, reply_frame, address, time.monotonic())
        self._send(reply_frame, address)

    def _on_reply(self, frame: Frame, address: Address) -> None:
        hid = frame.session_id
        pending = self._connecting.get(hid)
        if pending is None or pending.done:
            final = self._finals_sent.get(hid)
            if final is not None:
                self._send(final, address)  # our Final was lost; the responder is retrying
            else:
                self.counters.unknown_session += 1
            return
        alert = hs.decode_alert(frame.body)
        if alert is not None:
            self._fail_connect(pending, alert)
            return
        try:
            final, master = hs.process_reply(pending.session, self.trusted_root, frame.body)
        except hs.HandshakeError as exc:
            self._fail_connect(pending, exc.reason)
            return
        peer_name = pending.session.peer_name
        if pending.expected_name is not None and peer_name != pending.expected_name:
            self._fail_connect(pending, hs.CertificateRejected.__name__)
            return
        final_frame = Frame(FrameKind.HS_FINAL, hid, 0, "", final.to_bytes()).to_bytes()
        self._finals_sent.remember(hid, final_frame)
        self._send(final_frame, address)
        skm = ss.derive_session_keys(master, Role.INITIATOR, self._tag_names(peer_name))
        pending.peer = self._register(Peer(name=peer_name, address=pending.address, skm=skm))
        pending.done = True

    def _fail_connect(self, pending: _Connecting, reason: str) -> None:
        self.counters.handshake_failures += 1
        pending.error = reason
        pending.done = True

    def _on_final(self, frame: Frame, address: Address) -> None:
        hid = frame.session_id
        pending = self._responding.pop(hid, None)
        if pending is None:
            if hid not in self._finished:
                self.counters.unknown_session += 1
            return
        try:
            master = hs.process_final(pending.session, frame.body)
        except hs.HandshakeError as exc:
            self.counters.handshake_failures += 1
            log.info("handshake with %s failed on Final: %s", address, exc.reason)
            return
        self._finished.remember(hid, True)
        peer_name = pending.session.peer_name
        skm = ss.derive_session_keys(master, Role.RESPONDER, self._tag_names(peer_name))
        self._register(Peer(name=peer_name, address=pending.address, skm=skm))

    def _tag_names(self, peer_name: str) -> list[str]:
        return [self.name, peer_name] if self.profile.receiver_tags else []

    def _tick(self) -> None:
        now = time.monotonic()
        self._last_tick = now
        if not self._responding:
            return
        with self._lock:
            for hid, pending in list(self._responding.items()):
                if now - pending.sent_at < self.RESEND_INTERVAL:
                    continue
                if pending.resends >= self.RESEND_LIMIT:
                    del self._responding[hid]
                    self.counters.handshake_failures += 1
                    continue
                pending.resends += 1
                pending.sent_at = now
                self._send(pending.reply_frame, pending.address)


def _check_topic(topic: str) -> None:
    raw = topic.encode("utf-8")
    if not raw or len(raw) > MAX_TOPIC_LEN or "\x00" in topic:
        raise ValueError(f"invalid topic {topic!r}")


def create_participant(
    name: str,
    profile: SecurityProfile,
    bind_address: Union[str, Address] = ("127.0.0.1", 0),
    trusted_root: Optional[Certificate] = None,
    identity: Optional[ParticipantIdentity] = None,
    drbg: Optional[HmacDrbg] = None,
) -> Participant:
    profile.validate()
    if profile.kind is ProfileKind.CRYPTO:
        if identity is None or trusted_root is None:
            raise ProfileConfigError("crypto profile needs an identity and a trusted root")
        if identity.suite is not profile.suite:
            raise ProfileConfigError("identity suite does not match profile suite")
        if profile.fs_mode is FsMode.STATIC and identity.long_term_agreement_private is None:
            raise ProfileConfigError("static mode needs an identity with a long-term agreement key")
    address = parse_address(bind_address)
    sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
    try:
        sock.bind(address)
    except OSError as exc:
        sock.close()
        raise BindFailure(f"cannot bind {address[0]}:{address[1]}: {exc}") from exc
    for opt in (socket.SO_RCVBUF, socket.SO_SNDBUF):
        try:
            sock.setsockopt(socket.SOL_SOCKET, opt, 4 * 1024 * 1024)
        except OSError:
            pass
    return Participant(name, profile, sock, identity=identity, trusted_root=trusted_root, drbg=drbg)
