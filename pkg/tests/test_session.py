import hashlib
import hmac
import os
import random

import pytest
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from hypothesis import given, settings
from hypothesis import strategies as st

from sentrybus import session as ss
from sentrybus.crypto_core import AuthenticationFailure
from sentrybus.handshake import Role

MASTER = bytes.fromhex("5f0c6a52c36ed0f2e0bb4a42efb0b8b0a0e1a36c8f4a3b8b9a71c0ffee0ddba11"[:64])


def oracle_hkdf(ikm, info, length):
    prk = hmac.new(b"\x00" * 32, ikm, hashlib.sha256).digest()
    out, block, i = b"", b"", 1
    while len(out) < length:
        block = hmac.new(prk, block + info + bytes([i]), hashlib.sha256).digest()
        out += block
        i += 1
    return out[:length]


def pair(names=("alice", "bob")):
    return (
        ss.derive_session_keys(MASTER, Role.INITIATOR, names),
        ss.derive_session_keys(MASTER, Role.RESPONDER, names),
    )


def test_directions_mirror():
    a, b = pair()
    assert a.send_key == b.recv_key and a.recv_key == b.send_key
    assert a.send_key != a.recv_key
    assert a.iv_prefix == b.peer_iv_prefix and a.peer_iv_prefix == b.iv_prefix
    assert a.session_id == b.session_id
    assert a.receiver_mac_keys == b.receiver_mac_keys


def test_empty_receiver_list():
    assert ss.derive_session_keys(MASTER, Role.INITIATOR, []).receiver_mac_keys == {}


def test_keys_match_standalone_hkdf():
    a = ss.derive_session_keys(MASTER, Role.INITIATOR, ["bob"])
    assert a.send_key == oracle_hkdf(MASTER, b"i2r", 32)
    assert a.recv_key == oracle_hkdf(MASTER, b"r2i", 32)
    assert a.iv_prefix == oracle_hkdf(MASTER, b"iv:i2r", 8)
    assert a.receiver_mac_keys["bob"] == oracle_hkdf(MASTER, b"gmac:bob", 16)
    assert a.session_id == int.from_bytes(oracle_hkdf(MASTER, b"sid", 8), "big")
    again = ss.derive_session_keys(MASTER, Role.INITIATOR, ["bob"])
    assert (again.send_key, again.recv_key, again.iv_prefix) == (a.send_key, a.recv_key, a.iv_prefix)


def test_iv_layout():
    a, _ = pair()
    first, second = ss.next_iv(a), ss.next_iv(a)
    assert len(first) == 12
    assert first[:8] == second[:8] == a.iv_prefix
    assert first[8:] == b"\x00\x00\x00\x00"
    assert second[8:] == b"\x00\x00\x00\x01"


def test_counter_boundary():
    a, _ = pair()
    a.send_counter = 2**32 - 2
    assert ss.next_iv(a)[8:] == b"\xff\xff\xff\xfe"
    with pytest.raises(ss.CounterExhausted):
        ss.next_iv(a)
    with pytest.raises(ss.CounterExhausted):
        ss.protect(a, b"", b"x")
    assert a.send_counter == 2**32 - 1


def test_hundred_thousand_ivs_unique():
    a, _ = pair()
    ivs = [ss.protect(a, b"", b"").iv for _ in range(100_000)]
    assert len(set(ivs)) == len(ivs)
    counters = [int.from_bytes(iv[8:], "big") for iv in ivs]
    assert counters == list(range(100_000))


@pytest.mark.parametrize("size", [0, 1, 16, 12000])
@pytest.mark.parametrize("aad", [b"", b"x" * 13])
def test_round_trip(size, aad):
    a, b = pair()
    payload = os.urandom(size)
    rec = ss.protect(a, aad, payload)
    assert ss.unprotect(b, aad, ss.ProtectedRecord.from_bytes(rec.to_bytes())) == payload
    assert len(rec.to_bytes()) == 12 + size + 16 + 1


def test_record_matches_aesgcm_oracle():
    a, _ = pair()
    rec = ss.protect(a, b"hdr", b"hello")
    expected = AESGCM(oracle_hkdf(MASTER, b"i2r", 32)).encrypt(rec.iv, b"hello", b"hdr")
    assert rec.ciphertext + rec.tag == expected


def test_receiver_tag_matches_gmac_oracle():
    a, b = pair()
    rec = ss.protect(a, b"hdr", b"payload", ["bob"])
    assert [n for n, _ in rec.receiver_tags] == ["bob"]
    gmac_key = oracle_hkdf(MASTER, b"gmac:bob", 16)
    assert rec.receiver_tags[0][1] == AESGCM(gmac_key).encrypt(rec.iv, b"", rec.ciphertext)
    parsed = ss.ProtectedRecord.from_bytes(rec.to_bytes())
    assert parsed == rec
    assert ss.unprotect(b, b"hdr", parsed, "bob") == b"payload"
    assert len(rec.to_bytes()) == 12 + 7 + 16 + 1 + (3 + 1 + 16)


def test_unknown_receiver():
    a, _ = pair()
    with pytest.raises(ss.UnknownReceiver):
        ss.protect(a, b"", b"x", ["carol"])
    assert a.send_counter == 0


def test_tampered_receiver_tag():
    a, b = pair()
    rec = ss.protect(a, b"", b"x", ["bob"])
    bad = ss.ProtectedRecord(rec.iv, rec.ciphertext, rec.tag, (("bob", bytes(16)),))
    with pytest.raises(ss.BadReceiverTag):
        ss.unprotect(b, b"", bad, "bob")
    # Without claiming a name, only the AEAD tag is checked.
    assert ss.unprotect(b, b"", bad) == b"x"


def test_replay_same_record():
    a, b = pair()
    rec = ss.protect(a, b"", b"x")
    ss.unprotect(b, b"", rec)
    with pytest.raises(ss.ReplayDetected):
        ss.unprotect(b, b"", rec)


def test_replay_too_old():
    a, b = pair()
    recs = [ss.protect(a, b"", bytes([i])) for i in range(71)]
    ss.unprotect(b, b"", recs[70])
    with pytest.raises(ss.ReplayDetected):
        ss.unprotect(b, b"", recs[3])
    assert ss.unprotect(b, b"", recs[7]) == b"\x07"  # 70 - 7 = 63, inside the window


def test_forged_record_does_not_advance_window():
    a, b = pair()
    rec = ss.protect(a, b"", b"x")
    forged = ss.ProtectedRecord(rec.iv, rec.ciphertext, bytes(16))
    with pytest.raises(AuthenticationFailure):
        ss.unprotect(b, b"", forged)
    assert ss.unprotect(b, b"", rec) == b"x"


def test_wrong_aad_fails():
    a, b = pair()
    rec = ss.protect(a, b"header-1", b"x")
    with pytest.raises(AuthenticationFailure):
        ss.unprotect(b, b"header-2", rec)


def test_reflection_rejected():
    a, _ = pair()
    rng = random.Random(1)
    for _ in range(50):
        rec = ss.protect(a, b"", rng.randbytes(rng.randrange(64)))
        with pytest.raises(AuthenticationFailure):
            ss.unprotect(a, b"", rec)


@pytest.mark.parametrize("cut", [0, 5, 28, 29])
def test_short_record_rejected(cut):
    a, _ = pair()
    raw = ss.protect(a, b"", b"").to_bytes()
    if cut < len(raw):
        with pytest.raises(ValueError):
            ss.ProtectedRecord.from_bytes(raw[:cut])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=200), max_size=300))
def test_each_counter_accepted_at_most_once(deliveries):
    a, b = pair()
    recs = [ss.protect(a, b"", b"") for _ in range(201)]
    accepted = []
    for c in deliveries:
        try:
            ss.unprotect(b, b"", recs[c])
            accepted.append(c)
        except ss.ReplayDetected:
            pass
    assert len(accepted) == len(set(accepted))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=10_000), max_size=200))
def test_window_matches_set_model(counters):
    window = ss.ReplayWindow()
    seen = set()
    top = -1
    for c in counters:
        expect_reject = c in seen or (top - c >= 64)
        assert window.seen(c) == expect_reject
        if not expect_reject:
            window.mark(c)
            seen.add(c)
            top = max(top, c)
