import hashlib
import hmac
import os
import random

import pytest
from cryptography.hazmat.primitives.asymmetric import ec
from hypothesis import given, settings
from hypothesis import strategies as st

from sentrybus import crypto_core as cc
from sentrybus.crypto_core import Suite

from _vectors import read_blocks, unhex

TOY = cc.ModpGroup(p=23, g=5, q=22)


def modexp_oracle(base: int, exponent: int, modulus: int) -> int:
    """Left-to-right square-and-multiply, independent of the builtin pow."""
    result = 1
    for bit in bin(exponent)[2:]:
        result = (result * result) % modulus
        if bit == "1":
            result = (result * base) % modulus
    return result


# ---------------------------------------------------------------- key agreement


def test_toy_group_oracle_and_shared_secret():
    a, b = 6, 15
    A = modexp_oracle(5, a, 23)
    B = modexp_oracle(5, b, 23)
    assert (A, B) == (8, 19)
    assert modexp_oracle(B, a, 23) == modexp_oracle(A, b, 23) == 2

    ka = cc.modp_keypair(TOY, a)
    kb = cc.modp_keypair(TOY, b)
    assert ka.public_value == bytes([8]) and kb.public_value == bytes([19])
    assert cc.keyagree_shared(ka, kb.public_value) == bytes([2])
    assert cc.keyagree_shared(kb, ka.public_value) == bytes([2])


def test_modp_keypair_matches_modexp_oracle():
    drbg = cc.HmacDrbg.from_seed(b"modp-oracle")
    kp = cc.keyagree_generate(Suite.DH_MODP_2048_256, drbg)
    x = int.from_bytes(kp.private_scalar, "big")
    group = cc.MODP_2048_256
    assert 0 < x < group.q
    expected = modexp_oracle(group.g, x, group.p)
    assert kp.public_value == expected.to_bytes(256, "big")


def test_modp_rfc5114_known_answer():
    (vec,) = read_blocks("rfc5114_modp2048_256.txt")
    group = cc.MODP_2048_256
    assert group.p == int(vec["P"], 16)
    assert group.q == int(vec["Q"], 16)
    assert group.g == int(vec["G"], 16)
    ours = cc.modp_keypair(group, int(vec["XstatIUT"], 16))
    assert ours.public_value == unhex(vec["YstatIUT"].zfill(512))
    shared = cc.keyagree_shared(ours, unhex(vec["YstatCAVS"].zfill(512)))
    assert shared == unhex(vec["Z"].zfill(512))


@pytest.mark.parametrize("suite", list(Suite))
def test_consecutive_keypairs_distinct(suite):
    drbg = cc.HmacDrbg()
    first = cc.keyagree_generate(suite, drbg)
    second = cc.keyagree_generate(suite, drbg)
    assert first.private_scalar != second.private_scalar


def test_p256_public_is_on_curve():
    kp = cc.keyagree_generate(Suite.ECDH_P256, cc.HmacDrbg.from_seed(b"curve"))
    x = int.from_bytes(kp.public_value[1:33], "big")
    y = int.from_bytes(kp.public_value[33:], "big")
    p = 2**256 - 2**224 + 2**192 + 2**96 - 1
    b = 0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B
    assert (y * y - (x**3 - 3 * x + b)) % p == 0


def test_p256_symmetry_100_pairs():
    drbg = cc.HmacDrbg.from_seed(b"symmetry")
    for _ in range(100):
        a = cc.keyagree_generate(Suite.ECDH_P256, drbg)
        b = cc.keyagree_generate(Suite.ECDH_P256, drbg)
        assert cc.keyagree_shared(a, b.public_value) == cc.keyagree_shared(b, a.public_value)


def test_modp_symmetry():
    drbg = cc.HmacDrbg.from_seed(b"modp-symmetry")
    for _ in range(5):
        a = cc.keyagree_generate(Suite.DH_MODP_2048_256, drbg)
        b = cc.keyagree_generate(Suite.DH_MODP_2048_256, drbg)
        assert cc.keyagree_shared(a, b.public_value) == cc.keyagree_shared(b, a.public_value)


@pytest.mark.parametrize(
    "peer",
    [
        (1).to_bytes(256, "big"),  # identity element
        (0).to_bytes(256, "big"),
        (cc.MODP_2048_256.p - 1).to_bytes(256, "big"),  # order-2 element
        cc.MODP_2048_256.p.to_bytes(256, "big"),
        b"\x05" * 255,  # wrong length
    ],
)
def test_modp_rejects_bad_peer_public(peer):
    own = cc.keyagree_generate(Suite.DH_MODP_2048_256, cc.HmacDrbg.from_seed(b"x"))
    with pytest.raises(cc.InvalidPeerPublic):
        cc.keyagree_shared(own, peer)


def test_modp_rejects_element_outside_subgroup():
    p = cc.MODP_2048_256.p
    # Find a small element of [2, p-2] that is not in the order-q subgroup.
    y = next(v for v in range(2, 100) if pow(v, cc.MODP_2048_256.q, p) != 1)
    own = cc.keyagree_generate(Suite.DH_MODP_2048_256, cc.HmacDrbg.from_seed(b"y"))
    with pytest.raises(cc.InvalidPeerPublic):
        cc.keyagree_shared(own, y.to_bytes(256, "big"))


@pytest.mark.parametrize(
    "peer",
    [
        b"\x00",  # point at infinity
        b"\x04" + b"\x00" * 64,
        b"\x04" + b"\x01" * 64,  # off curve
        b"\x02" + b"\x01" * 32,  # compressed form not accepted
    ],
)
def test_p256_rejects_bad_peer_public(peer):
    own = cc.keyagree_generate(Suite.ECDH_P256, cc.HmacDrbg.from_seed(b"z"))
    with pytest.raises(cc.InvalidPeerPublic):
        cc.keyagree_shared(own, peer)


def test_toy_group_rejects_identity():
    with pytest.raises(cc.InvalidPeerPublic):
        cc.keyagree_shared(cc.modp_keypair(TOY, 6), bytes([1]))


# ---------------------------------------------------------------- signatures


def test_ecdsa_round_trip_and_tamper():
    kp = cc.generate_signing_keypair(cc.HmacDrbg.from_seed(b"sig"))
    msg = b"the whole message is covered"
    sig = cc.sign(kp.private, msg)
    assert cc.verify(kp.public, msg, sig)
    for bit in range(len(msg) * 8):
        flipped = bytearray(msg)
        flipped[bit // 8] ^= 1 << (bit % 8)
        assert not cc.verify(kp.public, bytes(flipped), sig)
    for bit in range(0, 512, 7):
        bad = bytearray(sig)
        bad[bit // 8] ^= 1 << (bit % 8)
        assert not cc.verify(kp.public, msg, bytes(bad))


@pytest.mark.parametrize("length", [0, 63, 65, 72])
def test_malformed_signature_is_distinct_error(length):
    kp = cc.generate_signing_keypair(cc.HmacDrbg.from_seed(b"sig"))
    with pytest.raises(cc.MalformedSignature):
        cc.verify(kp.public, b"m", b"\x01" * length)


def test_ecdsa_rfc6979_known_answer():
    blocks = read_blocks("rfc6979_p256_sha256.txt")
    key = blocks[0]
    kp = cc.signing_keypair_from_private(unhex(key["d"]))
    assert kp.public == b"\x04" + unhex(key["Ux"]) + unhex(key["Uy"])
    assert [v["Msg"] for v in blocks] == ["sample", "test"]
    for vec in blocks:
        expected = unhex(vec["R"]) + unhex(vec["S"])
        assert cc.sign(kp.private, vec["Msg"].encode()) == expected
        assert cc.verify(kp.public, vec["Msg"].encode(), expected)


def test_ecdsa_cavp_keypair_vectors():
    for vec in read_blocks("ecdsa_p256_keypair.rsp"):
        if "d" not in vec:
            continue
        kp = cc.signing_keypair_from_private(unhex(vec["d"]))
        assert kp.public == b"\x04" + unhex(vec["Qx"]) + unhex(vec["Qy"])


def test_ecdsa_cavp_sigver_vectors():
    vectors = [v for v in read_blocks("ecdsa_p256_sha256_sigver.rsp") if "Msg" in v]
    assert len(vectors) == 15
    for vec in vectors:
        public = b"\x04" + unhex(vec["Qx"]) + unhex(vec["Qy"])
        sig = unhex(vec["R"]) + unhex(vec["S"])
        try:
            ok = cc.verify(public, unhex(vec["Msg"]), sig)
        except cc.MalformedSignature:
            ok = False
        assert ok == vec["Result"].startswith("P"), vec["Result"]


# ---------------------------------------------------------------- HKDF


def test_hkdf_rfc5869_vectors():
    vectors = read_blocks("rfc5869_hkdf_sha256.txt")
    assert len(vectors) == 3
    for vec in vectors:
        salt, ikm, info = unhex(vec["salt"]), unhex(vec["IKM"]), unhex(vec["info"])
        assert cc.hkdf_extract(salt, ikm) == unhex(vec["PRK"])
        assert cc.hkdf(ikm, salt, info, int(vec["L"])) == unhex(vec["OKM"])


def test_hkdf_deterministic_and_length():
    out = cc.hkdf(b"ikm", b"salt", b"info", 100)
    assert out == cc.hkdf(b"ikm", b"salt", b"info", 100)
    assert len(cc.hkdf(b"ikm", b"", b"", 8160)) == 8160


def test_hkdf_output_too_long():
    with pytest.raises(cc.OutputTooLong):
        cc.hkdf(b"ikm", b"salt", b"info", 8161)


# ---------------------------------------------------------------- AES-GCM / GMAC


def _gcm_vectors():
    return [v for v in read_blocks("gcm_encrypt_ext_iv.rsp") if "Count" in v]


def test_gcm_cavp_encrypt_vectors():
    vectors = _gcm_vectors()
    assert len(vectors) >= 30
    for vec in vectors:
        key, iv = unhex(vec["Key"]), unhex(vec["IV"])
        sealed = cc.aead_seal(key, iv, unhex(vec["AAD"]), unhex(vec["PT"]))
        assert sealed == unhex(vec["CT"]) + unhex(vec["Tag"])
        assert cc.aead_open(key, iv, unhex(vec["AAD"]), sealed) == unhex(vec["PT"])


def test_gmac_cavp_vectors():
    gmac = [v for v in _gcm_vectors() if v["PTlen"] == "0" and v["AADlen"] != "0"]
    assert gmac
    for vec in gmac:
        tag = cc.gmac_tag(unhex(vec["Key"]), unhex(vec["IV"]), unhex(vec["AAD"]))
        assert tag == unhex(vec["Tag"])


def test_gcm_cavp_decrypt_vectors():
    vectors = [v for v in read_blocks("gcm_decrypt128.rsp") if "Count" in v]
    assert any("FAIL" in v for v in vectors)
    for vec in vectors:
        args = unhex(vec["Key"]), unhex(vec["IV"]), unhex(vec["AAD"]), unhex(vec["CT"]) + unhex(vec["Tag"])
        if "FAIL" in vec:
            with pytest.raises(cc.AuthenticationFailure):
                cc.aead_open(*args)
        else:
            assert cc.aead_open(*args) == unhex(vec["PT"])


def test_gmac_is_tag_of_empty_seal():
    key, iv, data = os.urandom(16), os.urandom(12), os.urandom(40)
    assert cc.gmac_tag(key, iv, data) == cc.aead_seal(key, iv, data, b"")
    assert cc.gmac_tag(os.urandom(16), iv, data) != cc.gmac_tag(key, iv, data)


@settings(max_examples=60, deadline=None)
@given(
    key=st.binary(min_size=32, max_size=32),
    iv=st.binary(min_size=12, max_size=12),
    aad=st.binary(max_size=64),
    pt=st.binary(max_size=256),
)
def test_aead_round_trip(key, iv, aad, pt):
    assert cc.aead_open(key, iv, aad, cc.aead_seal(key, iv, aad, pt)) == pt


def test_aead_rejects_every_field_modification():
    key, iv = os.urandom(32), os.urandom(12)
    sealed = cc.aead_seal(key, iv, b"header", b"payload bytes")
    with pytest.raises(cc.AuthenticationFailure):
        cc.aead_open(key, iv, b"headeR", sealed)
    bad_iv = bytes([iv[0] ^ 1]) + iv[1:]
    with pytest.raises(cc.AuthenticationFailure):
        cc.aead_open(key, bad_iv, b"header", sealed)
    for i in range(len(sealed)):
        mutated = bytearray(sealed)
        mutated[i] ^= 0x80
        with pytest.raises(cc.AuthenticationFailure):
            cc.aead_open(key, iv, b"header", bytes(mutated))


def test_aead_requires_96_bit_iv():
    with pytest.raises(ValueError):
        cc.aead_seal(os.urandom(16), os.urandom(16), b"", b"x")


def test_random_tag_forgeries_never_verify():
    rng = random.Random(1234)
    aead = cc.AesGcm(os.urandom(32))
    iv = os.urandom(12)
    ct = aead.seal(iv, b"aad", b"some plaintext")[:-16]
    accepted = 0
    for _ in range(100_000):
        try:
            aead.open(iv, b"aad", ct + rng.randbytes(16))
            accepted += 1
        except cc.AuthenticationFailure:
            pass
    assert accepted == 0


# ---------------------------------------------------------------- HMAC-DRBG


def test_hmac_drbg_cavp_vector():
    (vec,) = read_blocks("hmac_drbg_sha256.txt")
    drbg = cc.HmacDrbg(unhex(vec["EntropyInput"]), unhex(vec["Nonce"]), unhex(vec["PersonalizationString"]))
    drbg.reseed(unhex(vec["EntropyInputReseed"]), unhex(vec["AdditionalInputReseed"]))
    drbg.generate(len(vec["ReturnedBits"]) // 2, unhex(vec["AdditionalInput"]))
    out = drbg.generate(len(vec["ReturnedBits"]) // 2, unhex(vec["AdditionalInput2"]))
    assert out == unhex(vec["ReturnedBits"])


def test_drbg_state_advances():
    drbg = cc.HmacDrbg()
    assert drbg.generate(32) != drbg.generate(32)


def test_drbg_zero_length_still_steps():
    drbg = cc.HmacDrbg.from_seed(b"zero")
    before = (drbg.key, drbg.value, drbg.reseed_counter)
    assert drbg.generate(0) == b""
    assert drbg.reseed_counter == before[2] + 1
    assert (drbg.key, drbg.value) != before[:2]


def test_drbg_matches_hmac_reference_step():
    # One generate step with empty additional input, written out longhand.
    drbg = cc.HmacDrbg.from_seed(b"ref")
    k, v = drbg.key, drbg.value
    v = hmac.new(k, v, hashlib.sha256).digest()
    expected = v
    k = hmac.new(k, v + b"\x00", hashlib.sha256).digest()
    v = hmac.new(k, v, hashlib.sha256).digest()
    assert drbg.generate(32) == expected
    assert (drbg.key, drbg.value) == (k, v)


def test_drbg_reseeds_automatically_at_interval():
    calls = []

    def source(n):
        calls.append(n)
        return b"\x11" * n

    drbg = cc.HmacDrbg(b"\x22" * 32, b"\x33" * 16, entropy_source=source, reseed_interval=3)
    for _ in range(5):
        drbg.generate(16)
    assert calls == [32]
    assert drbg.reseed_counter <= 3


def test_drbg_large_requests_are_chunked():
    drbg = cc.HmacDrbg.from_seed(b"big")
    assert len(drbg.generate(200_000)) == 200_000


def test_p256_keypair_from_drbg_matches_library_derivation():
    kp = cc.keyagree_generate(Suite.ECDH_P256, cc.HmacDrbg.from_seed(b"lib"))
    key = ec.derive_private_key(int.from_bytes(kp.private_scalar, "big"), ec.SECP256R1())
    nums = key.public_key().public_numbers()
    assert kp.public_value[1:] == nums.x.to_bytes(32, "big") + nums.y.to_bytes(32, "big")
