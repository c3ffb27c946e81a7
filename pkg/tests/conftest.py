from __future__ import annotations

import pytest

from sentrybus import handshake as hs
from sentrybus import identity as idm
from sentrybus.crypto_core import HmacDrbg, Suite


class Pki:
    """One CA plus cached participant identities, shared across a test module."""

    def __init__(self, seed: bytes = b"pki"):
        self.drbg = HmacDrbg.from_seed(seed)
        self.ca = idm.ca_create("testca", self.drbg)
        self.root = self.ca.certificate
        self._cache: dict = {}

    def identity(self, name: str, suite: Suite, static: bool = True) -> idm.ParticipantIdentity:
        key = (name, suite, static)
        if key not in self._cache:
            self._cache[key] = idm.issue_identity(self.ca, name, suite, static, self.drbg)
        return self._cache[key]


@pytest.fixture(scope="session")
def pki() -> Pki:
    return Pki()


def run_handshake(alice, bob, root, fs_mode, *, drbg_a=None, drbg_b=None, bob_root=None):
    """Drive one honest Request/Reply/Final exchange; returns both sessions."""
    init, request = hs.begin_request(alice, alice.suite, fs_mode, drbg=drbg_a)
    resp, reply = hs.process_request(bob, bob_root or root, request.to_bytes(), fs_mode=fs_mode, drbg=drbg_b)
    final, _ = hs.process_reply(init, root, reply.to_bytes())
    hs.process_final(resp, final.to_bytes())
    return init, resp
