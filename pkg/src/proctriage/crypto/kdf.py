"""Password-to-key derivations observed in exam-client storage schemes."""

from __future__ import annotations

import hashlib
import hmac
import struct

PBKDF2_DEFAULT_ITERATIONS = 10_000
ITERATED_DEFAULT_ITERATIONS = 1_000
ITERATED_DEFAULT_SALT = b"Kosher"


def _as_bytes(value) -> bytes:
    return value.encode() if isinstance(value, str) else bytes(value)


def derive_key_pbkdf2(password, salt, iterations: int = PBKDF2_DEFAULT_ITERATIONS,
                      out_len: int = 32, hash_name: str = "sha1") -> bytes:
    """PBKDF2 with an HMAC pseudorandom function (SHA-1 unless overridden).

    Implemented block by block so the construction is visible; the test suite
    cross-checks it against ``hashlib.pbkdf2_hmac``.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    password, salt = _as_bytes(password), _as_bytes(salt)
    mac = hmac.new(password, digestmod=hash_name)
    out = bytearray()
    block = 1
    while len(out) < out_len:
        u = _prf(mac, salt + struct.pack(">I", block))
        acc = int.from_bytes(u, "big")
        for _ in range(iterations - 1):
            u = _prf(mac, u)
            acc ^= int.from_bytes(u, "big")
        out += acc.to_bytes(len(u), "big")
        block += 1
    return bytes(out[:out_len])


def _prf(mac, data: bytes) -> bytes:
    m = mac.copy()
    m.update(data)
    return m.digest()


def derive_key_iterated_hash(password, salt=ITERATED_DEFAULT_SALT,
                             iterations: int = ITERATED_DEFAULT_ITERATIONS,
                             out_len: int = 32) -> bytes:
    """SHA-1 chain over password||salt, stretched with a counter suffix.

    H1 = SHA1(password || salt), H(i+1) = SHA1(Hi); the output is the first
    ``out_len`` bytes of Hn || SHA1(Hn || 01) || SHA1(Hn || 02) ...
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if out_len < 1:
        raise ValueError("out_len must be >= 1")
    h = hashlib.sha1(_as_bytes(password) + _as_bytes(salt)).digest()
    for _ in range(iterations - 1):
        h = hashlib.sha1(h).digest()
    out = bytearray(h)
    counter = 1
    while len(out) < out_len:
        out += hashlib.sha1(h + bytes([counter & 0xFF])).digest()
        counter += 1
    return bytes(out[:out_len])
