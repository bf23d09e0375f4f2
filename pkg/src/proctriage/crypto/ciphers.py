"""Block cipher suites used for payload encryption and candidate validation.

The forge and the validator share these helpers on purpose; the known-answer
tests in the suite pin them to published vectors.
"""

from __future__ import annotations

from dataclasses import dataclass

from cryptography.hazmat.decrepit.ciphers.algorithms import TripleDES
from cryptography.hazmat.primitives import padding
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes


@dataclass(frozen=True)
class Suite:
    name: str
    key_lengths: tuple
    block_size: int

    def algorithm(self, key: bytes):
        if len(key) not in self.key_lengths:
            raise ValueError(f"{self.name} takes {self.key_lengths}-byte keys, got {len(key)}")
        if self.name.startswith("AES"):
            return algorithms.AES(key)
        if len(key) == 16:
            # two-key keying option, spelled out as K1 K2 K1
            key = key + key[:8]
        return TripleDES(key)


SUITES = {
    "AES_256_CBC": Suite("AES_256_CBC", (32,), 16),
    "AES_128_CBC": Suite("AES_128_CBC", (16,), 16),
    # 2-key and 3-key keying options
    "TDES_CBC": Suite("TDES_CBC", (16, 24), 8),
}


def _mode(mode: str, iv):
    if mode == "ECB":
        return modes.ECB()
    return modes.CBC(iv)


def encrypt(suite: str, key: bytes, iv, plaintext: bytes, mode: str = "CBC") -> bytes:
    s = SUITES[suite]
    padder = padding.PKCS7(s.block_size * 8).padder()
    data = padder.update(plaintext) + padder.finalize()
    enc = Cipher(s.algorithm(key), _mode(mode, iv)).encryptor()
    return enc.update(data) + enc.finalize()


def decrypt(suite: str, key: bytes, iv, ciphertext: bytes, mode: str = "CBC", unpad: bool = True) -> bytes:
    s = SUITES[suite]
    dec = Cipher(s.algorithm(key), _mode(mode, iv)).decryptor()
    data = dec.update(ciphertext) + dec.finalize()
    if not unpad:
        return data
    unpadder = padding.PKCS7(s.block_size * 8).unpadder()
    return unpadder.update(data) + unpadder.finalize()


def ecb_decrypt_blocks(suite: str, key: bytes, blocks: bytes) -> bytes:
    """Raw block decryption without chaining or padding removal."""
    dec = Cipher(SUITES[suite].algorithm(key), modes.ECB()).decryptor()
    return dec.update(blocks) + dec.finalize()
