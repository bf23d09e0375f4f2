"""Crypto primitive fingerprinting, key harvesting, derivation and validation."""

from .ciphers import SUITES, decrypt, encrypt
from .constants import CryptoConstantHit, cipher_suites, detect_crypto_constants
from .kdf import derive_key_iterated_hash, derive_key_pbkdf2
from .keys import (
    CandidateKey,
    ValidationResult,
    locate_encryption_functions,
    scan_key_candidates,
    shannon_entropy,
    validate_candidates,
)

__all__ = [
    "SUITES", "encrypt", "decrypt", "CryptoConstantHit", "cipher_suites",
    "detect_crypto_constants", "derive_key_pbkdf2", "derive_key_iterated_hash",
    "CandidateKey", "ValidationResult", "locate_encryption_functions",
    "scan_key_candidates", "shannon_entropy", "validate_candidates",
]
