"""Key-window harvesting and decryption-plausibility validation."""

from __future__ import annotations

import math
import struct
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from ..errors import TriageError
from .ciphers import SUITES, ecb_decrypt_blocks

DEFAULT_WINDOW = 1024
DEFAULT_KEY_LENGTHS = frozenset({16, 24, 32})
DEFAULT_THRESHOLD = 6.5
SAMPLE_BYTES = 4096
# entropy over fewer bytes than this is too noisy to mean anything
MIN_ENTROPY_SAMPLE = 256
TEXT_RATIO = 0.85
MIN_TEXT_SAMPLE = 16
CONFIRMED, REJECTED = "CONFIRMED", "REJECTED"


class EmptyInputError(TriageError, ValueError):
    code = "EMPTY_INPUT"


class BlockLengthError(TriageError, ValueError):
    code = "BAD_BLOCK_LENGTH"


def shannon_entropy(data: bytes) -> float:
    if not data:
        raise EmptyInputError("entropy of an empty sequence")
    n = len(data)
    h = 0.0
    for count in Counter(data).values():
        p = count / n
        h -= p * math.log2(p)
    return max(0.0, min(8.0, h))


@dataclass(frozen=True)
class CandidateKey:
    bytes: bytes
    length: int
    source_addr: int
    distance_from_ref: int
    entropy_bits_per_byte: float
    ref_addr: Optional[int] = None

    @property
    def hex(self) -> str:
        return self.bytes.hex()


@dataclass(frozen=True)
class ValidationResult:
    candidate: CandidateKey
    iv: Optional[CandidateKey]
    suite: str
    plaintext_entropy: float
    padding_valid: bool
    magic_match: Optional[str]
    verdict: str
    ciphertext_index: int = 0
    mode: str = "CBC"


def locate_encryption_functions(hits, index, functions) -> list:
    """Functions referencing a crypto constant plus their direct callers."""
    by_entry = {f.entry: f for f in functions}
    wanted = set()
    for hit in hits:
        wanted.update(hit.referencing_functions)
    for entry in list(wanted):
        wanted.update(index.callers_of(entry))
    return [by_entry[e] for e in sorted(wanted) if e in by_entry]


def data_ref_targets(index, functions) -> list:
    entries = {f.entry for f in functions}
    targets = set()
    for site, refs in index.code_to_data.items():
        if index.function_of.get(site) in entries:
            targets.update(refs)
    return sorted(targets)


def scan_windows(image, targets, window: int = DEFAULT_WINDOW, lengths=DEFAULT_KEY_LENGTHS) -> list:
    """Every unaligned in-window slice of each requested length around each target."""
    lengths = sorted(set(lengths))
    if not lengths:
        return []
    if any(n not in (8, 16, 24, 32) for n in lengths):
        raise ValueError(f"unsupported candidate lengths {lengths}")
    if window < max(lengths):
        raise ValueError("window must be >= the largest candidate length")
    best = {}
    for target in sorted(set(targets)):
        sec = image.section_for(target)
        if sec is None:
            continue
        lo = max(target - window, sec.virtual_addr)
        hi = min(target + window, sec.end - 1)
        if hi < lo:
            continue
        blob = image.read(lo, hi - lo + max(lengths))
        for addr in range(lo, hi + 1):
            off = addr - lo
            dist = addr - target
            for n in lengths:
                if off + n > len(blob):
                    break
                chunk = blob[off:off + n]
                key = (chunk, n)
                prev = best.get(key)
                if prev is None or (abs(dist), addr) < (abs(prev[1]), prev[0]):
                    best[key] = (addr, dist, target)
    cache = {}
    out = []
    for (chunk, n), (addr, dist, target) in best.items():
        ent = cache.get(chunk)
        if ent is None:
            ent = cache[chunk] = shannon_entropy(chunk)
        out.append(CandidateKey(chunk, n, addr, dist, ent, target))
    out.sort(key=_rank)
    return out


def _rank(c: CandidateKey):
    return (-c.entropy_bits_per_byte, abs(c.distance_from_ref), c.source_addr, c.length, c.bytes)


def scan_key_candidates(image, functions, window: int = DEFAULT_WINDOW,
                        lengths=DEFAULT_KEY_LENGTHS, index=None) -> list:
    """Harvest key candidates around the data references of ``functions``."""
    if index is None:
        from ..analysis import extract_xrefs
        index = extract_xrefs(image, functions)
    return scan_windows(image, data_ref_targets(index, functions), window, lengths)


def detect_magic(data: bytes) -> Optional[str]:
    if data[:4] == b"\x7fELF":
        return "ELF"
    if data[:2] == b"MZ" and len(data) >= 0x40:
        pe_off = struct.unpack_from("<I", data, 0x3C)[0]
        if data[pe_off:pe_off + 4] == b"PE\0\0":
            return "PE"
    if data[:4] == b"PK\x03\x04":
        return "ZIP"
    if len(data) >= MIN_TEXT_SAMPLE:
        printable = sum(1 for b in data if 0x20 <= b < 0x7F or b in (9, 10, 13))
        if printable / len(data) >= TEXT_RATIO:
            return "TEXT"
    return None


def _pkcs7_ok(block: bytes, size: int) -> bool:
    pad = block[-1]
    return 1 <= pad <= size and block[-pad:] == bytes([pad]) * pad


def _xor(a: bytes, b: bytes) -> bytes:
    return bytes(x ^ y for x, y in zip(a, b))


class ValidationReport(list):
    """Sorted results; ``skipped`` lists (ciphertext index, error) pairs."""

    def __init__(self, results=(), skipped=()):
        super().__init__(results)
        self.skipped = list(skipped)


def validate_candidates(candidates, ivs, ciphertexts, suites=("AES_256_CBC", "AES_128_CBC", "TDES_CBC"),
                        mode: str = "CBC", threshold: float = DEFAULT_THRESHOLD) -> ValidationReport:
    """Trial-decrypt each ciphertext with every fitting (key, suite).

    One result is produced per (key, suite, ciphertext). In CBC mode the
    padding check on the final block does not depend on the IV, so IVs are
    only tried once a key passes it; the IV yielding a magic match (else the
    lowest-entropy plaintext) is kept.
    """
    if mode not in ("CBC", "ECB"):
        raise ValueError(f"unknown mode {mode}")
    results, skipped = [], []
    suites = [SUITES[s] for s in sorted(set(suites))]
    candidates = list(candidates)
    for ci, ct in enumerate(ciphertexts):
        for suite in suites:
            bs = suite.block_size
            if not ct or len(ct) % bs:
                err = BlockLengthError(f"ciphertext {ci} length {len(ct)} is not a multiple of {bs}")
                if (ci, err.code) not in [(i, e.code) for i, e in skipped]:
                    skipped.append((ci, err))
                continue
            suite_ivs = [iv for iv in ivs if iv.length == bs]
            for cand in candidates:
                if cand.length not in suite.key_lengths:
                    continue
                results.append(_trial(cand, suite, ct, ci, suite_ivs, mode, threshold))
    order = {id(c): i for i, c in enumerate(candidates)}
    results.sort(key=lambda r: (r.verdict != CONFIRMED, r.plaintext_entropy,
                                r.ciphertext_index, order.get(id(r.candidate), 0), r.suite))
    return ValidationReport(results, skipped)


def _trial(cand, suite, ct, ci, ivs, mode, threshold) -> ValidationResult:
    bs = suite.block_size
    last = ecb_decrypt_blocks(suite.name, cand.bytes, ct[-bs:])
    whole = len(ct) <= SAMPLE_BYTES
    if mode == "CBC" and len(ct) > bs:
        padding_valid = _pkcs7_ok(_xor(last, ct[-2 * bs:-bs]), bs)
    elif mode == "CBC":
        # a single block: padding depends on the IV and is settled below
        padding_valid = None
    else:
        padding_valid = _pkcs7_ok(last, bs)
    if padding_valid is False:
        return ValidationResult(cand, None, suite.name, 8.0, False, None, REJECTED, ci, mode)

    sample_ct = ct[:SAMPLE_BYTES - SAMPLE_BYTES % bs]
    raw = ecb_decrypt_blocks(suite.name, cand.bytes, sample_ct)
    if mode == "ECB":
        iv, plain = None, raw
    else:
        iv, plain = _choose_iv(raw, sample_ct, bs, ivs)
        if iv is None and ivs:
            return ValidationResult(cand, None, suite.name, 8.0, False, None, REJECTED, ci, mode)
    if whole:
        if padding_valid is None:
            padding_valid = _pkcs7_ok(plain[-bs:], bs)
            if not padding_valid:
                return ValidationResult(cand, None, suite.name, 8.0, False, None, REJECTED, ci, mode)
        plain = plain[:-plain[-1]]
    magic = detect_magic(plain)
    ent = shannon_entropy(plain) if plain else 0.0
    plausible = magic is not None or (len(plain) >= MIN_ENTROPY_SAMPLE and ent < threshold)
    return ValidationResult(cand, iv, suite.name, ent, True, magic,
                            CONFIRMED if plausible else REJECTED, ci, mode)


_STRUCTURAL = (b"\x7fELF", b"MZ", b"PK\x03\x04")


def _printable(block: bytes) -> int:
    return sum(1 for b in block if 0x20 <= b < 0x7F or b in (9, 10, 13))


def _choose_iv(raw: bytes, sample_ct: bytes, bs: int, ivs):
    """Pick the IV for a CBC trial.

    Only the first plaintext block depends on the IV, so candidates are
    compared on that block alone: a structural magic wins, then the most
    printable block, then rank order. With no IV candidates a zero IV is
    assumed and reported as None. A single-block ciphertext also needs the
    IV to produce valid padding.
    """
    tail = _xor(raw[bs:], sample_ct[:-bs])
    head = raw[:bs]
    if not ivs:
        return None, _xor(head, bytes(bs)) + tail
    single = len(sample_ct) == bs
    best = None
    for rank, iv in enumerate(ivs):
        first = _xor(head, iv.bytes)
        if single and not _pkcs7_ok(first, bs):
            continue
        structural = any(first.startswith(m) for m in _STRUCTURAL)
        if structural and detect_magic(first + tail) in ("ELF", "PE", "ZIP"):
            return iv, first + tail
        score = (-_printable(first), rank)
        if best is None or score < best[0]:
            best = (score, iv, first)
    if best is None:
        return None, b""
    return best[1], best[2] + tail
