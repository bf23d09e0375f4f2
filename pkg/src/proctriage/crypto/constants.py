"""Fingerprints for well-known cipher and hash tables."""

from __future__ import annotations

import struct
from dataclasses import dataclass

AES_SBOX = bytes.fromhex(
    "637c777bf26b6fc53001672bfed7ab76ca82c97dfa5947f0add4a2af9ca472c0"
    "b7fd9326363ff7cc34a5e5f171d8311504c723c31896059a071280e2eb27b275"
    "09832c1a1b6e5aa0523bd6b329e32f8453d100ed20fcb15b6acbbe394a4c58cf"
    "d0efaafb434d338545f9027f503c9fa851a3408f929d38f5bcb6da2110fff3d2"
    "cd0c13ec5f974417c4a77e3d645d197360814fdc222a908846eeb814de5e0bdb"
    "e0323a0a4906245cc2d3ac629195e479e7c8376d8dd54ea96c56f4ea657aae08"
    "ba78252e1ca6b4c6e8dd741f4bbd8b8a703eb5664803f60e613557b986c11d9e"
    "e1f8981169d98e949b1e87e9ce5528df8ca1890dbfe6426841992d0fb054bb16"
)


def _xtime(b: int) -> int:
    b <<= 1
    return (b ^ 0x1B) & 0xFF if b & 0x100 else b


# first round table of the table-driven AES variant: (2s, s, s, 3s) per entry
AES_TE0 = tuple((_xtime(s) << 24) | (s << 16) | (s << 8) | (_xtime(s) ^ s) for s in AES_SBOX)

SHA1_IV = (0x67452301, 0xEFCDAB89, 0x98BADCFE, 0x10325476, 0xC3D2E1F0)

DES_S1 = bytes([
    14, 4, 13, 1, 2, 15, 11, 8, 3, 10, 6, 12, 5, 9, 0, 7,
    0, 15, 7, 4, 14, 2, 13, 1, 10, 6, 12, 11, 9, 5, 3, 8,
    4, 1, 14, 8, 13, 6, 2, 11, 15, 12, 9, 7, 3, 10, 5, 0,
    15, 12, 8, 2, 4, 9, 1, 7, 5, 11, 3, 14, 10, 0, 6, 13,
])

DES_IP = bytes([
    58, 50, 42, 34, 26, 18, 10, 2, 60, 52, 44, 36, 28, 20, 12, 4,
    62, 54, 46, 38, 30, 22, 14, 6, 64, 56, 48, 40, 32, 24, 16, 8,
    57, 49, 41, 33, 25, 17, 9, 1, 59, 51, 43, 35, 27, 19, 11, 3,
    61, 53, 45, 37, 29, 21, 13, 5, 63, 55, 47, 39, 31, 23, 15, 7,
])

PBKDF2_STRINGS = ("pbkdf2", "rfc2898derivebytes")
PBKDF2_IMPORTS = ("BCryptDeriveKeyPBKDF2", "PKCS5_PBKDF2_HMAC", "PKCS5_PBKDF2_HMAC_SHA1", "CryptDeriveKey")

AES_SBOX_HIT, AES_TTABLE, SHA1_IV_HIT, DES_TABLES, PBKDF2_MARKER = (
    "AES_SBOX", "AES_TTABLE", "SHA1_IV", "DES_TABLES", "PBKDF2_MARKER")


def _words(values, fmt):
    return b"".join(struct.pack(fmt, v) for v in values)


# (primitive, form, needle). Only the leading 16 T-table entries are matched;
# that is already 64 bytes and survives tables that are split per round.
TABLE_PATTERNS = (
    (AES_SBOX_HIT, "bytes", AES_SBOX),
    (AES_TTABLE, "le32", _words(AES_TE0[:16], "<I")),
    (AES_TTABLE, "be32", _words(AES_TE0[:16], ">I")),
    (SHA1_IV_HIT, "le32", _words(SHA1_IV, "<I")),
    (SHA1_IV_HIT, "be32", _words(SHA1_IV, ">I")),
    (DES_TABLES, "s1-bytes", DES_S1),
    (DES_TABLES, "s1-le32", _words(DES_S1, "<I")),
    (DES_TABLES, "ip-bytes", DES_IP),
)

FINDING_IDS = {
    AES_SBOX_HIT: "crypto.aes-sbox",
    AES_TTABLE: "crypto.aes-ttable",
    SHA1_IV_HIT: "crypto.sha1-iv",
    DES_TABLES: "crypto.des-tables",
    PBKDF2_MARKER: "crypto.pbkdf2",
}

SUITE_NAMES = {
    AES_SBOX_HIT: "AES",
    AES_TTABLE: "AES",
    SHA1_IV_HIT: "SHA-1",
    DES_TABLES: "DES/3DES",
    PBKDF2_MARKER: "PBKDF2",
}


@dataclass(frozen=True)
class CryptoConstantHit:
    primitive: str
    addr: int
    referencing_functions: tuple = ()
    form: str = "bytes"
    size: int = 0
    # instruction addresses referencing the hit, including code outside any function
    xref_sites: tuple = ()


def _find_all(blob: bytes, needle: bytes):
    pos = blob.find(needle)
    while pos >= 0:
        yield pos
        pos = blob.find(needle, pos + 1)


def _owners(index, sites) -> tuple:
    if index is None:
        return ()
    return tuple(sorted({index.function_of[s] for s in sites if index.function_of.get(s) is not None}))


def detect_crypto_constants(image, index=None) -> list:
    """Find cipher/hash tables by exact bytes and attach referencing functions.

    SHA-1 initial values are also recognized when loaded as 32-bit
    immediates, the usual shape of compiled hash init routines.
    """
    hits = []
    for sec in image.sections:
        if not sec.size:
            continue
        blob = image.section_bytes(sec)
        for primitive, form, needle in TABLE_PATTERNS:
            for off in _find_all(blob, needle):
                addr = sec.virtual_addr + off
                sites = index.sites_referencing(addr, addr + len(needle)) if index else ()
                hits.append(CryptoConstantHit(primitive, addr, _owners(index, sites), form,
                                              len(needle), tuple(sites)))
    if index is not None:
        hits.extend(_immediate_sha1(index))
        hits.extend(_pbkdf2_markers(image, index))
    else:
        hits.extend(_pbkdf2_markers(image, None))
    hits.sort(key=lambda h: (h.addr, h.primitive, h.form))
    return hits


def _immediate_sha1(index) -> list:
    wanted = set(SHA1_IV)
    seen = {}
    for addr, ins in index.instructions.items():
        entry = index.function_of.get(addr)
        if entry is None or ins.imm is None:
            continue
        value = ins.imm & 0xFFFFFFFF
        if value in wanted:
            seen.setdefault(entry, {}).setdefault(value, addr)
    hits = []
    for entry, found in sorted(seen.items()):
        if set(found) == wanted:
            sites = tuple(sorted(found.values()))
            hits.append(CryptoConstantHit(SHA1_IV_HIT, sites[0], (entry,), "imm32", 20, sites))
    return hits


def _pbkdf2_markers(image, index) -> list:
    hits = []
    for sref in image.strings:
        low = sref.value.lower()
        if any(tag in low for tag in PBKDF2_STRINGS):
            sites = index.sites_referencing(sref.addr, sref.end) if index else ()
            hits.append(CryptoConstantHit(PBKDF2_MARKER, sref.addr, _owners(index, sites), "string",
                                          sref.size, tuple(sites)))
    import_sites = {}
    if index is not None:
        for site, imps in index.code_to_import.items():
            for imp in imps:
                import_sites.setdefault(imp.slot_addr, []).append(site)
    for imp in image.imports:
        if imp.slot_addr is None or image.section_for(imp.slot_addr) is None:
            continue
        if any(imp.symbol == name or imp.symbol.startswith(name + "_") for name in PBKDF2_IMPORTS):
            sites = import_sites.get(imp.slot_addr, ())
            hits.append(CryptoConstantHit(PBKDF2_MARKER, imp.slot_addr, _owners(index, sites), "import",
                                          8, tuple(sorted(sites))))
    return hits


def cipher_suites(hits) -> list:
    """Human-facing primitive names for a hit list, deduplicated and sorted."""
    return sorted({SUITE_NAMES[h.primitive] for h in hits})
