"""Offline process-memory snapshots: raw dump plus JSON region map.

A snapshot is turned into a pseudo image whose sections are the mapped
regions, so the signature and crypto engines run on it unchanged. There is
no code recovery over raw memory, hence no xrefs: findings are LOW unless
they come from an import table found in a mapped PE module header.

Producing dumps is left to the operator. With gdb, for example, break at a
point after the protected content is decrypted, then ``dump memory`` each
mapping listed by ``info proc mappings`` into one file and record
``{"base","size","flags","offset"}`` for each in the map.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from . import signatures as sg
from .crypto import constants as cc
from .crypto.keys import DEFAULT_KEY_LENGTHS, DEFAULT_WINDOW, scan_windows
from .errors import SnapshotError
from .loader import BinaryImage, ImportRef, SectionRecord, _cstr, extract_strings


@dataclass(frozen=True)
class Region:
    base: int
    size: int
    flags: str
    bytes: bytes = field(repr=False)

    @property
    def end(self) -> int:
        return self.base + self.size


@dataclass(frozen=True)
class MemorySnapshot:
    regions: tuple = ()
    source_meta: str = ""

    def region_for(self, va: int) -> Optional[Region]:
        for r in self.regions:
            if r.base <= va < r.end:
                return r
        return None

    def read(self, va: int, size: int) -> bytes:
        r = self.region_for(va)
        if r is None:
            return b""
        return r.bytes[va - r.base:va - r.base + size]


def _int(v) -> int:
    return int(v, 0) if isinstance(v, str) else int(v)


def snapshot_from_bytes(dump: bytes, entries, source_meta: str = "") -> MemorySnapshot:
    regions = []
    for i, e in enumerate(entries):
        try:
            base, size, offset = _int(e["base"]), _int(e["size"]), _int(e["offset"])
            flags = str(e.get("flags", "r"))
        except (KeyError, TypeError, ValueError) as exc:
            raise SnapshotError(f"region {i}: bad entry {e!r} ({exc})", "BAD_MAP") from None
        if size < 0 or offset < 0 or base < 0:
            raise SnapshotError(f"region {i}: negative field", "BAD_MAP")
        if offset + size > len(dump):
            raise SnapshotError(f"region {i}: offset {offset:#x} + size {size:#x} exceeds dump of "
                                f"{len(dump):#x} bytes", "MAP_DUMP_MISMATCH")
        if set(flags) - set("rwx-"):
            raise SnapshotError(f"region {i}: bad flags {flags!r}", "BAD_MAP")
        regions.append(Region(base, size, flags.replace("-", ""), dump[offset:offset + size]))
    regions.sort(key=lambda r: r.base)
    for a, b in zip(regions, regions[1:]):
        if b.base < a.end:
            raise SnapshotError(f"regions at {a.base:#x} and {b.base:#x} overlap", "OVERLAPPING_REGIONS")
    return MemorySnapshot(tuple(regions), source_meta)


def load_snapshot(dump_path, map_path) -> MemorySnapshot:
    dump_path, map_path = Path(dump_path), Path(map_path)
    for p in (dump_path, map_path):
        if not p.is_file():
            raise SnapshotError(f"{p}: no such file", "FILE_NOT_FOUND")
    try:
        doc = json.loads(map_path.read_text("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise SnapshotError(f"{map_path}: not JSON ({exc})", "BAD_MAP") from None
    meta = ""
    if isinstance(doc, dict):
        meta = str(doc.get("source_meta", ""))
        doc = doc.get("regions")
    if not isinstance(doc, list):
        raise SnapshotError(f"{map_path}: expected a list of regions", "BAD_MAP")
    return snapshot_from_bytes(dump_path.read_bytes(), doc, meta or dump_path.name)


# -- pseudo image ---------------------------------------------------------------

def _module_imports(snap: MemorySnapshot, region: Region) -> tuple:
    """Import table of a PE module whose headers are mapped at ``region.base``."""
    data = region.bytes
    if data[:2] != b"MZ" or len(data) < 0x40:
        return (), ()
    (lfanew,) = struct.unpack_from("<I", data, 0x3C)
    if data[lfanew:lfanew + 4] != b"PE\0\0" or lfanew + 24 > len(data):
        return (), ()
    opt = lfanew + 24
    (magic,) = struct.unpack_from("<H", data, opt)
    if magic == 0x20B:
        dirs_off, thunk_size = opt + 112, 8
    elif magic == 0x10B:
        dirs_off, thunk_size = opt + 96, 4
    else:
        return (), ()
    if dirs_off + 16 > len(data):
        return (), ()
    imp_rva, _size = struct.unpack_from("<II", data, dirs_off + 8)
    base = region.base
    imports, libs = [], []
    desc = base + imp_rva if imp_rva else None
    while desc is not None:
        raw = snap.read(desc, 20)
        if len(raw) < 20:
            break
        oft, _ts, _fwd, name_rva, ft = struct.unpack("<IIIII", raw)
        if not (oft or name_rva or ft):
            break
        library = _read_cstr(snap, base + name_rva)
        if library and library not in libs:
            libs.append(library)
        lookup = base + (oft or ft)
        fmt = "<Q" if thunk_size == 8 else "<I"
        for i in range(4096):
            raw = snap.read(lookup + thunk_size * i, thunk_size)
            if len(raw) < thunk_size:
                break
            (thunk,) = struct.unpack(fmt, raw)
            if thunk == 0:
                break
            if thunk >> (thunk_size * 8 - 1):
                symbol = f"ord{thunk & 0xFFFF}"
            else:
                symbol = _read_cstr(snap, base + (thunk & 0x7FFFFFFF) + 2)
            if symbol:
                imports.append(ImportRef(symbol, library, (), base + ft + thunk_size * i if ft else None))
        desc += 20
    return tuple(imports), tuple(libs)


def _read_cstr(snap: MemorySnapshot, va: int) -> str:
    r = snap.region_for(va)
    if r is None:
        return ""
    return _cstr(r.bytes, va - r.base)


_FLAG_NAMES = {"r": "readable", "w": "writable", "x": "executable"}


def snapshot_image(snap: MemorySnapshot) -> BinaryImage:
    """View the snapshot as an image with one section per region."""
    sections, blobs, offset = [], [], 0
    imports, deps = [], []
    for r in snap.regions:
        flags = {_FLAG_NAMES[c] for c in r.flags if c in _FLAG_NAMES}
        if "executable" in flags:
            flags.add("readable")
        sections.append(SectionRecord(f"region_{r.base:x}", offset, r.base, r.size, frozenset(flags)))
        blobs.append(r.bytes)
        offset += r.size
        imps, libs = _module_imports(snap, r)
        imports.extend(imps)
        deps.extend(lib for lib in libs if lib not in deps)
    data = b"".join(blobs)
    image = BinaryImage(
        path=snap.source_meta or "<snapshot>", format="SNAPSHOT", arch="X86_64",
        sections=tuple(sections), imports=tuple(imports), strings=(), bytes=data,
        content_hash=hashlib.sha256(data).digest(), dependencies=tuple(deps),
    )
    return replace(image, strings=tuple(extract_strings(image)))


# -- scanning ---------------------------------------------------------------------

@dataclass
class SnapshotScan:
    image: BinaryImage
    findings: list
    hits: list
    candidates: list


def _demote(f: sg.Finding) -> sg.Finding:
    if f.confidence == sg.LOW:
        return f
    # import evidence recovered from a module header keeps its confidence
    if f.signature_id.startswith("crypto.") and any(e.matched.endswith(":import") for e in f.evidence):
        return f
    evidence = tuple(replace(e, xref_sites=()) for e in f.evidence)
    return replace(f, evidence=evidence, confidence=sg.LOW)


def scan_snapshot(snap: MemorySnapshot, ruleset: Optional[sg.Ruleset] = None, jobs: int = 1,
                  window: int = DEFAULT_WINDOW, key_lengths=DEFAULT_KEY_LENGTHS) -> SnapshotScan:
    """Signature and crypto-constant scan plus key windows around each constant hit."""
    from .pipeline import crypto_findings
    ruleset = ruleset if ruleset is not None else sg.bundled_ruleset()
    image = snapshot_image(snap)
    kinds = {s.id: s.kind for s in ruleset}
    findings = []
    for f in sg.scan(image, None, ruleset, jobs):
        findings.append(f if kinds.get(f.signature_id) == "IMPORT_SYMBOL" else _demote(f))
    hits = cc.detect_crypto_constants(image, None)
    findings.extend(_demote(f) for f in crypto_findings(hits, []))
    findings.sort(key=sg.finding_key)
    targets = [h.addr for h in hits if h.form != "import"]
    candidates = scan_windows(image, targets, window, key_lengths) if targets else []
    return SnapshotScan(image, findings, hits, candidates)
