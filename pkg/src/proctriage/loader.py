"""ELF/PE container parsing into a uniform, immutable image model."""

from __future__ import annotations

import bisect
import hashlib
import logging
import os
import re
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import Optional, Union

from .errors import FormatError

log = logging.getLogger(__name__)

ELF_MAGIC = b"\x7fELF"
MZ_MAGIC = b"MZ"

DEFAULT_MIN_STRING = 4

# ELF constants
SHT_SYMTAB = 2
SHT_RELA = 4
SHT_DYNAMIC = 6
SHT_NOBITS = 8
SHT_DYNSYM = 11
SHF_WRITE = 0x1
SHF_ALLOC = 0x2
SHF_EXECINSTR = 0x4
STT_FUNC = 2
DT_NEEDED = 1
R_X86_64_GLOB_DAT = 6
R_X86_64_JUMP_SLOT = 7
EM_X86_64 = 62

# PE constants
IMAGE_FILE_MACHINE_AMD64 = 0x8664
IMAGE_SCN_MEM_EXECUTE = 0x20000000
IMAGE_SCN_MEM_READ = 0x40000000
IMAGE_SCN_MEM_WRITE = 0x80000000


@dataclass(frozen=True)
class SectionRecord:
    name: str
    file_offset: int
    virtual_addr: int
    size: int
    flags: frozenset = frozenset({"readable"})

    @property
    def executable(self) -> bool:
        return "executable" in self.flags

    @property
    def writable(self) -> bool:
        return "writable" in self.flags

    @property
    def readable(self) -> bool:
        return "readable" in self.flags

    @property
    def end(self) -> int:
        return self.virtual_addr + self.size

    def contains(self, va: int) -> bool:
        return self.virtual_addr <= va < self.virtual_addr + self.size


@dataclass(frozen=True)
class ImportRef:
    symbol: str
    source_library: str
    call_site_addrs: tuple = ()
    # GOT/IAT slot the dynamic linker fills in; None when the symbol has no slot.
    slot_addr: Optional[int] = None


@dataclass(frozen=True)
class StringRef:
    value: str
    addr: int
    encoding: str = "ASCII"

    @property
    def size(self) -> int:
        """Size in bytes of the string as stored."""
        return len(self.value) * (2 if self.encoding == "UTF16LE" else 1)

    @property
    def end(self) -> int:
        return self.addr + self.size


@dataclass(frozen=True)
class BinaryImage:
    path: str
    format: str
    arch: str
    sections: tuple
    imports: tuple
    strings: tuple
    bytes: bytes = field(repr=False)
    content_hash: bytes = b""
    entry: Optional[int] = None
    image_base: int = 0
    symbols: dict = field(default_factory=dict, compare=False)
    dependencies: tuple = ()
    warnings: tuple = ()

    def section_for(self, va: int) -> Optional[SectionRecord]:
        for sec in self.sections:
            if sec.contains(va):
                return sec
        return None

    def va_to_offset(self, va: int) -> Optional[int]:
        sec = self.section_for(va)
        if sec is None:
            return None
        return sec.file_offset + (va - sec.virtual_addr)

    def offset_to_va(self, offset: int) -> Optional[int]:
        for sec in self.sections:
            if sec.file_offset <= offset < sec.file_offset + sec.size:
                return sec.virtual_addr + (offset - sec.file_offset)
        return None

    def read(self, va: int, size: int) -> bytes:
        """Read up to ``size`` bytes at ``va`` without crossing a section end."""
        sec = self.section_for(va)
        if sec is None:
            return b""
        off = sec.file_offset + (va - sec.virtual_addr)
        avail = sec.end - va
        return self.bytes[off:off + min(size, avail)]

    def section_bytes(self, sec: SectionRecord) -> bytes:
        return self.bytes[sec.file_offset:sec.file_offset + sec.size]

    @property
    def executable_sections(self) -> list:
        return [s for s in self.sections if s.executable]

    @property
    def import_slots(self) -> dict:
        return {imp.slot_addr: imp for imp in self.imports if imp.slot_addr is not None}

    @cached_property
    def _string_starts(self) -> list:
        return [s.addr for s in self.strings]

    def string_at(self, va: int) -> Optional[StringRef]:
        """Return the StringRef whose storage covers ``va``, if any."""
        i = bisect.bisect_right(self._string_starts, va) - 1
        while i >= 0 and va - self.strings[i].addr < 8192:
            if va < self.strings[i].end:
                return self.strings[i]
            i -= 1
        return None


Source = Union[bytes, bytearray, str, os.PathLike]


def load_image(source: Source, min_string: int = DEFAULT_MIN_STRING) -> BinaryImage:
    """Parse an ELF or PE executable from a path or a byte buffer.

    The container format is chosen from the magic bytes. Sections that run
    past the end of the file are truncated and reported in ``warnings``
    instead of failing the whole load.
    """
    if isinstance(source, (bytes, bytearray, memoryview)):
        data = bytes(source)
        path = "<memory>"
    else:
        path = os.fspath(source)
        data = Path(path).read_bytes()

    if data.startswith(ELF_MAGIC):
        parsed = _parse_elf(data)
        fmt = "ELF"
    elif data.startswith(MZ_MAGIC) and _has_pe_header(data):
        parsed = _parse_pe(data)
        fmt = "PE"
    else:
        raise FormatError(f"no ELF or PE magic in {path}", code="UNRECOGNIZED_FORMAT")

    sections, warnings = _drop_overlaps(parsed["sections"], parsed["warnings"])
    image = BinaryImage(
        path=path,
        format=fmt,
        arch=parsed["arch"],
        sections=tuple(sections),
        imports=tuple(parsed["imports"]),
        strings=(),
        bytes=data,
        content_hash=hashlib.sha256(data).digest(),
        entry=parsed["entry"],
        image_base=parsed["image_base"],
        symbols=parsed["symbols"],
        dependencies=tuple(parsed["dependencies"]),
        warnings=tuple(warnings),
    )
    for w in warnings:
        log.warning("%s: %s", path, w)
    strings = extract_strings(image, min_string)
    return replace(image, strings=tuple(strings))


def _drop_overlaps(sections, warnings):
    kept = []
    warnings = list(warnings)
    for sec in sorted(sections, key=lambda s: (s.virtual_addr, s.name)):
        clash = next((k for k in kept if sec.size and k.size
                      and sec.virtual_addr < k.end and k.virtual_addr < sec.end), None)
        if clash is not None:
            warnings.append(f"section {sec.name} overlaps {clash.name}; ignored")
            continue
        kept.append(sec)
    return kept, warnings


def _unpack(fmt: str, data: bytes, offset: int, what: str):
    size = struct.calcsize(fmt)
    if offset < 0 or offset + size > len(data):
        raise FormatError(f"{what} at offset {offset:#x} lies outside the file",
                          code="MALFORMED_HEADER")
    return struct.unpack_from(fmt, data, offset)


def _cstr(data: bytes, offset: int, limit: int = 4096) -> str:
    if offset < 0 or offset >= len(data):
        return ""
    end = data.find(b"\x00", offset, offset + limit)
    if end < 0:
        end = min(len(data), offset + limit)
    return data[offset:end].decode("latin-1")


# --------------------------------------------------------------------------- ELF

_ELF_HDR = "<16sHHIQQQIHHHHHH"
_ELF_SHDR = "<IIQQQQIIQQ"
_ELF_SYM = "<IBBHQQ"
_ELF_RELA = "<QQq"


def _parse_elf(data: bytes) -> dict:
    if len(data) < struct.calcsize(_ELF_HDR):
        raise FormatError("ELF header truncated", code="TRUNCATED_FILE")
    ident = data[:16]
    if ident[4] != 2 or ident[5] != 1:
        raise FormatError("only little-endian ELF64 is supported (field e_ident)",
                          code="MALFORMED_HEADER")
    (_, _etype, machine, _ver, entry, _phoff, shoff, _flags, _ehsize,
     _phentsize, _phnum, shentsize, shnum, shstrndx) = struct.unpack_from(_ELF_HDR, data, 0)

    if shnum and shentsize < struct.calcsize(_ELF_SHDR):
        raise FormatError(f"bad e_shentsize {shentsize}", code="MALFORMED_HEADER")
    if shnum and shoff + shnum * shentsize > len(data):
        if shoff >= len(data):
            raise FormatError(f"field e_shoff={shoff:#x} beyond end of file",
                              code="MALFORMED_HEADER")
        raise FormatError("section header table truncated", code="TRUNCATED_FILE")
    if shnum and shstrndx >= shnum:
        raise FormatError(f"field e_shstrndx={shstrndx} out of range", code="MALFORMED_HEADER")

    raw = []
    for i in range(shnum):
        raw.append(struct.unpack_from(_ELF_SHDR, data, shoff + i * shentsize))

    shstr_off = raw[shstrndx][4] if shnum else 0
    warnings = []
    sections = []
    for idx, (name_off, sh_type, sh_flags, addr, offset, size, *_rest) in enumerate(raw):
        if idx == 0 or not sh_flags & SHF_ALLOC or sh_type == SHT_NOBITS:
            continue
        name = _cstr(data, shstr_off + name_off)
        if offset > len(data):
            raise FormatError(f"field sh_offset={offset:#x} of section {name} beyond end of file",
                              code="MALFORMED_HEADER")
        if offset + size > len(data):
            warnings.append(f"section {name} truncated from {size} to {len(data) - offset} bytes")
            size = len(data) - offset
        flags = {"readable"}
        if sh_flags & SHF_WRITE:
            flags.add("writable")
        if sh_flags & SHF_EXECINSTR:
            flags.add("executable")
        sections.append(SectionRecord(name, offset, addr, size, frozenset(flags)))

    def section_data(i):
        _, _, _, _, off, sz, *_ = raw[i]
        return data[off:off + sz] if off + sz <= len(data) else b""

    symbols = {}
    dyn_names = {}  # dynsym section index -> list of (name, info, shndx, value)
    for idx, (_, sh_type, _, _, off, size, link, _, _, entsize) in enumerate(raw):
        if sh_type not in (SHT_SYMTAB, SHT_DYNSYM) or link >= shnum:
            continue
        strtab = section_data(link)
        blob = section_data(idx)
        entsize = entsize or struct.calcsize(_ELF_SYM)
        entries = []
        for pos in range(0, len(blob) - entsize + 1, entsize):
            st_name, st_info, _other, st_shndx, st_value, _sz = struct.unpack_from(_ELF_SYM, blob, pos)
            name = _cstr(strtab, st_name)
            entries.append((name, st_info, st_shndx, st_value))
            if st_info & 0xF == STT_FUNC and st_shndx != 0 and name:
                symbols.setdefault(st_value, name)
        dyn_names[idx] = entries

    needed = []
    for idx, (_, sh_type, _, _, off, size, link, *_r) in enumerate(raw):
        if sh_type != SHT_DYNAMIC or link >= shnum:
            continue
        strtab = section_data(link)
        blob = section_data(idx)
        for pos in range(0, len(blob) - 15, 16):
            tag, val = struct.unpack_from("<qQ", blob, pos)
            if tag == 0:
                break
            if tag == DT_NEEDED:
                needed.append(_cstr(strtab, val))

    library = needed[0] if len(needed) == 1 else ""
    imports = []
    seen = set()
    for idx, (_, sh_type, _, _, off, size, link, *_r) in enumerate(raw):
        if sh_type != SHT_RELA or link not in dyn_names:
            continue
        syms = dyn_names[link]
        blob = section_data(idx)
        for pos in range(0, len(blob) - 23, 24):
            r_offset, r_info, _addend = struct.unpack_from(_ELF_RELA, blob, pos)
            rtype, symidx = r_info & 0xFFFFFFFF, r_info >> 32
            if rtype not in (R_X86_64_JUMP_SLOT, R_X86_64_GLOB_DAT) or symidx >= len(syms):
                continue
            name = syms[symidx][0]
            if name:
                imports.append(ImportRef(name, library, (), r_offset))
                seen.add(name)
    for entries in dyn_names.values():
        for name, info, shndx, _value in entries:
            if name and shndx == 0 and info & 0xF == STT_FUNC and name not in seen:
                imports.append(ImportRef(name, library))
                seen.add(name)

    return {
        "arch": "X86_64" if machine == EM_X86_64 else "UNKNOWN",
        "sections": sections,
        "imports": imports,
        "entry": entry or None,
        "image_base": min((s.virtual_addr for s in sections), default=0),
        "symbols": symbols,
        "dependencies": needed,
        "warnings": warnings,
    }


# ---------------------------------------------------------------------------- PE

def _has_pe_header(data: bytes) -> bool:
    if len(data) < 0x40:
        return False
    (lfanew,) = struct.unpack_from("<I", data, 0x3C)
    return data[lfanew:lfanew + 4] == b"PE\x00\x00"


_PE_SECTION = "<8sIIIIIIHHI"


def _parse_pe(data: bytes) -> dict:
    (lfanew,) = struct.unpack_from("<I", data, 0x3C)
    coff = lfanew + 4
    if coff + 20 > len(data):
        raise FormatError("COFF header truncated", code="TRUNCATED_FILE")
    machine, nsect, _ts, _symptr, _nsym, opt_size, _chars = struct.unpack_from("<HHIIIHH", data, coff)
    opt = coff + 20
    if opt + opt_size > len(data):
        raise FormatError("optional header truncated", code="TRUNCATED_FILE")
    (magic,) = _unpack("<H", data, opt, "optional header magic")
    if magic == 0x20B:
        (entry_rva,) = _unpack("<I", data, opt + 16, "AddressOfEntryPoint")
        (image_base,) = _unpack("<Q", data, opt + 24, "ImageBase")
        (ndirs,) = _unpack("<I", data, opt + 108, "NumberOfRvaAndSizes")
        dirs_off, thunk_size = opt + 112, 8
    elif magic == 0x10B:
        (entry_rva,) = _unpack("<I", data, opt + 16, "AddressOfEntryPoint")
        (image_base,) = _unpack("<I", data, opt + 28, "ImageBase")
        (ndirs,) = _unpack("<I", data, opt + 92, "NumberOfRvaAndSizes")
        dirs_off, thunk_size = opt + 96, 4
    else:
        raise FormatError(f"field OptionalHeader.Magic={magic:#x} unsupported", code="MALFORMED_HEADER")

    dirs = []
    for i in range(min(ndirs, 16)):
        if dirs_off + 8 * i + 8 > opt + opt_size:
            break
        dirs.append(struct.unpack_from("<II", data, dirs_off + 8 * i))

    sect_tab = opt + opt_size
    if sect_tab + 40 * nsect > len(data):
        raise FormatError("section table truncated", code="TRUNCATED_FILE")
    sections = []
    warnings = []
    rva_map = []  # (rva, size, file_offset)
    for i in range(nsect):
        name_raw, vsize, vaddr, rawsize, rawptr, *_x, chars = struct.unpack_from(
            _PE_SECTION, data, sect_tab + 40 * i)
        name = name_raw.rstrip(b"\x00").decode("latin-1")
        size = min(vsize, rawsize) if vsize else rawsize
        if rawsize and rawptr > len(data):
            raise FormatError(f"field PointerToRawData={rawptr:#x} of section {name} beyond end of file",
                              code="MALFORMED_HEADER")
        if rawptr + size > len(data):
            warnings.append(f"section {name} truncated from {size} to {len(data) - rawptr} bytes")
            size = len(data) - rawptr
        flags = set()
        if chars & IMAGE_SCN_MEM_READ:
            flags.add("readable")
        if chars & IMAGE_SCN_MEM_WRITE:
            flags.add("writable")
        if chars & IMAGE_SCN_MEM_EXECUTE:
            flags.add("executable")
            flags.add("readable")
        sections.append(SectionRecord(name, rawptr, image_base + vaddr, size, frozenset(flags)))
        rva_map.append((vaddr, size, rawptr))

    def rva_off(rva):
        for start, size, ptr in rva_map:
            if start <= rva < start + size:
                return ptr + rva - start
        return None

    imports = []
    dependencies = []
    if len(dirs) > 1 and dirs[1][0]:
        desc = rva_off(dirs[1][0])
        while desc is not None and desc + 20 <= len(data):
            oft, _ts, _fwd, name_rva, ft = struct.unpack_from("<IIIII", data, desc)
            if not (oft or name_rva or ft):
                break
            lib_off = rva_off(name_rva)
            library = _cstr(data, lib_off) if lib_off is not None else ""
            if library and library not in dependencies:
                dependencies.append(library)
            lookup = rva_off(oft or ft)
            i = 0
            while lookup is not None and lookup + thunk_size * (i + 1) <= len(data):
                fmt = "<Q" if thunk_size == 8 else "<I"
                (thunk,) = struct.unpack_from(fmt, data, lookup + thunk_size * i)
                if thunk == 0:
                    break
                if thunk >> (thunk_size * 8 - 1):
                    symbol = f"ord{thunk & 0xFFFF}"
                else:
                    hn = rva_off(thunk & 0x7FFFFFFF)
                    symbol = _cstr(data, hn + 2) if hn is not None else ""
                if symbol:
                    slot = image_base + ft + thunk_size * i if ft else None
                    imports.append(ImportRef(symbol, library, (), slot))
                i += 1
            desc += 20

    symbols = {}
    if dirs and dirs[0][0]:
        exp = rva_off(dirs[0][0])
        if exp is not None and exp + 40 <= len(data):
            (_c, _t, _ma, _mi, _name, _base, nfuncs, nnames,
             funcs_rva, names_rva, ords_rva) = struct.unpack_from("<IIHHIIIIIII", data, exp)
            f_off, n_off, o_off = rva_off(funcs_rva), rva_off(names_rva), rva_off(ords_rva)
            if None not in (f_off, n_off, o_off):
                for i in range(nnames):
                    (name_rva,) = _unpack("<I", data, n_off + 4 * i, "export name pointer")
                    (ordinal,) = _unpack("<H", data, o_off + 2 * i, "export ordinal")
                    if ordinal >= nfuncs:
                        continue
                    (func_rva,) = _unpack("<I", data, f_off + 4 * ordinal, "export address")
                    name_off = rva_off(name_rva)
                    if name_off is not None and func_rva:
                        symbols.setdefault(image_base + func_rva, _cstr(data, name_off))

    return {
        "arch": "X86_64" if machine == IMAGE_FILE_MACHINE_AMD64 else "UNKNOWN",
        "sections": sections,
        "imports": imports,
        "entry": image_base + entry_rva if entry_rva else None,
        "image_base": image_base,
        "symbols": symbols,
        "dependencies": dependencies,
        "warnings": warnings,
    }


# ----------------------------------------------------------------------- strings

_PRINTABLE = rb"[\x20-\x7e]"


def _string_patterns(min_len: int):
    ascii_re = re.compile(_PRINTABLE + b"{%d,}" % min_len)
    wide_re = re.compile(b"(?:" + _PRINTABLE + b"\x00){%d,}" % min_len)
    return ascii_re, wide_re


def extract_strings(image: BinaryImage, min_len: int = DEFAULT_MIN_STRING) -> list:
    """Scan readable sections for printable ASCII and UTF-16LE runs."""
    if min_len < 2:
        raise ValueError("min_len must be at least 2")
    ascii_re, wide_re = _string_patterns(min_len)
    found = []
    for sec in image.sections:
        if not sec.readable or not sec.size:
            continue
        blob = image.section_bytes(sec)
        found.extend(scan_strings(blob, sec.virtual_addr, ascii_re, wide_re))
    found.sort(key=lambda s: (s.addr, s.encoding))
    return found


def scan_strings(blob: bytes, base: int, ascii_re=None, wide_re=None,
                 min_len: int = DEFAULT_MIN_STRING) -> list:
    if ascii_re is None:
        ascii_re, wide_re = _string_patterns(min_len)
    out = [StringRef(m.group().decode("ascii"), base + m.start(), "ASCII")
           for m in ascii_re.finditer(blob)]
    out.extend(StringRef(m.group()[::2].decode("ascii"), base + m.start(), "UTF16LE")
               for m in wide_re.finditer(blob))
    return out


# ------------------------------------------------------------------ dependencies

class ResolvedDependencies(list):
    """List of loaded dependency images; ``unresolved`` names the misses."""

    def __init__(self, images=(), unresolved=()):
        super().__init__(images)
        self.unresolved = list(unresolved)


def resolve_dependencies(image: BinaryImage, search_paths) -> ResolvedDependencies:
    """Recursively load declared shared objects found in ``search_paths``.

    Only the caller-supplied directories are searched. Each library is
    loaded at most once (by content hash), so dependency cycles terminate.
    """
    search = [Path(p) for p in search_paths]
    seen_hashes = {image.content_hash}
    seen_names = set()
    loaded, unresolved = [], []
    queue = list(image.dependencies)
    while queue:
        name = queue.pop(0)
        if name in seen_names:
            continue
        seen_names.add(name)
        hit = next((d / name for d in search if (d / name).is_file()), None)
        if hit is None:
            unresolved.append(name)
            continue
        try:
            dep = load_image(hit)
        except FormatError as exc:
            log.warning("dependency %s failed to load: %s", hit, exc)
            unresolved.append(name)
            continue
        if dep.content_hash in seen_hashes:
            continue
        seen_hashes.add(dep.content_hash)
        loaded.append(dep)
        queue.extend(dep.dependencies)
    return ResolvedDependencies(loaded, unresolved)
