"""Deterministic synthetic ELF/PE images with declaratively planted properties.

A spec is a JSON-compatible dict::

    {"format": "ELF" | "PE", "seed": 1,
     "sections": [{"name": ".text", "flags": "rx", "size": 4096, "fill": "zero"}],
     "functions": [{"name": "main", "export": true, "prologue": true}],
     "entry": "main", "dependencies": ["libB.so"],
     "plants": [{"type": "string", "value": "VMwareVMware", "ref_from": "main"}, ...]}

Every code-level reference is a fixed-size instruction emitted into the
referencing function, so the manifest can list exact sites and targets.
"""

from __future__ import annotations

import datetime
import hashlib
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .crypto import constants as cc
from .crypto.ciphers import SUITES, encrypt
from .errors import ForgeError

ELF_BASE = 0x400000
PE_BASE = 0x140000000
PAGE = 0x1000
MAX_DISTANCE = 4096

DEFAULT_SECTIONS = (
    {"name": ".text", "flags": "rx"},
    {"name": ".rodata", "flags": "r"},
    {"name": ".data", "flags": "rw"},
)

PROLOGUE = b"\x55\x48\x89\xe5"
EPILOGUE = b"\x5d\xc3"
# test eax,eax; jz +5; mov eax,1
BRANCH = b"\x85\xc0\x74\x05\xb8\x01\x00\x00\x00"
FLAG_DATUM = b"\x01\x00\x00\x00\x00\x00\x00\x00"

OP_SIZES = {"lea": 7, "movabs": 10, "call": 5, "call_slot": 6, "branch": 9,
            "cmp": 5, "mov_imm32": 5, "cpuid": 25}

TABLES = {
    "AES_SBOX": lambda endian: cc.AES_SBOX,
    "AES_TTABLE": lambda endian: b"".join(struct.pack("<I" if endian == "le" else ">I", w) for w in cc.AES_TE0),
    "SHA1_IV": lambda endian: b"".join(struct.pack("<I" if endian == "le" else ">I", w) for w in cc.SHA1_IV),
    "DES_TABLES": lambda endian: cc.DES_S1,
}


def _conflict(msg):
    return ForgeError(msg, "SPEC_CONFLICT")


def _unrealizable(msg):
    return ForgeError(msg, "UNREALIZABLE")


def _align(value: int, to: int) -> int:
    return (value + to - 1) // to * to


def _rng(seed, purpose: str) -> random.Random:
    return random.Random(f"{seed}:{purpose}")


@dataclass
class _Section:
    name: str
    flags: str
    size: Optional[int]
    fill: str = "zero"
    synthetic: bool = False
    used: list = field(default_factory=list)
    writes: list = field(default_factory=list)
    va: int = 0

    @property
    def executable(self):
        return "x" in self.flags

    def reserve(self, off: int, length: int, label: str):
        if off < 0 or (self.size is not None and off + length > self.size):
            raise _unrealizable(f"{label} at {self.name}+{off:#x} ({length} bytes) does not fit the section")
        for lo, hi, other in self.used:
            if off < hi and lo < off + length:
                raise _conflict(f"{label} overlaps {other} in {self.name}")
        self.used.append((off, off + length, label))

    def alloc(self, length: int, label: str, align: int = 8, guard: int = 0) -> int:
        end = max((hi for _, hi, _ in self.used), default=0)
        off = _align(end + guard, align)
        self.reserve(off, length, label)
        return off

    def write(self, off: int, data: bytes):
        self.writes.append((off, bytes(data)))

    @property
    def content_end(self) -> int:
        return max((hi for _, hi, _ in self.used), default=0)

    def final_size(self) -> int:
        if self.size is not None:
            return self.size
        return max(16, _align(self.content_end, 16))


@dataclass
class _Function:
    name: str
    section: str
    export: bool = True
    prologue: bool = True
    ops: list = field(default_factory=list)
    offset: int = 0
    va: int = 0

    def length(self) -> int:
        body = sum(_op_size(op) for op in self.ops)
        return body + (len(PROLOGUE) + len(EPILOGUE) if self.prologue else 1)


def _op_size(op) -> int:
    kind = op[0]
    if kind == "raw":
        return len(op[1])
    if kind == "mov_imm32_seq":
        return 5 * len(op[1])
    return OP_SIZES[kind]


@dataclass
class ForgeResult:
    image: bytes
    manifest: dict
    # decrypted-in-memory twin: raw dump plus region map
    dump: bytes = b""
    regions: list = field(default_factory=list)
    payloads: dict = field(default_factory=dict)

    def write(self, out, snapshot: bool = False) -> list:
        """Write image, manifest, payload ciphertexts and optionally the snapshot twin."""
        out = Path(out)
        written = [out]
        out.write_bytes(self.image)
        manifest_path = out.with_name(out.name + ".manifest.json")
        manifest_path.write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        written.append(manifest_path)
        for pid, blob in sorted(self.payloads.items()):
            p = out.with_name(f"{out.name}.{pid}.bin")
            p.write_bytes(blob)
            written.append(p)
        if snapshot:
            dump = out.with_name(out.name + ".dump")
            dump.write_bytes(self.dump)
            regions = out.with_name(out.name + ".map.json")
            regions.write_text(json.dumps(self.regions, indent=2) + "\n")
            written += [dump, regions]
        return written


class _Forge:
    def __init__(self, spec: dict):
        self.spec = spec
        self.format = spec.get("format", "ELF").upper()
        if self.format not in ("ELF", "PE"):
            raise _conflict(f"unknown format {self.format!r}")
        self.seed = spec.get("seed", 0)
        self.sections = {}
        for raw in spec.get("sections") or DEFAULT_SECTIONS:
            name = raw["name"]
            if name in self.sections:
                raise _conflict(f"section {name} declared twice")
            flags = raw.get("flags", "r")
            if not set(flags) <= set("rwx"):
                raise _conflict(f"bad flags {flags!r} on {name}")
            if "r" not in flags:
                flags = "r" + flags
            fill = raw.get("fill", "zero")
            if fill not in ("zero", "noise"):
                raise _conflict(f"unknown fill {fill!r}")
            if fill == "noise" and "x" in flags:
                raise _unrealizable(f"noise fill in executable section {name}")
            self.sections[name] = _Section(name, flags, raw.get("size"), fill)
        self.functions = {}
        code = [s for s in self.sections.values() if s.executable]
        for raw in spec.get("functions") or [{"name": "main"}]:
            name = raw["name"]
            if name in self.functions:
                raise _conflict(f"function {name} declared twice")
            sec = raw.get("section", code[0].name if code else None)
            if sec not in self.sections or not self.sections[sec].executable:
                raise _unrealizable(f"function {name} needs an executable section")
            self.functions[name] = _Function(name, sec, raw.get("export", True), raw.get("prologue", True))
        self.entry = spec.get("entry") or next(iter(self.functions), None)
        if self.entry is not None and self.entry not in self.functions:
            raise _conflict(f"entry {self.entry!r} is not a declared function")
        self.dependencies = list(spec.get("dependencies", []))
        self.imports = []           # (library, symbol)
        self.import_calls = {}      # (library, symbol) -> [function]
        self.data = []              # planted data: dicts with section/offset/label
        self.refs = []              # (function, op index, kind, target descriptor)
        self.calls = []
        self.branches = []
        self.strings = []
        self.constants = []
        self.keys = {}
        self.payloads = []
        self.compares = []
        self.cpuids = []
        self.extra_strings = []     # (value, referenced) for prediction
        self.ciphertexts = {}

    # -- plants ------------------------------------------------------------

    def _func(self, name, what):
        if name not in self.functions:
            raise _conflict(f"{what} refers to unknown function {name!r}")
        return self.functions[name]

    def _data_section(self, name, what, referenced):
        if name not in self.sections:
            raise _conflict(f"{what} refers to unknown section {name!r}")
        sec = self.sections[name]
        if referenced and sec.executable:
            raise _unrealizable(f"{what}: code references into executable section {name} are not indexed")
        return sec

    def _place(self, sec, plant, length, label, align=8, guard=0):
        if plant.get("offset") is not None:
            off = int(plant["offset"])
            sec.reserve(off, length, label)
            return off
        return sec.alloc(length, label, align, guard)

    def _add_ref(self, func_name, target, kind, form="rip"):
        f = self._func(func_name, f"{kind} reference")
        op = ("lea" if form == "rip" else "movabs", target)
        f.ops.append(op)
        self.refs.append((f.name, len(f.ops) - 1, kind, target))

    def plant_all(self):
        plants = list(self.spec.get("plants", []))
        # explicit offsets first so automatic placement never lands on them
        ordered = [p for p in plants if p.get("offset") is not None] + \
                  [p for p in plants if p.get("offset") is None]
        handlers = {
            "string": self._plant_string, "import": self._plant_import, "call": self._plant_call,
            "branch": self._plant_branch, "constant": self._plant_constant,
            "key_near_ref": self._plant_key, "encrypted_payload": None,
            "compare": self._plant_compare, "cpuid": self._plant_cpuid, "raw": self._plant_raw,
            "wordlist": self._plant_wordlist, "pem": self._plant_pem, "bytes": self._plant_bytes,
        }
        for p in ordered:
            kind = p.get("type")
            if kind not in handlers:
                raise _conflict(f"unknown plant type {kind!r}")
            if handlers[kind] is not None:
                handlers[kind](p)
        for p in ordered:
            if p.get("type") == "encrypted_payload":
                self._plant_payload(p)

    def _plant_string(self, p):
        value = p["value"]
        enc = p.get("encoding", "ASCII").upper()
        if enc not in ("ASCII", "UTF16LE"):
            raise _conflict(f"unknown encoding {enc}")
        data = value.encode("ascii") + b"\0" if enc == "ASCII" else value.encode("utf-16-le") + b"\0\0"
        ref = p.get("ref_from")
        sec = self._data_section(p.get("section", ".rodata"), f"string {value!r}", ref)
        off = self._place(sec, p, len(data), f"string {value!r}", align=2 if enc != "ASCII" else 1, guard=1)
        if off > 0 and not any(lo <= off - 1 < hi for lo, hi, _ in sec.used):
            sec.write(off - 1, b"\0")
        sec.write(off, data)
        self.strings.append({"value": value, "section": sec.name, "offset": off, "encoding": enc,
                             "ref_from": ref})
        if ref:
            self._add_ref(ref, (sec.name, off), "string", p.get("ref_form", "rip"))

    def _plant_import(self, p):
        key = (p.get("library", ""), p["symbol"])
        if not key[1]:
            raise _conflict("import with empty symbol")
        if key not in self.imports:
            self.imports.append(key)
        if key[0] and key[0] not in self.dependencies:
            self.dependencies.append(key[0])
        if p.get("call_from"):
            f = self._func(p["call_from"], f"import {key[1]}")
            f.ops.append(("call_slot", key))
            self.import_calls.setdefault(key, []).append((f.name, len(f.ops) - 1))

    def _plant_call(self, p):
        src = self._func(p["from"], "call")
        dst = self._func(p["to"], "call")
        src.ops.append(("call", dst.name))
        self.calls.append((src.name, len(src.ops) - 1, dst.name))

    def _plant_branch(self, p):
        f = self._func(p["at"], "branch")
        f.ops.append(("branch", None))
        self.branches.append((f.name, len(f.ops) - 1))

    def _plant_constant(self, p):
        primitive = p["primitive"]
        if primitive not in TABLES:
            raise _conflict(f"unknown constant primitive {primitive!r}")
        if p.get("form") == "imm":
            f = self._func(p.get("function") or p.get("ref_from"), "immediate constant")
            if primitive != "SHA1_IV":
                raise _conflict("only SHA1_IV can be planted as immediates")
            f.ops.append(("mov_imm32_seq", cc.SHA1_IV))
            self.constants.append({"primitive": primitive, "form": "imm32", "function": f.name,
                                   "op": len(f.ops) - 1, "ref_from": f.name})
            return
        data = TABLES[primitive](p.get("endian", "le"))
        ref = p.get("ref_from")
        sec = self._data_section(p.get("section", ".rodata"), primitive, ref)
        off = self._place(sec, p, len(data), primitive, align=16)
        sec.write(off, data)
        self.constants.append({"primitive": primitive, "form": p.get("endian", "le"), "section": sec.name,
                               "offset": off, "size": len(data), "ref_from": ref})
        if ref:
            self._add_ref(ref, (sec.name, off), "data")

    def _plant_key(self, p):
        kid = p.get("id", f"key{len(self.keys)}")
        rng = _rng(self.seed, f"key:{kid}")
        key = bytes.fromhex(p["key"]) if p.get("key") else rng.randbytes(int(p.get("key_len", 32)))
        iv_len = int(p.get("iv_len", 16))
        iv = bytes.fromhex(p["iv"]) if p.get("iv") else (rng.randbytes(iv_len) if iv_len else b"")
        dist = int(p.get("distance", 64))
        iv_dist = int(p.get("iv_distance", dist + len(key) + 16 if dist >= 0 else dist - 32))
        for d in ((dist, iv_dist) if iv else (dist,)):
            if abs(d) > MAX_DISTANCE:
                raise _unrealizable(f"distance {d} exceeds +/-{MAX_DISTANCE}")
        pieces = [(0, len(FLAG_DATUM)), (dist, len(key))]
        if iv:
            pieces.append((iv_dist, len(iv)))
        lo = min(o for o, _ in pieces)
        hi = max(o + n for o, n in pieces)
        sec = self._data_section(p.get("section", ".data"), f"key {kid}", True)
        if p.get("ref_offset") is not None:
            ref_off = int(p["ref_offset"])
            for o, n in pieces:
                sec.reserve(ref_off + o, n, f"key {kid}")
        else:
            base = sec.alloc(hi - lo, f"key {kid}", align=16)
            ref_off = base - lo
        sec.write(ref_off, FLAG_DATUM)
        sec.write(ref_off + dist, key)
        if iv:
            sec.write(ref_off + iv_dist, iv)
        self.keys[kid] = {"id": kid, "key": key, "iv": iv or None, "section": sec.name, "ref_offset": ref_off,
                          "distance": dist, "iv_distance": iv_dist if iv else None,
                          "ref_function": p["ref_function"]}
        self._add_ref(p["ref_function"], (sec.name, ref_off), "data")

    def _plaintext(self, spec) -> bytes:
        if "text" in spec:
            return spec["text"].encode("utf-8")
        if "hex" in spec:
            return bytes.fromhex(spec["hex"])
        if "fixture" in spec:
            return forge(spec["fixture"]).image
        raise _conflict("payload plaintext needs text, hex or fixture")

    def _plant_payload(self, p):
        pid = p.get("id", f"payload{len(self.payloads)}")
        kid = p["key_ref"]
        if kid not in self.keys:
            raise _conflict(f"payload {pid} refers to unknown key {kid!r}")
        k = self.keys[kid]
        suite = p.get("suite", "AES_256_CBC")
        if suite not in SUITES:
            raise _conflict(f"unknown suite {suite}")
        if len(k["key"]) not in SUITES[suite].key_lengths:
            raise _conflict(f"key {kid} has the wrong length for {suite}")
        iv = k["iv"] or bytes(SUITES[suite].block_size)
        if len(iv) != SUITES[suite].block_size:
            raise _conflict(f"key {kid} IV length does not match {suite}")
        plain = self._plaintext(p["plaintext"])
        ct = encrypt(suite, k["key"], iv, plain)
        ref = p.get("ref_from")
        sec = self._data_section(p.get("section", ".data"), f"payload {pid}", ref)
        off = self._place(sec, p, len(ct), f"payload {pid}", align=16)
        sec.write(off, ct)
        self.ciphertexts[pid] = ct
        self.payloads.append({"id": pid, "section": sec.name, "offset": off, "size": len(ct), "suite": suite,
                              "key_id": kid, "plaintext": plain})
        if ref:
            self._add_ref(ref, (sec.name, off), "data")

    def _plant_compare(self, p):
        f = self._func(p["function"], "compare")
        imm = int(p["imm"])
        f.ops.append(("cmp", imm))
        self.compares.append((f.name, imm))

    def _plant_cpuid(self, p):
        f = self._func(p["function"], "cpuid")
        vendor = p["vendor"].encode("ascii")
        if len(vendor) > 12:
            raise _conflict("cpuid vendor longer than 12 bytes")
        f.ops.append(("cpuid", vendor.ljust(12, b"\0")))
        self.cpuids.append((f.name, p["vendor"], len(f.ops) - 1))

    def _plant_raw(self, p):
        f = self._func(p["function"], "raw code")
        f.ops.append(("raw", bytes.fromhex(p["hex"])))

    def _plant_bytes(self, p):
        sec = self._data_section(p["section"], "bytes", False)
        data = bytes.fromhex(p["hex"])
        off = self._place(sec, p, len(data), "bytes")
        sec.write(off, data)

    def _plant_wordlist(self, p):
        include = [w for w in p.get("include", [])]
        words = make_wordlist(int(p.get("count", 10000)), include, _rng(self.seed, "wordlist"))
        blob = b"\n".join(w.encode("ascii") for w in words) + b"\n\0"
        ref = p.get("ref_from")
        sec = self._data_section(p.get("section", ".rodata"), "wordlist", ref)
        off = self._place(sec, p, len(blob), "wordlist", guard=1)
        sec.write(off, blob)
        pos = off
        for w in words:
            self.extra_strings.append((w, sec.name, pos, bool(ref) and pos == off))
            pos += len(w) + 1
        if ref:
            self._add_ref(ref, (sec.name, off), "string")

    def _plant_pem(self, p):
        pem = make_pem(p.get("cn", "pinned.example.test"), self.seed)
        ref = p.get("ref_from")
        sec = self._data_section(p.get("section", ".rodata"), "pem", ref)
        off = self._place(sec, p, len(pem) + 1, "pem", guard=1)
        sec.write(off, pem + b"\0")
        pos = off
        for line in pem.split(b"\n"):
            if line:
                self.extra_strings.append((line.decode(), sec.name, pos, bool(ref) and pos == off))
            pos += len(line) + 1
        if ref:
            self._add_ref(ref, (sec.name, off), "string")

    # -- layout ------------------------------------------------------------

    def layout_code(self):
        for sec in self.sections.values():
            if not sec.executable:
                continue
            for f in self.functions.values():
                if f.section == sec.name:
                    f.offset = sec.alloc(f.length(), f"function {f.name}", align=16)

    def assign_addresses(self):
        base = ELF_BASE if self.format == "ELF" else PE_BASE
        self.base = base
        va = base + PAGE
        for sec in self.sections.values():
            sec.va = va
            va = _align(va + sec.final_size(), PAGE)
        self.synthetic_start = va
        for f in self.functions.values():
            f.va = self.sections[f.section].va + f.offset

    def addr_of(self, target) -> int:
        sec, off = target
        return self.sections[sec].va + off

    def op_addresses(self, f: _Function) -> list:
        addr = f.va + (len(PROLOGUE) if f.prologue else 0)
        out = []
        for op in f.ops:
            out.append(addr)
            addr += _op_size(op)
        return out

    def emit_function(self, f: _Function, slots: dict) -> bytes:
        code = bytearray(PROLOGUE if f.prologue else b"")
        for op, addr in zip(f.ops, self.op_addresses(f)):
            kind, arg = op
            if kind == "lea":
                end = addr + 7
                code += b"\x48\x8d\x05" + struct.pack("<i", self.addr_of(arg) - end)
            elif kind == "movabs":
                code += b"\x48\xb8" + struct.pack("<Q", self.addr_of(arg))
            elif kind == "call":
                code += b"\xe8" + struct.pack("<i", self.functions[arg].va - (addr + 5))
            elif kind == "call_slot":
                code += b"\xff\x15" + struct.pack("<i", slots[arg] - (addr + 6))
            elif kind == "branch":
                code += BRANCH
            elif kind == "cmp":
                code += b"\x3d" + struct.pack("<I", arg & 0xFFFFFFFF)
            elif kind == "mov_imm32_seq":
                for v in arg:
                    code += b"\xb8" + struct.pack("<I", v)
            elif kind == "cpuid":
                code += b"\xb8\x00\x00\x00\x40\x0f\xa2"
                for modrm, chunk in zip((0xFB, 0xF9, 0xFA), (arg[0:4], arg[4:8], arg[8:12])):
                    code += bytes([0x81, modrm]) + chunk
            elif kind == "raw":
                code += arg
        code += EPILOGUE if f.prologue else b"\xc3"
        assert len(code) == f.length()
        return bytes(code)

    def section_blob(self, sec: _Section, slots: dict) -> bytes:
        size = sec.final_size()
        if sec.fill == "noise":
            buf = bytearray(noise_bytes(size, _rng(self.seed, f"noise:{sec.name}")))
        else:
            buf = bytearray(size)
        if sec.executable:
            for f in self.functions.values():
                if f.section == sec.name:
                    code = self.emit_function(f, slots)
                    buf[f.offset:f.offset + len(code)] = code
                    pad_end = _align(f.offset + len(code), 16)
                    for i in range(f.offset + len(code), min(pad_end, size)):
                        buf[i] = 0xCC
        for off, data in sec.writes:
            buf[off:off + len(data)] = data
        return bytes(buf[:size])

    # -- top level ---------------------------------------------------------

    def build(self) -> ForgeResult:
        self.plant_all()
        self.layout_code()
        self.assign_addresses()
        if self.format == "ELF":
            image, slots, synth = _ElfWriter(self).write()
        else:
            image, slots, synth = _PeWriter(self).write()
        manifest = self.manifest(image, slots, synth)
        dump, regions = self.snapshot(image, synth)
        return ForgeResult(image, manifest, dump, regions, dict(self.ciphertexts))

    def manifest(self, image: bytes, slots: dict, synth: list) -> dict:
        sections = []
        for sec in list(self.sections.values()) + synth:
            flags = sorted({"r": "readable", "w": "writable", "x": "executable"}[c] for c in sec.flags)
            sections.append({"name": sec.name, "virtual_addr": sec.va, "file_offset": sec.va - self.base,
                             "size": sec.final_size(), "flags": flags})
        functions = [{"name": f.name, "entry": f.va, "end": f.va + f.length(), "export": f.export}
                     for f in sorted(self.functions.values(), key=lambda f: f.va)]
        single = self.dependencies[0] if len(self.dependencies) == 1 else ""
        imports = []
        for key in self.imports:
            lib, sym = key
            sites = [self.op_addresses(self.functions[fn])[i] for fn, i in self.import_calls.get(key, [])]
            imports.append({"symbol": sym, "library": lib if self.format == "PE" else single,
                            "slot": slots[key], "call_sites": sorted(sites)})
        strings = [{"value": s["value"], "addr": self.addr_of((s["section"], s["offset"])),
                    "encoding": s["encoding"]} for s in self.strings]
        xrefs = []
        for fn, i, kind, target in self.refs:
            site = self.op_addresses(self.functions[fn])[i]
            xrefs.append({"site": site, "target": self.addr_of(target), "kind": kind, "function": fn})
        for key, uses in self.import_calls.items():
            for fn, i in uses:
                xrefs.append({"site": self.op_addresses(self.functions[fn])[i], "target": slots[key],
                              "kind": "import", "function": fn, "symbol": key[1]})
        calls = [{"site": self.op_addresses(self.functions[s])[i], "from": s, "to": d,
                  "target": self.functions[d].va} for s, i, d in self.calls]
        branches = []
        for fn, i in self.branches:
            at = self.op_addresses(self.functions[fn])[i]
            branches.append({"function": fn, "jcc": at + 2, "fallthrough": at + 4, "taken": at + 9})
        constants = []
        for c in self.constants:
            if c["form"] == "imm32":
                f = self.functions[c["function"]]
                constants.append({"primitive": c["primitive"], "form": "imm32",
                                  "addr": self.op_addresses(f)[c["op"]], "size": 20, "ref_from": f.name})
            else:
                constants.append({"primitive": c["primitive"], "form": c["form"],
                                  "addr": self.addr_of((c["section"], c["offset"])), "size": c["size"],
                                  "ref_from": c["ref_from"]})
        keys = []
        for k in self.keys.values():
            ref = self.addr_of((k["section"], k["ref_offset"]))
            keys.append({"id": k["id"], "key": k["key"].hex(), "iv": k["iv"].hex() if k["iv"] else None,
                         "ref_addr": ref, "addr": ref + k["distance"], "distance": k["distance"],
                         "iv_addr": ref + k["iv_distance"] if k["iv"] else None,
                         "ref_function": k["ref_function"]})
        payloads = []
        for pl in self.payloads:
            payloads.append({"id": pl["id"], "addr": self.addr_of((pl["section"], pl["offset"])),
                             "size": pl["size"], "suite": pl["suite"], "key_id": pl["key_id"],
                             "plaintext_sha256": hashlib.sha256(pl["plaintext"]).hexdigest(),
                             "magic": _magic(pl["plaintext"])})
        entry = self.functions[self.entry].va if self.entry else None
        return {
            "format": self.format,
            "seed": self.seed,
            "image_sha256": hashlib.sha256(image).hexdigest(),
            "entry": entry,
            "sections": sections,
            "functions": functions,
            "imports": imports,
            "dependencies": list(self.dependencies),
            "strings": strings,
            "xrefs": sorted(xrefs, key=lambda x: (x["site"], x["target"])),
            "calls": calls,
            "branches": branches,
            "constants": constants,
            "keys": keys,
            "payloads": payloads,
            "expected_findings": self.predict_findings(synth),
        }

    def predict_findings(self, synth) -> list:
        """Expected signature hits, derived from the plant declarations alone."""
        from .signatures import TEMPERATURE_ID, THERMAL_WORDS, TEMPERATURE_IMMEDIATES, bundled_ruleset
        rules = bundled_ruleset()
        expected = {}

        def hit(sid, category, high, requires=None):
            prev = expected.get(sid)
            conf = "HIGH" if high or (prev and prev["confidence"] == "HIGH") else "LOW"
            entry = {"signature_id": sid, "category": category, "confidence": conf}
            if requires:
                entry["requires"] = requires
            expected[sid] = entry

        texts = [(s["value"], bool(s["ref_from"])) for s in self.strings]
        texts += [(value, referenced) for value, _sec, _pos, referenced in self.extra_strings]
        texts += [(t, False) for t in self.synthetic_strings(synth)]
        for value, referenced in texts:
            for sig in rules:
                if sig.kind in ("STRING_LITERAL", "CPUID_VENDOR") and sig.matches_text(value):
                    hit(sig.id, sig.category, referenced)
            low = value.lower()
            if any(tag in low for tag in cc.PBKDF2_STRINGS):
                hit(cc.FINDING_IDS[cc.PBKDF2_MARKER], "CRYPTO_CONST", referenced)
            if _plain_http(value):
                hit("net.plaintext.http-url", "NETWORK_PLAINTEXT", referenced)
        for lib, sym in self.imports:
            for sig in rules:
                if sig.kind == "IMPORT_SYMBOL" and sig.matches_text(sym):
                    hit(sig.id, sig.category, True)
            if any(sym == n or sym.startswith(n + "_") for n in cc.PBKDF2_IMPORTS):
                hit(cc.FINDING_IDS[cc.PBKDF2_MARKER], "CRYPTO_CONST", True)
        for fn, vendor, _ in self.cpuids:
            for sig in rules:
                if sig.kind == "CPUID_VENDOR" and sig.pattern == vendor:
                    hit(sig.id, sig.category, True)
        for c in self.constants:
            hit(cc.FINDING_IDS[c["primitive"]], "CRYPTO_CONST", bool(c["ref_from"]))
        thermal_funcs = {s["ref_from"] for s in self.strings
                         if s["ref_from"] and any(w in s["value"].lower() for w in THERMAL_WORDS)}
        if any(fn in thermal_funcs and imm in TEMPERATURE_IMMEDIATES for fn, imm in self.compares):
            hit(TEMPERATURE_ID, "TEMPERATURE_CHECK", True)
        if self.payloads:
            hit("crypto.embedded-static-key", "CRYPTO_CONST", True, requires="ciphertext")
        return sorted(expected.values(), key=lambda e: (e["category"], e["signature_id"]))

    def synthetic_strings(self, synth) -> list:
        """Names the container itself stores as readable strings."""
        out = []
        if self.format == "ELF":
            if any(s.name == ".dynstr" for s in synth):
                out += self.dependencies + [sym for _, sym in self.imports]
        else:
            out += [lib for lib in self.dependencies] + [sym for _, sym in self.imports]
            if any(f.export for f in self.functions.values()):
                out += [self.module_name] + [f.name for f in self.functions.values() if f.export]
        return out

    @property
    def module_name(self) -> str:
        return self.spec.get("module_name", "fixture.exe" if self.format == "PE" else "fixture")

    def snapshot(self, image: bytes, synth: list):
        """Memory twin of the image: headers plus every section, payloads decrypted."""
        regions = []
        dump = bytearray()
        first = min(s.va for s in list(self.sections.values()) + synth)
        headers = image[:first - self.base]
        regions.append({"base": self.base, "size": len(headers), "flags": "r", "offset": 0})
        dump += headers
        plain_at = {}
        for pl in self.payloads:
            plain_at[(pl["section"], pl["offset"])] = (pl["plaintext"], pl["size"])
        for sec in list(self.sections.values()) + synth:
            size = sec.final_size()
            blob = bytearray(image[sec.va - self.base:sec.va - self.base + size])
            for (name, off), (plain, n) in plain_at.items():
                if name == sec.name:
                    blob[off:off + n] = plain[:n].ljust(n, b"\0")
            regions.append({"base": sec.va, "size": size, "flags": sec.flags, "offset": len(dump)})
            dump += blob
        return bytes(dump), regions


def _magic(data: bytes) -> Optional[str]:
    if data[:4] == b"\x7fELF":
        return "ELF"
    if data[:2] == b"MZ":
        return "PE"
    if data[:4] == b"PK\x03\x04":
        return "ZIP"
    return None


def _plain_http(value: str) -> bool:
    from .signatures import _LOOPBACK, _URL
    return any(m.group(1).lower() == "http" and not _LOOPBACK.match(m.group(2))
               for m in _URL.finditer(value))


# ------------------------------------------------------------------ ELF writer

class _ElfWriter:
    def __init__(self, forge: _Forge):
        self.f = forge

    def write(self):
        f = self.f
        synth = []
        slots = {}
        dynamic = bool(f.imports or f.dependencies)
        va = f.synthetic_start
        dynstr = dynsym = rela = got = dyn = None
        if dynamic:
            names = bytearray(b"\0")
            name_off = {}
            for n in f.dependencies + [sym for _, sym in f.imports]:
                if n not in name_off:
                    name_off[n] = len(names)
                    names += n.encode() + b"\0"
            sizes = [(".dynstr", "r", len(names))]
            if f.imports:
                sizes += [(".dynsym", "r", 24 * (len(f.imports) + 1)),
                          (".rela.plt", "r", 24 * len(f.imports)),
                          (".got", "rw", 8 * len(f.imports))]
            sizes.append((".dynamic", "rw", 16 * (len(f.dependencies) + 1)))
            made = {}
            for name, flags, size in sizes:
                va = _align(va, 8)
                sec = _Section(name, flags, size, synthetic=True, va=va)
                va += size
                made[name] = sec
                synth.append(sec)
            dynstr = made[".dynstr"]
            dyn = made[".dynamic"]
            if f.imports:
                dynsym, rela, got = made[".dynsym"], made[".rela.plt"], made[".got"]
                for i, key in enumerate(f.imports):
                    slots[key] = got.va + 8 * i
        user = list(f.sections.values())
        all_secs = user + synth
        index_of = {s.name: i + 1 for i, s in enumerate(all_secs)}

        blobs = {s.name: f.section_blob(s, slots) for s in user}
        if dynamic:
            blobs[".dynstr"] = bytes(names)
            if f.imports:
                syms = bytearray(24)
                relas = bytearray()
                for i, (lib, sym) in enumerate(f.imports):
                    syms += struct.pack("<IBBHQQ", name_off[sym], 0x12, 0, 0, 0, 0)
                    relas += struct.pack("<QQq", slots[(lib, sym)], ((i + 1) << 32) | 7, 0)
                blobs[".dynsym"] = bytes(syms)
                blobs[".rela.plt"] = bytes(relas)
                blobs[".got"] = bytes(8 * len(f.imports))
            d = bytearray()
            for lib in f.dependencies:
                d += struct.pack("<qQ", 1, name_off[lib])
            d += struct.pack("<qQ", 0, 0)
            blobs[".dynamic"] = bytes(d)

        end = max(s.va + s.final_size() for s in all_secs) - f.base
        out = bytearray(end)
        for s in all_secs:
            blob = blobs[s.name]
            out[s.va - f.base:s.va - f.base + len(blob)] = blob

        # non-allocated tail: symtab, strtab, shstrtab, section headers
        exports = [fn for fn in sorted(f.functions.values(), key=lambda x: x.va) if fn.export]
        strtab = bytearray(b"\0")
        symtab = bytearray(24)
        for fn in exports:
            symtab += struct.pack("<IBBHQQ", len(strtab), 0x12, 0, index_of[fn.section], fn.va, fn.length())
            strtab += fn.name.encode() + b"\0"
        tail_names = [".symtab", ".strtab", ".shstrtab"]
        shstr = bytearray(b"\0")
        sh_name = {}
        for n in [s.name for s in all_secs] + tail_names:
            sh_name[n] = len(shstr)
            shstr += n.encode() + b"\0"
        symtab_off = _align(len(out), 8)
        out += bytes(symtab_off - len(out)) + symtab
        strtab_off = len(out)
        out += strtab
        shstr_off = len(out)
        out += shstr
        shoff = _align(len(out), 8)
        out += bytes(shoff - len(out))

        headers = [bytes(64)]
        for s in all_secs:
            flags = 0x2 | (0x1 if "w" in s.flags else 0) | (0x4 if "x" in s.flags else 0)
            if s.name == ".dynsym":
                stype, link, info, entsize, align = 11, index_of[".dynstr"], 1, 24, 8
            elif s.name == ".dynstr":
                stype, link, info, entsize, align = 3, 0, 0, 0, 1
            elif s.name == ".rela.plt":
                stype, link, info, entsize, align = 4, index_of[".dynsym"], index_of[".got"], 24, 8
            elif s.name == ".dynamic":
                stype, link, info, entsize, align = 6, index_of[".dynstr"], 0, 16, 8
            else:
                stype, link, info, entsize, align = 1, 0, 0, 0, 16
            headers.append(struct.pack("<IIQQQQIIQQ", sh_name[s.name], stype, flags, s.va, s.va - f.base,
                                       s.final_size(), link, info, align, entsize))
        n = len(all_secs)
        headers.append(struct.pack("<IIQQQQIIQQ", sh_name[".symtab"], 2, 0, 0, symtab_off, len(symtab),
                                   n + 2, 1, 8, 24))
        headers.append(struct.pack("<IIQQQQIIQQ", sh_name[".strtab"], 3, 0, 0, strtab_off, len(strtab),
                                   0, 0, 1, 0))
        headers.append(struct.pack("<IIQQQQIIQQ", sh_name[".shstrtab"], 3, 0, 0, shstr_off, len(shstr),
                                   0, 0, 1, 0))
        out += b"".join(headers)
        shnum = len(headers)

        phdrs = []
        for s in user:
            pflags = 4 | (2 if "w" in s.flags else 0) | (1 if "x" in s.flags else 0)
            phdrs.append(struct.pack("<IIQQQQQQ", 1, pflags, s.va - f.base, s.va, s.va,
                                     s.final_size(), s.final_size(), PAGE))
        if synth:
            lo = synth[0].va
            hi = max(s.va + s.final_size() for s in synth)
            phdrs.append(struct.pack("<IIQQQQQQ", 1, 6, lo - f.base, lo, lo, hi - lo, hi - lo, PAGE))
            phdrs.append(struct.pack("<IIQQQQQQ", 2, 6, dyn.va - f.base, dyn.va, dyn.va,
                                     dyn.final_size(), dyn.final_size(), 8))
        entry = f.functions[f.entry].va if f.entry else 0
        ident = b"\x7fELF" + bytes([2, 1, 1, 0]) + bytes(8)
        ehdr = struct.pack("<16sHHIQQQIHHHHHH", ident, 2, 62, 1, entry, 64 if phdrs else 0, shoff, 0,
                           64, 56, len(phdrs), 64, shnum, shnum - 1)
        head = ehdr + b"".join(phdrs)
        if len(head) > PAGE:
            raise _unrealizable("too many sections for the header page")
        out[:len(head)] = head
        return bytes(out), slots, synth


# ------------------------------------------------------------------- PE writer

class _PeWriter:
    def __init__(self, forge: _Forge):
        self.f = forge

    def write(self):
        f = self.f
        synth = []
        slots = {}
        rva = f.synthetic_start - f.base
        idata = edata = None
        libs = []
        for lib, sym in f.imports:
            if lib not in libs:
                libs.append(lib)
        for lib in f.dependencies:
            if lib not in libs:
                libs.append(lib)
        per_lib = {lib: [sym for l2, sym in f.imports if l2 == lib] for lib in libs}
        for lib in libs:
            if not per_lib[lib]:
                # a dependency with nothing imported by name still needs one thunk
                per_lib[lib] = [None]
        if libs:
            idata_blob, slot_rvas, size = self._idata(libs, per_lib, rva)
            idata = _Section(".idata", "rw", size, synthetic=True, va=f.base + rva)
            synth.append(idata)
            for key, srva in slot_rvas.items():
                slots[key] = f.base + srva
            rva = _align(rva + size, PAGE)
        exports = sorted((fn for fn in f.functions.values() if fn.export), key=lambda x: x.name)
        if exports:
            edata_blob, size = self._edata(exports, rva)
            edata = _Section(".edata", "r", size, synthetic=True, va=f.base + rva)
            synth.append(edata)
            rva = _align(rva + size, PAGE)

        user = list(f.sections.values())
        all_secs = user + synth
        size_of_image = _align(max(s.va + s.final_size() for s in all_secs) - f.base, PAGE)
        out = bytearray(size_of_image)
        for s in user:
            blob = f.section_blob(s, slots)
            out[s.va - f.base:s.va - f.base + len(blob)] = blob
        if idata:
            out[idata.va - f.base:idata.va - f.base + len(idata_blob)] = idata_blob
        if edata:
            out[edata.va - f.base:edata.va - f.base + len(edata_blob)] = edata_blob

        dos = bytearray(0x40)
        dos[0:2] = b"MZ"
        struct.pack_into("<I", dos, 0x3C, 0x40)
        coff = struct.pack("<HHIIIHH", 0x8664, len(all_secs), 0, 0, 0, 240, 0x22)
        code_secs = [s for s in user if s.executable]
        size_code = sum(_align(s.final_size(), PAGE) for s in code_secs)
        size_init = sum(_align(s.final_size(), PAGE) for s in all_secs if not s.executable)
        entry = f.functions[f.entry].va - f.base if f.entry else 0
        base_of_code = code_secs[0].va - f.base if code_secs else 0
        opt = struct.pack("<HBBIIIIIQIIHHHHHHIIIIHHQQQQII", 0x20B, 14, 0, size_code, size_init, 0,
                          entry, base_of_code, f.base, PAGE, PAGE, 6, 0, 0, 0, 6, 0, 0,
                          size_of_image, PAGE, 0, 3, 0x8160, 0x100000, 0x1000, 0x100000, 0x1000, 0, 16)
        dirs = [(0, 0)] * 16
        if edata:
            dirs[0] = (edata.va - f.base, edata.final_size())
        if idata:
            dirs[1] = (idata.va - f.base, (len(libs) + 1) * 20)
        opt += b"".join(struct.pack("<II", a, b) for a, b in dirs)
        table = bytearray()
        for s in all_secs:
            if "x" in s.flags:
                chars = 0x60000020 | (0x80000000 if "w" in s.flags else 0)
            else:
                chars = 0x40000040 | (0x80000000 if "w" in s.flags else 0)
            raw = _align(s.final_size(), PAGE)
            table += struct.pack("<8sIIIIIIHHI", s.name.encode()[:8], s.final_size(), s.va - f.base,
                                 raw, s.va - f.base, 0, 0, 0, 0, chars)
        head = bytes(dos) + b"PE\0\0" + coff + opt + bytes(table)
        if len(head) > PAGE:
            raise _unrealizable("too many sections for the header page")
        out[:len(head)] = head
        return bytes(out), slots, synth

    def _idata(self, libs, per_lib, rva):
        desc_size = 20 * (len(libs) + 1)
        pos = desc_size
        ilt, iat = {}, {}
        for lib in libs:
            n = len(per_lib[lib]) + 1
            ilt[lib] = pos
            pos += 8 * n
            iat[lib] = pos
            pos += 8 * n
        hint = {}
        names = bytearray()
        hn_base = pos
        for lib in libs:
            for sym in per_lib[lib]:
                if sym is None:
                    continue
                if len(names) % 2:
                    names += b"\0"
                hint[(lib, sym)] = hn_base + len(names)
                names += b"\0\0" + sym.encode() + b"\0"
        pos = hn_base + len(names)
        dll_name = {}
        for lib in libs:
            dll_name[lib] = pos
            names += lib.encode() + b"\0"
            pos += len(lib) + 1
        blob = bytearray(pos)
        slot_rvas = {}
        for i, lib in enumerate(libs):
            struct.pack_into("<IIIII", blob, 20 * i, rva + ilt[lib], 0, 0, rva + dll_name[lib], rva + iat[lib])
            for j, sym in enumerate(per_lib[lib]):
                thunk = (1 << 63) | 1 if sym is None else rva + hint[(lib, sym)]
                struct.pack_into("<Q", blob, ilt[lib] + 8 * j, thunk)
                struct.pack_into("<Q", blob, iat[lib] + 8 * j, thunk)
                if sym is not None:
                    slot_rvas[(lib, sym)] = rva + iat[lib] + 8 * j
        blob[hn_base:] = names
        return bytes(blob), slot_rvas, len(blob)

    def _edata(self, exports, rva):
        f = self.f
        n = len(exports)
        funcs = 40
        names_ptr = funcs + 4 * n
        ords = names_ptr + 4 * n
        strings = ords + 2 * n
        blob = bytearray(strings)
        mod = f.module_name.encode() + b"\0"
        mod_rva = rva + len(blob)
        blob += mod
        struct.pack_into("<IIHHIIIIIII", blob, 0, 0, 0, 0, 0, mod_rva, 1, n, n,
                         rva + funcs, rva + names_ptr, rva + ords)
        for i, fn in enumerate(exports):
            struct.pack_into("<I", blob, funcs + 4 * i, fn.va - f.base)
            struct.pack_into("<I", blob, names_ptr + 4 * i, rva + len(blob))
            struct.pack_into("<H", blob, ords + 2 * i, i)
            blob += fn.name.encode() + b"\0"
        return bytes(blob), len(blob)


# ------------------------------------------------------------------ generators

def noise_bytes(size: int, rng: random.Random) -> bytes:
    """Seeded random bytes with every printable run cut below four characters."""
    buf = bytearray(rng.randbytes(size))
    run = 0
    for i, b in enumerate(buf):
        if 0x20 <= b < 0x7F:
            run += 1
            if run == 3:
                buf[i] = b | 0x80
                run = 0
        else:
            run = 0
    return bytes(buf)


_ONSETS = ("b", "c", "d", "f", "g", "h", "j", "l", "m", "n", "p", "r", "s", "t", "v", "w",
           "br", "cl", "dr", "fl", "gr", "pl", "pr", "sh", "st", "th", "tr", "ch", "sp", "qu")
_VOWELS = ("a", "e", "i", "o", "u", "ai", "ea", "ee", "io", "ou", "y")
_CODAS = ("", "", "", "n", "r", "s", "t", "l", "m", "nd", "st", "ng", "ck", "rt")


def make_wordlist(count: int, include=(), rng: Optional[random.Random] = None) -> list:
    """Pseudo-English words that avoid every bundled signature pattern.

    ``include`` words are inserted verbatim at seeded positions.
    """
    from .signatures import THERMAL_WORDS, bundled_ruleset
    rng = rng or random.Random(0)
    banned = {s.pattern.lower() for s in bundled_ruleset() if s.kind in ("STRING_LITERAL", "CPUID_VENDOR")}
    banned |= set(THERMAL_WORDS) | set(cc.PBKDF2_STRINGS) | {"http"}
    include = [w for w in include]
    words = set()
    out = []
    target = max(count - len(include), 0)
    while len(out) < target:
        w = "".join(rng.choice(_ONSETS) + rng.choice(_VOWELS) for _ in range(rng.randint(1, 3)))
        w += rng.choice(_CODAS)
        if w in words or any(b in w for b in banned):
            continue
        words.add(w)
        out.append(w)
    for w in include:
        out.insert(rng.randint(0, len(out)), w)
    return out


def make_pem(cn: str, seed) -> bytes:
    """Deterministic self-signed Ed25519 certificate in PEM form."""
    from cryptography import x509
    from cryptography.hazmat.primitives import serialization
    from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey
    from cryptography.x509.oid import NameOID

    rng = _rng(seed, f"pem:{cn}")
    key = Ed25519PrivateKey.from_private_bytes(rng.randbytes(32))
    name = x509.Name([x509.NameAttribute(NameOID.COMMON_NAME, cn)])
    start = datetime.datetime(2020, 1, 1, tzinfo=datetime.timezone.utc)
    cert = (x509.CertificateBuilder()
            .subject_name(name).issuer_name(name)
            .public_key(key.public_key())
            .serial_number(rng.getrandbits(63) + 1)
            .not_valid_before(start)
            .not_valid_after(start + datetime.timedelta(days=365 * 20))
            .sign(key, None))
    return cert.public_bytes(serialization.Encoding.PEM)


def forge(spec: dict) -> ForgeResult:
    """Build the image described by ``spec``; pure in (spec, seed)."""
    return _Forge(spec).build()


def load_spec(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ForgeError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}", "BAD_SPEC") from exc
