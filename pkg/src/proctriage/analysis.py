"""Function discovery, per-function CFG recovery and the cross-reference index."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

from .loader import BinaryImage, ImportRef
from .x86 import CALL, DATA_REF, JCC, JMP, RET, DecodeError, Instruction, decode_instruction, linear_sweep

FALLTHROUGH, TAKEN, CALL_RETURN = "fallthrough", "taken", "call_return"


@dataclass(frozen=True)
class FunctionRecord:
    entry: int
    name: Optional[str] = None
    body_ranges: tuple = ()

    def contains(self, addr: int) -> bool:
        return any(lo <= addr < hi for lo, hi in self.body_ranges)


@dataclass(frozen=True)
class Block:
    start: int
    end: int
    # instruction addresses, in order
    instructions: tuple = ()
    # set when the block ends in bytes that do not decode
    opaque: bool = False


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    kind: str


@dataclass(frozen=True)
class Cfg:
    function: int
    blocks: tuple
    edges: tuple
    # blocks ending in a register/memory-indirect jump; their successor is unknown
    unknown_exits: tuple = ()

    def block_at(self, start: int) -> Optional[Block]:
        return next((b for b in self.blocks if b.start == start), None)


@dataclass
class XrefIndex:
    code_to_data: dict = field(default_factory=dict)
    code_to_string: dict = field(default_factory=dict)
    code_to_import: dict = field(default_factory=dict)
    # direct call site -> callee
    calls: dict = field(default_factory=dict)
    # instruction address -> owning function entry (None for sweep-only code)
    function_of: dict = field(default_factory=dict)
    instructions: dict = field(default_factory=dict, repr=False)

    def sites_referencing(self, lo: int, hi: int) -> list:
        """Instruction addresses whose data reference lands in [lo, hi)."""
        return sorted(site for site, targets in self.code_to_data.items()
                      if any(lo <= t < hi for t in targets))

    def callers_of(self, entry: int) -> set:
        funcs = set()
        for site, target in self.calls.items():
            if target == entry and self.function_of.get(site) is not None:
                funcs.add(self.function_of[site])
        return funcs

    def imports_with_sites(self, image: BinaryImage) -> list:
        sites = {}
        for site, imps in self.code_to_import.items():
            for imp in imps:
                sites.setdefault((imp.symbol, imp.slot_addr), []).append(site)
        return [replace(imp, call_site_addrs=tuple(sorted(sites.get((imp.symbol, imp.slot_addr), ()))))
                for imp in image.imports]


def _mapped_predicate(image: BinaryImage):
    ranges = [(s.virtual_addr, s.end) for s in image.sections if s.size]
    return lambda va: any(lo <= va < hi for lo, hi in ranges)


def _decode_at(image: BinaryImage, addr: int, is_mapped) -> Optional[Instruction]:
    code = image.read(addr, 15)
    if not code:
        return None
    try:
        return decode_instruction(code, addr, is_mapped)
    except DecodeError:
        return None


def import_thunks(image: BinaryImage) -> dict:
    """Map stub address -> ImportRef for ``jmp [slot]`` trampolines (PLT style)."""
    slots = image.import_slots
    if not slots:
        return {}
    thunks = {}
    for sec in image.executable_sections:
        for addr, ins in linear_sweep(image.section_bytes(sec), sec.virtual_addr):
            if ins is not None and ins.kind == JMP and ins.indirect and ins.target in slots:
                thunks[addr] = slots[ins.target]
    return thunks


def _explore(image: BinaryImage, entry: int, stop_at=frozenset(), is_mapped=None):
    """Recursive-descent decode of one function body.

    Returns (instructions, leaders) where instructions maps address to an
    Instruction or None for an undecodable position.
    """
    sec = image.section_for(entry)
    insns = {}
    leaders = {entry}
    if sec is None or not sec.executable:
        return insns, leaders
    if is_mapped is None:
        is_mapped = _mapped_predicate(image)

    def inside(t):
        return t is not None and sec.contains(t) and t not in stop_at

    work = [entry]
    while work:
        addr = work.pop()
        while sec.contains(addr) and addr not in insns:
            ins = _decode_at(image, addr, is_mapped)
            insns[addr] = ins
            if ins is None:
                break
            if ins.kind == JCC:
                if inside(ins.target):
                    leaders.add(ins.target)
                    work.append(ins.target)
                leaders.add(ins.end)
            elif ins.kind == JMP and not ins.indirect:
                if inside(ins.target):
                    leaders.add(ins.target)
                    work.append(ins.target)
                break
            elif ins.terminates:
                break
            elif ins.kind == CALL or ins.indirect == "call":
                leaders.add(ins.end)
            addr = ins.end
            if addr in stop_at:
                break
    return insns, leaders


def _ranges(insns: dict) -> tuple:
    spans = sorted((a, a + (i.length if i else 1)) for a, i in insns.items())
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return tuple((lo, hi) for lo, hi in merged)


def _is_prologue(code: bytes) -> bool:
    if code[:4] in (b"\x55\x48\x89\xe5", b"\x55\x48\x8b\xec"):
        return True
    return code[:3] in (b"\x48\x83\xec", b"\x48\x81\xec")


def discover_functions(image: BinaryImage, jobs: int = 1) -> list:
    """Find function entries in executable sections.

    Seeds are the entry point, symbol-table/export entries, direct call
    targets reached by recursive descent, and a linear-sweep prologue scan.
    """
    exec_secs = [s for s in image.executable_sections if s.size]
    if not exec_secs:
        return []
    is_mapped = _mapped_predicate(image)
    thunks = import_thunks(image)

    def in_code(va):
        return va is not None and any(s.contains(va) for s in exec_secs) and va not in thunks

    seeds = set()
    if in_code(image.entry):
        seeds.add(image.entry)
    seeds.update(a for a in image.symbols if in_code(a))

    for sec in exec_secs:
        blob = image.section_bytes(sec)
        prev = None
        for addr, ins in linear_sweep(blob, sec.virtual_addr, is_mapped):
            boundary = prev is None or prev.terminates or prev.opcode in (0xCC, 0x90)
            if ins is not None and boundary:
                off = addr - sec.virtual_addr
                if _is_prologue(blob[off:off + 4]) and in_code(addr):
                    seeds.add(addr)
            prev = ins

    found = set()
    work = sorted(seeds)
    while work:
        entry = work.pop()
        if entry in found:
            continue
        found.add(entry)
        insns, _ = _explore(image, entry, frozenset(), is_mapped)
        for ins in insns.values():
            if ins is not None and ins.kind == CALL and not ins.indirect and in_code(ins.target):
                if ins.target not in found:
                    work.append(ins.target)

    entries = sorted(found)
    stop = frozenset(entries)

    def record(entry):
        insns, _ = _explore(image, entry, stop - {entry}, is_mapped)
        return FunctionRecord(entry, image.symbols.get(entry), _ranges(insns))

    return _map(record, entries, jobs)


def _map(fn, items, jobs):
    if jobs and jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


def build_cfg(image: BinaryImage, function: FunctionRecord, other_entries=frozenset()) -> Cfg:
    """Split a function body into basic blocks and connect them."""
    insns, leaders = _explore(image, function.entry, frozenset(other_entries) - {function.entry})
    blocks = []
    current = []
    cur_end = None

    def close():
        nonlocal current
        if current:
            last_addr = current[-1]
            last = insns[last_addr]
            end = last_addr + (last.length if last else 1)
            blocks.append(Block(current[0], end, tuple(current), opaque=last is None))
        current = []

    for addr in sorted(insns):
        ins = insns[addr]
        if current and (addr in leaders or addr != cur_end):
            close()
        current.append(addr)
        cur_end = addr + (ins.length if ins else 1)
        if ins is None or ins.kind in (JCC, JMP, RET, CALL) or ins.terminates or ins.indirect:
            close()
    close()

    starts = {b.start for b in blocks}
    edges = []
    unknown = []
    for b in blocks:
        last = insns[b.instructions[-1]]
        if last is None:
            continue
        if last.kind == JCC:
            if last.target in starts:
                edges.append(Edge(b.start, last.target, TAKEN))
            if b.end in starts:
                edges.append(Edge(b.start, b.end, FALLTHROUGH))
        elif last.kind == JMP and not last.indirect:
            if last.target in starts:
                edges.append(Edge(b.start, last.target, TAKEN))
        elif last.indirect == "jmp":
            unknown.append(b.start)
        elif last.terminates:
            continue
        elif last.kind == CALL or last.indirect == "call":
            if b.end in starts:
                edges.append(Edge(b.start, b.end, CALL_RETURN))
        elif b.end in starts:
            edges.append(Edge(b.start, b.end, FALLTHROUGH))
    edges.sort(key=lambda e: (e.src, e.dst, e.kind))
    return Cfg(function.entry, tuple(blocks), tuple(edges), tuple(unknown))


def build_cfgs(image: BinaryImage, functions, jobs: int = 1) -> list:
    entries = frozenset(f.entry for f in functions)
    ordered = sorted(functions, key=lambda f: f.entry)
    return _map(lambda f: build_cfg(image, f, entries), ordered, jobs)


def extract_xrefs(image: BinaryImage, functions, jobs: int = 1) -> XrefIndex:
    """Index code->data, code->string and code->import references.

    Executable bytes outside every discovered function are linear-swept as
    well, so references from code the discovery heuristics missed are kept
    (their ``function_of`` entry is None).
    """
    is_mapped = _mapped_predicate(image)
    thunks = import_thunks(image)
    slots = image.import_slots
    data_secs = [s for s in image.sections if not s.executable and s.size]
    ordered = sorted(functions, key=lambda f: f.entry)
    entries = frozenset(f.entry for f in ordered)

    def walk(func):
        insns, _ = _explore(image, func.entry, entries - {func.entry}, is_mapped)
        return func.entry, insns

    per_func = _map(walk, ordered, jobs)
    owner = {}
    decoded = {}
    for entry, insns in per_func:
        for addr, ins in insns.items():
            if ins is not None and addr not in owner:
                owner[addr] = entry
                decoded[addr] = ins

    covered = []
    for _, insns in per_func:
        covered.extend(_ranges(insns))
    for sec in image.executable_sections:
        for addr, ins in _sweep_gaps(image, sec, covered, is_mapped):
            if ins is not None and addr not in decoded:
                owner[addr] = None
                decoded[addr] = ins

    index = XrefIndex()
    for addr in sorted(decoded):
        ins = decoded[addr]
        index.instructions[addr] = ins
        index.function_of[addr] = owner[addr]
        target = ins.target
        if ins.kind == DATA_REF and target is not None:
            if target in slots:
                index.code_to_import.setdefault(addr, []).append(slots[target])
            if any(s.contains(target) for s in data_secs):
                index.code_to_data.setdefault(addr, []).append(target)
                sref = image.string_at(target)
                if sref is not None:
                    index.code_to_string.setdefault(addr, []).append(sref)
        elif ins.kind in (CALL, JMP) and target is not None:
            if ins.indirect and target in slots:
                index.code_to_import.setdefault(addr, []).append(slots[target])
            elif not ins.indirect and target in thunks:
                index.code_to_import.setdefault(addr, []).append(thunks[target])
            elif ins.kind == CALL and not ins.indirect:
                index.calls[addr] = target
    return index


def _sweep_gaps(image: BinaryImage, sec, covered, is_mapped):
    spans = sorted((max(lo, sec.virtual_addr), min(hi, sec.end)) for lo, hi in covered
                   if lo < sec.end and hi > sec.virtual_addr)
    pos = sec.virtual_addr
    gaps = []
    for lo, hi in spans:
        if lo > pos:
            gaps.append((pos, lo))
        pos = max(pos, hi)
    if pos < sec.end:
        gaps.append((pos, sec.end))
    for lo, hi in gaps:
        yield from linear_sweep(image.read(lo, hi - lo), lo, is_mapped)
