"""Declarative signature rulesets and the scanner that evaluates them."""

from __future__ import annotations

import bisect
import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

from .errors import RulesetError
from .loader import BinaryImage

CATEGORIES = (
    "CAMERA_MIC", "VM_DETECTION", "VIRTUAL_DEVICE_BLOCK", "CLIPBOARD", "PROCESS_CONTROL",
    "NETWORK_PLAINTEXT", "NETWORK_TLS", "NETWORK_RESTRICTION", "CERT_STORE",
    "TEMPERATURE_CHECK", "CRYPTO_CONST",
)
KINDS = ("STRING_LITERAL", "IMPORT_SYMBOL", "BYTE_PATTERN", "CPUID_VENDOR")
HIGH, LOW = "HIGH", "LOW"
SEVERITIES = ("INFO", "WARN", "CRITICAL")

SIGNATURE_FIELDS = {"id", "category", "kind", "pattern", "case_sensitive", "note"}
RULESET_FIELDS = {"version", "signatures"}
BUNDLED = ("vm-vendors", "virtual-av-devices", "device-apis", "network")

DEFAULT_SEVERITY = {
    "CAMERA_MIC": "WARN",
    "NETWORK_PLAINTEXT": "WARN",
    "CRYPTO_CONST": "INFO",
}

TEMPERATURE_ID = "vm.temperature-check"
THERMAL_WORDS = ("thermal", "temperature")
# 100 C, and the same value in tenths of a kelvin (373.15 K)
TEMPERATURE_IMMEDIATES = frozenset({100, 3731, 3732})


@dataclass(frozen=True)
class Signature:
    id: str
    category: str
    kind: str
    pattern: str
    case_sensitive: bool = False
    note: str = ""

    @property
    def pattern_bytes(self) -> bytes:
        if self.kind == "BYTE_PATTERN":
            return bytes.fromhex(self.pattern)
        return self.pattern.encode("latin-1")

    def matches_text(self, text: str) -> bool:
        """Whether ``text`` (a string or symbol) contains this signature."""
        if self.kind == "IMPORT_SYMBOL":
            return _symbol_matches(self, text)
        if self.kind == "BYTE_PATTERN":
            return False
        if self.case_sensitive:
            return self.pattern in text
        return self.pattern.lower() in text.lower()


@dataclass(frozen=True)
class Ruleset:
    signatures: tuple = ()
    sources: tuple = ()

    def __len__(self):
        return len(self.signatures)

    def __iter__(self):
        return iter(self.signatures)

    def merged(self, other: "Ruleset") -> "Ruleset":
        ids = {s.id for s in self.signatures}
        for sig in other.signatures:
            if sig.id in ids:
                raise RulesetError(f"signature id {sig.id!r} defined twice", "DUPLICATE_ID")
        return Ruleset(self.signatures + other.signatures, self.sources + other.sources)


@dataclass(frozen=True)
class Evidence:
    addr: int
    matched: str
    xref_sites: tuple = ()


@dataclass(frozen=True)
class Finding:
    signature_id: str
    category: str
    evidence: tuple
    confidence: str
    suppressed_reason: Optional[str] = None
    severity: str = "INFO"
    note: str = ""

    @property
    def xref_sites(self) -> tuple:
        return tuple(sorted({s for e in self.evidence for s in e.xref_sites}))


def _line_of(text: str, needle: str, start: int = 0) -> tuple:
    pos = text.find(needle, start)
    if pos < 0:
        return None, start
    return text.count("\n", 0, pos) + 1, pos + 1


def parse_ruleset(text: str, source: str = "<memory>") -> Ruleset:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise RulesetError(f"{source}:{exc.lineno}: invalid JSON: {exc.msg}", "BAD_RULESET") from exc
    if not isinstance(doc, dict):
        raise RulesetError(f"{source}: top level must be an object", "BAD_RULESET")
    extra = set(doc) - RULESET_FIELDS
    if extra:
        raise RulesetError(f"{source}: unknown field(s) {sorted(extra)}", "UNKNOWN_FIELD")
    if doc.get("version") != 1:
        raise RulesetError(f"{source}: unsupported version {doc.get('version')!r}", "BAD_RULESET")
    sigs, seen = [], set()
    cursor = 0
    for i, raw in enumerate(doc.get("signatures", [])):
        if not isinstance(raw, dict):
            raise RulesetError(f"{source}: signature #{i} is not an object", "BAD_RULESET")
        line, cursor = _line_of(text, json.dumps(raw.get("id", "")), cursor)
        where = f"{source}:{line}" if line else f"{source}:#{i}"
        extra = set(raw) - SIGNATURE_FIELDS
        if extra:
            raise RulesetError(f"{where}: unknown field(s) {sorted(extra)}", "UNKNOWN_FIELD")
        missing = {"id", "category", "kind", "pattern"} - set(raw)
        if missing:
            raise RulesetError(f"{where}: missing field(s) {sorted(missing)}", "BAD_RULESET")
        sid, category, kind, pattern = raw["id"], raw["category"], raw["kind"], raw["pattern"]
        if not isinstance(sid, str) or not sid:
            raise RulesetError(f"{where}: id must be a non-empty string", "BAD_RULESET")
        if sid in seen:
            raise RulesetError(f"{where}: duplicate id {sid!r}", "DUPLICATE_ID")
        if category not in CATEGORIES:
            raise RulesetError(f"{where}: unknown category {category!r}", "BAD_RULESET")
        if kind not in KINDS:
            raise RulesetError(f"{where}: unknown kind {kind!r}", "BAD_RULESET")
        if not isinstance(pattern, str) or not pattern:
            raise RulesetError(f"{where}: empty pattern", "BAD_PATTERN")
        if kind == "BYTE_PATTERN" and not re.fullmatch(r"(?:[0-9A-F]{2})+", pattern):
            raise RulesetError(f"{where}: byte pattern must be uppercase hex of even length", "BAD_PATTERN")
        if kind != "BYTE_PATTERN" and not pattern.isascii():
            raise RulesetError(f"{where}: text patterns must be ASCII", "BAD_PATTERN")
        default_cs = kind != "STRING_LITERAL"
        seen.add(sid)
        sigs.append(Signature(sid, category, kind, pattern,
                              bool(raw.get("case_sensitive", default_cs)), str(raw.get("note", ""))))
    return Ruleset(tuple(sigs), (source,))


def load_ruleset(path) -> Ruleset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise RulesetError(f"{path}: {exc.strerror}", "FILE_NOT_FOUND") from exc
    return parse_ruleset(text, str(path))


def bundled_ruleset(names=BUNDLED) -> Ruleset:
    """The default rulesets shipped inside the package, merged."""
    merged = Ruleset()
    for name in names:
        text = resources.files("proctriage.rulesets").joinpath(f"{name}.json").read_text("utf-8")
        merged = merged.merged(parse_ruleset(text, f"bundled:{name}"))
    return merged


def load_rulesets(paths=None) -> Ruleset:
    if not paths:
        return bundled_ruleset()
    merged = Ruleset()
    for p in paths:
        merged = merged.merged(load_ruleset(p))
    return merged


# --- matching ----------------------------------------------------------------

def _symbol_matches(sig: Signature, symbol: str) -> bool:
    pat = sig.pattern
    if not sig.case_sensitive:
        pat, symbol = pat.lower(), symbol.lower()
        return symbol in (pat, pat + "a", pat + "w")
    return symbol in (pat, pat + "A", pat + "W")


def find_all(blob: bytes, needle: bytes):
    pos = blob.find(needle)
    while pos >= 0:
        yield pos
        pos = blob.find(needle, pos + 1)


class _RefLookup:
    """Sorted (target, site) pairs so range queries are logarithmic."""

    def __init__(self, index):
        pairs = sorted((t, s) for s, ts in index.code_to_data.items() for t in ts) if index else []
        self.targets = [t for t, _ in pairs]
        self.sites = [s for _, s in pairs]

    def sites_in(self, lo: int, hi: int) -> tuple:
        i = bisect.bisect_left(self.targets, lo)
        j = bisect.bisect_left(self.targets, hi)
        return tuple(sorted(set(self.sites[i:j])))


@dataclass
class ScanContext:
    image: BinaryImage
    index: object
    refs: _RefLookup = None
    blobs: list = field(default_factory=list)
    lowered: list = field(default_factory=list)
    imm32_by_function: dict = None

    def __post_init__(self):
        self.refs = _RefLookup(self.index)
        for sec in self.image.sections:
            if sec.readable and sec.size:
                blob = self.image.section_bytes(sec)
                self.blobs.append((sec, blob))
                self.lowered.append((sec, blob.lower()))

    def string_sites(self, addr: int, length: int) -> tuple:
        """Code sites referencing the string that holds [addr, addr+length)."""
        sref = self.image.string_at(addr)
        if sref is not None and sref.end >= addr + length:
            return self.refs.sites_in(sref.addr, sref.end)
        return self.refs.sites_in(addr, addr + length)

    def imm32s(self) -> dict:
        if self.imm32_by_function is None:
            table = {}
            if self.index is not None:
                for addr, ins in self.index.instructions.items():
                    entry = self.index.function_of.get(addr)
                    if entry is not None and ins.imm is not None and ins.imm_size == 4:
                        table.setdefault(entry, {}).setdefault(ins.imm & 0xFFFFFFFF, []).append(addr)
            self.imm32_by_function = table
        return self.imm32_by_function


def _text_evidence(ctx: ScanContext, sig: Signature, case_sensitive: bool) -> list:
    pattern = sig.pattern if case_sensitive else sig.pattern.lower()
    needles = ((pattern.encode("ascii"), "ASCII"), (pattern.encode("utf-16-le"), "UTF16LE"))
    blobs = ctx.blobs if case_sensitive else ctx.lowered
    found = []
    for sec, blob in blobs:
        for needle, enc in needles:
            for off in find_all(blob, needle):
                addr = sec.virtual_addr + off
                raw = ctx.image.read(addr, len(needle))
                text = raw.decode("ascii" if enc == "ASCII" else "utf-16-le", "replace")
                found.append(Evidence(addr, text, ctx.string_sites(addr, len(needle))))
    return found


def _import_evidence(ctx: ScanContext, sig: Signature) -> list:
    sites = {}
    if ctx.index is not None:
        for site, imps in ctx.index.code_to_import.items():
            for imp in imps:
                sites.setdefault((imp.symbol, imp.slot_addr), set()).add(site)
    out = []
    for imp in ctx.image.imports:
        if _symbol_matches(sig, imp.symbol):
            addr = imp.slot_addr if imp.slot_addr is not None else 0
            out.append(Evidence(addr, imp.symbol, tuple(sorted(sites.get((imp.symbol, imp.slot_addr), ())))))
    return out


def _byte_evidence(ctx: ScanContext, sig: Signature) -> list:
    needle = sig.pattern_bytes
    out = []
    for sec in ctx.image.sections:
        if not sec.size:
            continue
        blob = ctx.image.section_bytes(sec)
        for off in find_all(blob, needle):
            addr = sec.virtual_addr + off
            sites = (addr,) if sec.executable else ctx.refs.sites_in(addr, addr + len(needle))
            out.append(Evidence(addr, sig.pattern, sites))
    return out


def _cpuid_evidence(ctx: ScanContext, sig: Signature) -> list:
    out = _text_evidence(ctx, sig, True)
    padded = sig.pattern.encode("ascii").ljust(12, b"\0")[:12]
    chunks = [int.from_bytes(padded[i:i + 4], "little") for i in (0, 4, 8)]
    for entry, imms in sorted(ctx.imm32s().items()):
        if all(c in imms for c in chunks):
            sites = tuple(sorted({imms[c][0] for c in chunks}))
            out.append(Evidence(sites[0], sig.pattern, sites))
    return out


def _evaluate(ctx: ScanContext, sig: Signature) -> Optional[Finding]:
    if sig.kind == "STRING_LITERAL":
        evidence = _text_evidence(ctx, sig, sig.case_sensitive)
    elif sig.kind == "IMPORT_SYMBOL":
        evidence = _import_evidence(ctx, sig)
    elif sig.kind == "BYTE_PATTERN":
        evidence = _byte_evidence(ctx, sig)
    else:
        evidence = _cpuid_evidence(ctx, sig)
    if not evidence:
        return None
    evidence = sorted(set(evidence), key=lambda e: (e.addr, e.matched, e.xref_sites))
    high = sig.kind == "IMPORT_SYMBOL" or any(e.xref_sites for e in evidence)
    return Finding(sig.id, sig.category, tuple(evidence), HIGH if high else LOW,
                   severity=DEFAULT_SEVERITY.get(sig.category, "INFO"), note=sig.note)


def finding_key(f: Finding):
    return (f.category, f.signature_id)


def scan(image: BinaryImage, index, ruleset: Ruleset, jobs: int = 1) -> list:
    """Evaluate every signature; one Finding per signature with a match."""
    from .analysis import _map
    ctx = ScanContext(image, index)
    ctx.imm32s()
    results = _map(lambda s: _evaluate(ctx, s), list(ruleset.signatures), jobs)
    return sorted((f for f in results if f is not None), key=finding_key)


# --- network posture ---------------------------------------------------------

_URL = re.compile(r"(https?)://([^/\s:\"'<>]+)", re.IGNORECASE)
_LOOPBACK = re.compile(r"^(localhost|127(\.\d{1,3}){3}|\[?::1\]?|0\.0\.0\.0)$", re.IGNORECASE)
PEM_MARKER = "-----BEGIN CERTIFICATE-----"


@dataclass(frozen=True)
class NetworkAssessment:
    transport: str
    pinned_store: bool
    evidence: tuple = ()


def assess_network_static(image: BinaryImage, findings=()) -> NetworkAssessment:
    """Classify transport posture from embedded URLs and TLS-library findings."""
    tls = plain = False
    evidence = []
    pinned = False
    for sref in image.strings:
        for m in _URL.finditer(sref.value):
            scheme, host = m.group(1).lower(), m.group(2)
            if _LOOPBACK.match(host):
                continue
            evidence.append((sref.addr + m.start(), m.group(0)))
            if scheme == "https":
                tls = True
            else:
                plain = True
        if PEM_MARKER in sref.value:
            pinned = True
            evidence.append((sref.addr, PEM_MARKER))
    for f in findings:
        if f.category == "NETWORK_TLS" and f.confidence == HIGH:
            tls = True
            evidence.append((f.evidence[0].addr, f.signature_id))
        elif f.category == "CERT_STORE":
            pinned = True
    if tls and plain:
        transport = "MIXED"
    elif tls:
        transport = "TLS_ONLY"
    elif plain:
        transport = "PLAINTEXT"
    else:
        transport = "NONE"
    return NetworkAssessment(transport, pinned, tuple(sorted(set(evidence))))


def network_findings(assessment: NetworkAssessment, image: BinaryImage, index) -> list:
    """A NETWORK_PLAINTEXT finding for non-loopback http:// URLs."""
    refs = _RefLookup(index)
    evidence = []
    for addr, text in assessment.evidence:
        if text.lower().startswith("http://"):
            sref = image.string_at(addr)
            lo, hi = (sref.addr, sref.end) if sref else (addr, addr + len(text))
            evidence.append(Evidence(addr, text, refs.sites_in(lo, hi)))
    if not evidence:
        return []
    high = any(e.xref_sites for e in evidence)
    return [Finding("net.plaintext.http-url", "NETWORK_PLAINTEXT", tuple(evidence),
                    HIGH if high else LOW, severity="WARN", note="plaintext HTTP endpoint")]


# --- temperature -------------------------------------------------------------

_CMP_OPCODES = {0x3C, 0x3D}
_GROUP1 = {0x80, 0x81, 0x83}


def is_compare_immediate(ins) -> bool:
    if ins.imm is None:
        return False
    if ins.opcode in _CMP_OPCODES:
        return True
    return ins.opcode in _GROUP1 and ins.reg == 7


def detect_temperature_check(image: BinaryImage, index) -> Optional[Finding]:
    """Thermal string and a compare against 100 (or 3731/3732) in one function."""
    if index is None:
        return None
    thermal = {}
    for site, srefs in index.code_to_string.items():
        entry = index.function_of.get(site)
        if entry is None:
            continue
        for sref in srefs:
            if any(w in sref.value.lower() for w in THERMAL_WORDS):
                thermal.setdefault(entry, []).append((site, sref))
    compares = {}
    for addr, ins in index.instructions.items():
        entry = index.function_of.get(addr)
        if entry in thermal and is_compare_immediate(ins):
            value = _signed_imm(ins)
            if value in TEMPERATURE_IMMEDIATES:
                compares.setdefault(entry, []).append(addr)
    evidence = []
    for entry in sorted(compares):
        sites = sorted({s for s, _ in thermal[entry]} | set(compares[entry]))
        for site, sref in sorted(thermal[entry], key=lambda p: p[0]):
            evidence.append(Evidence(sref.addr, sref.value, tuple(sites)))
    if not evidence:
        return None
    evidence = sorted(set(evidence), key=lambda e: (e.addr, e.matched))
    return Finding(TEMPERATURE_ID, "TEMPERATURE_CHECK", tuple(evidence), HIGH,
                   note="CPU temperature compared against a hypervisor default")


def _signed_imm(ins) -> int:
    bits = ins.imm_size * 8
    v = ins.imm & ((1 << bits) - 1)
    return v - (1 << bits) if v >> (bits - 1) else v
