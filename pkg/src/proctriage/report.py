"""Report assembly, adversary-tier annotation, rendering and CFG export."""

from __future__ import annotations

import copy
import hashlib
import json
from importlib import resources

from . import __version__

TIERS = ("LAW_STUDENT", "CS_STUDENT", "REVERSE_ENGINEER")
UNKNOWN = "UNKNOWN"
SEVERITY_ORDER = {"INFO": 0, "WARN": 1, "CRITICAL": 2}

_RATIONALE = {
    "VM_DETECTION": ("CS_STUDENT", "a configurable VM CPU vendor string defeats a vendor-list check"),
    "TEMPERATURE_CHECK": ("CS_STUDENT", "a VM can pass through the host CPU temperature"),
    "VIRTUAL_DEVICE_BLOCK": ("CS_STUDENT", "an unlisted or renamed virtual device driver evades a vendor list"),
    "CERT_STORE": ("REVERSE_ENGINEER", "interposing on a pinned certificate store requires patching the binary"),
}
_BY_PREFIX = (
    ("clipboard.clear.", "LAW_STUDENT", "a hardware clipboard survives a clear-only policy"),
    ("process.blocklist.", "LAW_STUDENT", "trial and error finds a process missing from the block list"),
    ("process.allowlist.", "CS_STUDENT", "a recompiled program can report an allowed process name"),
    ("crypto.embedded-static-key", "CS_STUDENT", "the key is recoverable from the shipped binary with tooling"),
)


def tier_for(finding: dict) -> tuple:
    """(tier, rationale) for one serialized finding; UNKNOWN when unmapped."""
    sid = finding["signature_id"]
    for prefix, tier, why in _BY_PREFIX:
        if sid.startswith(prefix):
            return tier, why
    if finding["category"] in _RATIONALE:
        return _RATIONALE[finding["category"]]
    return UNKNOWN, "no mapping for this finding"


def _rank(tier: str) -> int:
    return TIERS.index(tier) if tier in TIERS else -1


def annotate_adversary_tiers(report: dict) -> dict:
    """Attach a tier to every finding and summarize per category.

    The summary takes the strongest tier among a category's HIGH-confidence
    findings: every mechanism in the category has to be beaten.
    """
    report = copy.deepcopy(report)
    per_category = {}
    for f in report["findings"]:
        tier, why = tier_for(f)
        f["adversary_tier"] = {"tier": tier, "rationale": why}
        if f.get("confidence") != "HIGH" or f.get("suppressed_reason"):
            continue
        prev = per_category.get(f["category"])
        if prev is None or _rank(tier) > _rank(prev[0]):
            per_category[f["category"]] = (tier, why)
    report["adversary_summary"] = [
        {"category": cat, "tier": tier, "rationale": why}
        for cat, (tier, why) in sorted(per_category.items())
    ]
    return report


def _hex(addr) -> str:
    return None if addr is None else f"{addr:#x}"


def finding_to_dict(f) -> dict:
    return {
        "signature_id": f.signature_id,
        "category": f.category,
        "confidence": f.confidence,
        "severity": f.severity,
        "note": f.note,
        "suppressed_reason": f.suppressed_reason,
        "evidence": [{"addr": _hex(e.addr), "matched": e.matched, "xref_sites": [_hex(s) for s in e.xref_sites]}
                     for e in f.evidence],
    }


def verdict_to_dict(v) -> dict:
    return {
        "scenario": v.scenario,
        "client_behavior": v.client_behavior,
        "transcript": [{"t": round(ev.t, 6), "event": ev.kind, "detail": ev.detail} for ev in v.transcript],
    }


def empty_report(input_meta=None) -> dict:
    return {
        "tool_version": __version__,
        "input": input_meta or {},
        "findings": [],
        "network": {"static": None, "probes": [], "grade": None},
        "crypto": {"suites": [], "hits": [], "encryption_functions": [], "candidates": 0,
                   "confirmed_keys": [], "skipped_ciphertexts": []},
        "adversary_summary": [],
        "stats": {},
    }


def build_report(analysis=None, verdicts=(), grade=None, input_meta=None, extra_findings=(), stats=None) -> dict:
    """Assemble an annotated report from an Analysis and/or probe verdicts."""
    from .crypto.constants import cipher_suites
    report = empty_report(input_meta)
    findings = []
    if analysis is not None:
        img = analysis.image
        report["input"] = input_meta or {
            "path": img.path, "content_hash": img.content_hash.hex(), "format": img.format, "arch": img.arch,
        }
        findings = list(analysis.findings)
        net = analysis.network
        report["network"]["static"] = {
            "transport": net.transport, "pinned_store": net.pinned_store,
            "evidence": [{"addr": _hex(a), "text": t} for a, t in net.evidence],
        }
        cr = analysis.crypto
        report["crypto"] = {
            "suites": cipher_suites(cr.hits),
            "hits": [{"primitive": h.primitive, "addr": _hex(h.addr), "form": h.form,
                      "referencing_functions": [_hex(e) for e in h.referencing_functions]} for h in cr.hits],
            "encryption_functions": [_hex(f.entry) for f in cr.encryption_functions],
            "candidates": cr.candidate_count,
            "confirmed_keys": [{
                "key": r.candidate.bytes.hex(),
                "iv": r.iv.bytes.hex() if r.iv else None,
                "suite": r.suite,
                "mode": r.mode,
                "source_addr": _hex(r.candidate.source_addr),
                "distance_from_ref": r.candidate.distance_from_ref,
                "magic_match": r.magic_match,
                "plaintext_entropy": round(r.plaintext_entropy, 6),
                "ciphertext_index": r.ciphertext_index,
            } for r in cr.confirmed],
            "skipped_ciphertexts": [{"index": i, "error": e} for i, e in cr.skipped],
        }
        report["stats"] = {"timings_s": {k: round(v, 6) for k, v in analysis.timings.items()},
                           "functions": len(analysis.functions),
                           "instructions": len(analysis.index.instructions),
                           "trials": len(cr.results)}
    findings = sorted(list(findings) + list(extra_findings), key=lambda f: (f.category, f.signature_id))
    report["findings"] = [finding_to_dict(f) for f in findings]
    if verdicts:
        report["network"]["probes"] = [verdict_to_dict(v) for v in verdicts]
        report["network"]["grade"] = grade
    if stats:
        report["stats"].update(stats)
    return annotate_adversary_tiers(report)


# -- rendering ------------------------------------------------------------------

def canonical_form(report: dict) -> dict:
    """The report without wall-clock material: no stats, no transcript times."""
    doc = copy.deepcopy(report)
    doc.pop("stats", None)
    for probe in doc.get("network", {}).get("probes", []) or []:
        for ev in probe.get("transcript", []):
            ev.pop("t", None)
    return doc


def canonical_json(report: dict) -> bytes:
    return json.dumps(canonical_form(report), sort_keys=True, separators=(",", ":")).encode()


def canonical_hash(report: dict) -> str:
    return hashlib.sha256(canonical_json(report)).hexdigest()


def render(report: dict, fmt: str = "JSON") -> bytes:
    fmt = fmt.upper()
    if fmt == "JSON":
        return (json.dumps(report, sort_keys=True, indent=2) + "\n").encode()
    if fmt == "TEXT":
        return render_text(report).encode()
    raise ValueError(f"unknown format {fmt}")


def render_text(report: dict) -> str:
    lines = [f"proctriage {report['tool_version']}"]
    meta = report.get("input") or {}
    if meta:
        lines.append(f"input: {meta.get('path', '?')} ({meta.get('format', '?')}/{meta.get('arch', '?')})")
        if meta.get("content_hash"):
            lines.append(f"sha256: {meta['content_hash']}")
    lines += ["", "== Findings =="]
    if not report["findings"]:
        lines.append("  none")
    for f in report["findings"]:
        tier = f.get("adversary_tier", {}).get("tier", UNKNOWN)
        lines.append(f"  [{f['severity']}] {f['category']} {f['signature_id']} "
                     f"confidence={f['confidence']} tier={tier}")
        for e in f["evidence"][:5]:
            sites = ", ".join(e["xref_sites"][:4]) or "no code reference"
            lines.append(f"      {e['addr']}  {e['matched']!r}  <- {sites}")
        if len(f["evidence"]) > 5:
            lines.append(f"      ... {len(f['evidence']) - 5} more")
    net = report.get("network", {})
    lines += ["", "== Network =="]
    static = net.get("static")
    if static:
        lines.append(f"  transport: {static['transport']}  pinned store: {'yes' if static['pinned_store'] else 'no'}")
    for p in net.get("probes", []):
        lines.append(f"  probe {p['scenario']}: {p['client_behavior']}")
    if net.get("grade"):
        lines.append(f"  grade: {net['grade']}")
    cr = report.get("crypto", {})
    lines += ["", "== Crypto =="]
    lines.append(f"  primitives: {', '.join(cr.get('suites', [])) or 'none'}")
    if cr.get("encryption_functions"):
        lines.append(f"  encryption functions: {', '.join(cr['encryption_functions'])}")
    lines.append(f"  key candidates: {cr.get('candidates', 0)}")
    for k in cr.get("confirmed_keys", []):
        lines.append(f"  CONFIRMED {k['suite']} key={k['key']} iv={k['iv']} at {k['source_addr']} "
                     f"magic={k['magic_match']}")
    lines += ["", "== Adversary summary =="]
    if not report["adversary_summary"]:
        lines.append("  none")
    for s in report["adversary_summary"]:
        lines.append(f"  {s['category']}: {s['tier']} ({s['rationale']})")
    return "\n".join(lines) + "\n"


def report_schema() -> dict:
    text = resources.files("proctriage").joinpath("report_schema.json").read_text("utf-8")
    return json.loads(text)


def max_severity(report: dict):
    sev = [f["severity"] for f in report["findings"] if not f.get("suppressed_reason")]
    return max(sev, key=SEVERITY_ORDER.__getitem__) if sev else None


# -- CFG export -------------------------------------------------------------------

def export_cfg_dot(cfg) -> str:
    """DOT digraph with one node per block, ordered by start address."""
    lines = [f'digraph "cfg_{cfg.function:x}" {{', "  node [shape=box];"]
    unknown = set(cfg.unknown_exits)
    for b in sorted(cfg.blocks, key=lambda b: b.start):
        attrs = [f'label="block_{b.start:x}"']
        if b.opaque:
            attrs.append('style="dashed"')
        if b.start in unknown:
            attrs.append('xlabel="indirect"')
        lines.append(f'  "block_{b.start:x}" [{", ".join(attrs)}];')
    for e in sorted(cfg.edges, key=lambda e: (e.src, e.dst, e.kind)):
        lines.append(f'  "block_{e.src:x}" -> "block_{e.dst:x}" [label="{e.kind}"];')
    lines.append("}")
    return "\n".join(lines) + "\n"
