"""End-to-end static analysis: load, index, scan, fingerprint crypto, harvest keys."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional

from . import signatures as sg
from .analysis import build_cfgs, discover_functions, extract_xrefs
from .crypto import constants as cc
from .crypto.keys import (
    CONFIRMED, DEFAULT_KEY_LENGTHS, DEFAULT_THRESHOLD, DEFAULT_WINDOW,
    locate_encryption_functions, scan_windows, data_ref_targets, validate_candidates,
)
from .loader import BinaryImage, load_image

IV_LENGTHS = frozenset({8, 16})
EMBEDDED_KEY_ID = "crypto.embedded-static-key"


@dataclass
class AnalyzeConfig:
    window: int = DEFAULT_WINDOW
    key_lengths: frozenset = DEFAULT_KEY_LENGTHS
    ruleset: Optional[sg.Ruleset] = None
    ciphertexts: tuple = ()
    suites: tuple = ("AES_256_CBC", "AES_128_CBC", "TDES_CBC")
    mode: str = "CBC"
    threshold: float = DEFAULT_THRESHOLD
    jobs: int = 1

    def __post_init__(self):
        self.key_lengths = frozenset(self.key_lengths)
        if not self.key_lengths or self.window < max(self.key_lengths):
            raise ValueError("window must be >= the largest key length")


@dataclass
class CryptoResult:
    hits: list = field(default_factory=list)
    encryption_functions: list = field(default_factory=list)
    candidate_count: int = 0
    iv_count: int = 0
    results: list = field(default_factory=list)
    skipped: list = field(default_factory=list)

    @property
    def confirmed(self) -> list:
        return [r for r in self.results if r.verdict == CONFIRMED]


@dataclass
class Analysis:
    image: BinaryImage
    functions: list
    index: object
    findings: list
    network: sg.NetworkAssessment
    crypto: CryptoResult
    timings: dict = field(default_factory=dict)

    def cfgs(self, jobs: int = 1) -> list:
        return build_cfgs(self.image, self.functions, jobs)


def crypto_findings(hits, confirmed, index=None) -> list:
    """One CRYPTO_CONST finding per primitive plus one per confirmed key."""
    by_primitive = {}
    for h in hits:
        by_primitive.setdefault(h.primitive, []).append(h)
    out = []
    for primitive, group in by_primitive.items():
        evidence = tuple(sg.Evidence(h.addr, f"{primitive}:{h.form}", h.xref_sites) for h in group)
        high = any(h.xref_sites or h.form == "import" for h in group)
        out.append(sg.Finding(cc.FINDING_IDS[primitive], "CRYPTO_CONST", evidence,
                              sg.HIGH if high else sg.LOW, severity="INFO",
                              note=f"{cc.SUITE_NAMES[primitive]} constant"))
    if confirmed:
        evidence = []
        for r in confirmed:
            c = r.candidate
            sites = ()
            if index is not None and c.ref_addr is not None:
                sites = tuple(index.sites_referencing(c.ref_addr, c.ref_addr + 1))
            evidence.append(sg.Evidence(c.source_addr, c.bytes.hex(), sites))
        evidence = tuple(sorted(set(evidence), key=lambda e: (e.addr, e.matched)))
        out.append(sg.Finding(EMBEDDED_KEY_ID, "CRYPTO_CONST", evidence, sg.HIGH, severity="CRITICAL",
                              note="static key recovered from image bytes decrypts supplied ciphertext"))
    return out


def harvest_and_validate(image, targets, config: AnalyzeConfig, result: CryptoResult):
    lengths = set(config.key_lengths) | set(IV_LENGTHS)
    candidates = scan_windows(image, targets, config.window, lengths)
    keys = [c for c in candidates if c.length in config.key_lengths]
    ivs = [c for c in candidates if c.length in IV_LENGTHS]
    result.candidate_count = len(keys)
    result.iv_count = len(ivs)
    if config.ciphertexts and keys:
        report = validate_candidates(keys, ivs, config.ciphertexts, config.suites,
                                     config.mode, config.threshold)
        result.results = list(report)
        result.skipped = [(i, str(e)) for i, e in report.skipped]


def analyze_image(image: BinaryImage, config: Optional[AnalyzeConfig] = None) -> Analysis:
    config = config or AnalyzeConfig()
    ruleset = config.ruleset if config.ruleset is not None else sg.bundled_ruleset()
    timings = {}
    t0 = time.perf_counter()
    functions = discover_functions(image, config.jobs)
    index = extract_xrefs(image, functions, config.jobs)
    timings["index_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    findings = sg.scan(image, index, ruleset, config.jobs)
    temp = sg.detect_temperature_check(image, index)
    if temp is not None:
        findings.append(temp)
    network = sg.assess_network_static(image, findings)
    findings.extend(sg.network_findings(network, image, index))
    timings["scan_s"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    crypto = CryptoResult()
    crypto.hits = cc.detect_crypto_constants(image, index)
    crypto.encryption_functions = locate_encryption_functions(crypto.hits, index, functions)
    if crypto.encryption_functions:
        targets = data_ref_targets(index, crypto.encryption_functions)
        harvest_and_validate(image, targets, config, crypto)
    findings.extend(crypto_findings(crypto.hits, crypto.confirmed, index))
    timings["crypto_s"] = time.perf_counter() - t0

    findings.sort(key=sg.finding_key)
    return Analysis(image, functions, index, findings, network, crypto, timings)


def analyze_path(path, config: Optional[AnalyzeConfig] = None) -> Analysis:
    return analyze_image(load_image(path), config)
