"""Command line entry point.

Exit codes: 0 completed, 1 completed with a finding at or above --fail-on,
2 input or parse error, 3 bad arguments. Errors go to stderr prefixed with
``error:<code>:``; stdout carries only the report.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from . import report as rp
from . import signatures as sg
from .errors import TriageError

log = logging.getLogger("proctriage")

EXIT_OK, EXIT_FINDINGS, EXIT_INPUT, EXIT_ARGS = 0, 1, 2, 3
FAIL_ON = ("OFF", "INFO", "WARN", "CRITICAL")

_GRADE_FINDINGS = {
    "INSECURE_CERT_VALIDATION": ("net.probe.insecure-cert-validation", "WARN",
                                 "client completed a handshake with an unverifiable certificate"),
    "DOWNGRADE_VULNERABLE": ("net.probe.downgrade", "WARN",
                             "client retried in plaintext after the TLS port was blocked"),
    "PLAINTEXT_ONLY": ("net.probe.plaintext-only", "CRITICAL", "client never attempted TLS"),
}


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(f"{self.prog}: {message}")


def _key_lengths(text: str) -> frozenset:
    try:
        values = frozenset(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad key length list {text!r}") from None
    if not values or values - {16, 24, 32}:
        raise argparse.ArgumentTypeError("key lengths must be drawn from 16,24,32")
    return values


def _positive(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v <= 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="proctriage", description="Triage proctoring-style executables.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log to stderr (repeat for debug)")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp, findings=True):
        sp.add_argument("--format", type=str.upper, choices=("JSON", "TEXT"), default="JSON")
        sp.add_argument("-o", "--output", help="write the report here instead of stdout")
        if findings:
            sp.add_argument("--ruleset", action="append", default=[], metavar="PATH",
                            help="extra ruleset JSON, merged with the bundled ones (repeatable)")
            sp.add_argument("--no-bundled", action="store_true", help="use only --ruleset files")
        sp.add_argument("--fail-on", type=str.upper, choices=FAIL_ON, default="OFF",
                        help="exit 1 when a HIGH-confidence finding reaches this severity")

    a = sub.add_parser("analyze", help="static analysis of an ELF or PE executable")
    a.add_argument("binary")
    a.add_argument("--window", type=_positive, default=1024, help="key search window in bytes")
    a.add_argument("--key-lengths", type=_key_lengths, default=frozenset({16, 24, 32}))
    a.add_argument("--ciphertext", action="append", default=[], metavar="FILE",
                   help="encrypted file to validate key candidates against (repeatable)")
    a.add_argument("--suite", action="append", choices=("AES_256_CBC", "AES_128_CBC", "TDES_CBC"),
                   help="restrict validation to these cipher suites")
    a.add_argument("--mode", type=str.upper, choices=("CBC", "ECB"), default="CBC")
    a.add_argument("--deep", action="store_true", help="write CFG DOT files for relevant functions")
    a.add_argument("--dot-dir", help="directory for --deep output (default: <binary>.cfg)")
    a.add_argument("--jobs", type=_positive, default=1)
    common(a)

    m = sub.add_parser("memscan", help="scan a process memory dump with its region map")
    m.add_argument("dump")
    m.add_argument("map")
    m.add_argument("--window", type=_positive, default=1024)
    m.add_argument("--key-lengths", type=_key_lengths, default=frozenset({16, 24, 32}))
    m.add_argument("--jobs", type=_positive, default=1)
    common(m)

    t = sub.add_parser("probe-tls", help="run TLS scenarios against a client")
    t.add_argument("scenario")
    common(t, findings=False)

    f = sub.add_parser("forge", help="emit a fixture executable and manifest from a spec")
    f.add_argument("spec")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--snapshot", action="store_true", help="also write the decrypted memory twin")
    return p


def _ruleset(args) -> sg.Ruleset:
    rules = sg.Ruleset() if args.no_bundled else sg.bundled_ruleset()
    for path in args.ruleset:
        rules = rules.merged(sg.load_ruleset(path))
    return rules


def _emit(args, report: dict) -> int:
    data = rp.render(report, args.format)
    if args.output:
        Path(args.output).write_bytes(data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.flush()
    if args.fail_on == "OFF":
        return EXIT_OK
    floor = rp.SEVERITY_ORDER[args.fail_on]
    for finding in report["findings"]:
        if (finding["confidence"] == sg.HIGH and not finding.get("suppressed_reason")
                and rp.SEVERITY_ORDER[finding["severity"]] >= floor):
            return EXIT_FINDINGS
    return EXIT_OK


def _relevant_functions(analysis) -> list:
    """Functions named by finding evidence, plus encryption functions."""
    index = analysis.index
    entries = {f.entry for f in analysis.crypto.encryption_functions}
    for finding in analysis.findings:
        for ev in finding.evidence:
            for site in ev.xref_sites:
                owner = index.function_of.get(site)
                if owner is not None:
                    entries.add(owner)
    return [f for f in analysis.functions if f.entry in entries]


def cmd_analyze(args) -> int:
    from .analysis import build_cfg
    from .pipeline import AnalyzeConfig, analyze_path
    if args.window < max(args.key_lengths):
        raise _ArgError("--window must be at least the largest key length")
    ciphertexts = []
    for path in args.ciphertext:
        try:
            ciphertexts.append(Path(path).read_bytes())
        except OSError as exc:
            raise TriageError(f"{path}: {exc.strerror}", "FILE_NOT_FOUND") from None
    if not Path(args.binary).is_file():
        raise TriageError(f"{args.binary}: no such file", "FILE_NOT_FOUND")
    config = AnalyzeConfig(window=args.window, key_lengths=args.key_lengths, ruleset=_ruleset(args),
                           ciphertexts=tuple(ciphertexts), mode=args.mode, jobs=args.jobs)
    if args.suite:
        config.suites = tuple(dict.fromkeys(args.suite))
    analysis = analyze_path(args.binary, config)
    for w in analysis.image.warnings:
        log.warning("%s", w)
    report = rp.build_report(analysis)
    if args.deep:
        out = Path(args.dot_dir or f"{args.binary}.cfg")
        out.mkdir(parents=True, exist_ok=True)
        entries = {f.entry for f in analysis.functions}
        for func in _relevant_functions(analysis):
            cfg = build_cfg(analysis.image, func, entries)
            (out / f"func_{func.entry:x}.dot").write_text(rp.export_cfg_dot(cfg))
        log.info("CFG exports written to %s", out)
    return _emit(args, report)


def cmd_memscan(args) -> int:
    from .memdump import load_snapshot, scan_snapshot
    snap = load_snapshot(args.dump, args.map)
    result = scan_snapshot(snap, _ruleset(args), args.jobs, args.window, args.key_lengths)
    from .crypto.constants import cipher_suites
    report = rp.build_report(
        input_meta={"path": args.dump, "content_hash": result.image.content_hash.hex(),
                    "format": "SNAPSHOT", "arch": result.image.arch,
                    "regions": len(snap.regions)},
        extra_findings=result.findings,
    )
    report["crypto"]["suites"] = cipher_suites(result.hits)
    report["crypto"]["hits"] = [{"primitive": h.primitive, "addr": f"{h.addr:#x}", "form": h.form,
                                 "referencing_functions": []} for h in result.hits]
    report["crypto"]["candidates"] = len(result.candidates)
    return _emit(args, report)


def cmd_probe(args) -> int:
    from .netprobe.harness import assess_client, load_scenario_file, run_scenario
    scenarios, client = load_scenario_file(args.scenario)
    verdicts = []
    for sc in scenarios:
        log.info("running %s", sc.kind)
        verdicts.append(run_scenario(sc, client))
    grade = assess_client(verdicts)
    extra = []
    if grade in _GRADE_FINDINGS:
        sid, severity, note = _GRADE_FINDINGS[grade]
        extra.append(sg.Finding(sid, "NETWORK_TLS", (sg.Evidence(0, grade, ()),), sg.HIGH,
                                severity=severity, note=note))
    report = rp.build_report(verdicts=verdicts, grade=grade, input_meta={"path": args.scenario},
                             extra_findings=extra)
    return _emit(args, report)


def cmd_forge(args) -> int:
    from .forge import forge, load_spec
    if not Path(args.spec).is_file():
        raise TriageError(f"{args.spec}: no such file", "FILE_NOT_FOUND")
    result = forge(load_spec(args.spec))
    for path in result.write(args.output, snapshot=args.snapshot):
        print(path)
    return EXIT_OK


COMMANDS = {"analyze": cmd_analyze, "memscan": cmd_memscan, "probe-tls": cmd_probe, "forge": cmd_forge}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _ArgError as exc:
        parser.print_usage(sys.stderr)
        print(f"error:BAD_ARGUMENTS:{exc}", file=sys.stderr)
        return EXIT_ARGS
    if not args.command:
        parser.print_usage(sys.stderr)
        print("error:BAD_ARGUMENTS:no subcommand given", file=sys.stderr)
        return EXIT_ARGS
    logging.basicConfig(level=(logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)],
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except _ArgError as exc:
        print(f"error:BAD_ARGUMENTS:{exc}", file=sys.stderr)
        return EXIT_ARGS
    except TriageError as exc:
        print(f"error:{exc.code}:{Exception.__str__(exc)}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error:IO_ERROR:{exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
