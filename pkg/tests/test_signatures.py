import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from proctriage import signatures as sg
from proctriage.analysis import discover_functions, extract_xrefs
from proctriage.errors import RulesetError
from proctriage.forge import forge
from proctriage.loader import load_image
from proctriage.memdump import snapshot_from_bytes, snapshot_image


def _rules(*sigs):
    return json.dumps({"version": 1, "signatures": list(sigs)}, indent=1)


def _sig(**kw):
    base = {"id": "t.x", "category": "VM_DETECTION", "kind": "STRING_LITERAL", "pattern": "abc"}
    base.update(kw)
    return base


def _raw_image(blob: bytes, base: int = 0x10000):
    snap = snapshot_from_bytes(blob, [{"base": base, "size": len(blob), "offset": 0, "flags": "r"}])
    return snapshot_image(snap)


def _analyzed(spec):
    image = load_image(forge(spec).image)
    return image, extract_xrefs(image, discover_functions(image))


def test_bundled_ruleset_parses():
    rules = sg.bundled_ruleset()
    assert len(rules) > 20
    assert len({s.id for s in rules}) == len(rules)
    assert {s.category for s in rules} <= set(sg.CATEGORIES)
    assert {s.kind for s in rules} <= set(sg.KINDS)


def test_unknown_field_reports_line():
    text = _rules(_sig(id="a"), _sig(id="b", severity="HIGH"))
    with pytest.raises(RulesetError) as err:
        sg.parse_ruleset(text, "r.json")
    assert err.value.code == "UNKNOWN_FIELD"
    line = next(i for i, l in enumerate(text.splitlines(), 1) if '"b"' in l)
    assert f"r.json:{line}" in str(err.value)


def test_unknown_top_level_field():
    with pytest.raises(RulesetError) as err:
        sg.parse_ruleset(json.dumps({"version": 1, "signatures": [], "extra": 1}))
    assert err.value.code == "UNKNOWN_FIELD"


def test_duplicate_id():
    with pytest.raises(RulesetError) as err:
        sg.parse_ruleset(_rules(_sig(), _sig()))
    assert err.value.code == "DUPLICATE_ID"


def test_duplicate_across_merge():
    a = sg.parse_ruleset(_rules(_sig()))
    with pytest.raises(RulesetError) as err:
        a.merged(a)
    assert err.value.code == "DUPLICATE_ID"


@pytest.mark.parametrize("sig", [
    _sig(pattern=""),
    _sig(kind="BYTE_PATTERN", pattern="0F A2"),
    _sig(kind="BYTE_PATTERN", pattern="0fa2"),
    _sig(kind="BYTE_PATTERN", pattern="0FA"),
    _sig(pattern="café"),
])
def test_bad_pattern(sig):
    with pytest.raises(RulesetError) as err:
        sg.parse_ruleset(_rules(sig))
    assert err.value.code == "BAD_PATTERN"


@pytest.mark.parametrize("text", ["{", "[]", json.dumps({"version": 2, "signatures": []}),
                                  _rules(_sig(category="NOPE")), _rules(_sig(kind="REGEX")),
                                  _rules({"id": "x", "category": "VM_DETECTION"})])
def test_bad_ruleset(text):
    with pytest.raises(RulesetError) as err:
        sg.parse_ruleset(text)
    assert err.value.code == "BAD_RULESET"


def test_missing_ruleset_file(tmp_path):
    with pytest.raises(RulesetError) as err:
        sg.load_ruleset(tmp_path / "nope.json")
    assert err.value.code == "FILE_NOT_FOUND"


def test_case_sensitivity_defaults():
    rules = sg.parse_ruleset(_rules(_sig(id="s"), _sig(id="i", kind="IMPORT_SYMBOL", pattern="Foo")))
    by_id = {s.id: s for s in rules}
    assert not by_id["s"].case_sensitive
    assert by_id["i"].case_sensitive


def _naive_offsets(blob: bytes, needle: bytes, fold: bool):
    hay = blob.lower() if fold else blob
    nd = needle.lower() if fold else needle
    return [i for i in range(len(hay) - len(nd) + 1) if hay[i:i + len(nd)] == nd]


@settings(max_examples=150, deadline=None)
@given(blob=st.binary(min_size=1, max_size=300).map(lambda b: bytes(c % 5 for c in b))
       .map(lambda b: b.translate(bytes.maketrans(b"\0\1\2\3\4", b"aAbB\0"))),
       pattern=st.text(alphabet="abAB", min_size=1, max_size=4),
       case_sensitive=st.booleans())
def test_string_scan_matches_naive_oracle(blob, pattern, case_sensitive):
    rules = sg.parse_ruleset(_rules(_sig(pattern=pattern, case_sensitive=case_sensitive)))
    image = _raw_image(blob)
    findings = sg.scan(image, None, rules)
    fold = not case_sensitive
    expect = set()
    for enc in ("ascii", "utf-16-le"):
        expect.update(0x10000 + o for o in _naive_offsets(blob, pattern.encode(enc), fold))
    if not expect:
        assert findings == []
        return
    (f,) = findings
    assert {e.addr for e in f.evidence} == expect
    assert f.confidence == sg.LOW


@pytest.mark.parametrize("symbol,hit", [("GetClipboardData", True), ("GetClipboardDataA", True),
                                        ("GetClipboardDataW", True), ("GetClipboardDataEx", False),
                                        ("getclipboarddata", False)])
def test_import_suffixes(symbol, hit):
    sig = sg.Signature("t", "CLIPBOARD", "IMPORT_SYMBOL", "GetClipboardData", case_sensitive=True)
    assert sig.matches_text(symbol) is hit


def test_cpuid_immediates_are_detected():
    image, index = _analyzed({"format": "ELF", "seed": 4, "functions": [{"name": "f"}],
                              "plants": [{"type": "cpuid", "function": "f", "vendor": "VBoxVBoxVBox"}]})
    ids = {f.signature_id: f for f in sg.scan(image, index, sg.bundled_ruleset())}
    assert ids["vm.cpuid.vbox"].confidence == sg.HIGH
    assert "vm.cpuid.vmware" not in ids


def test_unreferenced_string_is_low_referenced_is_high():
    image, index = _analyzed({"format": "ELF", "seed": 5, "functions": [{"name": "f"}],
                              "plants": [{"type": "string", "value": "VirtualBox Guest Additions", "ref_from": "f"},
                                         {"type": "string", "value": "ManyCam"}]})
    found = {f.category: f for f in sg.scan(image, index, sg.bundled_ruleset())}
    assert found["VM_DETECTION"].confidence == sg.HIGH
    assert found["VIRTUAL_DEVICE_BLOCK"].confidence == sg.LOW
    # without an index nothing can be attributed to code
    assert all(f.confidence == sg.LOW for f in sg.scan(image, None, sg.bundled_ruleset())
               if f.category != "DEVICE_API")


def test_byte_pattern_in_code_is_high():
    rules = sg.parse_ruleset(_rules(_sig(kind="BYTE_PATTERN", pattern="0F0B0F0B")))
    image, index = _analyzed({"format": "ELF", "seed": 6, "functions": [{"name": "f"}],
                              "plants": [{"type": "raw", "function": "f", "hex": "900f0b0f0b"}]})
    (f,) = sg.scan(image, index, rules)
    assert f.confidence == sg.HIGH


@pytest.mark.parametrize("imm,hit", [(3732, True), (100, True), (3731, True), (3733, False)])
def test_temperature_compare(imm, hit):
    image, index = _analyzed({"format": "ELF", "seed": 7, "functions": [{"name": "t"}],
                              "plants": [{"type": "string", "value": "CurrentTemperature", "ref_from": "t"},
                                         {"type": "compare", "function": "t", "imm": imm}]})
    f = sg.detect_temperature_check(image, index)
    assert (f is not None) is hit
    if hit:
        assert f.category == "TEMPERATURE_CHECK" and f.confidence == sg.HIGH


def test_temperature_needs_same_function():
    image, index = _analyzed({"format": "ELF", "seed": 8, "functions": [{"name": "a"}, {"name": "b"}],
                              "plants": [{"type": "string", "value": "thermal zone", "ref_from": "a"},
                                         {"type": "compare", "function": "b", "imm": 3732}]})
    assert sg.detect_temperature_check(image, index) is None


@pytest.mark.parametrize("urls,transport", [
    ([], "NONE"),
    (["http://127.0.0.1:8080/x", "http://localhost/y"], "NONE"),
    (["http://upload.example.test/a"], "PLAINTEXT"),
    (["https://api.example.test/a"], "TLS_ONLY"),
    (["https://api.example.test/a", "http://cdn.example.test/b"], "MIXED"),
])
def test_network_posture(urls, transport):
    plants = [{"type": "string", "value": u, "ref_from": "f"} for u in urls]
    image, index = _analyzed({"format": "ELF", "seed": 9, "functions": [{"name": "f"}], "plants": plants})
    a = sg.assess_network_static(image)
    assert a.transport == transport
    assert a.pinned_store is False
    plain = sg.network_findings(a, image, index)
    assert bool(plain) == (transport in ("PLAINTEXT", "MIXED"))


def test_pem_marks_pinned_store():
    image, _ = _analyzed({"format": "ELF", "seed": 10, "functions": [{"name": "f"}],
                          "plants": [{"type": "pem", "cn": "x.example.test", "ref_from": "f"}]})
    assert sg.assess_network_static(image).pinned_store


def test_scan_is_independent_of_jobs(forged):
    _, image = forged["av_devices"]
    index = extract_xrefs(image, discover_functions(image))
    rules = sg.bundled_ruleset()
    assert sg.scan(image, index, rules, jobs=1) == sg.scan(image, index, rules, jobs=8)
