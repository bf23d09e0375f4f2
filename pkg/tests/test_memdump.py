import json

import pytest

from corpus import CORPUS, PACKED
from proctriage import signatures as sg
from proctriage.crypto.constants import AES_SBOX
from proctriage.errors import SnapshotError
from proctriage.forge import forge
from proctriage.loader import load_image
from proctriage.memdump import load_snapshot, scan_snapshot, snapshot_from_bytes, snapshot_image
from proctriage.pipeline import analyze_image


def test_two_regions_over_8k_dump():
    dump = bytes(range(256)) * 32
    snap = snapshot_from_bytes(dump, [{"base": "0x10000", "size": 4096, "offset": 0, "flags": "r-x"},
                                      {"base": 0x7f0000, "size": 4096, "offset": 4096, "flags": "rw"}])
    assert [r.base for r in snap.regions] == [0x10000, 0x7F0000]
    assert snap.regions[0].flags == "rx"
    assert snap.read(0x10010, 4) == bytes([16, 17, 18, 19])
    assert snap.region_for(0x7F0FFF) is snap.regions[1]
    assert snap.region_for(0x7F1000) is None


def test_region_past_end_of_dump():
    with pytest.raises(SnapshotError) as err:
        snapshot_from_bytes(bytes(8192), [{"base": 0, "size": 4096, "offset": 8000}])
    assert err.value.code == "MAP_DUMP_MISMATCH"


def test_overlapping_regions():
    with pytest.raises(SnapshotError) as err:
        snapshot_from_bytes(bytes(8192), [{"base": 0x1000, "size": 0x1000, "offset": 0},
                                          {"base": 0x1800, "size": 0x100, "offset": 0}])
    assert err.value.code == "OVERLAPPING_REGIONS"


@pytest.mark.parametrize("entry", [{"base": 0}, {"base": "zz", "size": 1, "offset": 0},
                                   {"base": 0, "size": 1, "offset": 0, "flags": "rq"},
                                   {"base": -1, "size": 1, "offset": 0}])
def test_bad_map_entries(entry):
    with pytest.raises(SnapshotError) as err:
        snapshot_from_bytes(bytes(16), [entry])
    assert err.value.code == "BAD_MAP"


def test_empty_map_is_valid():
    snap = snapshot_from_bytes(b"anything", [])
    assert list(snap.regions) == []
    assert scan_snapshot(snap).findings == []


def test_all_zero_snapshot_has_no_findings():
    snap = snapshot_from_bytes(bytes(1 << 16), [{"base": 0x400000, "size": 1 << 16, "offset": 0}])
    result = scan_snapshot(snap)
    assert result.findings == [] and result.hits == [] and result.candidates == []


def test_load_snapshot_files(tmp_path):
    dump = tmp_path / "p.dump"
    dump.write_bytes(b"\0" * 64 + b"VMware Virtual Platform\0" + bytes(40))
    (tmp_path / "list.json").write_text(json.dumps([{"base": "0x1000", "size": 128, "offset": 0}]))
    (tmp_path / "dict.json").write_text(json.dumps({"source_meta": "pid 42",
                                                    "regions": [{"base": 4096, "size": 128, "offset": 0}]}))
    a = load_snapshot(dump, tmp_path / "list.json")
    b = load_snapshot(dump, tmp_path / "dict.json")
    assert a.regions == b.regions
    assert b.source_meta == "pid 42"
    (f,) = scan_snapshot(a).findings
    assert f.signature_id == "vm.name.vmware-virtual" and f.confidence == sg.LOW
    assert f.evidence[0].addr == 0x1000 + 64


def test_load_snapshot_errors(tmp_path):
    dump = tmp_path / "p.dump"
    dump.write_bytes(bytes(16))
    with pytest.raises(SnapshotError) as err:
        load_snapshot(tmp_path / "missing", tmp_path / "missing.json")
    assert err.value.code == "FILE_NOT_FOUND"
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(SnapshotError) as err:
        load_snapshot(dump, bad)
    assert err.value.code == "BAD_MAP"


def test_packed_strings_only_visible_in_memory():
    result = forge(PACKED)
    static = {f.signature_id for f in analyze_image(load_image(result.image)).findings}
    memory = scan_snapshot(snapshot_from_bytes(result.dump, result.regions))
    delta = {f.signature_id for f in memory.findings} - static
    planted = ["ManyCam", "YouCam", "chrome.exe"]
    expect = {s.id for s in sg.bundled_ruleset()
              if s.kind == "STRING_LITERAL" and any(s.matches_text(t) for t in planted)}
    assert expect
    assert delta == expect
    assert all(f.confidence == sg.LOW for f in memory.findings)


def test_module_header_imports_stay_high():
    result = forge(CORPUS["av_devices"])
    scan = scan_snapshot(snapshot_from_bytes(result.dump, result.regions))
    by_id = {f.signature_id: f for f in scan.findings}
    kinds = {s.id: s.kind for s in sg.bundled_ruleset()}
    imports = [f for sid, f in by_id.items() if kinds.get(sid) == "IMPORT_SYMBOL"]
    assert imports
    assert all(f.confidence == sg.HIGH for f in imports)
    symbols = {e.matched for f in imports for e in f.evidence}
    assert {"capCreateCaptureWindowA", "waveInOpen", "MFEnumDeviceSources"} <= symbols
    others = [f for sid, f in by_id.items() if kinds.get(sid) != "IMPORT_SYMBOL"]
    assert all(f.confidence == sg.LOW and not f.xref_sites for f in others)


def test_crypto_constant_and_key_window_in_memory():
    key = bytes(range(1, 33))
    blob = bytes(512) + key + bytes(16) + AES_SBOX + bytes(512)
    snap = snapshot_from_bytes(blob, [{"base": 0x5000, "size": len(blob), "offset": 0}])
    scan = scan_snapshot(snap, window=64, key_lengths={32})
    assert [h.primitive for h in scan.hits] == ["AES_SBOX"]
    assert any(c.bytes == key for c in scan.candidates)


def test_snapshot_image_sections():
    snap = snapshot_from_bytes(bytes(32), [{"base": 0x1000, "size": 16, "offset": 0, "flags": "rx"},
                                           {"base": 0x3000, "size": 16, "offset": 16, "flags": "rw"}])
    image = snapshot_image(snap)
    assert image.format == "SNAPSHOT"
    assert [s.name for s in image.sections] == ["region_1000", "region_3000"]
    assert image.sections[0].executable and image.sections[1].writable


def test_engine_reuse_gives_identical_results():
    result = forge(PACKED)
    snap = snapshot_from_bytes(result.dump, result.regions)
    rules = sg.bundled_ruleset()
    first = scan_snapshot(snap, rules)
    again = scan_snapshot(snap, rules, jobs=4)
    assert first.findings == again.findings
    assert first.candidates == again.candidates
