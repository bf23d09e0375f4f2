import hashlib
import json

import pytest

from corpus import CORPUS, PACKED
from proctriage.crypto import ciphers
from proctriage.errors import ForgeError
from proctriage.forge import MAX_DISTANCE, forge, load_spec, make_wordlist
from proctriage.loader import load_image
from proctriage.memdump import snapshot_from_bytes
from proctriage import signatures as sg
from proctriage.pipeline import analyze_image


@pytest.mark.parametrize("name", ["vm_detect", "crypto_tdes_pbkdf2", "dictionary"])
def test_same_spec_same_bytes(name):
    a, b = forge(CORPUS[name]), forge(json.loads(json.dumps(CORPUS[name])))
    assert a.image == b.image
    assert a.manifest == b.manifest
    assert a.payloads == b.payloads


def test_seed_changes_output():
    spec = dict(CORPUS["crypto_aes"])
    other = dict(spec, seed=spec["seed"] + 1)
    assert forge(spec).manifest["keys"][0]["key"] != forge(other).manifest["keys"][0]["key"]


def test_manifest_hash_matches_image():
    r = forge(CORPUS["network"])
    assert r.manifest["image_sha256"] == hashlib.sha256(r.image).hexdigest()


def test_payload_decrypts_with_manifest_key():
    r = forge(CORPUS["crypto_tdes_pbkdf2"])
    (key,) = r.manifest["keys"]
    (pl,) = r.manifest["payloads"]
    plain = ciphers.decrypt(pl["suite"], bytes.fromhex(key["key"]), bytes.fromhex(key["iv"]), r.payloads[pl["id"]])
    assert hashlib.sha256(plain).hexdigest() == pl["plaintext_sha256"]
    image = load_image(r.image)
    assert image.read(key["addr"], 24).hex() == key["key"]
    assert key["addr"] - key["ref_addr"] == key["distance"] == -96


def test_nested_fixture_payload_is_an_executable():
    r = forge(CORPUS["crypto_aes"])
    (pl,) = r.manifest["payloads"]
    assert pl["magic"] == "ELF"


@pytest.mark.parametrize("spec", [
    {"format": "MACHO"},
    {"format": "ELF", "functions": [{"name": "a"}, {"name": "a"}]},
    {"format": "ELF", "plants": [{"type": "call", "from": "nope", "to": "also"}]},
    {"format": "ELF", "functions": [{"name": "f"}], "plants": [{"type": "teleport"}]},
    {"format": "ELF", "functions": [{"name": "f"}],
     "plants": [{"type": "string", "value": "x", "section": ".missing"}]},
    {"format": "ELF", "functions": [{"name": "f"}],
     "plants": [{"type": "key_near_ref", "id": "k", "ref_function": "f"},
                {"type": "encrypted_payload", "id": "p", "key_ref": "other", "plaintext": {"text": "x"}}]},
    {"format": "ELF", "functions": [{"name": "f"}],
     "plants": [{"type": "key_near_ref", "id": "k", "ref_function": "f", "key_len": 16},
                {"type": "encrypted_payload", "id": "p", "key_ref": "k", "suite": "AES_256_CBC",
                 "plaintext": {"text": "x"}}]},
    {"format": "ELF", "functions": [{"name": "f"}],
     "plants": [{"type": "cpuid", "function": "f", "vendor": "ThirteenChars"}]},
])
def test_spec_conflict(spec):
    with pytest.raises(ForgeError) as err:
        forge(spec)
    assert err.value.code == "SPEC_CONFLICT"


@pytest.mark.parametrize("distance", [MAX_DISTANCE + 1, -(MAX_DISTANCE + 8)])
def test_unrealizable_distance(distance):
    spec = {"format": "ELF", "functions": [{"name": "f"}],
            "plants": [{"type": "key_near_ref", "ref_function": "f", "distance": distance}]}
    with pytest.raises(ForgeError) as err:
        forge(spec)
    assert err.value.code == "UNREALIZABLE"


def test_distance_at_limit_is_fine():
    spec = {"format": "PE", "functions": [{"name": "f"}],
            "sections": [{"name": ".text", "flags": "rx"}, {"name": ".data", "flags": "rw", "size": 3 * MAX_DISTANCE}],
            "plants": [{"type": "key_near_ref", "ref_function": "f", "distance": MAX_DISTANCE, "iv_len": 0}]}
    (key,) = forge(spec).manifest["keys"]
    assert key["distance"] == MAX_DISTANCE


def test_noise_in_executable_section_unrealizable():
    with pytest.raises(ForgeError) as err:
        forge({"format": "ELF", "sections": [{"name": ".text", "flags": "rx", "fill": "noise"}]})
    assert err.value.code == "UNREALIZABLE"


@pytest.mark.parametrize("fmt", ["ELF", "PE"])
def test_no_plants_no_findings(fmt):
    r = forge({"format": fmt, "seed": 77, "functions": [{"name": "main"}]})
    assert r.manifest["expected_findings"] == []
    assert analyze_image(load_image(r.image)).findings == []


def test_wordlist_avoids_signatures_except_included():
    words = make_wordlist(3000, ["parallels"])
    assert len(words) == 3000 and "parallels" in words
    rules = [s for s in sg.bundled_ruleset() if s.kind == "STRING_LITERAL"]
    hits = {w for w in words for s in rules if s.matches_text(w)}
    assert hits == {"parallels"}


def test_write_and_snapshot(tmp_path):
    r = forge(PACKED)
    paths = r.write(tmp_path / "packed.exe", snapshot=True)
    names = sorted(p.name for p in paths)
    assert names == sorted(["packed.exe", "packed.exe.manifest.json", "packed.exe.blocklist.bin",
                            "packed.exe.dump", "packed.exe.map.json"])
    regions = json.loads((tmp_path / "packed.exe.map.json").read_text())
    snap = snapshot_from_bytes((tmp_path / "packed.exe.dump").read_bytes(), regions)
    (pl,) = r.manifest["payloads"]
    assert snap.read(pl["addr"], 7) == b"ManyCam"
    assert load_image(tmp_path / "packed.exe").read(pl["addr"], 7) != b"ManyCam"


def test_load_spec_errors(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text('{"format": ')
    with pytest.raises(ForgeError) as err:
        load_spec(p)
    assert err.value.code == "BAD_SPEC"
