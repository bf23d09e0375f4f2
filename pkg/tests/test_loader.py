import struct

import pytest

from corpus import CORPUS
from proctriage.errors import FormatError
from proctriage.forge import forge
from proctriage.loader import BinaryImage, extract_strings, load_image

FLAG_NAMES = {"readable", "writable", "executable"}


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_sections_match_manifest(forged, name):
    result, image = forged[name]
    assert image.format == result.manifest["format"]
    assert image.arch == "X86_64"
    assert image.warnings == ()
    by_name = {s.name: s for s in image.sections}
    for sec in result.manifest["sections"]:
        got = by_name[sec["name"]]
        assert got.virtual_addr == sec["virtual_addr"]
        assert got.file_offset == sec["file_offset"]
        assert got.size >= sec["size"]
        assert set(sec["flags"]) <= FLAG_NAMES
        assert {f for f in FLAG_NAMES if getattr(got, f)} == set(sec["flags"])


@pytest.mark.parametrize("name", sorted(CORPUS))
def test_imports_and_strings_match_manifest(forged, name):
    result, image = forged[name]
    slots = {(i.symbol, i.slot_addr) for i in image.imports}
    for imp in result.manifest["imports"]:
        assert (imp["symbol"], imp["slot"]) in slots
    found = {(s.value, s.addr, s.encoding) for s in image.strings}
    for s in result.manifest["strings"]:
        assert (s["value"], s["addr"], s["encoding"]) in found


def test_entry_and_dependencies(forged):
    result, image = forged["av_devices"]
    assert image.entry == result.manifest["entry"]
    assert set(image.dependencies) == set(result.manifest["dependencies"])
    assert {"avicap32.dll", "winmm.dll", "mfplat.dll"} <= {d.lower() for d in image.dependencies}


def test_pe_library_names_on_imports(forged):
    _, image = forged["clipboard_process"]
    libs = {i.symbol: i.source_library.lower() for i in image.imports}
    assert libs["EmptyClipboard"] == "user32.dll"
    assert libs["TerminateProcess"] == "kernel32.dll"


def test_path_and_bytes_give_same_image(tmp_path, forged):
    result, image = forged["network"]
    p = tmp_path / "net.elf"
    p.write_bytes(result.image)
    from_path = load_image(p)
    assert from_path.path == str(p)
    assert from_path.sections == image.sections
    assert from_path.content_hash == image.content_hash


def test_va_offset_roundtrip(forged):
    _, image = forged["vm_detect"]
    for sec in image.sections:
        assert image.va_to_offset(sec.virtual_addr) == sec.file_offset
        assert image.offset_to_va(sec.file_offset) == sec.virtual_addr
    assert image.va_to_offset(0x10) is None
    assert image.read(0x10, 4) == b""


@pytest.mark.parametrize("blob", [b"", b"hello world", b"MZ" + b"\0" * 200, b"\x7fEL"])
def test_unrecognized_format(blob):
    with pytest.raises(FormatError) as err:
        load_image(blob)
    assert err.value.code == "UNRECOGNIZED_FORMAT"


@pytest.mark.parametrize("fmt", ["ELF", "PE"])
def test_truncated_file_warns_but_loads(fmt):
    result = forge({"format": fmt, "seed": 11, "functions": [{"name": "main"}],
                    "plants": [{"type": "string", "value": "VBoxService.exe", "ref_from": "main"}]})
    full = load_image(result.image)
    last = max(full.sections, key=lambda s: s.file_offset + s.size)
    cut = last.file_offset + last.size // 2 if last.size > 1 else last.file_offset
    try:
        image = load_image(result.image[:cut])
    except FormatError as exc:
        # headers themselves may sit past the cut on tiny images
        assert exc.code in ("TRUNCATED", "MALFORMED_HEADER")
        return
    assert image.warnings
    assert all(s.file_offset + s.size <= cut for s in image.sections)


def test_elf_header_truncated_is_error():
    result = forge({"format": "ELF", "seed": 1})
    with pytest.raises(FormatError):
        load_image(result.image[:40])


def test_string_extraction_ascii_and_utf16():
    result = forge({"format": "ELF", "seed": 2, "functions": [{"name": "main"}],
                    "plants": [{"type": "string", "value": "plain ascii here"},
                               {"type": "string", "value": "wide text", "encoding": "UTF16LE"},
                               {"type": "string", "value": "abc"}]})
    image = load_image(result.image)
    values = {(s.value, s.encoding) for s in image.strings}
    assert ("plain ascii here", "ASCII") in values
    assert ("wide text", "UTF16LE") in values
    # below the minimum length
    assert not any(s.value == "abc" for s in image.strings)
    assert any(s.value == "abc" for s in extract_strings(image, min_len=3))


def test_binary_image_is_frozen(forged):
    _, image = forged["empty"]
    assert isinstance(image, BinaryImage)
    with pytest.raises(AttributeError):
        image.format = "ELF"


def test_e_machine_other_than_x86_64_is_reported():
    result = forge({"format": "ELF", "seed": 1, "functions": [{"name": "main"}]})
    data = bytearray(result.image)
    struct.pack_into("<H", data, 18, 0xB7)  # aarch64
    try:
        image = load_image(bytes(data))
    except FormatError as exc:
        assert exc.code in ("UNSUPPORTED_ARCH", "UNRECOGNIZED_FORMAT")
    else:
        assert image.arch != "X86_64"
