"""Forge specs shared by the unit and acceptance tests."""

ELF_ELF_PAYLOAD = {"format": "ELF", "seed": 101, "functions": [{"name": "start"}]}


def _sections(*extra, data_size=None, fill="zero"):
    secs = [{"name": ".text", "flags": "rx"}, {"name": ".rodata", "flags": "r"},
            {"name": ".data", "flags": "rw", "size": data_size, "fill": fill}]
    return secs + list(extra)


CORPUS = {
    "vm_detect": {
        "format": "ELF", "seed": 1,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "check_vm"}, {"name": "check_temp"}],
        "plants": [
            {"type": "call", "from": "main", "to": "check_vm"},
            {"type": "call", "from": "main", "to": "check_temp"},
            {"type": "cpuid", "function": "check_vm", "vendor": "VMwareVMware"},
            {"type": "cpuid", "function": "check_vm", "vendor": "KVMKVMKVM"},
            {"type": "string", "value": "VirtualBox Graphics Adapter", "ref_from": "check_vm"},
            {"type": "string", "value": "QEMU HARDDISK", "ref_from": "check_vm", "encoding": "UTF16LE"},
            {"type": "string", "value": "SELECT * FROM MSAcpi_ThermalZoneTemperature", "ref_from": "check_temp"},
            {"type": "compare", "function": "check_temp", "imm": 3732},
            {"type": "branch", "at": "check_temp"},
        ],
    },
    "av_devices": {
        "format": "PE", "seed": 2,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "open_camera"}, {"name": "scan_drivers"}],
        "plants": [
            {"type": "import", "symbol": "capCreateCaptureWindowA", "library": "avicap32.dll",
             "call_from": "open_camera"},
            {"type": "import", "symbol": "waveInOpen", "library": "winmm.dll", "call_from": "open_camera"},
            {"type": "import", "symbol": "MFEnumDeviceSources", "library": "mfplat.dll"},
            {"type": "string", "value": "ManyCam Virtual Webcam", "ref_from": "scan_drivers"},
            {"type": "string", "value": "OBS Virtual Camera", "ref_from": "scan_drivers", "encoding": "UTF16LE"},
            {"type": "string", "value": "youcam", "ref_from": "scan_drivers"},
            {"type": "call", "from": "main", "to": "open_camera"},
        ],
    },
    "clipboard_process": {
        "format": "PE", "seed": 3,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "watchdog"}],
        "plants": [
            {"type": "import", "symbol": "EmptyClipboard", "library": "user32.dll", "call_from": "main"},
            {"type": "import", "symbol": "CreateToolhelp32Snapshot", "library": "kernel32.dll",
             "call_from": "watchdog"},
            {"type": "import", "symbol": "TerminateProcess", "library": "kernel32.dll", "call_from": "watchdog"},
            {"type": "string", "value": "chrome.exe", "ref_from": "watchdog", "encoding": "UTF16LE"},
            {"type": "string", "value": "FIREFOX.EXE", "ref_from": "watchdog"},
            {"type": "string", "value": "explorer.exe", "ref_from": "watchdog"},
            {"type": "branch", "at": "watchdog"},
        ],
    },
    "network": {
        "format": "ELF", "seed": 4,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "upload"}, {"name": "lockdown"}],
        "plants": [
            {"type": "import", "symbol": "SSL_connect", "library": "libssl.so.3", "call_from": "upload"},
            {"type": "pem", "cn": "exam-api.example.test", "ref_from": "upload"},
            {"type": "string", "value": "http://exam-upload.example.test/submit", "ref_from": "upload"},
            {"type": "string", "value": "http://127.0.0.1:8080/health", "ref_from": "main"},
            {"type": "string", "value": "route add 0.0.0.0 mask 0.0.0.0 10.255.255.254", "ref_from": "lockdown"},
            {"type": "import", "symbol": "CreateIpForwardEntry", "library": "libiphlp.so", "call_from": "lockdown"},
        ],
    },
    "crypto_aes": {
        "format": "ELF", "seed": 5,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "decrypt_libs"}],
        "plants": [
            {"type": "call", "from": "main", "to": "decrypt_libs"},
            {"type": "constant", "primitive": "AES_SBOX", "ref_from": "decrypt_libs"},
            {"type": "key_near_ref", "id": "k", "ref_function": "decrypt_libs", "distance": 64},
            {"type": "encrypted_payload", "id": "lib", "key_ref": "k", "suite": "AES_256_CBC",
             "plaintext": {"fixture": ELF_ELF_PAYLOAD}},
        ],
    },
    "crypto_tdes_pbkdf2": {
        "format": "PE", "seed": 6,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "derive"}, {"name": "des_encrypt"}, {"name": "sha1_init"}],
        "plants": [
            {"type": "import", "symbol": "BCryptDeriveKeyPBKDF2", "library": "bcrypt.dll", "call_from": "derive"},
            {"type": "constant", "primitive": "DES_TABLES", "ref_from": "des_encrypt"},
            {"type": "constant", "primitive": "SHA1_IV", "form": "imm", "function": "sha1_init"},
            {"type": "key_near_ref", "id": "k3", "ref_function": "des_encrypt", "key_len": 24, "iv_len": 8,
             "distance": -96},
            {"type": "encrypted_payload", "id": "answers", "key_ref": "k3", "suite": "TDES_CBC",
             "plaintext": {"text": "Question 1: The answer key for the torts midterm is withheld.\n" * 12}},
        ],
    },
    "allowlist_hyperv": {
        "format": "ELF", "seed": 7,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "probe"}],
        "plants": [
            {"type": "cpuid", "function": "probe", "vendor": "Microsoft Hv"},
            {"type": "string", "value": "explorer.exe", "ref_from": "probe"},
            {"type": "string", "value": "msedge.exe", "ref_from": "probe", "ref_form": "abs64"},
            {"type": "import", "symbol": "GetClipboardData", "library": "libclip.so", "call_from": "main"},
            # present but never referenced from code: stays LOW
            {"type": "string", "value": "Logitech Capture"},
        ],
    },
    "dictionary": {
        "format": "ELF", "seed": 8,
        "sections": _sections(),
        "functions": [{"name": "main"}, {"name": "spellcheck"}],
        "plants": [
            {"type": "wordlist", "count": 20000, "include": ["parallels"], "ref_from": "spellcheck"},
        ],
    },
    "empty": {"format": "PE", "seed": 9, "plants": []},
}

# fixtures whose analysis needs their forged ciphertexts
NEEDS_CIPHERTEXT = {"crypto_aes", "crypto_tdes_pbkdf2"}

PACKED = {
    "format": "PE", "seed": 10,
    "sections": _sections(),
    "functions": [{"name": "main"}, {"name": "unpack"}],
    "plants": [
        {"type": "constant", "primitive": "AES_SBOX", "ref_from": "unpack"},
        {"type": "key_near_ref", "id": "k", "ref_function": "unpack", "distance": 48},
        {"type": "encrypted_payload", "id": "blocklist", "key_ref": "k", "section": ".rodata",
         "plaintext": {"text": "ManyCam\nYouCam\nchrome.exe\n" * 8}},
    ],
}


def big_spec(size: int = 1 << 20) -> dict:
    """A ~1 MiB fixture: key near an encryption function's reference in noisy data."""
    return {
        "format": "ELF", "seed": 42,
        "sections": [{"name": ".text", "flags": "rx"}, {"name": ".rodata", "flags": "r"},
                     {"name": ".data", "flags": "rw", "size": size - 0x4000, "fill": "noise"}],
        "functions": [{"name": "main"}, {"name": "load_library"}, {"name": "aes_cbc_decrypt"}],
        "plants": [
            {"type": "call", "from": "main", "to": "load_library"},
            {"type": "call", "from": "load_library", "to": "aes_cbc_decrypt"},
            {"type": "constant", "primitive": "AES_SBOX", "ref_from": "aes_cbc_decrypt"},
            {"type": "constant", "primitive": "AES_TTABLE", "ref_from": "aes_cbc_decrypt"},
            {"type": "key_near_ref", "id": "k", "ref_function": "aes_cbc_decrypt", "distance": 200,
             "ref_offset": size // 2},
            {"type": "encrypted_payload", "id": "lib", "key_ref": "k", "section": ".rodata",
             "plaintext": {"fixture": ELF_ELF_PAYLOAD}},
        ],
    }


def ciphertexts_for(name: str, result) -> tuple:
    """Forged ciphertexts the analysis of ``name`` should validate against."""
    if name not in NEEDS_CIPHERTEXT:
        return ()
    return tuple(result.payloads[k] for k in sorted(result.payloads))
