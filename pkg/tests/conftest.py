import sys
from pathlib import Path

import pytest

TESTS = Path(__file__).resolve().parent
sys.path.insert(0, str(TESTS))
sys.path.insert(0, str(TESTS.parent / "tools"))

from corpus import CORPUS  # noqa: E402

from proctriage.forge import forge  # noqa: E402
from proctriage.loader import load_image  # noqa: E402

# criterion number -> (description, passed, detail); filled by test_acceptance
ACCEPTANCE = {}


@pytest.fixture(scope="session")
def forged():
    """Every corpus fixture forged once: name -> (ForgeResult, BinaryImage)."""
    out = {}
    for name, spec in CORPUS.items():
        result = forge(spec)
        out[name] = (result, load_image(result.image))
    return out


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        desc, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}: {desc} ({detail})")
