"""Rewrite tests/data/golden/<fixture>.json from the current analyzer.

Run only after an intentional output change, then review the diff.
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent
sys.path.insert(0, str(ROOT / "tests"))

from corpus import CORPUS, ciphertexts_for  # noqa: E402

from proctriage import report as rp  # noqa: E402
from proctriage.forge import forge  # noqa: E402
from proctriage.loader import load_image  # noqa: E402
from proctriage.pipeline import AnalyzeConfig, analyze_image  # noqa: E402

GOLDEN = ROOT / "tests" / "data" / "golden"


def full_report(name: str) -> dict:
    result = forge(CORPUS[name])
    analysis = analyze_image(load_image(result.image), AnalyzeConfig(ciphertexts=ciphertexts_for(name, result)))
    return rp.build_report(analysis)


def golden_report(name: str) -> dict:
    return rp.canonical_form(full_report(name))


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name in sorted(CORPUS):
        path = GOLDEN / f"{name}.json"
        path.write_text(json.dumps(golden_report(name), indent=1, sort_keys=True) + "\n")
        print(path)


if __name__ == "__main__":
    main()
