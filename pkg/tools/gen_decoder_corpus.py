"""Regenerate tests/data/decoder_corpus.json using capstone as the length oracle.

Run offline: ``python tools/gen_decoder_corpus.py [count] [seed]``.
"""

import json
import random
import sys
from pathlib import Path

import capstone

PREFIXES = [0x66, 0x67, 0xF2, 0xF3, 0xF0, 0x2E, 0x3E, 0x26, 0x64, 0x65, 0x36]


def random_encoding(rng: random.Random) -> bytes:
    out = bytearray()
    form = rng.choices(["one", "0f", "0f38", "0f3a", "vex2", "vex3", "evex"],
                       weights=[50, 25, 6, 6, 5, 5, 3])[0]
    if form in ("one", "0f", "0f38", "0f3a"):
        for _ in range(rng.choice([0, 0, 0, 1, 1, 2])):
            out.append(rng.choice(PREFIXES))
        if rng.random() < 0.4:
            out.append(rng.randrange(0x40, 0x50))
    if form == "one":
        op = rng.randrange(256)
        while op in PREFIXES or 0x40 <= op <= 0x4F or op in (0x0F, 0xC4, 0xC5, 0x62, 0x8F):
            op = rng.randrange(256)
        out.append(op)
    elif form == "0f":
        out += bytes([0x0F, rng.choice([b for b in range(256) if b not in (0x38, 0x3A)])])
    elif form == "0f38":
        out += bytes([0x0F, 0x38, rng.randrange(256)])
    elif form == "0f3a":
        out += bytes([0x0F, 0x3A, rng.randrange(256)])
    elif form == "vex2":
        out += bytes([0xC5, rng.randrange(256), rng.randrange(256)])
    elif form == "vex3":
        out += bytes([0xC4, (rng.randrange(8) << 5) | rng.choice([1, 2, 3]),
                      rng.randrange(256), rng.randrange(256)])
    else:
        out += bytes([0x62, (rng.randrange(16) << 4) | rng.choice([1, 2, 3]),
                      rng.randrange(256) | 0x04, rng.randrange(256), rng.randrange(256)])
    out += bytes(rng.randrange(256) for _ in range(14))
    return bytes(out[:15])


# The oracle is inconsistent about 0x66 on near branches and RET imm16
# (rel16 for some opcodes and prefix orders, rel32 for others), so those
# encodings are left out of the corpus.
_QUIRK_OPCODES = {0xE8, 0xE9, 0xC2, 0xCA}


def oracle_quirk(enc: bytes) -> bool:
    i = 0
    saw_66 = False
    while i < len(enc) and (enc[i] in PREFIXES or 0x40 <= enc[i] <= 0x4F):
        saw_66 |= enc[i] == 0x66
        i += 1
    if not saw_66 or i >= len(enc) - 1:
        return False
    return enc[i] in _QUIRK_OPCODES or (enc[i] == 0x0F and 0x80 <= enc[i + 1] <= 0x8F)


def main(count=3000, seed=1234):
    rng = random.Random(seed)
    md = capstone.Cs(capstone.CS_ARCH_X86, capstone.CS_MODE_64)
    corpus = []
    seen = set()
    while len(corpus) < count:
        enc = random_encoding(rng)
        if oracle_quirk(enc):
            continue
        insns = list(md.disasm(enc, 0x1000, count=1))
        if not insns:
            continue
        ins = insns[0]
        raw = enc[:ins.size]
        if raw in seen:
            continue
        seen.add(raw)
        corpus.append({"bytes": enc.hex(), "length": ins.size,
                       "text": f"{ins.mnemonic} {ins.op_str}".strip()})
    out = Path(__file__).resolve().parent.parent / "tests" / "data" / "decoder_corpus.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"oracle": f"capstone {capstone.__version__}", "seed": seed,
                               "entries": corpus}, indent=1) + "\n")
    print(f"wrote {len(corpus)} entries to {out}")


if __name__ == "__main__":
    main(*(int(a) for a in sys.argv[1:]))
