"""x86-64 instruction length decoder with control-flow and address semantics.

Every encoding gets a length from the full prefix/opcode/ModRM/SIB/immediate
walk. Only branches and address-forming operands are decoded semantically;
everything else is ``OTHER``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

from .errors import TriageError

CALL, JMP, JCC, RET, DATA_REF, OTHER = "CALL", "JMP", "JCC", "RET", "DATA_REF", "OTHER"

MAX_LEN = 15
MASK64 = (1 << 64) - 1

LEGACY_PREFIXES = frozenset({0x26, 0x2E, 0x36, 0x3E, 0x64, 0x65, 0x66, 0x67, 0xF0, 0xF2, 0xF3})


class DecodeError(TriageError):
    code = "UNDECODABLE"


@dataclass(frozen=True)
class Instruction:
    addr: int
    length: int
    kind: str
    target: Optional[int] = None
    raw: bytes = b""
    # opcode with its escape bytes folded in: 0x0F85, 0x0F3A0F, 0xC3, ...
    opcode: int = 0
    reg: Optional[int] = None
    imm: Optional[int] = None
    imm_size: int = 0
    # "call" / "jmp" for transfers through a register or memory slot
    indirect: Optional[str] = None

    @property
    def end(self) -> int:
        return self.addr + self.length

    @property
    def terminates(self) -> bool:
        """True when execution never falls through to the next instruction."""
        return (self.kind in (RET, JMP) or self.indirect == "jmp"
                or self.opcode in (0xF4, 0x0F0B))


def _r(a, b):
    return set(range(a, b + 1))


# --- one-byte map ---------------------------------------------------------

_INVALID_1 = {0x06, 0x07, 0x0E, 0x16, 0x17, 0x1E, 0x1F, 0x27, 0x2F, 0x37, 0x3F,
              0x60, 0x61, 0x82, 0x9A, 0xCE, 0xD4, 0xD5, 0xD6, 0xEA}
_MODRM_1 = set()
for _b in range(0, 0x40, 8):
    _MODRM_1 |= _r(_b, _b + 3)
_MODRM_1 |= {0x63, 0x69, 0x6B, 0xC0, 0xC1, 0xC6, 0xC7, 0xF6, 0xF7, 0xFE, 0xFF}
_MODRM_1 |= _r(0x80, 0x8F) | _r(0xD0, 0xD3) | _r(0xD8, 0xDF)
_MODRM_1 -= _INVALID_1

_IMM8_1 = {0x04, 0x0C, 0x14, 0x1C, 0x24, 0x2C, 0x34, 0x3C, 0x6A, 0x6B, 0x80, 0x83,
           0xA8, 0xC0, 0xC1, 0xC6, 0xCD, 0xEB} | _r(0x70, 0x7F) | _r(0xB0, 0xB7) \
    | _r(0xE0, 0xE7)
_IMMZ_1 = {0x05, 0x0D, 0x15, 0x1D, 0x25, 0x2D, 0x35, 0x3D, 0x68, 0x69, 0x81, 0xA9, 0xC7}

# --- two-byte map (0F xx) -------------------------------------------------

_INVALID_2 = {0x04, 0x0A, 0x0C, 0x36, 0x39, 0x7A, 0x7B} | _r(0x24, 0x27) \
    | _r(0x3B, 0x3F)
# UD0/UD1 follow the oracle disassembler, which decodes them without ModRM.
_NO_MODRM_2 = {0x05, 0x06, 0x07, 0x08, 0x09, 0x0B, 0x0E, 0x77, 0xA0, 0xA1, 0xA2,
               0xA8, 0xA9, 0xAA, 0xB9, 0xFF} | _r(0x30, 0x37) | _r(0x80, 0x8F) | _r(0xC8, 0xCF)
_IMM8_2 = {0x0F, 0x70, 0x71, 0x72, 0x73, 0xA4, 0xAC, 0xBA, 0xC2, 0xC4, 0xC5, 0xC6}

# --- VEX / EVEX immediates -------------------------------------------------

_VEX_IMM8_MAP1 = {0x70, 0x71, 0x72, 0x73, 0xC2, 0xC4, 0xC5, 0xC6}


class _Cursor:
    __slots__ = ("code", "pos")

    def __init__(self, code: bytes):
        self.code = code
        self.pos = 0

    def peek(self) -> int:
        if self.pos >= len(self.code) or self.pos >= MAX_LEN:
            raise DecodeError("instruction truncated or longer than 15 bytes")
        return self.code[self.pos]

    def take(self) -> int:
        b = self.peek()
        self.pos += 1
        return b

    def skip(self, n: int) -> int:
        start = self.pos
        self.pos += n
        if self.pos > len(self.code) or self.pos > MAX_LEN:
            raise DecodeError("instruction truncated or longer than 15 bytes")
        return int.from_bytes(self.code[start:self.pos], "little")


def _modrm(cur: _Cursor):
    """Consume ModRM/SIB/displacement. Returns (modrm, disp, rip_relative)."""
    modrm = cur.take()
    mod, rm = modrm >> 6, modrm & 7
    if mod == 3:
        return modrm, None, False
    rip = False
    if rm == 4:
        sib = cur.take()
        if mod == 0 and sib & 7 == 5:
            return modrm, _signed(cur.skip(4), 4), False
    elif mod == 0 and rm == 5:
        rip = True
        return modrm, _signed(cur.skip(4), 4), rip
    if mod == 1:
        return modrm, _signed(cur.skip(1), 1), False
    if mod == 2:
        return modrm, _signed(cur.skip(4), 4), False
    return modrm, None, False


def _signed(value: int, size: int) -> int:
    bit = 1 << (size * 8 - 1)
    return (value ^ bit) - bit


def decode_instruction(code: bytes, addr: int,
                       is_mapped: Optional[Callable[[int], bool]] = None) -> Instruction:
    """Decode one instruction at the start of ``code`` located at ``addr``.

    ``is_mapped`` decides whether a 64-bit immediate is an address worth
    reporting as a data reference. Raises DecodeError for invalid encodings.
    """
    if not code:
        raise DecodeError("empty input")
    cur = _Cursor(code)
    opsize = adsize = False
    mandatory = None
    rex = 0
    while True:
        b = cur.peek()
        if b in LEGACY_PREFIXES:
            if b == 0x66:
                opsize = True
            elif b == 0x67:
                adsize = True
            elif b in (0xF2, 0xF3):
                mandatory = b
            rex = 0  # REX only counts directly before the opcode
            cur.pos += 1
        elif 0x40 <= b <= 0x4F:
            rex = b
            cur.pos += 1
        else:
            break
    rex_w = bool(rex & 8)

    op = cur.take()
    opcode = op
    reg = None
    disp = None
    rip = False
    imm = None
    imm_size = 0
    rel = None

    def immz():
        return 2 if opsize and not rex_w else 4

    if op in (0xC4, 0xC5, 0x62):
        if rex or opsize or mandatory or code[:cur.pos - 1].count(0xF0):
            raise DecodeError("VEX/EVEX after REX or SIMD prefix")
        if op == 0xC5:
            cur.take()
            vmap = 1
        elif op == 0xC4:
            vmap = cur.take() & 0x1F
            cur.take()
        else:
            p0 = cur.take()
            vmap = p0 & 7
            cur.take()
            cur.take()
            if vmap in (0, 4, 7):
                raise DecodeError("reserved EVEX map")
        if op != 0x62 and vmap not in (1, 2, 3):
            raise DecodeError("reserved VEX map")
        vop = cur.take()
        opcode = (op << 16) | (vmap << 8) | vop
        if not (op != 0x62 and vmap == 1 and vop == 0x77):
            modrm, disp, rip = _modrm(cur)
            reg = (modrm >> 3) & 7
        if vmap == 3 or (vmap == 1 and vop in _VEX_IMM8_MAP1):
            imm, imm_size = cur.skip(1), 1
    elif op == 0x8F and cur.peek() & 0x1F >= 8:
        xmap = cur.take() & 0x1F
        cur.take()
        xop = cur.take()
        opcode = (0x8F << 16) | (xmap << 8) | xop
        modrm, disp, rip = _modrm(cur)
        reg = (modrm >> 3) & 7
        if xmap == 8:
            imm, imm_size = cur.skip(1), 1
        elif xmap == 0x0A:
            imm, imm_size = cur.skip(4), 4
        elif xmap != 9:
            raise DecodeError("reserved XOP map")
    elif op == 0x0F:
        op2 = cur.take()
        if op2 in (0x38, 0x3A):
            op3 = cur.take()
            opcode = (0x0F << 16) | (op2 << 8) | op3
            modrm, disp, rip = _modrm(cur)
            reg = (modrm >> 3) & 7
            if op2 == 0x3A:
                imm, imm_size = cur.skip(1), 1
        else:
            opcode = 0x0F00 | op2
            if op2 in _INVALID_2:
                raise DecodeError(f"invalid opcode 0F {op2:02X}")
            if 0x20 <= op2 <= 0x23:
                # control/debug register moves always use the register form
                reg = (cur.take() >> 3) & 7
            elif op2 not in _NO_MODRM_2:
                modrm, disp, rip = _modrm(cur)
                reg = (modrm >> 3) & 7
            if 0x80 <= op2 <= 0x8F:
                rel = _signed(cur.skip(4), 4)
            elif op2 == 0x78 and (opsize or mandatory == 0xF2) and disp is None and not rip \
                    and code[cur.pos - 1] >> 6 == 3:
                imm, imm_size = cur.skip(2), 2
            elif op2 in _IMM8_2:
                imm, imm_size = cur.skip(1), 1
    else:
        if op in _INVALID_1:
            raise DecodeError(f"invalid opcode {op:02X} in 64-bit mode")
        if op in _MODRM_1:
            modrm, disp, rip = _modrm(cur)
            reg = (modrm >> 3) & 7
        if op in (0x70, 0x71, 0x72, 0x73, 0x74, 0x75, 0x76, 0x77, 0x78, 0x79,
                  0x7A, 0x7B, 0x7C, 0x7D, 0x7E, 0x7F, 0xEB, 0xE0, 0xE1, 0xE2, 0xE3):
            rel = _signed(cur.skip(1), 1)
        elif op in (0xE8, 0xE9):
            # 0x66 is ignored on near branches in 64-bit mode (Intel behaviour)
            rel = _signed(cur.skip(4), 4)
        elif op in _IMM8_1:
            imm, imm_size = cur.skip(1), 1
        elif op in _IMMZ_1:
            imm_size = immz()
            imm = cur.skip(imm_size)
        elif 0xB8 <= op <= 0xBF:
            imm_size = 8 if rex_w else immz()
            imm = cur.skip(imm_size)
        elif 0xA0 <= op <= 0xA3:
            imm_size = 4 if adsize else 8
            imm = cur.skip(imm_size)
        elif op in (0xC2, 0xCA):
            imm, imm_size = cur.skip(2), 2
        elif op == 0xC8:
            imm, imm_size = cur.skip(3), 3
        elif op == 0xF6 and reg in (0, 1):
            imm, imm_size = cur.skip(1), 1
        elif op == 0xF7 and reg in (0, 1):
            imm_size = immz()
            imm = cur.skip(imm_size)

    length = cur.pos
    raw = bytes(code[:length])
    end = addr + length
    kind, target, indirect = OTHER, None, None

    if rel is not None:
        target = (end + rel) & MASK64
        if op == 0xE8:
            kind = CALL
        elif op in (0xE9, 0xEB):
            kind = JMP
        else:
            kind = JCC
    elif op in (0xC3, 0xC2, 0xCB, 0xCA, 0xCF) and opcode == op:
        kind = RET
    elif op == 0xFF and opcode == op and reg in (2, 3, 4, 5):
        indirect = "call" if reg in (2, 3) else "jmp"
        if rip:
            kind = CALL if indirect == "call" else JMP
            target = _rip_target(end, disp, adsize)
    elif rip:
        kind = DATA_REF
        target = _rip_target(end, disp, adsize)
    elif opcode == op and 0xB8 <= op <= 0xBF and imm_size == 8 and is_mapped and is_mapped(imm):
        kind = DATA_REF
        target = imm

    return Instruction(addr, length, kind, target, raw, opcode, reg, imm, imm_size, indirect)


def _rip_target(end: int, disp: int, adsize: bool) -> int:
    target = end + disp
    return target & (0xFFFFFFFF if adsize else MASK64)


def instruction_length(code: bytes) -> int:
    return decode_instruction(code, 0).length


def linear_sweep(code: bytes, base: int, is_mapped=None):
    """Yield (addr, Instruction or None) over ``code``.

    ``None`` marks an undecodable byte; the sweep resumes one byte later.
    """
    pos = 0
    n = len(code)
    while pos < n:
        try:
            ins = decode_instruction(code[pos:pos + MAX_LEN], base + pos, is_mapped)
        except DecodeError:
            yield base + pos, None
            pos += 1
            continue
        yield base + pos, ins
        pos += ins.length
