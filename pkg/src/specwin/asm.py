"""A small x86-64 machine-code emitter.

Covers only the instruction forms the victim templates, trial driver,
channel primitives and workload loops need.  Encodings follow what GNU
``as`` picks for the same Intel-syntax source so generated bytes can be
compared against externally assembled fixtures.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

_R64 = ["rax", "rcx", "rdx", "rbx", "rsp", "rbp", "rsi", "rdi",
        "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"]
_R32 = ["eax", "ecx", "edx", "ebx", "esp", "ebp", "esi", "edi",
        "r8d", "r9d", "r10d", "r11d", "r12d", "r13d", "r14d", "r15d"]

REGS: dict[str, tuple[int, int]] = {}
for _i, _n in enumerate(_R64):
    REGS[_n] = (_i, 64)
for _i, _n in enumerate(_R32):
    REGS[_n] = (_i, 32)

CONDITIONS = {
    "o": 0x0, "no": 0x1, "b": 0x2, "c": 0x2, "ae": 0x3, "nc": 0x3,
    "e": 0x4, "z": 0x4, "ne": 0x5, "nz": 0x5, "be": 0x6, "a": 0x7,
    "s": 0x8, "ns": 0x9, "p": 0xA, "np": 0xB, "l": 0xC, "ge": 0xD,
    "le": 0xE, "g": 0xF,
}

_SCALE = {1: 0, 2: 1, 4: 2, 8: 3}


def reg(name: str) -> tuple[int, int]:
    try:
        return REGS[name]
    except KeyError:
        raise ValueError(f"unknown register {name!r}") from None


@dataclass(frozen=True)
class Mem:
    """Memory operand ``[base + index*scale + disp]`` or ``[rip + label]``."""

    base: str | None = None
    index: str | None = None
    scale: int = 1
    disp: int = 0
    label: str | None = None


def mem(base=None, index=None, scale=1, disp=0) -> Mem:
    return Mem(base, index, scale, disp)


def rip(label: str, disp: int = 0) -> Mem:
    return Mem(label=label, disp=disp)


def _fits8(v: int) -> bool:
    return -128 <= v <= 127


def _fits32(v: int) -> bool:
    return -(1 << 31) <= v < (1 << 31)


class Assembler:
    def __init__(self):
        self.buf = bytearray()
        self.labels: dict[str, int] = {}
        # (offset, kind, label, end_of_instruction, addend)
        self._fixups: list[tuple[int, str, str, int, int]] = []

    # -- plumbing -----------------------------------------------------

    @property
    def pos(self) -> int:
        return len(self.buf)

    def label(self, name: str) -> None:
        if name in self.labels:
            raise ValueError(f"duplicate label {name!r}")
        self.labels[name] = self.pos

    def raw(self, data: bytes) -> None:
        self.buf += data

    def align(self, n: int, fill: int = 0x90) -> None:
        while self.pos % n:
            self.buf.append(fill)

    def pad_to(self, offset: int, fill: int = 0xCC) -> None:
        if offset < self.pos:
            raise ValueError(f"already past offset {offset:#x}")
        self.buf += bytes([fill]) * (offset - self.pos)

    def _modrm_mem(self, reg_field: int, m: Mem):
        """Returns (rex_x, rex_b, encoded bytes, rip-disp offset or None)."""
        r = (reg_field & 7) << 3
        if m.label is not None:
            return 0, 0, bytes([r | 5]) + b"\0\0\0\0", 1
        base = reg(m.base)[0] if m.base else None
        index = reg(m.index)[0] if m.index else None
        if index == 4:
            raise ValueError("rsp cannot be an index register")
        if m.scale not in _SCALE:
            raise ValueError(f"bad scale {m.scale}")
        ss = _SCALE[m.scale] << 6
        rex_x = (index >> 3) if index is not None else 0
        if base is None:
            idx = index if index is not None else 4
            sib = ss | ((idx & 7) << 3) | 5
            return rex_x, 0, bytes([r | 4, sib]) + struct.pack("<i", m.disp), None
        if m.disp == 0 and (base & 7) != 5:
            mod, disp = 0, b""
        elif _fits8(m.disp):
            mod, disp = 1, struct.pack("<b", m.disp)
        else:
            mod, disp = 2, struct.pack("<i", m.disp)
        if index is None and (base & 7) != 4:
            enc = bytes([(mod << 6) | r | (base & 7)])
        else:
            idx = index if index is not None else 4
            enc = bytes([(mod << 6) | r | 4, ss | ((idx & 7) << 3) | (base & 7)])
        return rex_x, base >> 3, enc + disp, None

    def _op(self, opcode: bytes, reg_field: int, rm, w: bool = False,
            prefix: bytes = b"", imm: bytes = b"") -> None:
        """Emit ``prefix REX opcode ModRM [SIB] [disp] [imm]``.

        ``rm`` is a register number or a :class:`Mem`.
        """
        rex_r = (reg_field >> 3) & 1
        if isinstance(rm, Mem):
            rex_x, rex_b, enc, rip_off = self._modrm_mem(reg_field, rm)
        else:
            rex_x, rex_b = 0, rm >> 3
            enc, rip_off = bytes([0xC0 | ((reg_field & 7) << 3) | (rm & 7)]), None
        rex = 0x40 | (int(w) << 3) | (rex_r << 2) | (rex_x << 1) | rex_b
        start = self.pos
        self.buf += prefix
        if rex != 0x40:
            self.buf.append(rex)
        self.buf += opcode
        modrm_at = self.pos
        self.buf += enc + imm
        if rip_off is not None:
            self._fixups.append((modrm_at + rip_off, "rip32", rm.label, self.pos, rm.disp))
        assert self.pos > start

    @staticmethod
    def _gpr(name: str) -> tuple[int, bool]:
        n, width = reg(name)
        return n, width == 64

    # -- data movement ------------------------------------------------

    def mov(self, dst, src) -> None:
        if isinstance(src, Mem):
            n, w = self._gpr(dst)
            self._op(b"\x8b", n, src, w)
        elif isinstance(dst, Mem):
            if isinstance(src, int):
                self._op(b"\xc7", 0, dst, True, imm=struct.pack("<i", src))
            else:
                n, w = self._gpr(src)
                self._op(b"\x89", n, dst, w)
        elif isinstance(src, int):
            n, w = self._gpr(dst)
            if w and _fits32(src):
                self._op(b"\xc7", 0, n, True, imm=struct.pack("<i", src))
            elif w:
                self.buf += bytes([0x48 | (n >> 3), 0xB8 + (n & 7)]) + struct.pack("<Q", src & (2**64 - 1))
            else:
                if n >= 8:
                    self.buf.append(0x41)
                self.buf += bytes([0xB8 + (n & 7)]) + struct.pack("<I", src & 0xFFFFFFFF)
        else:
            d, w = self._gpr(dst)
            s, w2 = self._gpr(src)
            if w != w2:
                raise ValueError("operand size mismatch")
            self._op(b"\x89", s, d, w)

    def lea(self, dst: str, src: Mem) -> None:
        n, w = self._gpr(dst)
        self._op(b"\x8d", n, src, w)

    def cmov(self, cond: str, dst: str, src) -> None:
        n, w = self._gpr(dst)
        rm = src if isinstance(src, Mem) else reg(src)[0]
        self._op(bytes([0x0F, 0x40 | CONDITIONS[cond]]), n, rm, w)

    def mov_from_cs(self, dst: str) -> None:
        n, _ = self._gpr(dst)
        self._op(b"\x8c", 1, n, False)

    def push(self, name: str) -> None:
        n, _ = reg(name)
        if n >= 8:
            self.buf.append(0x41)
        self.buf.append(0x50 + (n & 7))

    def pop(self, name: str) -> None:
        n, _ = reg(name)
        if n >= 8:
            self.buf.append(0x41)
        self.buf.append(0x58 + (n & 7))

    # -- arithmetic ---------------------------------------------------

    def _alu_rr(self, opcode: int, dst, src: str) -> None:
        s, w = self._gpr(src)
        if isinstance(dst, Mem):
            self._op(bytes([opcode]), s, dst, w)
        else:
            d, w2 = self._gpr(dst)
            if w != w2:
                raise ValueError("operand size mismatch")
            self._op(bytes([opcode]), s, d, w)

    def _alu_ri(self, ext: int, acc_opcode: int, dst: str, imm: int) -> None:
        n, w = self._gpr(dst)
        if _fits8(imm):
            self._op(b"\x83", ext, n, w, imm=struct.pack("<b", imm))
        elif n == 0:
            if w:
                self.buf.append(0x48)
            self.buf += bytes([acc_opcode]) + struct.pack("<i", imm)
        else:
            self._op(b"\x81", ext, n, w, imm=struct.pack("<i", imm))

    def add(self, dst, src) -> None:
        if isinstance(src, int):
            self._alu_ri(0, 0x05, dst, src)
        else:
            self._alu_rr(0x01, dst, src)

    def or_(self, dst, src) -> None:
        self._alu_rr(0x09, dst, src)

    def and_(self, dst, src) -> None:
        if isinstance(src, int):
            self._alu_ri(4, 0x25, dst, src)
        else:
            self._alu_rr(0x21, dst, src)

    def sub(self, dst, src) -> None:
        if isinstance(src, int):
            self._alu_ri(5, 0x2D, dst, src)
        else:
            self._alu_rr(0x29, dst, src)

    def xor(self, dst, src) -> None:
        self._alu_rr(0x31, dst, src)

    def test(self, a: str, b: str) -> None:
        self._alu_rr(0x85, a, b)

    def cmp_mem_imm(self, m: Mem, imm: int) -> None:
        self._op(b"\x83", 7, m, True, imm=struct.pack("<b", imm))

    def _shift(self, ext: int, dst: str, count: int) -> None:
        n, w = self._gpr(dst)
        if count == 1:
            self._op(b"\xd1", ext, n, w)
        else:
            self._op(b"\xc1", ext, n, w, imm=bytes([count & 0xFF]))

    def shl(self, dst: str, count: int) -> None:
        self._shift(4, dst, count)

    def shr(self, dst: str, count: int) -> None:
        self._shift(5, dst, count)

    def inc(self, dst) -> None:
        if isinstance(dst, Mem):
            self._op(b"\xff", 0, dst, True)
        else:
            n, w = self._gpr(dst)
            self._op(b"\xff", 0, n, w)

    def dec(self, dst) -> None:
        if isinstance(dst, Mem):
            self._op(b"\xff", 1, dst, True)
        else:
            n, w = self._gpr(dst)
            self._op(b"\xff", 1, n, w)

    # -- cache, ordering, timing -------------------------------------

    def lfence(self) -> None:
        self.buf += b"\x0f\xae\xe8"

    def mfence(self) -> None:
        self.buf += b"\x0f\xae\xf0"

    def rdtsc(self) -> None:
        self.buf += b"\x0f\x31"

    def cpuid(self) -> None:
        self.buf += b"\x0f\xa2"

    def clflush(self, m: Mem) -> None:
        self._op(b"\x0f\xae", 7, m)

    def prefetcht0(self, m: Mem) -> None:
        self._op(b"\x0f\x18", 1, m)

    def nop(self, count: int = 1) -> None:
        self.buf += b"\x90" * count

    def cbw(self, count: int = 1) -> None:
        self.buf += b"\x66\x98" * count

    # -- control flow -------------------------------------------------

    def ret(self) -> None:
        self.buf.append(0xC3)

    def jmp_reg(self, name: str) -> None:
        self._op(b"\xff", 4, reg(name)[0])

    def call_reg(self, name: str) -> None:
        self._op(b"\xff", 2, reg(name)[0])

    def jmp_mem(self, m: Mem) -> None:
        self._op(b"\xff", 4, m)

    def jmp_far_mem(self, m: Mem) -> None:
        """``jmp far [m]`` through an m16:32 far pointer."""
        self._op(b"\xff", 5, m)

    def _rel(self, opcode: bytes, label: str, size: int) -> None:
        self.buf += opcode
        at = self.pos
        self.buf += b"\0" * size
        self._fixups.append((at, f"rel{size * 8}", label, self.pos, 0))

    def jmp(self, label: str, short: bool = False) -> None:
        if short:
            self._rel(b"\xeb", label, 1)
        else:
            self._rel(b"\xe9", label, 4)

    def jcc(self, cond: str, label: str, short: bool = False) -> None:
        cc = CONDITIONS[cond]
        if short:
            self._rel(bytes([0x70 | cc]), label, 1)
        else:
            self._rel(bytes([0x0F, 0x80 | cc]), label, 4)

    # -- data ---------------------------------------------------------

    def dq(self, value) -> None:
        """A quadword; a label name becomes its absolute address."""
        if isinstance(value, str):
            self._fixups.append((self.pos, "abs64", value, 0, 0))
            self.buf += b"\0" * 8
        else:
            self.buf += struct.pack("<Q", value & (2**64 - 1))

    def dd_abs(self, label: str) -> None:
        self._fixups.append((self.pos, "abs32", label, 0, 0))
        self.buf += b"\0" * 4

    def dw(self, value: int) -> None:
        self.buf += struct.pack("<H", value & 0xFFFF)

    # -- output -------------------------------------------------------

    def assemble(self, base: int = 0) -> bytes:
        """Resolve label references and return the final bytes.

        ``base`` is the load address, used only by absolute data fixups.
        """
        out = bytearray(self.buf)
        for at, kind, label, end, addend in self._fixups:
            if label not in self.labels:
                raise ValueError(f"undefined label {label!r}")
            target = self.labels[label]
            if kind == "rel8":
                rel = target - end
                if not _fits8(rel):
                    raise ValueError(f"short jump to {label!r} out of range ({rel})")
                out[at:at + 1] = struct.pack("<b", rel)
            elif kind in ("rel32", "rip32"):
                out[at:at + 4] = struct.pack("<i", target + addend - end)
            elif kind == "abs64":
                out[at:at + 8] = struct.pack("<Q", base + target)
            elif kind == "abs32":
                addr = base + target
                if addr >= 1 << 32:
                    raise ValueError(f"absolute address {addr:#x} does not fit in 32 bits")
                out[at:at + 4] = struct.pack("<I", addr)
        return bytes(out)
