"""Runtime code generation for victims, gadgets, the trial driver and workloads.

Register conventions inside generated victim code:

* ``r11`` carries the address of the target slot into the victim and then
  the loaded branch target, so every gadget register stays free.
* ``rdi`` data pointer (load-shift-load) or pre-shifted value (load-once),
  ``rdx`` index, ``rsi`` probe base, ``rax`` first-load pointer for the
  minimal variants, ``rbx``/``rcx`` pointer and probe base for the
  three-load gadget.

Every gadget ends with ``ret`` so the architectural training run returns to
the driver; the landing pad is a bare ``ret``.
"""

from __future__ import annotations

import ctypes
from dataclasses import dataclass, field

from .asm import Assembler, mem, rip
from .errors import UnsupportedGadget, UnsupportedWorkload
from .kinds import FenceMode, GadgetKind, SpacerKind, WorkloadKind
from .memory import PAGE, CodeRegion, Region, jit

MAX_SPACERS = 64
LFENCE_BYTES = b"\x0f\xae\xe8"

# Intel-syntax source for each template, the form fed to an external
# assembler when regenerating golden fixtures.
GADGET_TEMPLATES: dict[GadgetKind, list[str]] = {
    GadgetKind.LOAD_SHIFT_LOAD: [
        "mov ebx, dword ptr [rdi+rdx]",
        "shl ebx, 0xc",
        "mov ecx, dword ptr [rsi+rbx]",
    ],
    GadgetKind.LOAD_ONCE: ["mov ecx, dword ptr [rsi+rdi]"],
    GadgetKind.MINIMAL_LOAD: ["mov rax, qword ptr [rax]", "mov rax, qword ptr [rax]"],
    GadgetKind.STORE: ["mov rax, qword ptr [rax]", "mov qword ptr [rax], 0"],
    GadgetKind.PREFETCH: ["mov rax, qword ptr [rax]", "prefetcht0 [rax]"],
    GadgetKind.FLUSH: ["mov rax, qword ptr [rax]", "clflush [rax]"],
    GadgetKind.COMPLEX_LOAD: ["mov rbx, qword ptr [rax]", "mov rcx, qword ptr [rsi+rbx*8]"],
    GadgetKind.THREE_LOAD_MASKED: [
        "mov rbx, qword ptr [rbx]",
        "mov rdx, qword ptr [rbx]",
        "and rdx, 0xff",
        "shl rdx, 0xc",
        "mov rax, qword ptr [rdx+rcx]",
    ],
}

# Gadgets whose register inputs include rax, which CBW spacers clobber.
_USES_RAX = {
    GadgetKind.MINIMAL_LOAD, GadgetKind.STORE, GadgetKind.PREFETCH,
    GadgetKind.FLUSH, GadgetKind.COMPLEX_LOAD,
}


def victim_template(fence: FenceMode) -> list[str]:
    lines = ["mov r11, qword ptr [r11]"]
    if fence is FenceMode.LFENCE:
        lines.append("lfence")
    lines.append("jmp r11")
    return lines


LANDING_PAD_TEMPLATE = ["ret"]


def gadget_template(gadget, spacer_nops: int = 0, spacer_kind=SpacerKind.NOP) -> list[str]:
    """Source text of a gadget section: spacers, body, ``ret``."""
    gadget = GadgetKind.parse(gadget)
    spacer = "nop" if SpacerKind.parse(spacer_kind) is SpacerKind.NOP else "cbw"
    return [spacer] * spacer_nops + GADGET_TEMPLATES[gadget] + ["ret"]


def _emit_gadget(a: Assembler, gadget: GadgetKind) -> None:
    g = GadgetKind
    if gadget is g.LOAD_SHIFT_LOAD:
        a.mov("ebx", mem("rdi", "rdx"))
        a.shl("ebx", 0xC)
        a.mov("ecx", mem("rsi", "rbx"))
    elif gadget is g.LOAD_ONCE:
        a.mov("ecx", mem("rsi", "rdi"))
    elif gadget is g.MINIMAL_LOAD:
        a.mov("rax", mem("rax"))
        a.mov("rax", mem("rax"))
    elif gadget is g.STORE:
        a.mov("rax", mem("rax"))
        a.mov(mem("rax"), 0)
    elif gadget is g.PREFETCH:
        a.mov("rax", mem("rax"))
        a.prefetcht0(mem("rax"))
    elif gadget is g.FLUSH:
        a.mov("rax", mem("rax"))
        a.clflush(mem("rax"))
    elif gadget is g.COMPLEX_LOAD:
        a.mov("rbx", mem("rax"))
        a.mov("rcx", mem("rsi", "rbx", 8))
    elif gadget is g.THREE_LOAD_MASKED:
        a.mov("rbx", mem("rbx"))
        a.mov("rdx", mem("rbx"))
        a.and_("rdx", 0xFF)
        a.shl("rdx", 0xC)
        a.mov("rax", mem("rdx", "rcx"))
    else:
        raise UnsupportedGadget(str(gadget))


def victim_bytes(fence: FenceMode) -> bytes:
    a = Assembler()
    a.mov("r11", mem("r11"))
    if fence is FenceMode.LFENCE:
        a.lfence()
    a.jmp_reg("r11")
    return a.assemble()


def gadget_bytes(gadget: GadgetKind, spacer_nops: int = 0,
                 spacer_kind: SpacerKind = SpacerKind.NOP) -> bytes:
    """Spacers, gadget body and the trailing ``ret``."""
    if not 0 <= spacer_nops <= MAX_SPACERS:
        raise ValueError(f"spacer_nops must be in [0, {MAX_SPACERS}], got {spacer_nops}")
    if spacer_kind is SpacerKind.CBW and spacer_nops and gadget in _USES_RAX:
        raise UnsupportedGadget(f"CBW spacers clobber rax, which {gadget} reads")
    a = Assembler()
    if spacer_kind is SpacerKind.CBW:
        a.cbw(spacer_nops)
    else:
        a.nop(spacer_nops)
    _emit_gadget(a, gadget)
    a.ret()
    return a.assemble()


def landing_pad_bytes() -> bytes:
    return b"\xc3"


def victim_image(gadget, fence, spacer_nops=0, spacer_kind=SpacerKind.NOP) -> dict[str, bytes]:
    """Position-independent bytes of the three code sections of a victim."""
    gadget = GadgetKind.parse(gadget)
    fence = FenceMode.parse(fence)
    spacer_kind = SpacerKind.parse(spacer_kind)
    return {
        "victim": victim_bytes(fence),
        "gadget": gadget_bytes(gadget, spacer_nops, spacer_kind),
        "landing_pad": landing_pad_bytes(),
    }


@dataclass
class VictimLayout:
    """Placement of one victim in memory.  Offsets are relative to ``buffer_base``."""

    buffer_base: int
    victim_entry: int
    branch_site: int
    gadget_entry: int
    landing_pad: int
    spacer_nops: int
    target_slot: int
    gadget: GadgetKind
    fence: FenceMode
    spacer_kind: SpacerKind = SpacerKind.NOP
    code: CodeRegion | None = field(default=None, repr=False)
    data: Region | None = field(default=None, repr=False)

    @property
    def victim_addr(self) -> int:
        return self.buffer_base + self.victim_entry

    @property
    def gadget_addr(self) -> int:
        return self.buffer_base + self.gadget_entry

    @property
    def landing_pad_addr(self) -> int:
        return self.buffer_base + self.landing_pad

    def section(self, name: str) -> bytes:
        """Current bytes of a code section, read back from the buffer."""
        img_len = {
            "victim": (self.victim_entry, len(victim_bytes(self.fence))),
            "gadget": (self.gadget_entry,
                       len(gadget_bytes(self.gadget, self.spacer_nops, self.spacer_kind))),
            "landing_pad": (self.landing_pad, len(landing_pad_bytes())),
        }[name]
        return self.code.read(*img_len)

    def normalized(self) -> dict:
        """Address-free description, for comparing two builds."""
        return {
            "victim_entry": self.victim_entry,
            "branch_site": self.branch_site,
            "gadget_entry": self.gadget_entry,
            "landing_pad": self.landing_pad,
            "target_slot_offset": self.target_slot - self.data.addr,
            "sections": {n: self.section(n) for n in ("victim", "gadget", "landing_pad")},
        }


def build_victim(gadget, fence, spacer_nops: int = 0, *,
                 spacer_kind=SpacerKind.NOP, align: int = 16) -> VictimLayout:
    """Allocate and fill a victim: indirect-branch sequence, gadget and landing pad.

    Code occupies three pages (victim, gadget, landing pad) with guard pages
    around the mapping; the target slot lives on its own guarded data page.
    ``align`` is the exact alignment of the victim entry within its page.
    """
    gadget = GadgetKind.parse(gadget)
    fence = FenceMode.parse(fence)
    spacer_kind = SpacerKind.parse(spacer_kind)
    if align <= 0 or align & (align - 1) or align > PAGE:
        raise ValueError(f"align must be a power of two <= {PAGE}")
    img = victim_image(gadget, fence, spacer_nops, spacer_kind)

    code = CodeRegion(3 * PAGE)
    data = Region(PAGE)
    victim_entry = align % PAGE
    layout = VictimLayout(
        buffer_base=code.addr,
        victim_entry=victim_entry,
        branch_site=victim_entry + len(img["victim"]) - 3,  # jmp r11 is 3 bytes
        gadget_entry=PAGE,
        landing_pad=2 * PAGE,
        spacer_nops=spacer_nops,
        target_slot=data.addr,
        gadget=gadget,
        fence=fence,
        spacer_kind=spacer_kind,
        code=code,
        data=data,
    )
    code.write(layout.victim_entry, img["victim"])
    code.write(layout.gadget_entry, img["gadget"])
    build_landing_pad(layout)
    code.seal()
    data.put_u64(0, layout.landing_pad_addr)
    return layout


def build_landing_pad(layout: VictimLayout) -> int:
    """Place the landing pad (a bare return) and return its address."""
    if layout.code.prot & 0x2:  # still writable
        layout.code.write(layout.landing_pad, landing_pad_bytes())
    elif layout.section("landing_pad") != landing_pad_bytes():
        raise ValueError("sealed buffer holds an unexpected landing pad")
    return layout.landing_pad_addr


# -- trial driver ---------------------------------------------------------

REG_ORDER = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi")

# context block layout, in quadwords
_CTX_ITERS, _CTX_VICTIM, _CTX_SLOT, _CTX_FLUSH = 0, 1, 2, 3
_CTX_TRAIN = 4
_CTX_ATTACK = _CTX_TRAIN + 1 + len(REG_ORDER)
_CTX_WORDS = _CTX_ATTACK + 1 + len(REG_ORDER)


def driver_bytes() -> bytes:
    """Training loop plus mispredicted run, sharing one code path.

    ``train_iters`` runs aim the branch at the training target, then one
    final run uses the attack target and registers.  The register block is
    chosen with ``cmovz`` so the branch history leading to the victim is
    identical on every run.
    """
    q = 8
    a = Assembler()
    for r in ("rbx", "rbp", "r12", "r13", "r14", "r15"):
        a.push(r)
    a.mov("r15", "rdi")
    a.mov("r14", mem("r15", disp=_CTX_ITERS * q))
    a.mov("r13", mem("r15", disp=_CTX_VICTIM * q))
    a.label("loop")
    a.lea("r12", mem("r15", disp=_CTX_TRAIN * q))
    a.lea("rax", mem("r15", disp=_CTX_ATTACK * q))
    a.test("r14", "r14")
    a.cmov("z", "r12", "rax")
    a.mov("rax", mem("r12"))
    a.mov("r11", mem("r15", disp=_CTX_SLOT * q))
    a.mov(mem("r11"), "rax")
    a.mov("rax", mem("r15", disp=_CTX_FLUSH * q))
    a.test("rax", "rax")
    a.jcc("z", "noflush", short=True)
    a.clflush(mem("r11"))
    a.label("noflush")
    a.mfence()
    a.lfence()
    for i, r in enumerate(REG_ORDER, start=1):
        a.mov(r, mem("r12", disp=i * q))
    a.call_reg("r13")
    a.dec("r14")
    a.jcc("ns", "loop")
    for r in ("r15", "r14", "r13", "r12", "rbp", "rbx"):
        a.pop(r)
    a.ret()
    return a.assemble()


class TrialDriver:
    """Native trial loop bound to one victim layout."""

    def __init__(self, layout: VictimLayout):
        self.layout = layout
        self._code, self._fn = jit(driver_bytes(), None, ctypes.c_void_p)
        self.ctx = Region(_CTX_WORDS * 8)
        self._put(_CTX_VICTIM, layout.victim_addr)
        self._put(_CTX_SLOT, layout.target_slot)
        self.set_train(layout.gadget_addr, {})
        self.set_attack(layout.landing_pad_addr, {})
        self.train_iters = 32
        self.flush_target = False

    def _put(self, word: int, value: int) -> None:
        self.ctx.put_u64(word * 8, value)

    def _set_block(self, start: int, target: int, regs: dict[str, int]) -> None:
        unknown = set(regs) - set(REG_ORDER)
        if unknown:
            raise ValueError(f"unsupported registers {sorted(unknown)}")
        self._put(start, target)
        for i, r in enumerate(REG_ORDER, start=1):
            self._put(start + i, regs.get(r, 0))

    def set_train(self, target: int, regs: dict[str, int]) -> None:
        self._set_block(_CTX_TRAIN, target, regs)

    def set_attack(self, target: int, regs: dict[str, int]) -> None:
        self._set_block(_CTX_ATTACK, target, regs)

    @property
    def train_iters(self) -> int:
        return self.ctx.get_u64(_CTX_ITERS * 8)

    @train_iters.setter
    def train_iters(self, n: int) -> None:
        if n < 0:
            raise ValueError("train_iters must be >= 0")
        self._put(_CTX_ITERS, n)

    @property
    def flush_target(self) -> bool:
        return bool(self.ctx.get_u64(_CTX_FLUSH * 8))

    @flush_target.setter
    def flush_target(self, on: bool) -> None:
        self._put(_CTX_FLUSH, int(bool(on)))

    def run(self) -> None:
        self._fn(self.ctx.addr)


# -- workload loop bodies -------------------------------------------------

BRANCHES_PER_ITERATION = 64


@dataclass
class WorkloadBody:
    """A native loop ``void body(int64 *stop, uint64 *counter)``."""

    kind: WorkloadKind
    code: CodeRegion = field(repr=False)
    func: object = field(repr=False)
    branches_per_iteration: int

    @property
    def span(self) -> tuple[int, int]:
        return self.code.span


@dataclass(frozen=True)
class HostCallLoop:
    """Marker: the workload is a host-side loop around a libc call."""

    kind: WorkloadKind
    function: str = "nanosleep"
    branches_per_iteration: int = 0


def _xorshift(a: Assembler, state: str, tmp: str) -> None:
    a.mov(tmp, state)
    a.shl(tmp, 13)
    a.xor(state, tmp)
    a.mov(tmp, state)
    a.shr(tmp, 7)
    a.xor(state, tmp)
    a.mov(tmp, state)
    a.shl(tmp, 17)
    a.xor(state, tmp)


def _loop_tail(a: Assembler) -> None:
    a.inc(mem("rsi"))
    a.cmp_mem_imm(mem("rdi"), 0)
    a.jcc("e", "top")
    a.ret()


def workload_assembler(kind: WorkloadKind, seed: int = 0x9E3779B97F4A7C15,
                       code_segment: int = 0x33) -> Assembler:
    """Assembler holding the loop for ``kind`` (labels unresolved)."""
    n = BRANCHES_PER_ITERATION
    a = Assembler()
    seed = seed or 1
    if kind in (WorkloadKind.JCC_MISPREDICTED, WorkloadKind.INDIRECT_JMP_MISPREDICTED):
        a.mov("r8", seed)
    a.label("top")
    if kind is WorkloadKind.DIRECT_JMP:
        for i in range(n):
            a.jmp(f"b{i}", short=True)
            a.nop()
            a.label(f"b{i}")
    elif kind is WorkloadKind.JCC_PREDICTED:
        a.xor("eax", "eax")  # ZF=1: every jz below is taken
        for i in range(n):
            a.jcc("z", f"b{i}", short=True)
            a.nop()
            a.label(f"b{i}")
    elif kind is WorkloadKind.JCC_MISPREDICTED:
        _xorshift(a, "r8", "rax")
        a.mov("rdx", "r8")
        for i in range(n):
            a.shr("rdx", 1)
            a.jcc("c", f"b{i}", short=True)
            a.nop()
            a.label(f"b{i}")
    elif kind is WorkloadKind.INDIRECT_JMP_PREDICTED:
        for i in range(n):
            a.lea("rax", rip(f"b{i}"))
            a.jmp_reg("rax")
            a.label(f"b{i}")
    elif kind is WorkloadKind.INDIRECT_JMP_MISPREDICTED:
        a.mov("r9d", n)
        a.label("dispatch")
        _xorshift(a, "r8", "rax")
        a.mov("ecx", "r8d")
        a.and_("ecx", 15)
        a.lea("rax", rip("table"))
        a.jmp_mem(mem("rax", "rcx", 8))
        for t in range(16):
            a.align(16, 0xCC)
            a.label(f"t{t}")
            a.jmp("cont")
        a.label("cont")
        a.dec("r9d")
        a.jcc("nz", "dispatch")
    elif kind is WorkloadKind.FAR_JMP:
        for i in range(n):
            a.jmp_far_mem(rip(f"fp{i}"))
            a.label(f"b{i}")
    elif kind is WorkloadKind.XOR:
        pairs = [("rax", "rcx"), ("rdx", "r8"), ("r9", "r10"), ("r11", "rcx")]
        for i in range(n):
            a.xor(*pairs[i % len(pairs)])
    else:
        raise UnsupportedWorkload(str(kind))
    _loop_tail(a)

    if kind is WorkloadKind.INDIRECT_JMP_MISPREDICTED:
        a.align(8, 0xCC)
        a.label("table")
        for t in range(16):
            a.dq(f"t{t}")
    elif kind is WorkloadKind.FAR_JMP:
        for i in range(n):
            a.label(f"fp{i}")
            a.dd_abs(f"b{i}")
            a.dw(code_segment)
    return a


def encode_workload_body(kind, seed: int = 0x9E3779B97F4A7C15):
    """Build the executable loop for a workload kind.

    Returns a :class:`WorkloadBody`, or a :class:`HostCallLoop` marker for
    the nanosleep workload, which needs no generated code.
    """
    kind = WorkloadKind.parse(kind)
    if kind is WorkloadKind.NANOSLEEP:
        return HostCallLoop(kind)
    if kind is WorkloadKind.NONE:
        raise UnsupportedWorkload("the 'none' workload has no loop body")
    low32 = kind is WorkloadKind.FAR_JMP
    cs = read_code_segment() if low32 else 0x33
    a = workload_assembler(kind, seed, cs)
    code = CodeRegion(len(a.buf), low32=low32)
    code.write(0, a.assemble(base=code.addr))
    code.seal()
    func = code.function(0, None, ctypes.c_void_p, ctypes.c_void_p)
    return WorkloadBody(kind, code, func, BRANCHES_PER_ITERATION)


# -- small native helpers -------------------------------------------------

_helpers: dict[str, tuple] = {}


def _helper(name: str, build, restype, *argtypes):
    if name not in _helpers:
        a = Assembler()
        build(a)
        _helpers[name] = jit(a.assemble(), restype, *argtypes)
    return _helpers[name][1]


def read_code_segment() -> int:
    def build(a):
        a.mov_from_cs("eax")
        a.ret()
    return _helper("read_cs", build, ctypes.c_uint32)() & 0xFFFF


def cpuid(leaf: int, subleaf: int = 0) -> tuple[int, int, int, int]:
    """Execute CPUID; returns ``(eax, ebx, ecx, edx)``."""
    def build(a):
        a.push("rbx")
        a.mov("eax", "edi")
        a.mov("ecx", "esi")
        a.mov("r8", "rdx")
        a.cpuid()
        a.mov(mem("r8"), "eax")
        a.mov(mem("r8", disp=4), "ebx")
        a.mov(mem("r8", disp=8), "ecx")
        a.mov(mem("r8", disp=12), "edx")
        a.pop("rbx")
        a.ret()
    fn = _helper("cpuid", build, None, ctypes.c_uint32, ctypes.c_uint32, ctypes.c_void_p)
    out = (ctypes.c_uint32 * 4)()
    fn(leaf, subleaf, ctypes.addressof(out))
    return tuple(out)


# -- golden fixtures ------------------------------------------------------

def load_golden() -> dict:
    """Reference-assembled bytes shipped with the package, keyed
    ``"<gadget>/<fence>/<spacers>"``."""
    import json
    from importlib import resources

    text = resources.files("specwin").joinpath("data/golden_victims.json").read_text()
    return json.loads(text)["cases"]


def check_golden(golden: dict | None = None) -> list[str]:
    """Keys whose generated bytes differ from the golden fixture."""
    golden = golden if golden is not None else load_golden()
    bad = []
    for key, want in sorted(golden.items()):
        gadget, fence, n = key.split("/")
        img = victim_image(gadget, fence, int(n))
        if any(img[s].hex() != want[s] for s in ("victim", "gadget", "landing_pad")):
            bad.append(key)
    return bad
