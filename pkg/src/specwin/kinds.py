"""Enumerations shared across modules, keyed by their command-line names."""

from enum import Enum


class _Named(Enum):
    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for member in cls:
            if member.value == name or member.name.lower() == str(name).lower():
                return member
        choices = "|".join(m.value for m in cls)
        raise ValueError(f"unknown {cls.__name__} {name!r} (expected {choices})")

    def __str__(self):
        return self.value


class GadgetKind(_Named):
    LOAD_SHIFT_LOAD = "lsl"
    LOAD_ONCE = "load-once"
    MINIMAL_LOAD = "minimal"
    STORE = "store"
    PREFETCH = "prefetch"
    FLUSH = "flush"
    COMPLEX_LOAD = "complex"
    THREE_LOAD_MASKED = "three-load"


class FenceMode(_Named):
    NONE = "none"
    LFENCE = "lfence"


class SpacerKind(_Named):
    NOP = "nop"
    CBW = "cbw"


class WorkloadKind(_Named):
    NONE = "none"
    DIRECT_JMP = "djmp"
    JCC_PREDICTED = "jcc-p"
    JCC_MISPREDICTED = "jcc-m"
    INDIRECT_JMP_PREDICTED = "ijmp-p"
    INDIRECT_JMP_MISPREDICTED = "ijmp-m"
    FAR_JMP = "farjmp"
    XOR = "xor"
    NANOSLEEP = "nanosleep"
