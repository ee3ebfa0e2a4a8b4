"""Page-granular memory regions for generated code and experiment data."""

from __future__ import annotations

import ctypes
import ctypes.util
import mmap

from .errors import AllocFailed

PAGE = mmap.PAGESIZE

PROT_NONE = 0
PROT_READ = mmap.PROT_READ
PROT_WRITE = mmap.PROT_WRITE
PROT_EXEC = mmap.PROT_EXEC

MAP_PRIVATE = 0x02
MAP_ANONYMOUS = 0x20
MAP_32BIT = 0x40

_libc = ctypes.CDLL(ctypes.util.find_library("c") or "libc.so.6", use_errno=True)
_libc.mmap.restype = ctypes.c_void_p
_libc.mmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int,
                       ctypes.c_int, ctypes.c_int, ctypes.c_long]
_libc.munmap.argtypes = [ctypes.c_void_p, ctypes.c_size_t]
_libc.mprotect.argtypes = [ctypes.c_void_p, ctypes.c_size_t, ctypes.c_int]
_MAP_FAILED = ctypes.c_void_p(-1).value


def libc() -> ctypes.CDLL:
    return _libc


def round_up(n: int, to: int = PAGE) -> int:
    return (n + to - 1) // to * to


class Region:
    """An anonymous mapping, optionally bracketed by PROT_NONE guard pages.

    ``addr`` and ``size`` describe the usable part; guards are not counted.
    """

    def __init__(self, size: int, prot: int = PROT_READ | PROT_WRITE,
                 guard: bool = True, low32: bool = False):
        self.size = round_up(max(size, 1))
        self._guard = PAGE if guard else 0
        self._total = self.size + 2 * self._guard
        flags = MAP_PRIVATE | MAP_ANONYMOUS | (MAP_32BIT if low32 else 0)
        p = _libc.mmap(None, self._total, PROT_READ | PROT_WRITE, flags, -1, 0)
        if p is None or p == _MAP_FAILED:
            raise AllocFailed(f"mmap({self._total}) failed: errno {ctypes.get_errno()}")
        self._map = p
        self.addr = p + self._guard
        if guard:
            self._protect(p, PAGE, PROT_NONE)
            self._protect(self.addr + self.size, PAGE, PROT_NONE)
        self.prot = PROT_READ | PROT_WRITE
        if prot != self.prot:
            self.protect(prot)

    @staticmethod
    def _protect(addr: int, size: int, prot: int) -> None:
        if _libc.mprotect(addr, size, prot) != 0:
            raise AllocFailed(f"mprotect({addr:#x}, {size}, {prot}) failed: errno {ctypes.get_errno()}")

    def protect(self, prot: int) -> None:
        self._protect(self.addr, self.size, prot)
        self.prot = prot

    def contains(self, addr: int) -> bool:
        return self.addr <= addr < self.addr + self.size

    @property
    def span(self) -> tuple[int, int]:
        """Full mapped range including guard pages, as ``[start, end)``."""
        return self._map, self._map + self._total

    def write(self, offset: int, data: bytes) -> None:
        if offset < 0 or offset + len(data) > self.size:
            raise IndexError(f"write of {len(data)} bytes at {offset:#x} outside region")
        if not self.prot & PROT_WRITE:
            raise PermissionError("region is read-only")
        ctypes.memmove(self.addr + offset, data, len(data))

    def read(self, offset: int, n: int) -> bytes:
        if offset < 0 or offset + n > self.size:
            raise IndexError(f"read of {n} bytes at {offset:#x} outside region")
        return ctypes.string_at(self.addr + offset, n)

    def u64(self, offset: int) -> ctypes.c_uint64:
        return ctypes.c_uint64.from_address(self.addr + offset)

    def put_u64(self, offset: int, value: int) -> None:
        self.u64(offset).value = value & (2**64 - 1)

    def get_u64(self, offset: int) -> int:
        return self.u64(offset).value

    def close(self) -> None:
        if self._map is not None:
            _libc.munmap(self._map, self._total)
            self._map = None

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


class CodeRegion(Region):
    """Executable region: written once, then sealed read+exec."""

    def __init__(self, size: int, guard: bool = True, low32: bool = False):
        super().__init__(size, PROT_READ | PROT_WRITE, guard, low32)

    def seal(self) -> None:
        self.protect(PROT_READ | PROT_EXEC)

    def function(self, offset: int, restype=None, *argtypes):
        return ctypes.CFUNCTYPE(restype, *argtypes)(self.addr + offset)


def jit(code: bytes, restype=None, *argtypes, low32: bool = False):
    """Load ``code`` into a fresh sealed region; returns ``(region, callable)``.

    The caller must keep the region alive for as long as the callable is used.
    """
    region = CodeRegion(len(code), low32=low32)
    region.write(0, code)
    region.seal()
    return region, region.function(0, restype, *argtypes)
