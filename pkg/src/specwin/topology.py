"""Logical processor discovery and thread pinning.

Topology comes from the per-CPU ``thread_siblings_list`` files under
``/sys/devices/system/cpu``.  Setting ``SPECWIN_SYSROOT`` re-roots every
path lookup, which is how the tests feed synthetic sibling trees.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field
from pathlib import Path

from .errors import InvalidCpu, PinFailed, TopologyUnavailable

SYSROOT_ENV = "SPECWIN_SYSROOT"

_CPU_DIR = re.compile(r"^cpu(\d+)$")


def sysroot() -> Path:
    return Path(os.environ.get(SYSROOT_ENV) or "/")


def parse_cpu_list(text: str) -> list[int]:
    """Parse the kernel's cpulist syntax (``"0,4"``, ``"0-3,8-11"``)."""
    out: set[int] = set()
    text = text.strip()
    if not text:
        raise ValueError("empty cpu list")
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            lo_i, hi_i = int(lo), int(hi)
            if hi_i < lo_i:
                raise ValueError(f"bad range {part!r}")
            out.update(range(lo_i, hi_i + 1))
        else:
            out.add(int(part))
    return sorted(out)


@dataclass(frozen=True)
class CpuTopology:
    logical_ids: list[int]
    cores: dict[int, list[int]]
    smt_enabled: bool = field(init=False)

    def __post_init__(self):
        seen: dict[int, int] = {}
        for core, ids in self.cores.items():
            for cpu in ids:
                if cpu in seen:
                    raise ValueError(f"cpu {cpu} listed in cores {seen[cpu]} and {core}")
                seen[cpu] = core
        if sorted(seen) != sorted(self.logical_ids):
            raise ValueError("logical_ids and cores disagree")
        object.__setattr__(self, "smt_enabled", any(len(v) >= 2 for v in self.cores.values()))

    def core_of(self, cpu: int) -> int:
        for core, ids in self.cores.items():
            if cpu in ids:
                return core
        raise InvalidCpu(f"cpu {cpu} not in topology {self.logical_ids}")

    def siblings(self, cpu: int) -> list[int]:
        """Other logical processors sharing ``cpu``'s core."""
        return [c for c in self.cores[self.core_of(cpu)] if c != cpu]

    def sibling_of(self, cpu: int) -> int | None:
        sib = self.siblings(cpu)
        return sib[0] if sib else None

    def are_siblings(self, a: int, b: int) -> bool:
        return a != b and self.core_of(a) == self.core_of(b)

    def to_dict(self) -> dict:
        return {
            "logical_ids": list(self.logical_ids),
            "cores": {str(k): list(v) for k, v in self.cores.items()},
            "smt_enabled": self.smt_enabled,
        }


def detect_topology(root: str | os.PathLike | None = None) -> CpuTopology:
    """Read sibling lists for every online CPU under ``root`` (default: sysroot)."""
    base = Path(root) if root is not None else sysroot()
    cpu_dir = base / "sys" / "devices" / "system" / "cpu"
    if not cpu_dir.is_dir():
        raise TopologyUnavailable(f"{cpu_dir} does not exist")

    siblings: dict[int, list[int]] = {}
    for entry in cpu_dir.iterdir():
        m = _CPU_DIR.match(entry.name)
        if not m:
            continue
        path = entry / "topology" / "thread_siblings_list"
        if not path.is_file():
            # offline CPUs have no topology directory
            continue
        try:
            siblings[int(m.group(1))] = parse_cpu_list(path.read_text())
        except (OSError, ValueError) as exc:
            raise TopologyUnavailable(f"cannot parse {path}: {exc}") from exc

    if not siblings:
        raise TopologyUnavailable(f"no thread_siblings_list files under {cpu_dir}")

    groups: dict[tuple[int, ...], None] = {}
    for cpu, sibs in siblings.items():
        if cpu not in sibs:
            raise TopologyUnavailable(f"cpu{cpu} sibling list {sibs} omits itself")
        for other in sibs:
            if other in siblings and sorted(siblings[other]) != sibs:
                raise TopologyUnavailable(f"asymmetric sibling lists for cpu{cpu} and cpu{other}")
        groups[tuple(s for s in sibs if s in siblings)] = None

    ordered = sorted(groups, key=lambda g: g[0])
    cores = {i: list(g) for i, g in enumerate(ordered)}
    return CpuTopology(logical_ids=sorted(siblings), cores=cores)


def pin_current_thread(cpu: int, topology: CpuTopology | None = None) -> set[int]:
    """Restrict the calling thread to ``cpu``; returns the confirmed affinity set."""
    if topology is None:
        topology = detect_topology()
    if cpu not in topology.logical_ids:
        raise InvalidCpu(f"cpu {cpu} not in {topology.logical_ids}")
    try:
        os.sched_setaffinity(0, {cpu})
        got = os.sched_getaffinity(0)
    except OSError as exc:
        raise PinFailed(f"sched_setaffinity({cpu}) failed: {exc}") from exc
    if got != {cpu}:
        raise PinFailed(f"affinity is {sorted(got)} after pinning to {cpu}")
    return got


def thread_affinity(native_id: int | None = None) -> set[int]:
    """Affinity of a thread by native id (default: calling thread)."""
    return os.sched_getaffinity(native_id or 0)


def write_fixture(root: str | os.PathLike, cores: list[list[int]]) -> Path:
    """Materialise a sysfs-style sibling tree, one entry per core.

    Uses the range syntax for contiguous siblings so both formats get
    exercised by round-trip tests.
    """
    base = Path(root) / "sys" / "devices" / "system" / "cpu"
    for core in cores:
        text = _format_cpu_list(core)
        for cpu in core:
            d = base / f"cpu{cpu}" / "topology"
            d.mkdir(parents=True, exist_ok=True)
            (d / "thread_siblings_list").write_text(text + "\n")
    return Path(root)


def _format_cpu_list(ids: list[int]) -> str:
    ids = sorted(ids)
    if len(ids) > 1 and ids[-1] - ids[0] == len(ids) - 1:
        return f"{ids[0]}-{ids[-1]}"
    return ",".join(str(i) for i in ids)
