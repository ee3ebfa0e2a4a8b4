"""Host identification: cpuinfo parsing and microarchitecture naming."""

from __future__ import annotations

import platform
from dataclasses import dataclass, field

from .topology import sysroot

# (vendor, family, model) -> microarchitecture, for the parts the toolkit
# has reference results for.  Alder Lake is hybrid and resolved by core type.
_MODELS = {
    ("GenuineIntel", 6, 0x7A): "Goldmont Plus",
    ("GenuineIntel", 6, 0x86): "Tremont",
    ("GenuineIntel", 6, 0x8A): "Tremont",
    ("GenuineIntel", 6, 0x96): "Tremont",
    ("GenuineIntel", 6, 0x9C): "Tremont",
    ("GenuineIntel", 6, 0x7D): "Sunny Cove",
    ("GenuineIntel", 6, 0x7E): "Sunny Cove",
    ("GenuineIntel", 6, 0x6A): "Sunny Cove",
    ("GenuineIntel", 6, 0x6C): "Sunny Cove",
    ("GenuineIntel", 6, 0x8C): "Willow Cove",
    ("GenuineIntel", 6, 0x8D): "Willow Cove",
    ("GenuineIntel", 6, 0x8F): "Golden Cove",
    ("GenuineIntel", 6, 0xBE): "Gracemont",
}
_HYBRID = {("GenuineIntel", 6, 0x97), ("GenuineIntel", 6, 0x9A)}

MICROARCHITECTURES = [
    "Goldmont Plus", "Tremont", "Sunny Cove", "Willow Cove", "Golden Cove",
    "Gracemont", "Zen", "Zen+", "Zen 2", "Zen 3",
]
INTEL_TABLE_PARTS = MICROARCHITECTURES[:6]


def _amd_uarch(family: int, model: int) -> str | None:
    if family == 0x17:
        if model in (0x01, 0x11, 0x20):
            return "Zen"
        if model in (0x08, 0x18):
            return "Zen+"
        if model in (0x31, 0x47, 0x60, 0x68, 0x71, 0x84, 0x90, 0x98, 0xA0):
            return "Zen 2"
        return None
    if family == 0x19 and (model <= 0x0F or 0x20 <= model <= 0x5F):
        return "Zen 3"
    return None


def identify(vendor: str, family: int, model: int, hybrid_core_type: int | None = None) -> str | None:
    """Map a CPU signature to a microarchitecture name, or None if unknown.

    ``hybrid_core_type`` is CPUID leaf 0x1A EAX[31:24] on hybrid parts
    (0x40 = performance core, 0x20 = efficiency core).
    """
    key = (vendor, family, model)
    if key in _MODELS:
        return _MODELS[key]
    if key in _HYBRID:
        if hybrid_core_type == 0x40:
            return "Golden Cove"
        if hybrid_core_type == 0x20:
            return "Gracemont"
        return None
    if vendor in ("AuthenticAMD", "HygonGenuine"):
        return _amd_uarch(family, model)
    return None


@dataclass
class CpuInfo:
    vendor: str = ""
    family: int = 0
    model: int = 0
    stepping: int = 0
    model_name: str = ""
    flags: set[str] = field(default_factory=set)


def read_cpuinfo(text: str | None = None) -> CpuInfo:
    """Parse the first processor block of ``/proc/cpuinfo`` (under sysroot)."""
    if text is None:
        try:
            text = (sysroot() / "proc" / "cpuinfo").read_text()
        except OSError:
            return CpuInfo()
    info = CpuInfo()
    for line in text.splitlines():
        if not line.strip():
            if info.vendor:
                break
            continue
        key, _, value = line.partition(":")
        key, value = key.strip(), value.strip()
        if key == "vendor_id":
            info.vendor = value
        elif key == "cpu family":
            info.family = int(value)
        elif key == "model":
            info.model = int(value)
        elif key == "stepping":
            info.stepping = int(value) if value.isdigit() else 0
        elif key == "model name":
            info.model_name = value
        elif key == "flags":
            info.flags = set(value.split())
    return info


def is_x86_64() -> bool:
    return platform.machine().lower() in ("x86_64", "amd64")


def flush_supported() -> bool:
    return is_x86_64() and "clflush" in read_cpuinfo().flags


def microarchitecture(info: CpuInfo | None = None) -> str | None:
    info = info or read_cpuinfo()
    core_type = None
    if (info.vendor, info.family, info.model) in _HYBRID and flush_supported():
        from .codegen import cpuid
        core_type = cpuid(0x1A)[0] >> 24
    return identify(info.vendor, info.family, info.model, core_type)


def machine_metadata(calibration=None, topology=None) -> dict:
    from . import __version__

    info = read_cpuinfo()
    meta = {
        "toolkit_version": __version__,
        "microarchitecture": microarchitecture(info) or "unknown",
        "model_name": info.model_name,
        "vendor": info.vendor,
        "family": info.family,
        "model": info.model,
        "smt_enabled": topology.smt_enabled if topology is not None else None,
        "calibration": calibration.to_dict() if calibration is not None else None,
    }
    return meta
