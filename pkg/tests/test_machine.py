import pytest

from specwin.machine import (INTEL_TABLE_PARTS, MICROARCHITECTURES, flush_supported, identify,
                             machine_metadata, read_cpuinfo)

CPUINFO = """processor\t: 0
vendor_id\t: AuthenticAMD
cpu family\t: 23
model\t\t: 113
model name\t: AMD Ryzen 7 3700X 8-Core Processor
stepping\t: 0
flags\t\t: fpu vme sse2 clflush ht

processor\t: 1
vendor_id\t: GenuineIntel
cpu family\t: 6
model\t\t: 1
"""


@pytest.mark.parametrize("sig, name", [
    (("GenuineIntel", 6, 0x7A), "Goldmont Plus"),
    (("GenuineIntel", 6, 0x96), "Tremont"),
    (("GenuineIntel", 6, 0x7E), "Sunny Cove"),
    (("GenuineIntel", 6, 0x8C), "Willow Cove"),
    (("GenuineIntel", 6, 0x8F), "Golden Cove"),
    (("AuthenticAMD", 0x17, 0x01), "Zen"),
    (("AuthenticAMD", 0x17, 0x08), "Zen+"),
    (("AuthenticAMD", 0x17, 0x71), "Zen 2"),
    (("AuthenticAMD", 0x19, 0x21), "Zen 3"),
    (("AuthenticAMD", 0x19, 0x61), None),
    (("GenuineIntel", 6, 0xCF), None),
    (("CentaurHauls", 6, 0x0F), None),
])
def test_identify(sig, name):
    assert identify(*sig) == name


def test_hybrid_parts_resolve_by_core_type():
    assert identify("GenuineIntel", 6, 0x97, 0x40) == "Golden Cove"
    assert identify("GenuineIntel", 6, 0x9A, 0x20) == "Gracemont"
    assert identify("GenuineIntel", 6, 0x97) is None


def test_table_part_lists():
    assert len(MICROARCHITECTURES) == 10
    assert INTEL_TABLE_PARTS == ["Goldmont Plus", "Tremont", "Sunny Cove", "Willow Cove",
                                 "Golden Cove", "Gracemont"]


def test_read_cpuinfo_first_block():
    info = read_cpuinfo(CPUINFO)
    assert (info.vendor, info.family, info.model) == ("AuthenticAMD", 23, 113)
    assert info.model_name.startswith("AMD Ryzen")
    assert "clflush" in info.flags


def test_sysroot_cpuinfo(sysroot):
    assert read_cpuinfo().vendor == ""
    assert not flush_supported()
    (sysroot / "proc").mkdir()
    (sysroot / "proc/cpuinfo").write_text(CPUINFO)
    assert read_cpuinfo().model == 113
    meta = machine_metadata()
    assert meta["microarchitecture"] == "Zen 2"
    assert meta["smt_enabled"] is None and meta["calibration"] is None
