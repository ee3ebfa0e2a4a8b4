import os

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specwin.errors import InvalidCpu, TopologyUnavailable
from specwin.topology import (CpuTopology, detect_topology, parse_cpu_list,
                              pin_current_thread, write_fixture)


def _write_raw(root, lists):
    for cpu, text in lists.items():
        d = root / "sys/devices/system/cpu" / f"cpu{cpu}" / "topology"
        d.mkdir(parents=True, exist_ok=True)
        (d / "thread_siblings_list").write_text(text)


def test_parse_cpu_list_forms():
    assert parse_cpu_list("0,4\n") == [0, 4]
    assert parse_cpu_list("4,0") == [0, 4]
    assert parse_cpu_list("0-3") == [0, 1, 2, 3]
    assert parse_cpu_list("0-1,8-9") == [0, 1, 8, 9]
    for bad in ("", "a", "3-1"):
        with pytest.raises(ValueError):
            parse_cpu_list(bad)


def test_comma_pair_in_either_order(tmp_path):
    _write_raw(tmp_path, {0: "0,4\n", 4: "4,0\n"})
    topo = detect_topology(tmp_path)
    assert topo.cores == {0: [0, 4]}
    assert topo.smt_enabled
    assert topo.sibling_of(0) == 4 and topo.sibling_of(4) == 0


def test_single_thread_cores(tmp_path):
    write_fixture(tmp_path, [[0], [1], [2], [3]])
    topo = detect_topology(tmp_path)
    assert len(topo.cores) == 4
    assert not topo.smt_enabled
    assert topo.sibling_of(2) is None


def test_two_thread_cores(tmp_path):
    write_fixture(tmp_path, [[i, i + 8] for i in range(8)])
    topo = detect_topology(tmp_path)
    assert len(topo.cores) == 8
    assert topo.logical_ids == list(range(16))
    assert topo.smt_enabled


def test_mixed_hybrid_layout(tmp_path):
    # P-cores with two threads each, E-cores with one
    write_fixture(tmp_path, [[0, 1], [2, 3], [4], [5], [6], [7]])
    topo = detect_topology(tmp_path)
    assert topo.smt_enabled
    assert topo.siblings(0) == [1]
    assert topo.siblings(5) == []
    assert topo.are_siblings(2, 3) and not topo.are_siblings(3, 4)


def test_range_syntax_written_and_read(tmp_path):
    write_fixture(tmp_path, [[0, 1]])
    text = (tmp_path / "sys/devices/system/cpu/cpu0/topology/thread_siblings_list").read_text()
    assert text.strip() == "0-1"
    assert detect_topology(tmp_path).cores == {0: [0, 1]}


def test_sysroot_env(sysroot):
    write_fixture(sysroot, [[0, 2], [1, 3]])
    assert detect_topology().cores == {0: [0, 2], 1: [1, 3]}


def test_offline_cpu_without_topology_is_skipped(tmp_path):
    write_fixture(tmp_path, [[0], [1]])
    (tmp_path / "sys/devices/system/cpu/cpu7").mkdir()
    assert detect_topology(tmp_path).logical_ids == [0, 1]


@pytest.mark.parametrize("lists", [
    {},
    {0: "zero\n"},
    {0: "0,1\n", 1: "1\n"},  # asymmetric
    {0: "1\n", 1: "1\n"},  # cpu0 missing from its own list
])
def test_unusable_trees(tmp_path, lists):
    (tmp_path / "sys/devices/system/cpu").mkdir(parents=True)
    _write_raw(tmp_path, lists)
    with pytest.raises(TopologyUnavailable):
        detect_topology(tmp_path)


def test_missing_interface(tmp_path):
    with pytest.raises(TopologyUnavailable):
        detect_topology(tmp_path / "nowhere")


def test_invariants_rejected():
    with pytest.raises(ValueError):
        CpuTopology(logical_ids=[0, 1], cores={0: [0, 1], 1: [1]})
    with pytest.raises(ValueError):
        CpuTopology(logical_ids=[0, 1, 2], cores={0: [0, 1]})


@st.composite
def layouts(draw):
    """Random partitions of a shuffled id set into cores of 1..4 threads."""
    n = draw(st.integers(1, 24))
    ids = draw(st.permutations(list(range(n))))
    cores, i = [], 0
    while i < n:
        k = draw(st.integers(1, 4))
        cores.append(sorted(ids[i:i + k]))
        i += k
    return cores


@settings(max_examples=60, deadline=None)
@given(layouts())
def test_fixture_round_trip_and_symmetry(tmp_path_factory, cores):
    root = tmp_path_factory.mktemp("topo")
    write_fixture(root, cores)
    topo = detect_topology(root)
    assert sorted(map(sorted, topo.cores.values())) == sorted(cores)
    assert topo.smt_enabled == any(len(c) >= 2 for c in cores)
    seen = [c for ids in topo.cores.values() for c in ids]
    assert sorted(seen) == sorted(set(seen)) == topo.logical_ids
    for cpu in topo.logical_ids:
        for sib in topo.siblings(cpu):
            assert cpu in topo.siblings(sib)
        b = topo.sibling_of(cpu)
        if b is not None and len(topo.cores[topo.core_of(cpu)]) == 2:
            assert topo.sibling_of(b) == cpu
    # pure function of the files
    assert detect_topology(root) == topo


def test_pin_to_current_cpu_and_back():
    saved = os.sched_getaffinity(0)
    cpu = min(saved)
    try:
        assert pin_current_thread(cpu) == {cpu}
        assert os.sched_getaffinity(0) == {cpu}
    finally:
        os.sched_setaffinity(0, saved)


def test_pin_unknown_cpu(fake_smt):
    with pytest.raises(InvalidCpu):
        pin_current_thread(4096)
    with pytest.raises(InvalidCpu):
        pin_current_thread(7, fake_smt)


def test_pin_sibling_pair_when_available():
    import threading

    topo = detect_topology()
    pair = next((ids for ids in topo.cores.values() if len(ids) >= 2), None)
    if pair is None:
        pytest.skip("no SMT sibling pair on this machine")
    allowed = os.sched_getaffinity(0)
    if not set(pair[:2]) <= allowed:
        pytest.skip("sibling pair outside this process's affinity")
    got = {}

    def worker(cpu):
        got[cpu] = pin_current_thread(cpu, topo)

    threads = [threading.Thread(target=worker, args=(c,)) for c in pair[:2]]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert got == {pair[0]: {pair[0]}, pair[1]: {pair[1]}}
    assert topo.are_siblings(pair[0], pair[1])
