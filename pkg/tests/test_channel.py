import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from specwin.channel import (SLOTS, ChannelCalibration, ProbeArray, ProbeMode, calibrate,
                             classify, flush_all, probe, qualify_order, self_test)
from specwin.errors import DistributionsOverlap


def fake_sampler(hit=40.0, miss=200.0, sd=2.0, seed=1):
    rng = np.random.default_rng(seed)

    def sample(n):
        return rng.normal(hit, sd, n), rng.normal(miss, sd, n)

    return sample


def fake_calib(threshold=120.0):
    return ChannelCalibration(hit_mean=40, miss_mean=200, hit_p99=45, miss_p1=195,
                              threshold=threshold, samples=1000)


def test_threshold_from_fake_sampler():
    c = calibrate(sampler=fake_sampler(), samples=2000)
    assert c.threshold == pytest.approx(120, abs=1)
    assert c.hit_p99 < c.threshold < c.miss_p1
    assert c.samples == 2000


def test_overlap_rejected():
    with pytest.raises(DistributionsOverlap):
        calibrate(sampler=fake_sampler(hit=100, miss=110, sd=10), samples=1000)


def test_too_few_samples():
    with pytest.raises(ValueError):
        calibrate(sampler=fake_sampler(), samples=999)
    with pytest.raises(ValueError):
        ChannelCalibration(hit_mean=1, miss_mean=3, hit_p99=1, miss_p1=3, threshold=2, samples=10)


def test_threshold_must_sit_between_means():
    with pytest.raises(ValueError):
        fake_calib(threshold=300)


@settings(max_examples=50, deadline=None)
@given(st.floats(10, 150), st.floats(20, 400), st.floats(0.1, 3), st.integers(0, 2**32))
def test_calibration_invariants(hit, gap, sd, seed):
    # separated by at least 6 sd, so the tails never cross
    miss = hit + gap
    c = calibrate(sampler=fake_sampler(hit, miss, sd, seed), samples=1000)
    assert c.hit_mean < c.threshold < c.miss_mean
    assert c.hit_p99 < c.threshold < c.miss_p1
    assert c.threshold == pytest.approx((c.hit_p99 + c.miss_p1) / 2)


def test_calibration_json_round_trip():
    c = calibrate(sampler=fake_sampler(), samples=1000, seed=9)
    d = json.loads(c.to_json())
    assert set(d) == {"hit_mean", "miss_mean", "hit_p99", "miss_p1", "threshold",
                      "samples", "seed"}
    assert ChannelCalibration.from_dict(d) == c


def test_classify_modes():
    times = np.full(SLOTS, 200, dtype=np.uint64)
    times[7] = 40
    c = fake_calib()
    assert classify(times, c, ProbeMode.NORMAL) == {7}
    times = np.full(SLOTS, 40, dtype=np.uint64)
    times[[3, 9]] = 250
    assert classify(times, c, ProbeMode.INVERTED) == {3, 9}


@settings(max_examples=50)
@given(st.sets(st.integers(0, SLOTS - 1)))
def test_classify_partitions_slots(hot):
    times = np.full(SLOTS, 200, dtype=np.uint64)
    times[list(hot)] = 40
    c = fake_calib()
    hits = classify(times, c, ProbeMode.NORMAL)
    misses = classify(times, c, ProbeMode.INVERTED)
    assert hits == hot
    assert hits | misses == set(range(SLOTS)) and not hits & misses


# -- on the real cache ---------------------------------------------------------

@pytest.fixture(scope="module")
def real():
    arr = ProbeArray(seed=0)
    calib = calibrate(arr, samples=2000)
    qualify_order(arr, calib)
    return arr, calib


@pytest.mark.hardware
def test_array_geometry(real):
    arr, _ = real
    assert arr.slots == 256 and arr.stride == 4096
    assert arr.base % 4096 == 0
    assert sorted(arr.order) == list(range(256))
    assert arr.contains(arr.slot_addr(255)) and not arr.contains(arr.base + 256 * 4096)


@pytest.mark.hardware
def test_real_calibration_separates(real):
    _, calib = real
    assert calib.hit_mean < calib.threshold < calib.miss_mean


@pytest.mark.hardware
def test_self_test_normal(real):
    arr, calib = real
    assert self_test(arr, calib, 1000) >= 0.99


@pytest.mark.hardware
def test_flushed_array_reports_nothing(real):
    arr, calib = real
    clean = 0
    for _ in range(500):
        flush_all(arr)
        clean += probe(arr, calib) == set()
    assert clean / 500 >= 0.99


@pytest.mark.hardware
def test_flush_is_idempotent(real):
    arr, calib = real
    arr.touch(12)
    flush_all(arr)
    flush_all(arr)
    assert probe(arr, calib) == set()


@pytest.mark.hardware
def test_touched_slot_is_seen(real):
    arr, calib = real
    seen = 0
    for _ in range(1000):
        flush_all(arr)
        arr.touch(7)
        seen += probe(arr, calib) == {7}
    assert seen / 1000 >= 0.99


@pytest.mark.hardware
def test_inverted_self_test(real):
    _, calib = real
    arr = ProbeArray(ProbeMode.INVERTED, seed=0)
    qualify_order(arr, calib)
    assert self_test(arr, calib, 1000) >= 0.95


@pytest.mark.hardware
def test_qualified_order_is_recorded(real):
    _, calib = real
    arr = ProbeArray(seed=5)
    chosen = qualify_order(arr, calib)
    assert chosen >= 5
    assert arr.seed == chosen
    assert list(arr.order) == list(np.random.default_rng(chosen).permutation(256))
    assert arr.mode is ProbeMode.NORMAL
