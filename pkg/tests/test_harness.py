import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import specwin.harness as harness
from specwin.channel import ProbeMode, classify
from specwin.errors import SmtDisabled, SpecwinError
from specwin.harness import (BEST_WORKLOAD, Cell, ExperimentConfig, ExperimentResult, Session,
                             best_workload, control_config, expected_slot, failed_result,
                             probe_mode, recover_secret, resolve_cpus, run_experiment,
                             run_trials)
from specwin.kinds import FenceMode, GadgetKind, SpacerKind, WorkloadKind

configs = st.builds(
    ExperimentConfig,
    gadget=st.sampled_from([g for g in GadgetKind if g is not GadgetKind.COMPLEX_LOAD]),
    fence=st.sampled_from(list(FenceMode)),
    spacer_nops=st.integers(0, 64),
    workload=st.sampled_from(list(WorkloadKind)),
    trials=st.integers(100, 10**6),
    train_iters=st.integers(0, 1000),
    experiment_cpu=st.none() | st.integers(0, 255),
    sibling_cpu=st.none() | st.integers(0, 255),
    secret=st.integers(0, 2**64 - 1),
    noise_floor=st.floats(0.005, 0.5),
    seed=st.integers(0, 2**64 - 1),
    spacer_kind=st.sampled_from(list(SpacerKind)),
    control=st.booleans(),
)


@settings(max_examples=100)
@given(configs)
def test_config_round_trip(cfg):
    d = json.loads(json.dumps(cfg.to_dict()))
    assert ExperimentConfig.from_dict(d) == cfg
    assert cfg.replace() == cfg


def test_config_defaults_and_validation():
    c = ExperimentConfig()
    assert (c.trials, c.noise_floor, c.workload) == (1000, 0.01, WorkloadKind.NONE)
    with pytest.raises(ValueError):
        ExperimentConfig(trials=99)
    with pytest.raises(ValueError):
        ExperimentConfig(noise_floor=0.001)
    with pytest.raises(ValueError):
        ExperimentConfig(train_iters=-1)
    with pytest.raises(ValueError):
        ExperimentConfig(gadget="nonsense")
    with pytest.raises(ValueError):
        ExperimentConfig(gadget="complex", secret=256 * 512)


@settings(max_examples=50)
@given(configs, st.integers(0, 10**6), st.data())
def test_result_round_trip_and_signal(cfg, trials, data):
    trials = max(trials, 1)
    hits = data.draw(st.integers(0, trials))
    r = ExperimentResult(config=cfg, hits=hits, trials=trials, success_rate=hits / trials,
                         false_positive_slots={3: 2, 200: 1}, timestamp="t")
    d = json.loads(r.to_json())
    assert d["signal"] == (hits / trials > cfg.noise_floor)
    assert ExperimentResult.from_dict(d) == r


def test_result_rate_bounds():
    with pytest.raises(ValueError):
        ExperimentResult(config=ExperimentConfig(), hits=2, trials=1, success_rate=2.0)


def test_failed_result_is_never_signal():
    r = failed_result(ExperimentConfig(), SmtDisabled("SMT is off"))
    assert r.error == "SMT is off" and not r.signal and r.trials == 0


# -- success rule ------------------------------------------------------------

@pytest.mark.parametrize("byte", range(256))
def test_complex_slot_oracle(byte):
    assert expected_slot(GadgetKind.COMPLEX_LOAD, byte) == byte * 8 // 4096 == 0


def test_complex_slot_high_bits():
    assert expected_slot(GadgetKind.COMPLEX_LOAD, 0x1000) == 8
    assert expected_slot(GadgetKind.COMPLEX_LOAD, 255 * 512) == 255
    with pytest.raises(ValueError):
        expected_slot(GadgetKind.COMPLEX_LOAD, 256 * 512)


@given(st.integers(0, 2**64 - 1))
def test_byte_gadgets_use_low_byte(secret):
    for g in (GadgetKind.LOAD_SHIFT_LOAD, GadgetKind.THREE_LOAD_MASKED, GadgetKind.LOAD_ONCE):
        assert expected_slot(g, secret) == secret & 0xFF


def test_three_load_masks():
    assert expected_slot(GadgetKind.THREE_LOAD_MASKED, 0x1FF) == 0xFF


def test_probe_modes():
    assert probe_mode(GadgetKind.FLUSH) is ProbeMode.INVERTED
    assert all(probe_mode(g) is ProbeMode.NORMAL for g in GadgetKind if g is not GadgetKind.FLUSH)


# -- orchestration without hardware -------------------------------------------

def test_trial_fn_injection():
    cfg = ExperimentConfig(trials=200)
    r = run_experiment(cfg, lambda c, i: i % 4 == 0)
    assert (r.hits, r.trials, r.success_rate) == (50, 200, 0.25)
    assert r.signal


def test_control_config():
    c = control_config(ExperimentConfig(gadget="minimal"))
    assert c.control and c.gadget is GadgetKind.MINIMAL_LOAD


class _FakeCell:
    def __init__(self, seen):
        self.seen = seen

    def observe(self):
        return set(self.seen)


def test_migrated_trials_are_discarded(monkeypatch):
    cpus = itertools.cycle([0, 0, 3])
    monkeypatch.setattr(harness, "current_cpu", lambda: next(cpus))
    hits, fps, discarded, obs = run_trials(_FakeCell({5, 9}), 100, 5, 0)
    assert hits == 100 and len(obs) == 100
    # pattern keep, keep, migrate: the loop ends on the 100th keep
    assert discarded == 49
    assert fps == {9: 100}


def test_endless_migration_gives_up(monkeypatch):
    monkeypatch.setattr(harness, "current_cpu", lambda: 1)
    with pytest.raises(SpecwinError):
        run_trials(_FakeCell(set()), 100, 5, 0)


def test_resolve_cpus(no_smt, fake_smt):
    assert resolve_cpus(ExperimentConfig(experiment_cpu=2), no_smt) == (2, None)
    with pytest.raises(SmtDisabled):
        resolve_cpus(ExperimentConfig(workload="xor"), no_smt)
    assert resolve_cpus(ExperimentConfig(workload="xor"), fake_smt) == (0, 1)
    assert resolve_cpus(ExperimentConfig(workload="xor", experiment_cpu=1), fake_smt) == (1, 0)
    assert resolve_cpus(ExperimentConfig(workload="xor", sibling_cpu=0), fake_smt) == (1, 0)


def test_workload_needs_smt(no_smt):
    with pytest.raises(SmtDisabled):
        run_experiment(ExperimentConfig(workload="ijmp-p"), topology=no_smt)


def test_best_workload():
    assert best_workload("Golden Cove") is WorkloadKind.INDIRECT_JMP_PREDICTED
    assert best_workload("Zen 2") is WorkloadKind.JCC_MISPREDICTED
    assert best_workload("Zen 3") is WorkloadKind.NANOSLEEP
    assert best_workload("Zen+") is WorkloadKind.XOR
    assert best_workload("Tremont") is None
    assert best_workload(None) is WorkloadKind.INDIRECT_JMP_PREDICTED
    assert set(BEST_WORKLOAD.values()) <= set(WorkloadKind)


# -- on hardware ---------------------------------------------------------------

@pytest.fixture(scope="module")
def sess():
    return Session(seed=0)


@pytest.mark.hardware
def test_no_fence_lsl_leaks(sess):
    r = run_experiment(ExperimentConfig(fence="none", trials=500), sess=sess)
    assert r.success_rate >= 0.9
    assert r.config.experiment_cpu is not None
    assert r.calibration["threshold"] == sess.calibration.threshold
    assert r.probe_seed == sess.array(ProbeMode.NORMAL).seed


@pytest.mark.hardware
@pytest.mark.parametrize("gadget", ["lsl", "minimal", "load-once"])
def test_control_cell_stays_quiet(sess, gadget):
    cfg = control_config(ExperimentConfig(gadget=gadget, fence="none", trials=500))
    assert run_experiment(cfg, sess=sess).success_rate <= cfg.noise_floor


@pytest.mark.hardware
def test_training_never_touches_real_array(sess):
    cell = Cell(ExperimentConfig(fence="none", trials=100), sess)
    # attack with the training inputs too: only the dummy array is ever addressed
    cell.driver.set_attack(cell.layout.landing_pad_addr,
                           cell.fake.registers(cell.config.gadget, 0, cell.dummy.base))
    clean = 0
    for _ in range(300):
        cell.array.reset()
        cell.driver.run()
        clean += classify(cell.array.reload_times(), cell.calib, cell.mode) == set()
    assert clean / 300 >= 0.99


@pytest.mark.hardware
def test_rate_independent_of_probe_seed():
    cfg = ExperimentConfig(fence="none", trials=1000)
    a = run_experiment(cfg, sess=Session(seed=0)).success_rate
    b = run_experiment(cfg, sess=Session(seed=1)).success_rate
    assert abs(a - b) <= 0.02


@pytest.mark.hardware
def test_recover_secret_no_fence(sess):
    secret = np.random.default_rng(3).bytes(8)
    guesses, r = recover_secret(secret, ExperimentConfig(fence="none"), 100, sess=sess)
    assert bytes(guesses) == secret
    assert r.recovered_secret == r.planted_secret == secret.hex()
    assert r.trials == 800
