"""SMT contention workloads run on a sibling logical processor."""

from __future__ import annotations

import ctypes
import threading
import time
from dataclasses import dataclass, field

from .codegen import HostCallLoop, WorkloadBody, encode_workload_body
from .errors import NotSibling, PinFailed, SmtDisabled, UnsupportedWorkload
from .kinds import WorkloadKind
from .memory import libc
from .topology import CpuTopology, detect_topology, pin_current_thread

STOP_TIMEOUT = 0.1


class _Timespec(ctypes.Structure):
    _fields_ = [("tv_sec", ctypes.c_long), ("tv_nsec", ctypes.c_long)]


@dataclass
class WorkloadHandle:
    cpu: int
    kind: WorkloadKind
    body: WorkloadBody | HostCallLoop = field(repr=False)
    stop_flag: ctypes.c_int64 = field(default_factory=ctypes.c_int64, repr=False)
    counter: ctypes.c_uint64 = field(default_factory=ctypes.c_uint64, repr=False)
    thread: threading.Thread | None = field(default=None, repr=False)
    started_at: float = 0.0
    stopped_at: float | None = None
    error: BaseException | None = None
    _final: int | None = field(default=None, repr=False)

    @property
    def iterations(self) -> int:
        return self._final if self._final is not None else self.counter.value

    @property
    def running(self) -> bool:
        return self.thread is not None and self.thread.is_alive()

    def density(self) -> float:
        """Loop iterations per second over the run so far."""
        end = self.stopped_at if self.stopped_at is not None else time.monotonic()
        elapsed = end - self.started_at
        return self.iterations / elapsed if elapsed > 0 else 0.0

    def metadata(self) -> dict:
        return {
            "kind": self.kind.value,
            "cpu": self.cpu,
            "iterations": self.iterations,
            "branches_per_iteration": self.body.branches_per_iteration,
            "iterations_per_second": round(self.density(), 1),
        }


def check_sibling(cpu: int, topology: CpuTopology, experiment_cpu: int | None) -> None:
    if not topology.smt_enabled:
        raise SmtDisabled("SMT is off: no sibling logical processor for a workload")
    if experiment_cpu is not None and not topology.are_siblings(cpu, experiment_cpu):
        raise NotSibling(f"cpu {cpu} is not an SMT sibling of cpu {experiment_cpu}")
    if experiment_cpu is None and not topology.siblings(cpu):
        raise NotSibling(f"cpu {cpu} has no SMT sibling")


def _run(handle: WorkloadHandle, pinned: threading.Event) -> None:
    try:
        pin_current_thread(handle.cpu)
    except BaseException as exc:
        handle.error = exc
        pinned.set()
        return
    pinned.set()
    body = handle.body
    if isinstance(body, HostCallLoop):
        sleep = libc().nanosleep
        req = _Timespec(0, 0)
        ref = ctypes.byref(req)
        stop = handle.stop_flag
        counter = handle.counter
        while not stop.value:
            sleep(ref, None)
            counter.value += 1
    else:
        # The native loop releases the GIL for its whole run.
        body.func(ctypes.addressof(handle.stop_flag), ctypes.addressof(handle.counter))


def start_workload(kind, cpu: int, *, topology: CpuTopology | None = None,
                   experiment_cpu: int | None = None,
                   avoid: list[tuple[int, int]] = (), seed: int = 0x9E3779B97F4A7C15,
                   require_smt: bool = True) -> WorkloadHandle:
    """Start ``kind`` on a thread pinned to ``cpu``.

    ``cpu`` must be an SMT sibling of ``experiment_cpu``.  ``avoid`` lists
    ``[start, end)`` address ranges (the probe pages) the workload code must
    not overlap.  ``require_smt=False`` drops the sibling checks; tests use
    it to run bodies on a single-threaded machine.
    """
    kind = WorkloadKind.parse(kind)
    if kind is WorkloadKind.NONE:
        raise UnsupportedWorkload("the 'none' workload cannot be started")
    if require_smt:
        check_sibling(cpu, topology or detect_topology(), experiment_cpu)
    body = encode_workload_body(kind, seed)
    if isinstance(body, WorkloadBody):
        lo, hi = body.span
        for start, end in avoid:
            if lo < end and start < hi:
                raise ValueError(f"workload code {lo:#x}-{hi:#x} overlaps probe range "
                                 f"{start:#x}-{end:#x}")
    handle = WorkloadHandle(cpu=cpu, kind=kind, body=body)
    pinned = threading.Event()
    handle.thread = threading.Thread(target=_run, args=(handle, pinned),
                                     name=f"workload-{kind.value}-cpu{cpu}", daemon=True)
    handle.started_at = time.monotonic()
    handle.thread.start()
    pinned.wait()
    if handle.error is not None:
        handle.thread.join()
        raise handle.error if isinstance(handle.error, PinFailed) else PinFailed(str(handle.error))
    return handle


def stop_workload(handle: WorkloadHandle, timeout: float = 5.0) -> int:
    """Signal the loop to stop, join its thread, return total iterations.

    Safe to call repeatedly; later calls return the same count.
    """
    if handle._final is not None:
        return handle._final
    handle.stop_flag.value = 1
    if handle.thread is not None:
        handle.thread.join(timeout)
        if handle.thread.is_alive():
            raise RuntimeError(f"workload thread {handle.thread.name} did not stop")
    handle.stopped_at = time.monotonic()
    handle._final = handle.counter.value
    return handle._final


class running_workload:
    """Context manager: ``with running_workload(kind, cpu, ...) as h:``.

    ``kind`` of ``none`` yields ``None`` and starts nothing.
    """

    def __init__(self, kind, cpu: int | None, **kw):
        self.kind = WorkloadKind.parse(kind)
        self.cpu = cpu
        self.kw = kw
        self.handle: WorkloadHandle | None = None

    def __enter__(self) -> WorkloadHandle | None:
        if self.kind is not WorkloadKind.NONE:
            self.handle = start_workload(self.kind, self.cpu, **self.kw)
        return self.handle

    def __exit__(self, *exc):
        if self.handle is not None:
            stop_workload(self.handle)
        return False
