"""
The cache channel on this machine
=================================

Every other demo reads its result off a Flush+Reload channel, so start by
looking at it: how long a reload takes when the line is cached and when it
was flushed, where the threshold lands, and how often a probe of all 256
slots reports exactly the slot that was touched.
"""

import numpy as np

from specwin.channel import ProbeArray, ProbeMode, calibrate, probe, qualify_order, self_test
from specwin.machine import flush_supported, machine_metadata

if not flush_supported():
    raise SystemExit("this demo needs an x86-64 machine with CLFLUSH")

meta = machine_metadata()
print("host:", meta["model_name"], "|", meta["microarchitecture"])

# calibrate on a normal-mode array: 2000 timed cached reloads, 2000 flushed
arr = ProbeArray(seed=0)
cal = calibrate(arr, samples=2000)
print(f"hit  mean {cal.hit_mean:6.1f}  p99 {cal.hit_p99:6.1f} cycles")
print(f"miss mean {cal.miss_mean:6.1f}  p1  {cal.miss_p1:6.1f} cycles")
print(f"threshold {cal.threshold:6.1f}")

# Some probe orders set off a prefetcher and show phantom hits; pick the
# first seed whose order probes clean
seed = qualify_order(arr, cal)
print("probe order seed:", seed)

# one probe by hand: touch slot 0x41, everything else stays flushed
arr.flush_all()
arr.touch(0x41)
print("touched 0x41, probe reports", sorted(probe(arr, cal)))

# the probe flushes what it timed, so set the slot up again for raw times
arr.flush_all()
arr.touch(0x41)
times = arr.reload_times()
print("reload of slot 0x41:", int(times[0x41]), "cycles; median of the rest:",
      int(np.median(np.delete(times, 0x41))))

print("normal self-test over 1000 trials:", self_test(arr, cal, 1000))

# Inverted mode is what the flush gadget needs: everything cached, and the
# evidence is one slot that reloads slow
inv = ProbeArray(ProbeMode.INVERTED, seed=seed)
print("inverted self-test over 1000 trials:", self_test(inv, cal, 1000))
