"""
Smaller gadgets behind lfence
=============================

If two dependent loads do not fit in the window, maybe one load does, or
a store, a prefetch, a flush.  Each of these reads a pointer the harness
planted and touches the line it points at.  The flush variant is read
through the inverted channel: the slot that comes back slow.
"""

from specwin.harness import ExperimentConfig, Session, run_experiment
from specwin.machine import flush_supported, machine_metadata
from specwin.report import ResultSet, render_table

if not flush_supported():
    raise SystemExit("this demo needs an x86-64 machine with CLFLUSH")

sess = Session(seed=0)
rs = ResultSet(machine=machine_metadata(sess.calibration))

for gadget in ("minimal", "store", "prefetch", "flush", "complex"):
    for fence in ("none", "lfence"):
        r = run_experiment(ExperimentConfig(gadget=gadget, fence=fence, trials=500), sess=sess)
        rs.records.append(r)
        print(f"{gadget:9} {fence:6} {r.success_rate:6.1%}")

print()
print(render_table(rs, "MinimalVariants")[0])
