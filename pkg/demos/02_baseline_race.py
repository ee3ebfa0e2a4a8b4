"""
Lfence/jmp against the baseline race
====================================

An indirect jump is trained toward a gadget and then run with a different
real target.  Without a fence the gadget runs transiently and leaves its
mark in the probe array nearly every time.  With lfence in front of the
jump, what is left is the short window between prediction and the jump
executing: enough for one load on some parts, not for two dependent loads.
"""

from specwin.harness import ExperimentConfig, Session, control_config, run_experiment
from specwin.machine import flush_supported, machine_metadata
from specwin.report import ResultSet, render_table

if not flush_supported():
    raise SystemExit("this demo needs an x86-64 machine with CLFLUSH")

sess = Session(seed=0)
rs = ResultSet(machine=machine_metadata(sess.calibration))

for gadget in ("lsl", "load-once"):
    for fence in ("none", "lfence"):
        r = run_experiment(ExperimentConfig(gadget=gadget, fence=fence, trials=1000), sess=sess)
        rs.records.append(r)
        print(f"{gadget:9} {fence:6} {r.hits:4d}/{r.trials}")

# the same cells trained toward the landing pad instead: any hit here would
# be prefetching or noise, not injection
for gadget in ("lsl", "load-once"):
    r = run_experiment(control_config(ExperimentConfig(gadget=gadget, fence="none")), sess=sess)
    print(f"control {gadget:9} {r.hits}/{r.trials}")

text, _ = render_table(rs, "GadgetByFence")
print()
print(text)
