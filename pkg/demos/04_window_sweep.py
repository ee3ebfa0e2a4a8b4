"""
How wide is the window?
=======================

Put n NOPs in front of the load-once gadget and raise n until the load no
longer shows up.  The last n with signal is an upper bound on the window,
since NOPs may never be allocated or executed.

First against a fake trial function with a known cutoff, so the estimator
itself is checked, then on this machine.
"""

from pathlib import Path

from specwin.harness import ExperimentConfig, Session, run_experiment
from specwin.machine import flush_supported
from specwin.report import render_sweep_plot
from specwin.sweep import estimate_window

out = Path("demo-output")
out.mkdir(exist_ok=True)
base = ExperimentConfig(gadget="load-once", fence="lfence", trials=1000)

# a window that fits exactly 7 spacers
fake = estimate_window(base, trial_fn=lambda cfg, i: cfg.spacer_nops <= 7)
print("fake cutoff 7 ->", fake.max_nops_with_signal)
print(render_sweep_plot(fake, out / "sweep-fake.txt").read_text())

if not flush_supported():
    raise SystemExit("the hardware sweep needs an x86-64 machine with CLFLUSH")

sess = Session(seed=0)
est = estimate_window(base, run=lambda c: run_experiment(c, sess=sess),
                      on_point=lambda n, r: print(f"  {n:2d} spacers: {r.success_rate:.3f}"))
print("this machine:", est.max_nops_with_signal, f"({est.label})")
render_sweep_plot(est, out / "sweep.svg")
(out / "sweep.csv").write_text(est.to_csv())

# without the fence the window is the whole cache miss on the jump target
wide = estimate_window(base.replace(fence="none", trials=200), strict=False,
                       run=lambda c: run_experiment(c, sess=sess))
print("no fence:", wide.max_nops_with_signal, "(sweep stops at the 64-spacer cap)")
