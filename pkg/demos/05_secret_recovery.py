"""
Reading a secret with the three-load gadget
===========================================

The three-load gadget follows a pointer to a byte, masks it, and uses it to
index the probe array.  Point it at each byte of a buffer in turn and take
the most frequent slot as the guess.  Without a fence this reads the buffer
back.  Behind lfence it needs a wider window, which on SMT parts a busy
sibling thread can provide.
"""

from specwin.harness import (ExperimentConfig, Session, best_workload, recover_secret)
from specwin.machine import flush_supported, microarchitecture
from specwin.topology import detect_topology

if not flush_supported():
    raise SystemExit("this demo needs an x86-64 machine with CLFLUSH")

secret = b"Sixteen byte key"
sess = Session(seed=0)

guesses, r = recover_secret(secret, ExperimentConfig(fence="none"), 100, sess=sess)
print("no fence:", bytes(g or 0 for g in guesses), f"({r.success_rate:.1%} of trials hit)")

guesses, r = recover_secret(secret, ExperimentConfig(fence="lfence"), 100, sess=sess)
got = bytes(g or 0 for g in guesses) if any(g is not None for g in guesses) else None
print("lfence, no SMT:", got, f"({r.success_rate:.1%} of trials hit)")

topo = detect_topology()
workload = best_workload(microarchitecture())
if not topo.smt_enabled or workload is None:
    print("no SMT sibling here, skipping the contention run")
else:
    cfg = ExperimentConfig(fence="lfence", workload=workload.value)
    guesses, r = recover_secret(secret, cfg, 100, sess=sess)
    print(f"lfence + {workload.value} on the sibling:", bytes(g or 0 for g in guesses))
