"""Speculation-window sizing by NOP-spacer sweep.

Spacers go in front of the load-once gadget, one count at a time from 0,
until the channel shows nothing for ``margin`` consecutive counts.  The
largest count that still leaves a mark bounds how much the window can
reach.  Spacers may not all be allocated or executed, so the figure is an
upper bound, and it is labelled that way everywhere it is printed.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

from .harness import ExperimentConfig, run_experiment
from .kinds import FenceMode, GadgetKind, SpacerKind

HARD_CAP = 64
BOUND_LABEL = "upper bound"


@dataclass
class WindowEstimate:
    curve: list[tuple[int, float]]
    max_nops_with_signal: int | None
    spacer_kind: SpacerKind
    config: ExperimentConfig
    trials: list[int] = field(default_factory=list)
    label: str = BOUND_LABEL

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["spacer_nops", "success_rate", "trials"])
        counts = self.trials or [self.config.trials] * len(self.curve)
        for (n, rate), t in zip(self.curve, counts):
            w.writerow([n, f"{rate:.6f}", t])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "curve": [[n, r] for n, r in self.curve],
            "trials": list(self.trials),
            "max_nops_with_signal": self.max_nops_with_signal,
            "spacer_kind": self.spacer_kind.value,
            "label": self.label,
            "config": self.config.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowEstimate":
        return cls(
            curve=[(int(n), float(r)) for n, r in d["curve"]],
            max_nops_with_signal=d["max_nops_with_signal"],
            spacer_kind=SpacerKind.parse(d["spacer_kind"]),
            config=ExperimentConfig.from_dict(d["config"]),
            trials=list(d.get("trials", [])),
            label=d.get("label", BOUND_LABEL),
        )


def estimate_window(base: ExperimentConfig, *, margin: int = 3, cap: int = HARD_CAP,
                    trial_fn=None, strict: bool = True, run=run_experiment,
                    on_point=None) -> WindowEstimate:
    """Sweep spacer counts upward from 0 and return the whole curve.

    Stops once ``margin`` consecutive counts show no signal, or after
    ``cap``.  ``trial_fn`` is passed through to the harness.  With
    ``strict`` the base config must be a fenced load-once cell.
    ``max_nops_with_signal`` is None when no count shows signal.
    """
    if margin < 3:
        raise ValueError("margin must be at least 3")
    if not 0 <= cap <= HARD_CAP:
        raise ValueError(f"cap must be in [0, {HARD_CAP}]")
    if strict and (base.gadget is not GadgetKind.LOAD_ONCE or base.fence is not FenceMode.LFENCE):
        raise ValueError("window sweeps use the load-once gadget behind lfence")
    curve: list[tuple[int, float]] = []
    trials: list[int] = []
    best: int | None = None
    quiet = 0
    for n in range(cap + 1):
        res = run(base.replace(spacer_nops=n), trial_fn) if trial_fn is not None \
            else run(base.replace(spacer_nops=n))
        curve.append((n, res.success_rate))
        trials.append(res.trials)
        if on_point is not None:
            on_point(n, res)
        if res.success_rate > base.noise_floor:
            best = n
            quiet = 0
        else:
            quiet += 1
            if quiet >= margin:
                break
    return WindowEstimate(curve=curve, max_nops_with_signal=best,
                          spacer_kind=base.spacer_kind, config=base, trials=trials)
