"""Command-line front end: ``specwin <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import (CalibrationFailed, NoFlushSupport, NotSibling, SmtDisabled, SpecwinError,
                     TopologyUnavailable)
from .kinds import FenceMode, GadgetKind, SpacerKind, WorkloadKind

EXIT_UNAVAILABLE = 2
OWNER_FLAG = "--i-own-this-machine"
POC_SECRET_LEN = 16

_UNAVAILABLE = (SmtDisabled, NotSibling, CalibrationFailed, NoFlushSupport, TopologyUnavailable)


def _names(enum) -> list[str]:
    return [m.value for m in enum]


def _add_cell_flags(p, *, gadget=True, fence=True, workload=True, nops=True):
    if gadget:
        p.add_argument("--gadget", choices=_names(GadgetKind), default="lsl")
    if fence:
        p.add_argument("--fence", choices=_names(FenceMode), default="lfence")
    if workload:
        p.add_argument("--workload", choices=_names(WorkloadKind), default="none")
    if nops:
        p.add_argument("--nops", type=int, default=0, help="spacer count in front of the gadget")
    p.add_argument("--cpu", type=int, help="experiment logical processor")
    p.add_argument("--sibling", type=int, help="workload logical processor")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--train-iters", type=int, default=64)
    p.add_argument("--secret", type=lambda s: int(s, 0), default=0x41)
    p.add_argument("--noise-floor", type=float, default=0.01)
    p.add_argument("--spacer", choices=_names(SpacerKind), default="nop")
    p.add_argument("--align", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, help="result file (JSON lines)")
    p.add_argument(OWNER_FLAG, dest="owner", action="store_true",
                   help="confirm this machine may run generated code and contention loops")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="specwin", description=__doc__)
    ap.add_argument("--version", action="version", version=f"specwin {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("topology", help="print logical processors and SMT siblings")
    p.set_defaults(func=cmd_topology)

    p = sub.add_parser("calibrate", help="measure hit/miss reload latency")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("selftest", help="channel, control cell and codegen checks")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_selftest)

    p = sub.add_parser("cell", help="run one experiment cell")
    _add_cell_flags(p)
    p.add_argument("--control", action="store_true", help="train toward the landing pad")
    p.set_defaults(func=cmd_cell)

    for name, helptext in (("table2", "gadgets with and without lfence"),
                           ("table4", "minimal gadget variants behind lfence"),
                           ("table5", "SMT workloads against load-shift-load"),
                           ("table6", "three-load proof of concept")):
        p = sub.add_parser(name, help=helptext)
        _add_cell_flags(p, gadget=False, fence=False, workload=name == "table6", nops=False)
        if name == "table6":
            p.add_argument("--trials-per-byte", type=int, default=100)
        p.set_defaults(func=cmd_suite, suite=name)

    p = sub.add_parser("sweep", help="spacer sweep for the load-once gadget behind lfence")
    _add_cell_flags(p, gadget=False, fence=False, nops=False)
    p.add_argument("--margin", type=int, default=3)
    p.add_argument("--cap", type=int, default=64)
    p.add_argument("--plot", type=Path, help="plot path (.svg for SVG, else text)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render result files as tables")
    p.add_argument("files", nargs="+", type=Path)
    p.add_argument("--shape", required=True,
                   choices=["GadgetByFence", "MinimalVariants", "SmtWorkloads",
                            "WindowSizes", "PocMatrix"])
    p.add_argument("--csv", type=Path, help="also write the table as CSV")
    p.set_defaults(func=cmd_report)
    return ap


# -- helpers --------------------------------------------------------------

def config_from_args(args, **over):
    from .harness import ExperimentConfig

    kw = dict(
        gadget=getattr(args, "gadget", "lsl"),
        fence=getattr(args, "fence", "lfence"),
        spacer_nops=getattr(args, "nops", 0),
        workload=getattr(args, "workload", "none"),
        trials=args.trials,
        train_iters=args.train_iters,
        experiment_cpu=args.cpu,
        sibling_cpu=args.sibling,
        secret=args.secret,
        noise_floor=args.noise_floor,
        seed=args.seed,
        spacer_kind=args.spacer,
        align=args.align,
        control=getattr(args, "control", False),
    )
    kw.update(over)
    return ExperimentConfig(**kw)


def config_to_argv(config) -> list[str]:
    """``cell`` flags that reproduce ``config`` exactly."""
    argv = ["cell", "--gadget", config.gadget.value, "--fence", config.fence.value,
            "--workload", config.workload.value, "--nops", str(config.spacer_nops),
            "--trials", str(config.trials), "--train-iters", str(config.train_iters),
            "--secret", hex(config.secret), "--noise-floor", repr(config.noise_floor),
            "--spacer", config.spacer_kind.value, "--align", str(config.align),
            "--seed", str(config.seed)]
    if config.experiment_cpu is not None:
        argv += ["--cpu", str(config.experiment_cpu)]
    if config.sibling_cpu is not None:
        argv += ["--sibling", str(config.sibling_cpu)]
    if config.control:
        argv.append("--control")
    return argv


def _require_owner(args) -> None:
    if not args.owner:
        raise SystemExit(f"specwin {args.command}: refusing to run without {OWNER_FLAG} "
                         "(runs generated code and loads sibling threads)")


def _default_out(name: str) -> Path:
    return Path("specwin-results") / f"{name}-{time.strftime('%Y%m%d-%H%M%S')}.jsonl"


def _open_results(args, name, argv):
    """Fresh ResultSet (machine block already on disk) and its path."""
    from .harness import session
    from .machine import machine_metadata
    from .report import ResultSet
    from .topology import detect_topology

    sess = session()
    sess.seed = args.seed
    try:
        topo = detect_topology()
    except TopologyUnavailable:
        topo = None
    meta = machine_metadata(sess.calibration, topo)
    meta["invocation"] = {"command": name, "argv": list(argv), "seed": args.seed}
    rs = ResultSet(machine=meta)
    out = args.out or _default_out(name)
    out.parent.mkdir(parents=True, exist_ok=True)
    rs.save(out)
    return rs, out


def _print_result(r) -> None:
    from .report import ERRORED, format_rate

    c = r.config
    rate = ERRORED if r.error else format_rate(r.success_rate)
    extra = f"  error: {r.error}" if r.error else ""
    print(f"{c.gadget.value:10} fence={c.fence.value:6} workload={c.workload.value:9} "
          f"nops={c.spacer_nops:2d}  {r.hits}/{r.trials}  {rate}{extra}")


# -- commands -------------------------------------------------------------

def cmd_topology(args, argv) -> int:
    from .topology import detect_topology

    print(json.dumps(detect_topology().to_dict(), indent=2))
    return 0


def cmd_calibrate(args, argv) -> int:
    from .channel import ProbeArray, calibrate
    from .machine import machine_metadata

    try:
        cal = calibrate(ProbeArray(seed=args.seed), args.samples, seed=args.seed)
    except SpecwinError as exc:
        raise CalibrationFailed(str(exc)) from exc
    doc = {"toolkit_version": __version__, "calibration": cal.to_dict(),
           "machine": machine_metadata(cal)}
    text = json.dumps(doc, indent=2, sort_keys=True)
    print(text)
    if args.out:
        args.out.write_text(text + "\n")
    return 0


def cmd_selftest(args, argv) -> int:
    from .codegen import check_golden

    failures = []
    bad = check_golden()
    print(f"codegen golden bytes: {'ok' if not bad else 'FAIL ' + ', '.join(bad)}")
    if bad:
        failures.append("codegen")
    try:
        from .channel import ProbeMode, self_test
        from .harness import ExperimentConfig, run_experiment, session

        sess = session()
        sess.seed = args.seed
        arr = sess.array(ProbeMode.NORMAL)
        acc = self_test(arr, sess.calibration, args.trials, seed=args.seed)
        ok = acc >= 0.99
        print(f"channel self-test: {acc:.3f} over {args.trials} trials "
              f"(probe order seed {arr.seed}) {'ok' if ok else 'FAIL (< 0.99)'}")
        if not ok:
            failures.append("channel")
        ctl = run_experiment(ExperimentConfig(gadget="lsl", fence="none", control=True,
                                              trials=args.trials, seed=args.seed), sess=sess)
        ok = ctl.success_rate <= ctl.config.noise_floor
        fp = sum(ctl.false_positive_slots.values())
        print(f"control cell: {ctl.success_rate:.3f} (floor {ctl.config.noise_floor}), "
              f"{fp} stray slot flags {'ok' if ok else 'FAIL: prefetch or predictor noise'}")
        if not ok:
            failures.append("control")
    except NoFlushSupport as exc:
        print(f"channel self-test: unavailable, NoFlushSupport: {exc}")
        print("control cell: unavailable")
        return EXIT_UNAVAILABLE if not failures else 1
    if failures:
        print("selftest: FAIL (" + ", ".join(failures) + ")")
        return 1
    print("selftest: pass")
    return 0


def cmd_cell(args, argv) -> int:
    from .harness import resolve_cpus, run_experiment
    from .topology import detect_topology

    _require_owner(args)
    config = config_from_args(args)
    resolve_cpus(config, detect_topology())
    rs, out = _open_results(args, "cell", argv)
    r = run_experiment(config)
    rs.append(r, out)
    _print_result(r)
    print(f"wrote {out}")
    return 0


def suite_configs(name: str, base) -> list:
    """Cell grid for a table suite (table6 is handled separately)."""
    lsl, lo = GadgetKind.LOAD_SHIFT_LOAD, GadgetKind.LOAD_ONCE
    if name == "table2":
        return [base.replace(gadget=g.value, fence=f.value, workload="none")
                for g in (lsl, lo) for f in (FenceMode.NONE, FenceMode.LFENCE)]
    if name == "table4":
        return [base.replace(gadget=g.value, fence="lfence", workload="none")
                for g in (GadgetKind.MINIMAL_LOAD, GadgetKind.STORE, GadgetKind.PREFETCH,
                          GadgetKind.FLUSH, GadgetKind.COMPLEX_LOAD)]
    if name == "table5":
        cells = [base.replace(gadget="lsl", fence="none", workload="none"),
                 base.replace(gadget="lsl", fence="lfence", workload="none")]
        cells += [base.replace(gadget="lsl", fence="lfence", workload=w.value)
                  for w in WorkloadKind if w is not WorkloadKind.NONE]
        return cells
    raise ValueError(name)


_SUITE_SHAPE = {"table2": "GadgetByFence", "table4": "MinimalVariants",
                "table5": "SmtWorkloads", "table6": "PocMatrix"}


def cmd_suite(args, argv) -> int:
    from .harness import failed_result, run_experiment
    from .report import render_table

    _require_owner(args)
    base = config_from_args(args, gadget="lsl", fence="lfence", workload="none")
    rs, out = _open_results(args, args.suite, argv)
    if args.suite == "table6":
        results = _poc_suite(args, base)
    else:
        results = []
        for config in suite_configs(args.suite, base):
            try:
                r = run_experiment(config)
            except (SmtDisabled, NotSibling) as exc:
                r = failed_result(config, f"{type(exc).__name__}: {exc}")
            results.append(r)
            _print_result(r)
    for r in results:
        rs.append(r, out)
    text, _ = render_table(rs, _SUITE_SHAPE[args.suite])
    print(text, end="")
    print(f"wrote {out}")
    return 0


def _poc_suite(args, base) -> list:
    from .harness import best_workload, failed_result, recover_secret
    from .machine import microarchitecture

    secret = np.random.default_rng(args.seed).bytes(POC_SECRET_LEN)
    base = base.replace(gadget="three-load")
    best = best_workload(microarchitecture())
    chosen = WorkloadKind.parse(args.workload) if args.workload != "none" else best
    results = []
    for workload in (WorkloadKind.NONE, chosen):
        config = base.replace(workload=(workload or WorkloadKind.NONE).value)
        if workload is None:
            r = failed_result(config, "no SMT workload for this part")
        else:
            try:
                _, r = recover_secret(secret, config, args.trials_per_byte)
            except (SmtDisabled, NotSibling) as exc:
                r = failed_result(config, f"{type(exc).__name__}: {exc}")
        r.planted_secret = secret.hex()
        results.append(r)
        got = r.recovered_secret or "-"
        print(f"three-load workload={config.workload.value:9} planted={secret.hex()} "
              f"recovered={got} {'ok' if got == secret.hex() else 'no'}"
              + (f"  error: {r.error}" if r.error else ""))
    return results


def cmd_sweep(args, argv) -> int:
    from .harness import run_experiment
    from .report import render_sweep_plot
    from .sweep import estimate_window

    _require_owner(args)
    base = config_from_args(args, gadget="load-once", fence="lfence")
    rs, out = _open_results(args, "sweep", argv)

    def record(n, r):
        rs.append(r, out)
        _print_result(r)

    est = estimate_window(base, margin=args.margin, cap=args.cap, run=run_experiment,
                          on_point=record)
    csv_path = out.with_suffix(".csv")
    csv_path.write_text(est.to_csv())
    plot = args.plot or out.with_suffix(".txt")
    render_sweep_plot(est, plot)
    out.with_suffix(".window.json").write_text(json.dumps(est.to_dict(), indent=1, sort_keys=True))
    best = "none" if est.max_nops_with_signal is None else est.max_nops_with_signal
    print(f"max spacers with signal: {best} ({est.label})")
    print(f"wrote {out}, {csv_path}, {plot}")
    return 0


def cmd_report(args, argv) -> int:
    from .report import ResultSet, render_table

    sets = [ResultSet.load(p) for p in args.files]
    text, csv_text = render_table(sets, args.shape)
    print(text, end="")
    if args.csv:
        args.csv.write_text(csv_text)
    return 0


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    try:
        return args.func(args, argv)
    except _UNAVAILABLE as exc:
        print(f"specwin {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNAVAILABLE
    except SpecwinError as exc:
        print(f"specwin {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
