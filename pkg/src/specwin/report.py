"""Result files, the five table shapes, and the sweep plot.

A result file is JSON lines: one ``machine`` line, then one ``result`` line
per cell.  Tables put one column (or row) per machine, so several files can
be rendered side by side.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from enum import Enum
from pathlib import Path

from .errors import EmptyResultSet
from .harness import ExperimentResult
from .kinds import FenceMode, GadgetKind, WorkloadKind
from .machine import MICROARCHITECTURES

MISSING = "—"
ERRORED = "N/A"
YES, NO = "✓", "✗"


class TableShape(Enum):
    GADGET_BY_FENCE = "GadgetByFence"
    MINIMAL_VARIANTS = "MinimalVariants"
    SMT_WORKLOADS = "SmtWorkloads"
    WINDOW_SIZES = "WindowSizes"
    POC_MATRIX = "PocMatrix"

    @classmethod
    def parse(cls, name):
        if isinstance(name, cls):
            return name
        for m in cls:
            if name in (m.value, m.name) or str(name).lower() == m.value.lower():
                return m
        raise ValueError(f"unknown table shape {name!r}")


@dataclass
class ResultSet:
    records: list[ExperimentResult] = field(default_factory=list)
    machine: dict = field(default_factory=dict)

    @property
    def label(self) -> str:
        m = self.machine
        uarch = m.get("microarchitecture")
        if uarch and uarch != "unknown":
            return uarch
        return m.get("model_name") or "unknown"

    def dumps(self) -> str:
        lines = [json.dumps({"kind": "machine", "machine": self.machine}, sort_keys=True)]
        lines += [json.dumps({"kind": "result", **r.to_dict()}, sort_keys=True)
                  for r in self.records]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    def append(self, result: ExperimentResult, path=None) -> None:
        self.records.append(result)
        if path is not None:
            with open(path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"kind": "result", **result.to_dict()}, sort_keys=True) + "\n")

    @classmethod
    def loads(cls, text: str) -> "ResultSet":
        rs = cls()
        seen_machine = False
        for n, line in enumerate(text.splitlines(), 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            kind = obj.pop("kind", "result")
            if kind == "machine":
                if seen_machine and obj["machine"] != rs.machine:
                    raise ValueError(f"line {n}: second machine block in one result file")
                rs.machine = obj["machine"]
                seen_machine = True
            elif kind == "result":
                obj.pop("signal", None)
                rs.records.append(ExperimentResult.from_dict(obj))
            else:
                raise ValueError(f"line {n}: unknown record kind {kind!r}")
        return rs

    @classmethod
    def load(cls, path) -> "ResultSet":
        return cls.loads(Path(path).read_text(encoding="utf-8"))


def format_rate(rate: float) -> str:
    """Percent the way the reference tables print it.

    Rounds the exact value of the float, so 0.985 (stored just below
    98.5%) prints as 98%.
    """
    if rate >= 0.99:
        return ">99%"
    if rate <= 0:
        return "0%"
    if rate < 0.01:
        return "<1%"
    pct = (Decimal(rate) * 100).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return f"{int(pct)}%"


# -- cell lookup ----------------------------------------------------------

def _find(rs: ResultSet, *, gadget, fence, workload=WorkloadKind.NONE, spacer_nops=0,
          control=False):
    """Latest matching record, or None."""
    hit = None
    for r in rs.records:
        c = r.config
        if (c.gadget is gadget and c.fence is fence and c.workload is workload
                and c.spacer_nops == spacer_nops and c.control == control
                and r.recovered_secret is None and not _is_poc(r)):
            hit = r
    return hit


def _is_poc(r: ExperimentResult) -> bool:
    return r.planted_secret is not None


def _cell(r: ExperimentResult | None) -> str:
    if r is None:
        return MISSING
    if r.error is not None:
        return ERRORED
    return format_rate(r.success_rate)


def _order(sets: list[ResultSet]) -> list[ResultSet]:
    def key(item):
        i, rs = item
        try:
            return (MICROARCHITECTURES.index(rs.label), i)
        except ValueError:
            return (len(MICROARCHITECTURES), i)
    return [rs for _, rs in sorted(enumerate(sets), key=key)]


# -- shapes ---------------------------------------------------------------

def _gadget_by_fence(sets):
    header = ["Microarchitecture", "Load-shift-load no lfence", "Load-shift-load with lfence",
              "Load-once no lfence", "Load-once with lfence"]
    rows = []
    for rs in sets:
        row = [rs.label]
        for g in (GadgetKind.LOAD_SHIFT_LOAD, GadgetKind.LOAD_ONCE):
            for f in (FenceMode.NONE, FenceMode.LFENCE):
                row.append(_cell(_find(rs, gadget=g, fence=f)))
        rows.append(row)
    return "Gadget success with and without lfence", header, rows


_MINIMAL_ROWS = [
    ("Minimal load", GadgetKind.MINIMAL_LOAD),
    ("Store", GadgetKind.STORE),
    ("Prefetch", GadgetKind.PREFETCH),
    ("Flush", GadgetKind.FLUSH),
    ("Complex load", GadgetKind.COMPLEX_LOAD),
]


def _minimal_variants(sets):
    header = [""] + [rs.label for rs in sets]
    rows = [[name] + [_cell(_find(rs, gadget=g, fence=FenceMode.LFENCE)) for rs in sets]
            for name, g in _MINIMAL_ROWS]
    return "Minimal gadget variants behind lfence, no SMT", header, rows


_SMT_COLUMNS = [
    ("Direct JMP", WorkloadKind.DIRECT_JMP),
    ("Jcc predicted", WorkloadKind.JCC_PREDICTED),
    ("Jcc mispred", WorkloadKind.JCC_MISPREDICTED),
    ("Indirect JMP predicted", WorkloadKind.INDIRECT_JMP_PREDICTED),
    ("Indirect JMP mispred", WorkloadKind.INDIRECT_JMP_MISPREDICTED),
    ("Far JMP", WorkloadKind.FAR_JMP),
    ("XOR", WorkloadKind.XOR),
    ("nanosleep", WorkloadKind.NANOSLEEP),
]


def _smt_workloads(sets):
    lsl = GadgetKind.LOAD_SHIFT_LOAD
    header = ["Microarchitecture", "No lfence", "No workload"] + [n for n, _ in _SMT_COLUMNS]
    rows = []
    for rs in sets:
        row = [rs.label,
               _cell(_find(rs, gadget=lsl, fence=FenceMode.NONE)),
               _cell(_find(rs, gadget=lsl, fence=FenceMode.LFENCE))]
        row += [_cell(_find(rs, gadget=lsl, fence=FenceMode.LFENCE, workload=w))
                for _, w in _SMT_COLUMNS]
        rows.append(row)
    return "SMT contention: load-shift-load behind lfence", header, rows


def window_from_records(rs: ResultSet) -> tuple[int | None, bool] | None:
    """``(max spacers with signal, any errors)`` from sweep records, or None."""
    pts = [r for r in rs.records
           if r.config.gadget is GadgetKind.LOAD_ONCE and r.config.fence is FenceMode.LFENCE
           and r.config.workload is WorkloadKind.NONE and not r.config.control
           and not _is_poc(r)]
    if not pts:
        return None
    best = None
    for r in pts:
        if r.signal and (best is None or r.config.spacer_nops > best):
            best = r.config.spacer_nops
    return best, all(r.error is not None for r in pts)


def _window_sizes(sets):
    header = [""] + [rs.label for rs in sets]
    row = ["Max # of NOPs (upper bound)"]
    for rs in sets:
        w = window_from_records(rs)
        if w is None:
            row.append(MISSING)
        elif w[1]:
            row.append(ERRORED)
        else:
            row.append("no signal" if w[0] is None else str(w[0]))
    return "NOP spacer sweep, load-once behind lfence, no SMT", header, [row]


def _poc_cell(rs: ResultSet, smt: bool) -> str:
    rec = None
    for r in rs.records:
        if _is_poc(r) and (r.config.workload is not WorkloadKind.NONE) == smt:
            rec = r
    if rec is None:
        return MISSING
    if rec.error is not None:
        return ERRORED
    return YES if rec.recovered_secret == rec.planted_secret else NO


def _poc_matrix(sets):
    header = [""] + [rs.label for rs in sets]
    rows = [["No SMT"] + [_poc_cell(rs, False) for rs in sets],
            ["SMT workload"] + [_poc_cell(rs, True) for rs in sets]]
    return "Three-load proof of concept: was the secret recovered?", header, rows


_SHAPES = {
    TableShape.GADGET_BY_FENCE: _gadget_by_fence,
    TableShape.MINIMAL_VARIANTS: _minimal_variants,
    TableShape.SMT_WORKLOADS: _smt_workloads,
    TableShape.WINDOW_SIZES: _window_sizes,
    TableShape.POC_MATRIX: _poc_matrix,
}


def _text(title: str, header: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    rule = "+" + "+".join("-" * (w + 2) for w in widths) + "+"

    def line(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"

    out = [title, rule, line(header), rule]
    out += [line(r) for r in rows]
    out.append(rule)
    return "\n".join(out) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_table(rs, shape) -> tuple[str, str]:
    """Render one table shape; returns ``(text, csv)``.

    ``rs`` is a ResultSet or a list of them (one per machine).  Cells with
    no record print as "—", cells whose run failed as "N/A".
    """
    sets = [rs] if isinstance(rs, ResultSet) else list(rs)
    if not sets or not any(s.records for s in sets):
        raise EmptyResultSet("no results to render")
    title, header, rows = _SHAPES[TableShape.parse(shape)](_order(sets))
    return _text(title, header, rows), _csv(header, rows)


# -- sweep plot -----------------------------------------------------------

_BAR = 50


def _plot_text(est) -> str:
    c = est.config
    head = [
        f"Spacer sweep: {c.gadget.value} gadget, fence {c.fence.value}, "
        f"{est.spacer_kind.value} spacers, workload {c.workload.value}",
        "max spacers with signal: "
        + ("none" if est.max_nops_with_signal is None else str(est.max_nops_with_signal))
        + f" ({est.label})",
        f"noise floor {c.noise_floor:.3f}",
        "",
        "nops | success rate",
    ]
    body = []
    for n, rate in est.curve:
        filled = int((Decimal(rate) * _BAR).quantize(Decimal(1), rounding=ROUND_HALF_UP))
        mark = " <" if n == est.max_nops_with_signal else ""
        body.append(f"{n:4d} | {'#' * filled}{'.' * (_BAR - filled)} {rate * 100:6.2f}%{mark}")
    return "\n".join(head + body) + "\n"


def _plot_svg(est) -> str:
    w, h, pad = 640, 320, 48
    xs = [n for n, _ in est.curve]
    lo, hi = min(xs), max(xs)
    span = max(hi - lo + 1, 1)

    def x(n):
        return pad + (n - lo) * (w - 2 * pad) / span

    def y(r):
        return h - pad - r * (h - 2 * pad)

    pts = []
    for n, r in est.curve:
        pts.append(f"{x(n):.1f},{y(r):.1f}")
        pts.append(f"{x(n + 1):.1f},{y(r):.1f}")
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" '
        f'viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        f'<line x1="{pad}" y1="{h - pad}" x2="{w - pad}" y2="{h - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{h - pad}" stroke="black"/>',
        f'<text x="{w / 2:.0f}" y="{h - 12}" text-anchor="middle" font-size="12">'
        f'{est.spacer_kind.value} spacers in front of the gadget</text>',
        f'<text x="14" y="{h / 2:.0f}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {h / 2:.0f})">success rate</text>',
        f'<text x="{pad}" y="{pad - 16}" font-size="12">max with signal: '
        f'{"none" if est.max_nops_with_signal is None else est.max_nops_with_signal} '
        f'({est.label})</text>',
    ]
    for frac in (0, 0.5, 1):
        parts.append(f'<text x="{pad - 6}" y="{y(frac) + 4:.1f}" text-anchor="end" '
                     f'font-size="10">{int(frac * 100)}%</text>')
    step = max(1, span // 8)
    for n in range(lo, hi + 1, step):
        parts.append(f'<text x="{x(n):.1f}" y="{h - pad + 14}" text-anchor="start" '
                     f'font-size="10">{n}</text>')
    parts.append(f'<polyline fill="none" stroke="#1f4e9e" stroke-width="2" '
                 f'points="{" ".join(pts)}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def render_sweep_plot(est, path) -> Path:
    """Write a step plot of the sweep curve: SVG for ``.svg``, else text."""
    if not est.curve:
        raise ValueError("cannot plot an empty sweep curve")
    path = Path(path)
    data = _plot_svg(est) if path.suffix.lower() == ".svg" else _plot_text(est)
    path.write_text(data, encoding="utf-8")
    return path
