"""Regenerate tests/fixtures/report/ from tests/report_cases.py.

Run from the repository root after an intended change to table or plot
output, then review the diff:

    python tests/fixtures/make_report_golden.py
"""

import sys
from pathlib import Path

HERE = Path(__file__).resolve().parent
sys.path.insert(0, str(HERE.parent))

import report_cases  # noqa: E402
from specwin.report import TableShape, render_sweep_plot, render_table  # noqa: E402

OUT = HERE / "report"


def main():
    OUT.mkdir(exist_ok=True)
    sets = report_cases.all_sets()
    for shape in TableShape:
        text, csv = render_table(sets, shape)
        (OUT / f"{shape.value}.txt").write_text(text, encoding="utf-8")
        (OUT / f"{shape.value}.csv").write_text(csv, encoding="utf-8")
    est = report_cases.cutoff_estimate()
    render_sweep_plot(est, OUT / "sweep_cutoff7.txt")
    render_sweep_plot(est, OUT / "sweep_cutoff7.svg")
    print(f"wrote {len(list(OUT.iterdir()))} files to {OUT}")


if __name__ == "__main__":
    main()
