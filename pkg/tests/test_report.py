from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

import report_cases
from specwin.errors import EmptyResultSet
from specwin.report import (ERRORED, MISSING, ResultSet, TableShape, format_rate,
                            render_sweep_plot, render_table, window_from_records)
from specwin.sweep import WindowEstimate

GOLDEN = Path(__file__).parent / "fixtures" / "report"


@pytest.mark.parametrize("rate, text", [
    (0.0, "0%"), (0.004, "<1%"), (0.0099, "<1%"), (0.01, "1%"), (0.21, "21%"),
    (0.5, "50%"), (0.985, "98%"), (0.9849, "98%"), (0.9851, "99%"),
    (0.989, "99%"), (0.99, ">99%"), (0.995, ">99%"), (1.0, ">99%"),
])
def test_format_rate(rate, text):
    assert format_rate(rate) == text


@given(st.floats(0, 1))
def test_format_rate_bands(rate):
    s = format_rate(rate)
    if rate >= 0.99:
        assert s == ">99%"
    elif rate == 0:
        assert s == "0%"
    elif rate < 0.01:
        assert s == "<1%"
    else:
        assert 1 <= int(s.rstrip("%")) <= 99
        assert abs(int(s.rstrip("%")) - rate * 100) <= 0.5 + 1e-9


@pytest.mark.parametrize("shape", list(TableShape))
def test_golden_tables(shape):
    text, csv = render_table(report_cases.all_sets(), shape)
    assert text == (GOLDEN / f"{shape.value}.txt").read_text(encoding="utf-8")
    assert csv == (GOLDEN / f"{shape.value}.csv").read_text(encoding="utf-8")


@pytest.mark.parametrize("shape", list(TableShape))
def test_tables_are_pure(shape):
    sets = report_cases.all_sets()
    assert render_table(sets, shape) == render_table(report_cases.all_sets(), shape)
    # machine order on input does not matter
    assert render_table(sets[::-1], shape) == render_table(sets, shape)


def test_golden_plots(tmp_path):
    est = report_cases.cutoff_estimate()
    for name in ("sweep_cutoff7.txt", "sweep_cutoff7.svg"):
        out = render_sweep_plot(est, tmp_path / name)
        assert out.read_bytes() == (GOLDEN / name).read_bytes()


def test_two_cells_one_row():
    rs = ResultSet(records=[report_cases.result(1.0, gadget="lsl", fence="none"),
                            report_cases.result(0.0, gadget="lsl", fence="lfence")],
                   machine=report_cases.machine("Zen 3"))
    text, csv = render_table(rs, "GadgetByFence")
    rows = csv.splitlines()
    assert len(rows) == 2
    assert rows[1] == f"Zen 3,>99%,0%,{MISSING},{MISSING}"


def test_missing_and_errored_cells():
    text, csv = render_table(report_cases.all_sets(), TableShape.MINIMAL_VARIANTS)
    flush = next(l for l in csv.splitlines() if l.startswith("Flush"))
    assert flush.split(",") == ["Flush", ERRORED, "0%", MISSING]


def test_empty_result_set():
    with pytest.raises(EmptyResultSet):
        render_table(ResultSet(), "GadgetByFence")
    with pytest.raises(EmptyResultSet):
        render_table([], "PocMatrix")
    with pytest.raises(ValueError):
        TableShape.parse("Table9")


def test_label_falls_back_to_model_name():
    rs = report_cases.unknown_part()
    assert rs.label == "Some CPU"
    assert report_cases.golden_cove().label == "Golden Cove"


def test_jsonl_round_trip(tmp_path):
    rs = report_cases.golden_cove()
    path = tmp_path / "r.jsonl"
    rs.save(path)
    back = ResultSet.load(path)
    assert back == rs
    extra = report_cases.result(0.5, gadget="lsl", fence="none")
    back.append(extra, path)
    assert ResultSet.load(path).records[-1] == extra
    assert path.read_text().splitlines()[0].startswith('{"kind": "machine"')


def test_one_machine_block_per_file():
    a = report_cases.golden_cove().dumps()
    b = report_cases.zen2().dumps()
    with pytest.raises(ValueError):
        ResultSet.loads(a + b)
    # a repeated identical block is harmless
    assert ResultSet.loads(a + a.splitlines()[0] + "\n").machine == report_cases.golden_cove().machine


def test_window_from_records():
    assert window_from_records(report_cases.golden_cove()) == (14, False)
    assert window_from_records(report_cases.unknown_part()) == (None, False)
    assert window_from_records(ResultSet()) is None


def test_cutoff_plot_steps_between_7_and_8(tmp_path):
    text = render_sweep_plot(report_cases.cutoff_estimate(), tmp_path / "p.txt").read_text()
    rows = {int(l.split("|")[0]): l for l in text.splitlines() if l[:4].strip().isdigit()}
    assert "#" * 50 in rows[7] and rows[7].endswith("<")
    assert "#" not in rows[8] and "0.00%" in rows[8]
    assert "upper bound" in text


def test_single_point_plot(tmp_path):
    est = report_cases.cutoff_estimate()
    one = WindowEstimate(curve=[(0, 0.5)], max_nops_with_signal=0, spacer_kind=est.spacer_kind,
                         config=est.config, trials=[1000])
    text = render_sweep_plot(one, tmp_path / "p.txt").read_text()
    assert "   0 | " + "#" * 25 + "." * 25 in text
    svg = render_sweep_plot(one, tmp_path / "p.svg").read_text()
    assert svg.startswith("<svg") and "<polyline" in svg


def test_empty_curve_rejected(tmp_path):
    est = report_cases.cutoff_estimate()
    empty = WindowEstimate(curve=[], max_nops_with_signal=None, spacer_kind=est.spacer_kind,
                           config=est.config)
    with pytest.raises(ValueError):
        render_sweep_plot(empty, tmp_path / "p.txt")
    assert not (tmp_path / "p.txt").exists()
