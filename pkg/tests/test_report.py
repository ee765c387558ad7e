from __future__ import annotations

from llmrescore.report import COLUMNS, format_report, relative_reduction


def _make_run(**overrides: object) -> dict:
    base = {"corpus_wer": 0.10, "oracle_wer": 0.05, "fallback_rate": 0.0}
    base.update(overrides)
    return base


def test_header_and_baseline() -> None:
    lines = format_report([("baseline", _make_run())]).splitlines()
    assert lines[0].split("\t") == list(COLUMNS)
    assert lines[1].split("\t") == ["baseline", "10.00", "5.00", "-", "0.0000"]


def test_relative_reduction_cell() -> None:
    out = format_report([("base", _make_run()), ("tap", _make_run(corpus_wer=0.08, fallback_rate=0.05))])
    row = out.splitlines()[2].split("\t")
    assert row == ["tap", "8.00", "5.00", "20.0%", "0.0500"]


def test_worse_run_is_negative() -> None:
    out = format_report([("base", _make_run()), ("worse", _make_run(corpus_wer=0.12))])
    assert out.splitlines()[2].split("\t")[3] == "-20.0%"


def test_missing_values_render_as_dash() -> None:
    out = format_report([("base", _make_run(corpus_wer=0.0)), ("x", {"corpus_wer": None})])
    assert out.splitlines()[2].split("\t") == ["x", "-", "-", "-", "-"]


def test_relative_reduction_formula() -> None:
    assert relative_reduction(10.0, 8.0) == 0.2
