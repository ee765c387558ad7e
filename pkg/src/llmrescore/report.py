from __future__ import annotations

from collections.abc import Mapping, Sequence

COLUMNS = (
    "run_name",
    "corpus_wer_pct",
    "oracle_wer_pct",
    "rel_reduction_vs_baseline_pct",
    "fallback_rate",
)


def format_report(runs: Sequence[tuple[str, Mapping]]) -> str:
    """TSV table of run artifacts; the first run is the baseline."""
    lines = ["\t".join(COLUMNS)]
    baseline = runs[0][1].get("corpus_wer") if runs else None
    for i, (name, run) in enumerate(runs):
        wer = run.get("corpus_wer")
        rel = "-" if i == 0 else _fmt_relative(baseline, wer)
        lines.append(
            "\t".join(
                (
                    _clean_name(name),
                    _fmt_pct(wer),
                    _fmt_pct(run.get("oracle_wer")),
                    rel,
                    _fmt_rate(run.get("fallback_rate")),
                )
            )
        )
    return "\n".join(lines) + "\n"


def relative_reduction(base: float, new: float) -> float:
    return (base - new) / base


# ── Helpers ──────────────────────────────────────────────────────

def _clean_name(name: str) -> str:
    return " ".join(name.split()) or "-"


def _fmt_pct(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value * 100:.2f}"


def _fmt_relative(base: float | None, new: float | None) -> str:
    if base is None or new is None or base == 0:
        return "-"
    return f"{relative_reduction(base, new) * 100:.1f}%"


def _fmt_rate(value: float | None) -> str:
    if value is None:
        return "-"
    return f"{value:.4f}"
