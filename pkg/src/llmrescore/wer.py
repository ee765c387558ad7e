from __future__ import annotations

from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field

import structlog

from llmrescore.nbest import NBestList

log = structlog.get_logger()

Selector = Mapping[str, int] | Callable[[str], int]


class EmptyReferenceError(ValueError):
    """WER requested against a zero-length reference."""


class SelectionError(ValueError):
    """Selector returned an index outside the N-best list, or no reference."""


@dataclass(frozen=True)
class AlignmentResult:
    substitutions: int
    insertions: int
    deletions: int
    ref_len: int

    @property
    def errors(self) -> int:
        return self.substitutions + self.insertions + self.deletions


def align(reference: Sequence[str], hypothesis: Sequence[str]) -> AlignmentResult:
    """Minimum edit-distance alignment under unit costs.

    Cells carry (errors, insertions + deletions) compared lexicographically,
    so among minimum-error alignments the substitution-heaviest one wins and
    the decomposition is unique. Remaining back-trace ties go sub > ins > del.
    """
    n, m = len(reference), len(hypothesis)
    cost = [[(0, 0)] * (m + 1) for _ in range(n + 1)]
    for i in range(1, n + 1):
        cost[i][0] = (i, i)
    for j in range(1, m + 1):
        cost[0][j] = (j, j)

    for i in range(1, n + 1):
        row, prev = cost[i], cost[i - 1]
        r = reference[i - 1]
        for j in range(1, m + 1):
            e, g = prev[j - 1]
            diag = (e + (r != hypothesis[j - 1]), g)
            e, g = row[j - 1]
            ins = (e + 1, g + 1)
            e, g = prev[j]
            dele = (e + 1, g + 1)
            row[j] = min(diag, ins, dele)

    subs = ins_count = del_count = 0
    i, j = n, m
    while i > 0 or j > 0:
        here = cost[i][j]
        if i > 0 and j > 0:
            e, g = cost[i - 1][j - 1]
            mismatch = reference[i - 1] != hypothesis[j - 1]
            if here == (e + mismatch, g):
                subs += mismatch
                i, j = i - 1, j - 1
                continue
        if j > 0:
            e, g = cost[i][j - 1]
            if here == (e + 1, g + 1):
                ins_count += 1
                j -= 1
                continue
        del_count += 1
        i -= 1

    return AlignmentResult(
        substitutions=subs, insertions=ins_count, deletions=del_count, ref_len=n
    )


def edit_errors(reference: Sequence[str], hypothesis: Sequence[str]) -> int:
    return align(reference, hypothesis).errors


def utterance_wer(alignment: AlignmentResult) -> float:
    if alignment.ref_len == 0:
        raise EmptyReferenceError("WER is undefined for a zero-length reference")
    return alignment.errors / alignment.ref_len


@dataclass(frozen=True)
class UtteranceScore:
    index: int  # 0-based position of the scored hypothesis
    alignment: AlignmentResult
    wer: float


@dataclass(frozen=True)
class WerReport:
    per_utterance: dict[str, UtteranceScore] = field(default_factory=dict)
    corpus_wer: float = 0.0
    total_ref_words: int = 0
    total_errors: int = 0

    def to_dict(self) -> dict:
        return {
            "corpus_wer": self.corpus_wer,
            "total_errors": self.total_errors,
            "total_ref_words": self.total_ref_words,
            "per_utterance": {
                utt_id: {
                    "index": s.index,
                    "wer": s.wer,
                    "sub": s.alignment.substitutions,
                    "ins": s.alignment.insertions,
                    "del": s.alignment.deletions,
                    "ref_len": s.alignment.ref_len,
                }
                for utt_id, s in sorted(self.per_utterance.items())
            },
        }


def _require_reference(nbest: NBestList) -> tuple[str, ...]:
    if nbest.reference is None:
        raise SelectionError(f"utterance {nbest.utterance_id!r} has no reference")
    return nbest.reference


def oracle_index(nbest: NBestList) -> int:
    """Index of the hypothesis with fewest edit errors; ties go to the lowest rank."""
    reference = _require_reference(nbest)
    best, best_errors = 0, None
    for i, hyp in enumerate(nbest.hypotheses):
        errors = edit_errors(reference, hyp.text)
        if best_errors is None or errors < best_errors:
            best, best_errors = i, errors
    return best


def corpus_wer(
    lists: Sequence[NBestList], selector: Selector, *, skip_empty: bool = False
) -> WerReport:
    """Error-weighted WER of the selected hypotheses (Σ errors / Σ ref_len)."""
    pick = selector.__getitem__ if isinstance(selector, Mapping) else selector
    per_utt: dict[str, UtteranceScore] = {}
    total_errors = total_words = 0

    for nbest in lists:
        reference = _require_reference(nbest)
        index = pick(nbest.utterance_id)
        if not 0 <= index < nbest.n:
            raise SelectionError(
                f"utterance {nbest.utterance_id!r}: index {index} outside 0..{nbest.n - 1}"
            )
        alignment = align(reference, nbest.hypotheses[index].text)
        if alignment.ref_len == 0:
            if skip_empty:
                log.warning("empty_reference_skipped", utterance_id=nbest.utterance_id)
                continue
            raise EmptyReferenceError(f"utterance {nbest.utterance_id!r} has an empty reference")
        per_utt[nbest.utterance_id] = UtteranceScore(
            index=index, alignment=alignment, wer=utterance_wer(alignment)
        )
        total_errors += alignment.errors
        total_words += alignment.ref_len

    wer = total_errors / total_words if total_words else 0.0
    return WerReport(
        per_utterance=per_utt,
        corpus_wer=wer,
        total_ref_words=total_words,
        total_errors=total_errors,
    )


def oracle_selector(lists: Sequence[NBestList]) -> dict[str, int]:
    return {nbest.utterance_id: oracle_index(nbest) for nbest in lists}


def oracle_wer(lists: Sequence[NBestList], *, skip_empty: bool = False) -> WerReport:
    return corpus_wer(lists, oracle_selector(lists), skip_empty=skip_empty)


def first_pass_wer(lists: Sequence[NBestList], *, skip_empty: bool = False) -> WerReport:
    return corpus_wer(lists, lambda _utt_id: 0, skip_empty=skip_empty)
