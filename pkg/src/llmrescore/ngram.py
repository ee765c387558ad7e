"""ARPA backoff n-gram models: loading, scoring and N-best rescoring.

All probabilities are stored as in the file (log10). Conversion to natural
log happens at the fusion boundary.
"""

from __future__ import annotations

import math
import re
from collections import deque
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import structlog

from llmrescore.config import FusionConfig
from llmrescore.nbest import Hypothesis, NBestList

log = structlog.get_logger()

BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
LN10 = math.log(10.0)

_HEADER_RE = re.compile(r"^ngram\s+(\d+)\s*=\s*(\d+)$")
_SECTION_RE = re.compile(r"^\\(\d+)-grams:$")


class ArpaFormatError(ValueError):
    def __init__(self, message: str, line_no: int | None = None) -> None:
        self.line_no = line_no
        prefix = f"line {line_no}: " if line_no is not None else ""
        super().__init__(prefix + message)


class OovError(LookupError):
    def __init__(self, words: Sequence[str]) -> None:
        self.words = tuple(words)
        super().__init__(f"out-of-vocabulary words with no <unk> mapping: {', '.join(self.words)}")


class NgramEntry(NamedTuple):
    log10_prob: float
    log10_backoff: float | None = None


@dataclass(frozen=True)
class NgramModel:
    max_order: int
    tables: Mapping[int, Mapping[tuple[str, ...], NgramEntry]]

    @cached_property
    def vocab(self) -> frozenset[str]:
        return frozenset(words[0] for words in self.tables[1])

    def counts(self) -> dict[int, int]:
        return {order: len(self.tables[order]) for order in sorted(self.tables)}

    def word_logprob(self, history: Sequence[str], word: str) -> float:
        """log10 P(word | history) under the backoff recursion.

        An unstored history contributes a backoff weight of 1 (log 0).
        """
        context = tuple(history)[-(self.max_order - 1):] if self.max_order > 1 else ()
        total = 0.0
        while True:
            gram = (*context, word)
            entry = self.tables[len(gram)].get(gram)
            if entry is not None:
                return total + entry.log10_prob
            if not context:
                raise OovError([word])
            ctx_entry = self.tables[len(context)].get(context)
            if ctx_entry is not None and ctx_entry.log10_backoff is not None:
                total += ctx_entry.log10_backoff
            context = context[1:]


# ── Loading ──────────────────────────────────────────────────────

def _parse_float(field: str, line_no: int) -> float:
    try:
        value = float(field)
    except ValueError:
        raise ArpaFormatError(f"non-numeric field {field!r}", line_no) from None
    if math.isnan(value):
        raise ArpaFormatError(f"NaN field {field!r}", line_no)
    return value


def load_arpa(stream: Iterable[str]) -> NgramModel:
    """Parse ARPA text. Accepts LF and CRLF line endings."""
    declared: dict[int, int] = {}
    tables: dict[int, dict[tuple[str, ...], NgramEntry]] = {}
    state = "preamble"
    order = 0
    line_no = 0

    def _close_section(at_line: int) -> None:
        if order and len(tables[order]) != declared[order]:
            raise ArpaFormatError(
                f"{order}-gram section has {len(tables[order])} entries, "
                f"header declares {declared[order]}",
                at_line,
            )

    for line_no, raw in enumerate(stream, start=1):
        line = raw.rstrip("\r\n").strip()

        if state == "preamble":
            if line == "\\data\\":
                state = "header"
            continue

        if state == "header":
            if not line:
                continue
            match = _HEADER_RE.match(line)
            if match:
                n, count = int(match.group(1)), int(match.group(2))
                if n < 1 or n in declared:
                    raise ArpaFormatError(f"bad or repeated order in header: {line!r}", line_no)
                declared[n] = count
                continue
            if not declared:
                raise ArpaFormatError("header declares no n-gram counts", line_no)
            if sorted(declared) != list(range(1, len(declared) + 1)):
                raise ArpaFormatError(f"header orders not contiguous: {sorted(declared)}", line_no)
            state = "body"
            # fall through: the line is a section marker or \end\

        if state == "body":
            if not line:
                continue
            if line == "\\end\\":
                _close_section(line_no)
                state = "done"
                break
            match = _SECTION_RE.match(line)
            if match:
                _close_section(line_no)
                n = int(match.group(1))
                if n != order + 1 or n not in declared:
                    raise ArpaFormatError(f"unexpected section \\{n}-grams:", line_no)
                order = n
                tables[order] = {}
                continue
            if not order:
                raise ArpaFormatError(f"entry outside any section: {line!r}", line_no)
            _parse_entry(line, order, tables, line_no)

    if state == "preamble":
        raise ArpaFormatError("missing \\data\\ header")
    if state != "done":
        raise ArpaFormatError("unterminated model", line_no)

    missing = [n for n in declared if n not in tables]
    if missing:
        raise ArpaFormatError(f"header declares orders with no section: {missing}")

    model = NgramModel(max_order=max(declared), tables=tables)
    log.debug("arpa_loaded", counts=model.counts())
    return model


def _parse_entry(
    line: str,
    order: int,
    tables: dict[int, dict[tuple[str, ...], NgramEntry]],
    line_no: int,
) -> None:
    fields = line.split()
    if len(fields) not in (order + 1, order + 2):
        raise ArpaFormatError(
            f"expected {order + 1} or {order + 2} fields for a {order}-gram, got {len(fields)}",
            line_no,
        )
    prob = _parse_float(fields[0], line_no)
    words = tuple(fields[1:order + 1])
    backoff = _parse_float(fields[order + 1], line_no) if len(fields) == order + 2 else None
    if prob > 0:
        raise ArpaFormatError(f"positive log10 probability {prob} for {words}", line_no)
    if order > 1 and words[:-1] not in tables[order - 1]:
        raise ArpaFormatError(f"dangling prefix {words[:-1]} for {order}-gram {words}", line_no)
    tables[order][words] = NgramEntry(prob, backoff)


def dump_arpa(model: NgramModel) -> str:
    """Serialize back to ARPA text; floats are written with ``repr`` so reloading is exact."""
    out = ["\\data\\"]
    out += [f"ngram {n}={count}" for n, count in model.counts().items()]
    for n in sorted(model.tables):
        out += ["", f"\\{n}-grams:"]
        for words, entry in model.tables[n].items():
            cols = [repr(entry.log10_prob), " ".join(words)]
            if entry.log10_backoff is not None:
                cols.append(repr(entry.log10_backoff))
            out.append("\t".join(cols))
    out += ["", "\\end\\", ""]
    return "\n".join(out)


# ── Scoring ──────────────────────────────────────────────────────

def _map_oov(model: NgramModel, words: Sequence[str], oov: str) -> list[str]:
    vocab = model.vocab
    unknown = [w for w in words if w not in vocab]
    if not unknown:
        return list(words)
    if oov == "unk" and UNK in vocab:
        return [w if w in vocab else UNK for w in words]
    raise OovError(sorted(set(unknown)))


def _score_tokens(model: NgramModel, tokens: Sequence[str], history: Sequence[str]) -> float:
    # Only the last max_order - 1 tokens can condition the next one
    context: deque[str] = deque(history, maxlen=max(model.max_order - 1, 0))
    total = 0.0
    for token in tokens:
        total += model.word_logprob(context, token)
        context.append(token)
    return total


def score_sequence(
    model: NgramModel,
    words: Sequence[str],
    add_markers: bool = True,
    oov: str = "error",
) -> float:
    """Total log10 probability of ``words``.

    With markers, ``<s>`` is context only and ``</s>`` is scored.
    """
    mapped = _map_oov(model, words, oov)
    if add_markers:
        return _score_tokens(model, [*mapped, EOS], [BOS])
    return _score_tokens(model, mapped, [])


def ngram_rescore(
    lists: Sequence[NBestList],
    model: NgramModel,
    fusion: FusionConfig,
    *,
    add_markers: bool = True,
    oov: str = "error",
) -> dict[str, int]:
    """Select per utterance the argmax of fused first-pass + LM score.

    Ties go to the lowest rank.
    """
    from llmrescore.pipelines import select_fused

    selections: dict[str, int] = {}
    for nbest in lists:
        lm_scores = [
            LN10 * score_sequence(model, h.text, add_markers=add_markers, oov=oov)
            for h in nbest.hypotheses
        ]
        selections[nbest.utterance_id] = select_fused(nbest, lm_scores, fusion)
    return selections


class NgramProbSource:
    """Sequence-probability provider for the H2T loss.

    P(y* | x) is the per-token geometric mean of the probability of the
    reference continuing the hypothesis as left context, so it lies in (0, 1].
    """

    def __init__(self, model: NgramModel, oov: str = "unk") -> None:
        self._model = model
        self._oov = oov

    def __call__(self, hypothesis: Hypothesis, reference: Sequence[str]) -> float:
        context = [BOS, *_map_oov(self._model, hypothesis.text, self._oov)]
        target = [*_map_oov(self._model, reference, self._oov), EOS]
        logp = _score_tokens(self._model, target, context)
        return 10.0 ** (logp / len(target))
