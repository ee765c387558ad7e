"""Turn free-text LLM replies into corrections, score lists or selections.

Every parser is total: it returns a structured value or an explicit
fallback, whatever bytes it is given. Line endings are normalized first.
"""

from __future__ import annotations

import math
import re
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum

from llmrescore.config import NormConfig
from llmrescore.nbest import normalize


class OutputKind(StrEnum):
    CORRECTION = "correction"
    SCORES = "scores"
    SELECTION = "selection"


class ConfidenceNote(StrEnum):
    CLEAN = "clean"
    RECOVERED = "recovered"
    FALLBACK = "fallback"


@dataclass(frozen=True)
class ParsedLlmOutput:
    kind: OutputKind
    note: ConfidenceNote
    words: tuple[str, ...] | None = None
    scores: tuple[float, ...] | None = None
    index: int | None = None  # 1-based

    @property
    def is_fallback(self) -> bool:
        return self.note == ConfidenceNote.FALLBACK

    def to_dict(self) -> dict:
        value: object = None
        if self.kind == OutputKind.CORRECTION and self.words is not None:
            value = " ".join(self.words)
        elif self.kind == OutputKind.SCORES and self.scores is not None:
            value = list(self.scores)
        elif self.kind == OutputKind.SELECTION:
            value = self.index
        return {"kind": str(self.kind), "note": str(self.note), "value": value}


@dataclass
class ParserStats:
    clean: int = 0
    recovered: int = 0
    fallback: int = 0

    def record(self, note: ConfidenceNote) -> None:
        setattr(self, str(note), getattr(self, str(note)) + 1)

    @property
    def total(self) -> int:
        return self.clean + self.recovered + self.fallback

    def to_dict(self) -> dict[str, int]:
        return {"clean": self.clean, "recovered": self.recovered, "fallback": self.fallback}


def _fallback(kind: OutputKind) -> ParsedLlmOutput:
    return ParsedLlmOutput(kind=kind, note=ConfidenceNote.FALLBACK)


def _lines(text: str) -> list[str]:
    return text.replace("\r\n", "\n").replace("\r", "\n").split("\n")


# ── Corrections ──────────────────────────────────────────────────

_ANSWER_MARKERS = ("final output", "transcription")
_QUOTED_RE = re.compile(r'"([^"\n]+)"|“([^”\n]+)”')
# Stems, so plural and inflected forms count too; refusals fall back
_META_VOCAB = (
    "hypothes",
    "probabilit",
    "rescor",
    "answer",
    "cannot",
    "can't",
    "unable",
    "sorry",
)


def parse_correction(text: str, norm: NormConfig | None = None) -> ParsedLlmOutput:
    lines = _lines(text)
    kind = OutputKind.CORRECTION

    for line in reversed(lines):
        lowered = line.lower()
        if ":" in line and any(marker in lowered for marker in _ANSWER_MARKERS):
            words = normalize(line.rsplit(":", 1)[1], norm)
            if words:
                return ParsedLlmOutput(kind=kind, note=ConfidenceNote.CLEAN, words=words)

    quoted = [a or b for a, b in _QUOTED_RE.findall("\n".join(lines))]
    if len(quoted) == 1:
        words = normalize(quoted[0], norm)
        if words:
            return ParsedLlmOutput(kind=kind, note=ConfidenceNote.RECOVERED, words=words)

    last = next((line for line in reversed(lines) if line.strip()), "")
    if last and not any(stem in last.lower() for stem in _META_VOCAB):
        words = normalize(last, norm)
        if words:
            return ParsedLlmOutput(kind=kind, note=ConfidenceNote.RECOVERED, words=words)

    return _fallback(kind)


# ── Score lists ──────────────────────────────────────────────────

_NUM = r"[-+]?(?:\d{1,12}(?:\.\d*)?|\.\d+)(?:[eE][-+]?\d{1,4})?"
_SCORE_RE = re.compile(rf"^\s*(\d{{1,6}})\s*[.:]\s*({_NUM})\s*$")
_SCORE_TRAILING_RE = re.compile(rf"^\s*(\d{{1,6}})\s*[.:)]\s.*?[:=]\s*({_NUM})\s*\.?\s*$")


def parse_scores(text: str, n: int) -> ParsedLlmOutput:
    """Accept ``k. v`` / ``k: v`` lines; ``k. text: v`` is recovered."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    kind = OutputKind.SCORES
    values: dict[int, float] = {}
    recovered = False

    for line in _lines(text):
        match = _SCORE_RE.match(line)
        loose = False
        if match is None:
            match = _SCORE_TRAILING_RE.match(line)
            loose = True
        if match is None:
            continue
        index = int(match.group(1))
        value = float(match.group(2))
        if not 1 <= index <= n or not math.isfinite(value):
            continue
        if index in values or loose:
            recovered = True
        values[index] = value

    if len(values) < n:
        return _fallback(kind)
    note = ConfidenceNote.RECOVERED if recovered else ConfidenceNote.CLEAN
    return ParsedLlmOutput(kind=kind, note=note, scores=tuple(values[i] for i in range(1, n + 1)))


# ── Selections ───────────────────────────────────────────────────

_SELECT_RE = re.compile(
    r"(?:\b(?:hypothesis|hypotheses|number|option)\b|#)\s*(?:#|no\.)?\s*(\d{1,6})(?!\d)",
    re.IGNORECASE,
)
_INT_RE = re.compile(r"(?<![\w.])(\d{1,6})(?![\w]|\.\d)")


def parse_selection(
    text: str,
    n: int,
    hypotheses: Sequence[Sequence[str]] = (),
    norm: NormConfig | None = None,
) -> ParsedLlmOutput:
    """Selection vocabulary + integer, else a hypothesis matching the reply's
    tail, else the first standalone integer in range (recovered)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    kind = OutputKind.SELECTION
    cleaned = "\n".join(_lines(text))

    for match in _SELECT_RE.finditer(cleaned):
        index = int(match.group(1))
        if 1 <= index <= n:
            return ParsedLlmOutput(kind=kind, note=ConfidenceNote.CLEAN, index=index)

    reply = normalize(cleaned, norm)
    best: int | None = None
    best_len = 0
    for rank, words in enumerate(hypotheses[:n], start=1):
        words = tuple(words)
        if words and len(words) > best_len and reply[-len(words):] == words:
            best, best_len = rank, len(words)
    if best is not None:
        return ParsedLlmOutput(kind=kind, note=ConfidenceNote.CLEAN, index=best)

    for match in _INT_RE.finditer(cleaned):
        index = int(match.group(1))
        if 1 <= index <= n:
            return ParsedLlmOutput(kind=kind, note=ConfidenceNote.RECOVERED, index=index)

    return _fallback(kind)


def parse_response(
    text: str,
    kind: OutputKind,
    n: int,
    hypotheses: Sequence[Sequence[str]] = (),
    norm: NormConfig | None = None,
) -> ParsedLlmOutput:
    if kind == OutputKind.CORRECTION:
        return parse_correction(text, norm)
    if kind == OutputKind.SCORES:
        return parse_scores(text, n)
    return parse_selection(text, n, hypotheses, norm)
