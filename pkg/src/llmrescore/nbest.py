"""N-best domain types, text normalization and the JSON Lines N-best format.

One JSON object per utterance::

    {"id": "u1", "reference": "a b" | null,
     "hypotheses": [{"text": "a b", "score": -1.2}, ...]}

Array order defines rank.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, replace
from typing import IO

from llmrescore.config import NormConfig

Words = tuple[str, ...]


class NBestFormatError(ValueError):
    """Malformed N-best input or a violated N-best invariant."""


def normalize(raw_text: str, config: NormConfig | None = None) -> Words:
    config = config or NormConfig()
    text = raw_text.lower() if config.lowercase else raw_text
    if config.strip_chars:
        text = text.translate(str.maketrans("", "", config.strip_chars))
    return tuple(text.split())


@dataclass(frozen=True)
class Hypothesis:
    text: Words
    first_pass_score: float
    rank: int

    def __post_init__(self) -> None:
        if self.rank < 1:
            raise NBestFormatError(f"rank must be >= 1, got {self.rank}")
        for token in self.text:
            if not token or token != token.strip() or len(token.split()) != 1:
                raise NBestFormatError(f"invalid token {token!r} in hypothesis")
        if not math.isfinite(self.first_pass_score):
            raise NBestFormatError(f"non-finite score {self.first_pass_score!r}")

    @property
    def sentence(self) -> str:
        return " ".join(self.text)


@dataclass(frozen=True)
class NBestList:
    utterance_id: str
    hypotheses: tuple[Hypothesis, ...]
    reference: Words | None = None

    def __post_init__(self) -> None:
        if not self.hypotheses:
            raise NBestFormatError(f"{self.utterance_id}: empty hypothesis list")
        ranks = [h.rank for h in self.hypotheses]
        if ranks != list(range(1, len(ranks) + 1)):
            raise NBestFormatError(
                f"{self.utterance_id}: ranks must be 1..{len(ranks)} in order, got {ranks}"
            )

    def __len__(self) -> int:
        return len(self.hypotheses)

    @property
    def n(self) -> int:
        return len(self.hypotheses)

    @property
    def scores(self) -> list[float]:
        return [h.first_pass_score for h in self.hypotheses]

    @classmethod
    def build(
        cls,
        utterance_id: str,
        hypotheses: Iterable[tuple[Sequence[str], float]],
        reference: Sequence[str] | None = None,
    ) -> NBestList:
        """Assign ranks 1..N from iteration order."""
        hyps = tuple(
            Hypothesis(text=tuple(words), first_pass_score=float(score), rank=i)
            for i, (words, score) in enumerate(hypotheses, start=1)
        )
        ref = tuple(reference) if reference is not None else None
        return cls(utterance_id=utterance_id, hypotheses=hyps, reference=ref)

    def append(self, words: Sequence[str], score: float) -> NBestList:
        """Return a copy with one more hypothesis at rank N+1."""
        extra = Hypothesis(text=tuple(words), first_pass_score=float(score), rank=self.n + 1)
        return replace(self, hypotheses=(*self.hypotheses, extra))


# ── JSON Lines I/O ───────────────────────────────────────────────

def parse_nbest_line(line: str, config: NormConfig | None = None) -> NBestList:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise NBestFormatError(f"invalid JSON: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise NBestFormatError("expected a JSON object")

    utt_id = obj.get("id")
    if not isinstance(utt_id, str) or not utt_id:
        raise NBestFormatError("missing or non-string 'id'")

    ref_raw = obj.get("reference")
    if ref_raw is not None and not isinstance(ref_raw, str):
        raise NBestFormatError(f"{utt_id}: 'reference' must be a string or null")

    hyps_raw = obj.get("hypotheses")
    if not isinstance(hyps_raw, list):
        raise NBestFormatError(f"{utt_id}: 'hypotheses' must be a list")

    pairs: list[tuple[Words, float]] = []
    for item in hyps_raw:
        if not isinstance(item, dict) or not isinstance(item.get("text"), str):
            raise NBestFormatError(f"{utt_id}: hypothesis needs a string 'text'")
        score = item.get("score")
        if isinstance(score, bool) or not isinstance(score, (int, float)):
            raise NBestFormatError(f"{utt_id}: hypothesis 'score' must be a number")
        pairs.append((normalize(item["text"], config), float(score)))

    reference = normalize(ref_raw, config) if ref_raw is not None else None
    return NBestList.build(utt_id, pairs, reference)


def read_nbest(source: Iterable[str], config: NormConfig | None = None) -> list[NBestList]:
    """Parse N-best JSON Lines; errors name the offending line number."""
    lists: list[NBestList] = []
    seen: set[str] = set()
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        try:
            nbest = parse_nbest_line(line, config)
        except NBestFormatError as exc:
            raise NBestFormatError(f"line {line_no}: {exc}") from exc
        if nbest.utterance_id in seen:
            raise NBestFormatError(f"line {line_no}: duplicate id {nbest.utterance_id!r}")
        seen.add(nbest.utterance_id)
        lists.append(nbest)
    return lists


def nbest_to_json(nbest: NBestList) -> str:
    obj = {
        "id": nbest.utterance_id,
        "reference": " ".join(nbest.reference) if nbest.reference is not None else None,
        "hypotheses": [
            {"text": h.sentence, "score": h.first_pass_score} for h in nbest.hypotheses
        ],
    }
    return json.dumps(obj, ensure_ascii=False)


def write_nbest(lists: Iterable[NBestList], fp: IO[str]) -> int:
    count = 0
    for nbest in lists:
        fp.write(nbest_to_json(nbest) + "\n")
        count += 1
    return count
