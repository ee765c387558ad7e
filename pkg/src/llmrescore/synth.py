"""Seeded word-level noisy channel that turns references into N-best lists.

Each utterance draws from its own generator, seeded from the corpus seed and
a hash of the utterance id, so a corpus is stable under reordering.
"""

from __future__ import annotations

import hashlib
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog

from llmrescore.config import NormConfig
from llmrescore.nbest import NBestFormatError, NBestList, Words, normalize

log = structlog.get_logger()

MAX_DRAW_ATTEMPTS = 100


@dataclass(frozen=True)
class ChannelConfig:
    sub_rate: float = 0.1
    ins_rate: float = 0.02
    del_rate: float = 0.02
    confusion_table: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    n: int = 5
    include_reference_rank: int | None = None
    seed: int = 0
    score_noise_sigma: float = 0.0
    # Insertion words, and substitutes for words missing from the confusion table
    vocabulary: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("sub_rate", "ins_rate", "del_rate"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.sub_rate + self.del_rate > 1.0:
            raise ValueError("sub_rate + del_rate must not exceed 1")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")
        if self.include_reference_rank is not None and not 1 <= self.include_reference_rank <= self.n:
            raise ValueError(f"include_reference_rank must be in 1..{self.n}")
        if not math.isfinite(self.score_noise_sigma) or self.score_noise_sigma < 0:
            raise ValueError("score_noise_sigma must be finite and >= 0")
        for word, alternatives in self.confusion_table.items():
            if not alternatives or any(w <= 0 for w in alternatives.values()):
                raise ValueError(f"confusion entry for {word!r} needs positive weights")

    def to_dict(self) -> dict:
        return {
            "sub_rate": self.sub_rate,
            "ins_rate": self.ins_rate,
            "del_rate": self.del_rate,
            "confusion_table": {w: dict(alts) for w, alts in sorted(self.confusion_table.items())},
            "n": self.n,
            "include_reference_rank": self.include_reference_rank
            if self.include_reference_rank is not None
            else "never",
            "seed": self.seed,
            "score_noise_sigma": self.score_noise_sigma,
            "vocabulary": list(self.vocabulary),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> ChannelConfig:
        rank = data.get("include_reference_rank")
        return cls(
            sub_rate=float(data.get("sub_rate", 0.1)),
            ins_rate=float(data.get("ins_rate", 0.02)),
            del_rate=float(data.get("del_rate", 0.02)),
            confusion_table={
                w: {a: float(p) for a, p in alts.items()}
                for w, alts in data.get("confusion_table", {}).items()
            },
            n=int(data.get("n", 5)),
            include_reference_rank=None if rank in (None, "never") else int(rank),
            seed=int(data.get("seed", 0)),
            score_noise_sigma=float(data.get("score_noise_sigma", 0.0)),
            vocabulary=tuple(data.get("vocabulary", ())),
        )


def child_rng(seed: int, utterance_id: str) -> np.random.Generator:
    digest = hashlib.sha256(utterance_id.encode("utf-8")).digest()
    return np.random.default_rng(np.random.SeedSequence([seed, int.from_bytes(digest[:8], "big")]))


def _substitute(word: str, cfg: ChannelConfig, rng: np.random.Generator) -> str | None:
    alternatives = cfg.confusion_table.get(word)
    if alternatives:
        words = list(alternatives)
        weights = np.array([alternatives[w] for w in words], dtype=np.float64)
        return words[rng.choice(len(words), p=weights / weights.sum())]
    pool = [w for w in cfg.vocabulary if w != word]
    if not pool:
        return None
    return pool[rng.integers(len(pool))]


def corrupt(reference: Sequence[str], cfg: ChannelConfig, rng: np.random.Generator) -> tuple[Words, int]:
    """One pass of the channel; returns the words and the corruption count."""
    out: list[str] = []
    count = 0
    for word in reference:
        u = rng.random()
        if u < cfg.del_rate:
            count += 1
        elif u < cfg.del_rate + cfg.sub_rate and (sub := _substitute(word, cfg, rng)) is not None:
            out.append(sub)
            count += 1
        else:
            out.append(word)
        if cfg.vocabulary and rng.random() < cfg.ins_rate:
            out.append(cfg.vocabulary[rng.integers(len(cfg.vocabulary))])
            count += 1
    return tuple(out), count


def _generate(
    reference: Words, cfg: ChannelConfig, rng: np.random.Generator, utterance_id: str
) -> tuple[NBestList, bool]:
    if not reference:
        raise ValueError(f"{utterance_id}: reference must be non-empty")
    with_reference = cfg.include_reference_rank is not None
    wanted = cfg.n - 1 if with_reference else cfg.n
    seen: set[Words] = {reference} if with_reference else set()
    drawn: list[tuple[Words, float]] = []
    duplicates = False

    for _ in range(wanted):
        for _attempt in range(MAX_DRAW_ATTEMPTS):
            words, count = corrupt(reference, cfg, rng)
            if words not in seen:
                break
        else:
            duplicates = True
        seen.add(words)
        noise = rng.normal(0.0, cfg.score_noise_sigma) if cfg.score_noise_sigma > 0 else 0.0
        drawn.append((words, -float(count) + float(noise)))

    # Stable sort keeps draw order among equal scores
    drawn.sort(key=lambda pair: -pair[1])

    if with_reference:
        at = cfg.include_reference_rank - 1
        if at < len(drawn):
            score = drawn[at][1]
        elif drawn:
            score = drawn[-1][1]
        else:
            score = 0.0
        drawn.insert(at, (reference, score))

    return NBestList.build(utterance_id, drawn, reference), duplicates


def generate(reference: Sequence[str], cfg: ChannelConfig, utterance_id: str = "utt") -> NBestList:
    nbest, duplicates = _generate(tuple(reference), cfg, child_rng(cfg.seed, utterance_id), utterance_id)
    if duplicates:
        log.warning("duplicate_hypotheses", utterance_id=utterance_id)
    return nbest


@dataclass(frozen=True)
class SynthManifest:
    channel: ChannelConfig
    utterances: int
    duplicate_ids: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.to_dict(),
            "utterances": self.utterances,
            "duplicate_ids": list(self.duplicate_ids),
            "seed_rule": "SeedSequence([seed, sha256(utterance_id)[:8]])",
        }


def generate_corpus(
    references: Iterable[tuple[str, Sequence[str]]], cfg: ChannelConfig
) -> tuple[list[NBestList], SynthManifest]:
    lists: list[NBestList] = []
    flagged: list[str] = []
    ids: set[str] = set()
    for utterance_id, words in references:
        if utterance_id in ids:
            raise ValueError(f"duplicate utterance id {utterance_id!r}")
        ids.add(utterance_id)
        nbest, duplicates = _generate(
            tuple(words), cfg, child_rng(cfg.seed, utterance_id), utterance_id
        )
        if duplicates:
            flagged.append(utterance_id)
        lists.append(nbest)
    if flagged:
        log.warning("duplicate_hypotheses", utterances=len(flagged))
    manifest = SynthManifest(channel=cfg, utterances=len(lists), duplicate_ids=tuple(flagged))
    log.info("synth_corpus_generated", utterances=len(lists), duplicates=len(flagged))
    return lists, manifest


def read_references(
    lines: Iterable[str], norm: NormConfig | None = None
) -> list[tuple[str, Words]]:
    """``id<TAB>text`` lines, or bare text lines numbered ``utt00001``... ."""
    refs: list[tuple[str, Words]] = []
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        if "\t" in line:
            utt_id, text = line.split("\t", 1)
        else:
            utt_id, text = f"utt{len(refs) + 1:05d}", line
        words = normalize(text, norm)
        if not words:
            raise NBestFormatError(f"line {line_no}: empty reference")
        refs.append((utt_id.strip(), words))
    return refs
