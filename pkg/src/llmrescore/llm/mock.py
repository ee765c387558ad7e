"""Deterministic in-process backend for offline runs and tests.

Responses are a pure function of (request tag, behavior, seed); random
latency and failure injection never change response text.
"""

from __future__ import annotations

import asyncio
import json
import random
from collections.abc import Callable, Iterable, Mapping
from dataclasses import dataclass, field
from enum import StrEnum

import structlog

from llmrescore.llm.base import (
    FinishReason,
    LlmRequest,
    LlmResponse,
    LlmStatusError,
    LlmTimeoutError,
    LlmTransportError,
)
from llmrescore.nbest import Hypothesis, NBestList
from llmrescore.wer import edit_errors

log = structlog.get_logger()

ScoreFn = Callable[[Hypothesis, NBestList], float]


class MockScriptError(ValueError):
    """The mock was asked for something its behavior cannot answer.

    A broken fixture, not a backend failure: it is deliberately not an
    ``LlmError``, so it aborts the whole batch instead of landing in a slot
    as a fallback, and the CLI reports it as an input error.
    """


class MockMode(StrEnum):
    ECHO_ORACLE = "echo"
    SCRIPTED = "scripted"
    RANK_K = "rank"
    SCORE_LIST = "scorelist"


def negative_edit_distance(hyp: Hypothesis, nbest: NBestList) -> float:
    if nbest.reference is None:
        raise MockScriptError(f"score list needs a reference for {nbest.utterance_id!r}")
    return -float(edit_errors(nbest.reference, hyp.text))


@dataclass(frozen=True)
class MockBehavior:
    mode: MockMode
    seed: int = 0
    k: int = 1
    script: Mapping[str, str] = field(default_factory=dict)
    score_fn: ScoreFn = negative_edit_distance
    max_latency_sec: float = 0.0
    fail_tags: frozenset[str] = frozenset()
    fail_kind: str = "transport"  # 'transport' | 'timeout' | 'status' | 'client'

    def describe(self) -> dict:
        return {
            "mode": str(self.mode),
            "seed": self.seed,
            "k": self.k,
            "script_tags": sorted(self.script),
        }


class MockBackend:
    def __init__(self, behavior: MockBehavior, lists: Iterable[NBestList] = ()) -> None:
        self._behavior = behavior
        self._lists = {nb.utterance_id: nb for nb in lists}
        self.issued: list[str] = []
        self.in_flight = 0
        self.max_in_flight_seen = 0

    @property
    def behavior(self) -> MockBehavior:
        return self._behavior

    async def complete(self, req: LlmRequest) -> LlmResponse:
        tag = req.request_tag
        self.issued.append(tag)
        self.in_flight += 1
        self.max_in_flight_seen = max(self.max_in_flight_seen, self.in_flight)
        try:
            delay = 0.0
            if self._behavior.max_latency_sec > 0:
                rng = random.Random(f"{self._behavior.seed}:{tag}:{len(self.issued)}")
                delay = rng.uniform(0, self._behavior.max_latency_sec)
                await asyncio.sleep(delay)
            else:
                await asyncio.sleep(0)

            if tag in self._behavior.fail_tags:
                raise self._failure(tag)

            text = self.respond(tag)
        finally:
            self.in_flight -= 1

        raw = json.dumps(
            {"mode": str(self._behavior.mode), "tag": tag, "text": text},
            sort_keys=True,
            ensure_ascii=False,
        ).encode("utf-8")
        return LlmResponse(
            text=text,
            finish_reason=FinishReason.STOP,
            latency=delay,
            raw_payload=raw,
            request_tag=tag,
        )

    def respond(self, tag: str) -> str:
        b = self._behavior
        if b.mode == MockMode.SCRIPTED:
            if tag not in b.script:
                raise MockScriptError(f"script has no response for tag {tag!r}")
            return b.script[tag]

        nbest = self._lists.get(tag)
        if nbest is None:
            raise MockScriptError(f"no N-best list for tag {tag!r}")

        if b.mode == MockMode.ECHO_ORACLE:
            if nbest.reference is None:
                raise MockScriptError(f"echo oracle needs a reference for {tag!r}")
            return " ".join(nbest.reference)
        if b.mode == MockMode.RANK_K:
            index = min(max(b.k, 1), nbest.n) - 1
            return nbest.hypotheses[index].sentence
        if b.mode == MockMode.SCORE_LIST:
            return "\n".join(
                f"{h.rank}. {float(b.score_fn(h, nbest))!r}" for h in nbest.hypotheses
            )
        raise MockScriptError(f"unknown mock mode {b.mode!r}")

    def _failure(self, tag: str) -> Exception:
        kind = self._behavior.fail_kind
        if kind == "timeout":
            return LlmTimeoutError("mock timeout", request_tag=tag)
        if kind == "status":
            return LlmStatusError(503, "mock unavailable", request_tag=tag)
        if kind == "client":
            return LlmStatusError(400, "mock bad request", request_tag=tag)
        return LlmTransportError("mock connection reset", request_tag=tag)

    async def close(self) -> None:
        log.debug("mock_closed", requests=len(self.issued))
