"""The two LLM pipelines, score fusion and the H2T / expected-WER diagnostics.

P1 asks the model to correct each N-best list, then lets the n-gram LM
choose among the (augmented) hypotheses. P2 asks the model to score or pick
a hypothesis directly.
"""

from __future__ import annotations

import json
import math
import random
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import structlog

from llmrescore.config import (
    ConcurrencyPolicy,
    FusionConfig,
    LlmConfig,
    NgramSettings,
    NormConfig,
)
from llmrescore.llm.base import LlmBackend, LlmError, LlmRequest, LlmResponse
from llmrescore.llm.client import complete, complete_batch
from llmrescore.nbest import Hypothesis, NBestList
from llmrescore.ngram import NgramModel, ngram_rescore
from llmrescore.parser import (
    ConfidenceNote,
    OutputKind,
    ParsedLlmOutput,
    ParserStats,
    parse_response,
)
from llmrescore.prompts import (
    ChatTurn,
    ConversationState,
    HistoryMode,
    PromptError,
    PromptStrategy,
    Role,
    TaskKind,
    Variant,
    advance_history,
    new_session,
    render,
    tap_queries,
)
from llmrescore.store import RawStore
from llmrescore.wer import WerReport, corpus_wer, edit_errors, first_pass_wer, oracle_wer

log = structlog.get_logger()

ProbSource = Callable[[Hypothesis, Sequence[str]], float]


class PosteriorError(ValueError):
    pass


class ProbabilityError(ValueError):
    pass


# ── Fusion ───────────────────────────────────────────────────────

def fuse(acoustic: float, lm: float, cfg: FusionConfig) -> float:
    return (acoustic if cfg.use_acoustic else 0.0) + cfg.lambda_lm * lm


def select_fused(
    nbest: NBestList,
    lm_scores: Sequence[float],
    fusion: FusionConfig,
) -> int:
    """0-based argmax of the fused scores; ties go to the lowest rank."""
    if len(lm_scores) != nbest.n:
        raise ValueError(f"{nbest.utterance_id}: {len(lm_scores)} LM scores for {nbest.n} hypotheses")
    fused = [fuse(h.first_pass_score, lm, fusion) for h, lm in zip(nbest.hypotheses, lm_scores)]
    best = max(fused)
    return fused.index(best)


# ── H2T loss and expected WER ────────────────────────────────────

@dataclass(frozen=True)
class H2TConfig:
    prob_source: ProbSource
    lambda_mse: float = 0.01

    def __post_init__(self) -> None:
        if not math.isfinite(self.lambda_mse) or self.lambda_mse < 0:
            raise ValueError(f"lambda_mse must be finite and >= 0, got {self.lambda_mse}")


def hypothesis_posteriors(nbest: NBestList) -> np.ndarray:
    """Softmax of the first-pass scores within the list."""
    scores = np.asarray(nbest.scores, dtype=np.float64)
    weights = np.exp(scores - scores.max())
    return weights / weights.sum()


def h2t_loss(
    nbest: NBestList, cfg: H2TConfig, posteriors: Sequence[float] | None = None
) -> float:
    """Σᵢ [ −ln Pᵢ + λ·(sᵢ − Pᵢ)² ], Pᵢ = P(reference | hypothesis i).

    ``posteriors`` overrides the softmax-derived sᵢ.
    """
    if nbest.reference is None:
        raise ValueError(f"{nbest.utterance_id}: H2T loss needs a reference")
    probs = np.array(
        [cfg.prob_source(h, nbest.reference) for h in nbest.hypotheses], dtype=np.float64
    )
    if not np.all(np.isfinite(probs)) or np.any(probs <= 0) or np.any(probs > 1):
        raise ProbabilityError(f"{nbest.utterance_id}: probabilities outside (0, 1]: {probs.tolist()}")

    s = hypothesis_posteriors(nbest) if posteriors is None else np.asarray(posteriors, dtype=np.float64)
    if s.shape != probs.shape:
        raise PosteriorError(f"{nbest.utterance_id}: {s.size} posteriors for {nbest.n} hypotheses")

    loss = -np.log(probs) + cfg.lambda_mse * (s - probs) ** 2
    return float(loss.sum())


def expected_wer(nbest: NBestList, posterior: Sequence[float]) -> float:
    if nbest.reference is None:
        raise ValueError(f"{nbest.utterance_id}: expected WER needs a reference")
    if not nbest.reference:
        raise ValueError(f"{nbest.utterance_id}: expected WER needs a non-empty reference")
    p = np.asarray(posterior, dtype=np.float64)
    if p.shape != (nbest.n,):
        raise PosteriorError(f"{nbest.utterance_id}: {p.size} posteriors for {nbest.n} hypotheses")
    if np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise PosteriorError(f"{nbest.utterance_id}: posterior does not sum to 1 (sum={p.sum()!r})")
    errors = np.array([edit_errors(nbest.reference, h.text) for h in nbest.hypotheses], dtype=np.float64)
    return float(p @ errors) / len(nbest.reference)


# ── Run results ──────────────────────────────────────────────────

@dataclass
class RunResult:
    pipeline: str  # 'p1' | 'p2' | 'ngram'
    lists: list[NBestList]  # post-correction lists for P1
    selections: dict[str, int]  # 0-based into ``lists``
    wer_report: WerReport | None
    parser_stats: ParserStats = field(default_factory=ParserStats)
    llm_call_count: int = 0
    backend_errors: int = 0
    corrections: dict[str, str | None] = field(default_factory=dict)
    oracle_wer: float | None = None
    first_pass_wer: float | None = None
    strategy: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def fallback_rate(self) -> float:
        total = self.parser_stats.total
        return self.parser_stats.fallback / total if total else 0.0

    def to_dict(self) -> dict:
        report = self.wer_report
        utterances: dict[str, dict] = {}
        for nbest in self.lists:
            index = self.selections[nbest.utterance_id]
            entry: dict = {"rank": index + 1, "text": nbest.hypotheses[index].sentence}
            if nbest.utterance_id in self.corrections:
                entry["correction"] = self.corrections[nbest.utterance_id]
            if report is not None and nbest.utterance_id in report.per_utterance:
                score = report.per_utterance[nbest.utterance_id]
                entry["wer"] = score.wer
                entry["errors"] = score.alignment.errors
                entry["ref_len"] = score.alignment.ref_len
            utterances[nbest.utterance_id] = entry
        return {
            "pipeline": self.pipeline,
            "strategy": self.strategy,
            "corpus_wer": report.corpus_wer if report is not None else None,
            "total_errors": report.total_errors if report is not None else None,
            "total_ref_words": report.total_ref_words if report is not None else None,
            "oracle_wer": self.oracle_wer,
            "first_pass_wer": self.first_pass_wer,
            "llm_call_count": self.llm_call_count,
            "backend_errors": self.backend_errors,
            "parser_stats": self.parser_stats.to_dict(),
            "fallback_rate": self.fallback_rate,
            "utterances": utterances,
            "provenance": self.provenance,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def _has_references(lists: Sequence[NBestList]) -> bool:
    return bool(lists) and all(nb.reference is not None for nb in lists)


def _score_run(
    original: Sequence[NBestList], final: Sequence[NBestList], selections: dict[str, int]
) -> tuple[WerReport | None, float | None, float | None]:
    if not _has_references(original):
        return None, None, None
    report = corpus_wer(final, selections)
    return report, oracle_wer(final).corpus_wer, first_pass_wer(original).corpus_wer


def run_ngram(
    lists: Sequence[NBestList],
    lm: NgramModel,
    fusion: FusionConfig,
    settings: NgramSettings | None = None,
) -> RunResult:
    settings = settings or NgramSettings()
    selections = ngram_rescore(
        lists, lm, fusion, add_markers=settings.add_markers, oov=settings.oov
    )
    report, oracle, first = _score_run(lists, lists, selections)
    return RunResult(
        pipeline="ngram",
        lists=list(lists),
        selections=selections,
        wer_report=report,
        oracle_wer=oracle,
        first_pass_wer=first,
    )


# ── Talking to the model ─────────────────────────────────────────

def _request(llm: LlmConfig, turns: Sequence[ChatTurn], tag: str) -> LlmRequest:
    return LlmRequest(
        model_name=llm.model_name,
        turns=tuple(turns),
        temperature=llm.temperature,
        max_tokens=llm.max_tokens,
        request_tag=tag,
    )


async def open_session(
    strategy: PromptStrategy,
    backend: LlmBackend,
    llm: LlmConfig,
    policy: ConcurrencyPolicy,
    store: RawStore | None = None,
) -> tuple[ConversationState, int]:
    """Fixed conversation prefix for a run, plus the LLM calls spent on it.

    Live TAP sends the three warm-up queries once, in order, and reuses the
    model's replies for every utterance.
    """
    if strategy.variant != Variant.TAP or strategy.tap_replay:
        return new_session(strategy), 0

    turns: list[ChatTurn] = []
    replies: list[str] = []
    for k, query in enumerate(tap_queries(strategy.template_version), start=1):
        turns.append(ChatTurn(Role.USER, query))
        resp = await complete(_request(llm, turns, f"tap-warmup-{k}"), backend, policy, store=store)
        replies.append(resp.text)
        turns.append(ChatTurn(Role.ASSISTANT, resp.text or "(no response)"))
    log.info("tap_warmup_complete", calls=len(replies))
    return new_session(strategy, replies), len(replies)


async def _converse(
    lists: Sequence[NBestList],
    strategy: PromptStrategy,
    backend: LlmBackend,
    llm: LlmConfig,
    policy: ConcurrencyPolicy,
    store: RawStore | None,
) -> tuple[list[LlmResponse | LlmError], int]:
    session, calls = await open_session(strategy, backend, llm, policy, store)

    if strategy.history_mode == HistoryMode.ACCUMULATE:
        # Each prompt depends on the previous reply
        results: list[LlmResponse | LlmError] = []
        for index, nbest in enumerate(lists):
            req = _request(llm, render(strategy, nbest, session), nbest.utterance_id)
            rng = random.Random(f"{policy.seed}:{index}")
            try:
                resp = await complete(req, backend, policy, rng=rng, store=store)
            except LlmError as exc:
                if policy.fail_fast:
                    raise
                results.append(exc)
                session = advance_history(session, nbest, "")
                continue
            results.append(resp)
            session = advance_history(session, nbest, resp.text)
        return results, calls + len(lists)

    reqs = [_request(llm, render(strategy, nb, session), nb.utterance_id) for nb in lists]
    return await complete_batch(reqs, backend, policy, store=store), calls + len(reqs)


def _parse_all(
    lists: Sequence[NBestList],
    results: Sequence[LlmResponse | LlmError],
    kind: OutputKind,
    norm: NormConfig | None,
) -> tuple[list[ParsedLlmOutput], ParserStats, int]:
    stats = ParserStats()
    parsed: list[ParsedLlmOutput] = []
    backend_errors = 0
    for nbest, result in zip(lists, results):
        if isinstance(result, LlmError):
            backend_errors += 1
            out = ParsedLlmOutput(kind=kind, note=ConfidenceNote.FALLBACK)
        else:
            out = parse_response(
                result.text, kind, nbest.n, [h.text for h in nbest.hypotheses], norm
            )
        if out.is_fallback:
            log.debug("llm_output_fallback", utterance_id=nbest.utterance_id, kind=str(kind))
        stats.record(out.note)
        parsed.append(out)
    return parsed, stats, backend_errors


# ── Pipelines ────────────────────────────────────────────────────

async def run_p1(
    lists: Sequence[NBestList],
    backend: LlmBackend,
    strategy: PromptStrategy,
    lm: NgramModel,
    cfg: FusionConfig,
    *,
    llm: LlmConfig | None = None,
    policy: ConcurrencyPolicy | None = None,
    ngram: NgramSettings | None = None,
    mode: str = "augment",
    norm: NormConfig | None = None,
    store: RawStore | None = None,
) -> RunResult:
    """LLM correction, then n-gram rescoring over the corrected lists.

    ``augment`` appends the correction as rank N+1 with the list's best
    first-pass score and pins the selection to it: the lowest-ranked
    hypothesis with the corrected text wins whatever the LM says.
    ``replace`` keeps only the correction. Failed or unparseable replies
    leave the list unchanged and the fused n-gram score decides.
    """
    if strategy.task != TaskKind.CORRECTION:
        raise PromptError(f"P1 needs a correction strategy, got task {strategy.task}")
    if mode not in ("augment", "replace"):
        raise ValueError(f"unknown correction mode {mode!r}")
    llm = llm or LlmConfig()
    policy = policy or ConcurrencyPolicy()
    ngram = ngram or NgramSettings()

    results, calls = await _converse(lists, strategy, backend, llm, policy, store)
    parsed, stats, backend_errors = _parse_all(lists, results, OutputKind.CORRECTION, norm)

    corrected: list[NBestList] = []
    corrections: dict[str, str | None] = {}
    pinned: dict[str, int] = {}
    for nbest, out in zip(lists, parsed):
        if out.is_fallback or out.words is None:
            corrected.append(nbest)
            corrections[nbest.utterance_id] = None
            continue
        corrections[nbest.utterance_id] = " ".join(out.words)
        best_score = max(nbest.scores)
        if mode == "augment":
            corrected.append(nbest.append(out.words, best_score))
            pinned[nbest.utterance_id] = _first_match(nbest, out.words)
        else:
            corrected.append(
                NBestList.build(nbest.utterance_id, [(out.words, best_score)], nbest.reference)
            )

    selections = ngram_rescore(corrected, lm, cfg, add_markers=ngram.add_markers, oov=ngram.oov)
    selections.update(pinned)
    report, oracle, first = _score_run(lists, corrected, selections)
    result = RunResult(
        pipeline="p1",
        lists=corrected,
        selections=selections,
        wer_report=report,
        parser_stats=stats,
        llm_call_count=calls,
        backend_errors=backend_errors,
        corrections=corrections,
        oracle_wer=oracle,
        first_pass_wer=first,
        strategy=strategy.describe(),
    )
    log.info(
        "p1_complete",
        utterances=len(lists),
        calls=calls,
        fallbacks=stats.fallback,
        wer=report.corpus_wer if report else None,
    )
    return result


async def run_p2(
    lists: Sequence[NBestList],
    backend: LlmBackend,
    strategy: PromptStrategy,
    cfg: FusionConfig,
    *,
    llm: LlmConfig | None = None,
    policy: ConcurrencyPolicy | None = None,
    norm: NormConfig | None = None,
    store: RawStore | None = None,
) -> RunResult:
    """Direct rescoring: LLM scores fused with first-pass scores, or a
    selection used as-is. Fallbacks pick rank 1."""
    if strategy.task == TaskKind.CORRECTION and strategy.variant != Variant.TAP:
        raise PromptError("P2 needs a scores or selection strategy")
    # A TAP reply is a transcription; it is matched back to a hypothesis
    kind = OutputKind.SCORES if strategy.task == TaskKind.SCORES else OutputKind.SELECTION
    llm = llm or LlmConfig()
    policy = policy or ConcurrencyPolicy()

    results, calls = await _converse(lists, strategy, backend, llm, policy, store)
    parsed, stats, backend_errors = _parse_all(lists, results, kind, norm)

    selections: dict[str, int] = {}
    for nbest, out in zip(lists, parsed):
        if out.is_fallback:
            selections[nbest.utterance_id] = 0
        elif kind == OutputKind.SCORES and out.scores is not None:
            selections[nbest.utterance_id] = select_fused(nbest, out.scores, cfg)
        else:
            selections[nbest.utterance_id] = (out.index or 1) - 1

    report, oracle, first = _score_run(lists, lists, selections)
    result = RunResult(
        pipeline="p2",
        lists=list(lists),
        selections=selections,
        wer_report=report,
        parser_stats=stats,
        llm_call_count=calls,
        backend_errors=backend_errors,
        oracle_wer=oracle,
        first_pass_wer=first,
        strategy=strategy.describe(),
    )
    log.info(
        "p2_complete",
        utterances=len(lists),
        calls=calls,
        fallbacks=stats.fallback,
        wer=report.corpus_wer if report else None,
    )
    return result
