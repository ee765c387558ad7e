"""Prompt rendering for every in-context strategy, and conversation history.

Template wording lives in ``templates/<version>/*.txt`` with ``{{name}}``
markers. Substitution is a single pass, so hypothesis text that looks like
a marker is emitted literally.
"""

from __future__ import annotations

import re
from collections.abc import Sequence
from dataclasses import dataclass, field, replace
from enum import StrEnum
from functools import lru_cache
from importlib import resources

from llmrescore.nbest import NBestList
from llmrescore.wer import edit_errors

_MARKER_RE = re.compile(r"\{\{(\w+)\}\}")
TAP_QUERY_COUNT = 3
DEFAULT_DOMAIN = "the target domain"


class PromptError(ValueError):
    pass


class DemonstrationLeakError(ValueError):
    pass


class Role(StrEnum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


class Variant(StrEnum):
    ZERO = "zero"
    ZERO_COT = "zero-cot"
    DOMAIN_HINT = "domain-hint"
    ONE_SHOT = "one-shot"
    FEW_SHOT = "few-shot"
    TAP = "tap"


class HistoryMode(StrEnum):
    ONE_BY_ONE = "one-by-one"
    ACCUMULATE = "accumulate"


class TaskKind(StrEnum):
    CORRECTION = "correction"
    SCORES = "scores"
    SELECTION = "selection"


@dataclass(frozen=True)
class ChatTurn:
    role: Role
    content: str

    def __post_init__(self) -> None:
        if self.role not in Role.__members__.values():
            raise PromptError(f"unknown role {self.role!r}")
        if not self.content:
            raise PromptError("chat turn content must be non-empty")

    def to_message(self) -> dict[str, str]:
        return {"role": str(self.role), "content": self.content}


@dataclass(frozen=True)
class Demonstration:
    nbest: NBestList
    transcription: tuple[str, ...]

    @classmethod
    def from_nbest(cls, nbest: NBestList) -> Demonstration:
        if nbest.reference is None:
            raise PromptError(f"demonstration {nbest.utterance_id!r} has no reference")
        return cls(nbest=nbest, transcription=nbest.reference)


@dataclass(frozen=True)
class PromptStrategy:
    variant: Variant
    task: TaskKind = TaskKind.SCORES
    demos: tuple[Demonstration, ...] = ()
    history_mode: HistoryMode = HistoryMode.ONE_BY_ONE
    domain: str | None = None
    reasoning: bool = False
    template_version: str = "v1"
    max_turns: int = 0
    tap_replay: bool = True

    def __post_init__(self) -> None:
        if self.variant == Variant.ONE_SHOT and len(self.demos) != 1:
            raise PromptError(f"one-shot needs exactly 1 demonstration, got {len(self.demos)}")
        if self.variant == Variant.FEW_SHOT and not self.demos:
            raise PromptError("few-shot needs at least 1 demonstration")
        if self.variant == Variant.TAP and len(self.demos) > 1:
            raise PromptError("task-activating prompting takes exactly one demonstration")
        if self.variant == Variant.TAP and self.task == TaskKind.SCORES:
            raise PromptError("task-activating prompting asks for a transcription, not scores")
        if self.variant == Variant.DOMAIN_HINT and not self.domain:
            raise PromptError("domain-hint strategy needs a domain")

    @property
    def uses_reasoning(self) -> bool:
        return self.reasoning or self.variant == Variant.ZERO_COT

    def describe(self) -> dict:
        return {
            "variant": str(self.variant),
            "task": str(self.task),
            "demos": [d.nbest.utterance_id for d in self.demos],
            "history_mode": str(self.history_mode),
            "domain": self.domain,
            "reasoning": self.uses_reasoning,
            "template_version": self.template_version,
            "max_turns": self.max_turns,
            "tap_replay": self.tap_replay,
        }


@dataclass(frozen=True)
class ConversationState:
    strategy: PromptStrategy
    base: tuple[ChatTurn, ...]
    history: tuple[ChatTurn, ...] = field(default=())

    @property
    def turns(self) -> tuple[ChatTurn, ...]:
        return self.base + self.history


# ── Templates ────────────────────────────────────────────────────

@lru_cache(maxsize=None)
def load_template(version: str, name: str) -> str:
    path = resources.files("llmrescore") / "templates" / version / f"{name}.txt"
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise PromptError(f"template {version}/{name} not found") from None
    return text.removesuffix("\n")


def fill(template: str, values: dict[str, str]) -> str:
    def _sub(match: re.Match) -> str:
        key = match.group(1)
        if key not in values:
            raise PromptError(f"no value for template marker {{{{{key}}}}}")
        return values[key]

    return _MARKER_RE.sub(_sub, template)


def nbest_block(nbest: NBestList) -> str:
    return "\n".join(f"{h.rank}. {h.sentence}" for h in nbest.hypotheses)


# ── Rendering ────────────────────────────────────────────────────

def _tap_domain(strategy: PromptStrategy) -> str:
    return strategy.domain or DEFAULT_DOMAIN


def render_query(strategy: PromptStrategy, nbest: NBestList, *, reasoning: bool = True) -> str:
    """Content of the user turn that carries ``nbest``."""
    version = strategy.template_version
    if strategy.variant == Variant.TAP:
        if not strategy.demos:
            raise PromptError("task-activating prompting needs a demonstration")
        demo = strategy.demos[0]
        text = fill(
            load_template(version, "tap_final"),
            {
                "domain": _tap_domain(strategy),
                "demo_n": str(demo.nbest.n),
                "demo_nbest_block": nbest_block(demo.nbest),
                "demo_transcription": " ".join(demo.transcription),
                "n": str(nbest.n),
                "nbest_block": nbest_block(nbest),
            },
        )
    else:
        text = fill(
            load_template(version, f"task_{strategy.task}"),
            {"n": str(nbest.n), "nbest_block": nbest_block(nbest)},
        )
    if reasoning and strategy.uses_reasoning:
        text += "\n" + load_template(version, "reasoning")
    return text


def demo_answer(task: TaskKind, demo: Demonstration) -> str:
    """The assistant reply a demonstration teaches for ``task``."""
    if task == TaskKind.CORRECTION:
        return "The transcription is: " + " ".join(demo.transcription)
    errors = [edit_errors(demo.transcription, h.text) for h in demo.nbest.hypotheses]
    if task == TaskKind.SCORES:
        return "\n".join(f"{rank}. {-e}" for rank, e in enumerate(errors, start=1))
    best = errors.index(min(errors)) + 1
    return f"Hypothesis {best}"


def tap_queries(version: str = "v1") -> list[str]:
    return [load_template(version, f"tap_query_{i}") for i in range(1, TAP_QUERY_COUNT + 1)]


def tap_replay_replies(version: str = "v1") -> list[str]:
    return [load_template(version, f"tap_reply_{i}") for i in range(1, TAP_QUERY_COUNT + 1)]


def new_session(
    strategy: PromptStrategy, tap_replies: Sequence[str] | None = None
) -> ConversationState:
    """Build the fixed prefix every utterance of a run starts from.

    TAP in live mode needs the replies the model gave to the warm-up
    queries; replay mode uses the canned ones.
    """
    version = strategy.template_version
    base: list[ChatTurn] = []

    if strategy.variant == Variant.TAP:
        if not strategy.demos:
            raise PromptError("task-activating prompting needs a demonstration")
        if tap_replies is None:
            if not strategy.tap_replay:
                raise PromptError("live TAP session needs the warm-up replies")
            tap_replies = tap_replay_replies(version)
        if len(tap_replies) != TAP_QUERY_COUNT:
            raise PromptError(f"expected {TAP_QUERY_COUNT} TAP replies, got {len(tap_replies)}")
        for query, reply in zip(tap_queries(version), tap_replies):
            base.append(ChatTurn(Role.USER, query))
            base.append(ChatTurn(Role.ASSISTANT, reply or "(no response)"))
        return ConversationState(strategy=strategy, base=tuple(base))

    if strategy.domain:
        base.append(
            ChatTurn(Role.SYSTEM, fill(load_template(version, "system_domain"), {"domain": strategy.domain}))
        )
    for demo in strategy.demos:
        base.append(ChatTurn(Role.USER, render_query(strategy, demo.nbest, reasoning=False)))
        base.append(ChatTurn(Role.ASSISTANT, demo_answer(strategy.task, demo)))
    return ConversationState(strategy=strategy, base=tuple(base))


def render(
    strategy: PromptStrategy, nbest: NBestList, session: ConversationState | None = None
) -> list[ChatTurn]:
    session = session if session is not None else new_session(strategy)
    if session.strategy != strategy:
        raise PromptError("session was built for a different strategy")
    return [*session.turns, ChatTurn(Role.USER, render_query(strategy, nbest))]


def render_tap(
    demo: Demonstration,
    nbest: NBestList,
    *,
    live: bool = False,
    domain: str | None = None,
    task: TaskKind = TaskKind.CORRECTION,
) -> list[ChatTurn]:
    """Task-activating prompt for one utterance.

    Replay mode interleaves the canned replies; live mode returns only the
    four user queries, leaving the assistant turns to the model.
    """
    strategy = PromptStrategy(
        variant=Variant.TAP, task=task, demos=(demo,), domain=domain, tap_replay=not live
    )
    if live:
        queries = [ChatTurn(Role.USER, q) for q in tap_queries(strategy.template_version)]
        return [*queries, ChatTurn(Role.USER, render_query(strategy, nbest))]
    return render(strategy, nbest, new_session(strategy))


def advance_history(
    session: ConversationState, nbest: NBestList, model_reply: str
) -> ConversationState:
    strategy = session.strategy
    if strategy.history_mode == HistoryMode.ONE_BY_ONE:
        return replace(session, history=())

    history = session.history + (
        ChatTurn(Role.USER, render_query(strategy, nbest)),
        ChatTurn(Role.ASSISTANT, model_reply or "(no response)"),
    )
    if strategy.max_turns > 0:
        # Drop the oldest exchanges, never the fixed prefix
        while history and len(session.base) + len(history) > strategy.max_turns:
            history = history[2:]
    return replace(session, history=history)


# ── Demonstrations ───────────────────────────────────────────────

def select_demonstrations(train_lists: Sequence[NBestList], k: int) -> tuple[Demonstration, ...]:
    """Pick the ``k`` training utterances with the longest references."""
    candidates = [nb for nb in train_lists if nb.reference]
    candidates.sort(key=lambda nb: (-len(nb.reference or ()), nb.utterance_id))
    return tuple(Demonstration.from_nbest(nb) for nb in candidates[:k])


def check_demonstrations(strategy: PromptStrategy, lists: Sequence[NBestList]) -> None:
    test_ids = {nb.utterance_id for nb in lists}
    leaked = sorted(d.nbest.utterance_id for d in strategy.demos if d.nbest.utterance_id in test_ids)
    if leaked:
        raise DemonstrationLeakError(f"demonstrations overlap test utterances: {', '.join(leaked)}")
