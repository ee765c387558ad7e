from __future__ import annotations

from pathlib import Path

import pytest

from llmrescore.nbest import NBestList
from llmrescore.prompts import (
    ChatTurn,
    DemonstrationLeakError,
    Demonstration,
    HistoryMode,
    PromptError,
    PromptStrategy,
    Role,
    TaskKind,
    Variant,
    advance_history,
    check_demonstrations,
    demo_answer,
    fill,
    new_session,
    render,
    render_tap,
    select_demonstrations,
)

GOLDEN = Path(__file__).parent / "golden"


def _golden(name: str) -> str:
    return (GOLDEN / name).read_text(encoding="utf-8").removesuffix("\n")


def _make_list(utt_id: str, reference: str, *hyps: str) -> NBestList:
    return NBestList.build(
        utt_id, [(tuple(h.split()), -float(i)) for i, h in enumerate(hyps)], tuple(reference.split())
    )


def _demo() -> Demonstration:
    return Demonstration.from_nbest(
        _make_list("train-1", "i want to fly to boston", "i want to fly two boston", "i want to fly to boston")
    )


def _test_list(utt_id: str = "test-1") -> NBestList:
    return _make_list(
        utt_id,
        "show me flights from denver",
        "show me flight from denver",
        "show me flights from denver",
        "so me flights from denver",
    )


def test_zero_shot_numbered_list() -> None:
    nbest = _make_list("u", "a b", "recognize speech", "wreck a nice beach")
    turns = render(PromptStrategy(variant=Variant.ZERO), nbest)
    assert len(turns) == 1
    assert turns[0].role == Role.USER
    assert "1. recognize speech\n2. wreck a nice beach" in turns[0].content


def test_zero_shot_reasoning_golden() -> None:
    nbest = _make_list("u", "a b", "recognize speech", "wreck a nice beach")
    turns = render(PromptStrategy(variant=Variant.ZERO_COT), nbest)
    assert turns[-1].content.endswith("Let's think step by step")
    assert turns[-1].content == _golden("zero_cot_scores.txt")


def test_domain_hint_system_turn() -> None:
    strategy = PromptStrategy(variant=Variant.DOMAIN_HINT, domain="airline information")
    turns = render(strategy, _test_list())
    assert turns[0].role == Role.SYSTEM
    assert "airline information" in turns[0].content
    assert turns[-1].role == Role.USER


def test_domain_hint_requires_domain() -> None:
    with pytest.raises(PromptError):
        PromptStrategy(variant=Variant.DOMAIN_HINT)


def test_one_shot_demonstration_pair() -> None:
    strategy = PromptStrategy(variant=Variant.ONE_SHOT, task=TaskKind.SELECTION, demos=(_demo(),))
    turns = render(strategy, _test_list())
    assert [t.role for t in turns] == [Role.USER, Role.ASSISTANT, Role.USER]
    assert turns[1].content == "Hypothesis 2"


def test_one_shot_with_reasoning_modifier() -> None:
    strategy = PromptStrategy(variant=Variant.ONE_SHOT, demos=(_demo(),), reasoning=True)
    turns = render(strategy, _test_list())
    # Only the live query carries the reasoning instruction
    assert not turns[0].content.endswith("Let's think step by step")
    assert turns[-1].content.endswith("Let's think step by step")


def test_demo_answers_per_task() -> None:
    demo = _demo()
    assert demo_answer(TaskKind.CORRECTION, demo) == "The transcription is: i want to fly to boston"
    assert demo_answer(TaskKind.SCORES, demo) == "1. -1\n2. 0"
    assert demo_answer(TaskKind.SELECTION, demo) == "Hypothesis 2"


def test_strategy_validation() -> None:
    with pytest.raises(PromptError):
        PromptStrategy(variant=Variant.FEW_SHOT)
    with pytest.raises(PromptError):
        PromptStrategy(variant=Variant.ONE_SHOT, demos=(_demo(), _demo()))
    with pytest.raises(PromptError):
        PromptStrategy(variant=Variant.TAP, task=TaskKind.SCORES, demos=(_demo(),))


def test_tap_without_demonstration_fails() -> None:
    strategy = PromptStrategy(variant=Variant.TAP, task=TaskKind.CORRECTION)
    with pytest.raises(PromptError):
        render(strategy, _test_list())


def test_tap_replay_goldens() -> None:
    turns = render_tap(_demo(), _test_list(), domain="airline information")
    users = [t.content for t in turns if t.role == Role.USER]
    assert users == [_golden(f"tap_q{i}.txt") for i in range(1, 5)]
    assert users[0] == "Do you know speech recognition?"
    assert users[1] == "Do you know language model for speech recognition?"
    assert users[2] == "Could you give a possible example of language model rescoring with some hypotheses?"
    assert [t.role for t in turns] == [Role.USER, Role.ASSISTANT] * 3 + [Role.USER]
    assert turns[5].content.endswith("recognize speech with artificial intelligence")


def test_tap_final_query_placeholders() -> None:
    turns = render_tap(_demo(), _test_list())
    final = turns[-1].content
    assert "could you report the true transcription from the following 3-best hypotheses" in final
    assert "I would expect your output is: i want to fly to boston" in final
    assert "2. i want to fly to boston, and I would expect" in final
    assert "\nand I would expect" not in final
    assert "demonstration from the target domain." in final


def test_tap_live_leaves_replies_to_model() -> None:
    turns = render_tap(_demo(), _test_list(), live=True)
    assert len(turns) == 4
    assert all(t.role == Role.USER for t in turns)


def test_tap_fixed_prefix() -> None:
    strategy = PromptStrategy(variant=Variant.TAP, task=TaskKind.CORRECTION, demos=(_demo(),))
    session = new_session(strategy)
    first = render(strategy, _test_list("t1"), session)
    second = render(strategy, _make_list("t2", "x", "completely different words"), session)
    assert first[:-1] == second[:-1]
    assert first[-1] != second[-1]


def test_live_session_uses_given_replies() -> None:
    strategy = PromptStrategy(
        variant=Variant.TAP, task=TaskKind.CORRECTION, demos=(_demo(),), tap_replay=False
    )
    with pytest.raises(PromptError):
        new_session(strategy)
    session = new_session(strategy, ["yes", "", "sure"])
    assert [t.content for t in session.base if t.role == Role.ASSISTANT] == ["yes", "(no response)", "sure"]


def test_render_is_deterministic() -> None:
    strategy = PromptStrategy(variant=Variant.FEW_SHOT, demos=(_demo(),), domain="air travel")
    assert render(strategy, _test_list()) == render(strategy, _test_list())


def test_placeholder_text_emitted_literally() -> None:
    nbest = _make_list("u", "x", "{{nbest_block}} {{domain}}", "{curly}")
    content = render(PromptStrategy(variant=Variant.ZERO), nbest)[-1].content
    assert "1. {{nbest_block}} {{domain}}" in content
    assert "2. {curly}" in content


def test_fill_unknown_marker() -> None:
    with pytest.raises(PromptError):
        fill("hello {{who}}", {})


def test_one_by_one_history_constant() -> None:
    strategy = PromptStrategy(variant=Variant.ONE_SHOT, demos=(_demo(),))
    session = new_session(strategy)
    base = len(session.turns)
    for i in range(5):
        session = advance_history(session, _test_list(f"t{i}"), "1. -1\n2. 0\n3. -1")
    assert len(session.turns) == base


def test_accumulating_history_grows() -> None:
    demos = tuple(
        Demonstration.from_nbest(_make_list(f"train-{i}", "a b c", "a b c", "a b d")) for i in range(12)
    )
    strategy = PromptStrategy(
        variant=Variant.FEW_SHOT, demos=demos, history_mode=HistoryMode.ACCUMULATE
    )
    session = new_session(strategy)
    assert len(session.base) == 24
    counts = []
    for k in range(1, 4):
        session = advance_history(session, _test_list(f"t{k}"), f"reply {k}")
        counts.append(len(session.turns))
    assert counts == [26, 28, 30]
    assert session.turns[:24] == session.base


def test_accumulating_history_cap() -> None:
    strategy = PromptStrategy(
        variant=Variant.ONE_SHOT, demos=(_demo(),), history_mode=HistoryMode.ACCUMULATE, max_turns=6
    )
    session = new_session(strategy)
    for k in range(5):
        session = advance_history(session, _test_list(f"t{k}"), f"reply {k}")
    assert len(session.turns) == 6
    assert session.history[-1] == ChatTurn(Role.ASSISTANT, "reply 4")


def test_chat_turn_rejects_empty() -> None:
    with pytest.raises(PromptError):
        ChatTurn(Role.USER, "")


def test_select_demonstrations_longest_first() -> None:
    train = [
        _make_list("b", "one two", "one two"),
        _make_list("a", "one two", "one two"),
        _make_list("c", "one two three", "one two three"),
    ]
    demos = select_demonstrations(train, 2)
    assert [d.nbest.utterance_id for d in demos] == ["c", "a"]


def test_demonstration_leak_detected() -> None:
    strategy = PromptStrategy(variant=Variant.ONE_SHOT, demos=(_demo(),))
    check_demonstrations(strategy, [_test_list()])
    with pytest.raises(DemonstrationLeakError):
        check_demonstrations(strategy, [_test_list("train-1")])
