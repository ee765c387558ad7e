from __future__ import annotations

import math
import random

import numpy as np
import pytest

from llmrescore.nbest import NBestFormatError
from llmrescore.synth import (
    ChannelConfig,
    child_rng,
    corrupt,
    generate,
    generate_corpus,
    read_references,
)
from llmrescore.wer import first_pass_wer, oracle_wer

VOCAB = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot")


def _refs(count: int, length: int = 8, seed: int = 0) -> list[tuple[str, tuple[str, ...]]]:
    rng = random.Random(seed)
    return [(f"r{i:03d}", tuple(rng.choice(VOCAB) for _ in range(length))) for i in range(count)]


def test_clean_channel_puts_reference_first() -> None:
    cfg = ChannelConfig(sub_rate=0.0, ins_rate=0.0, del_rate=0.0, include_reference_rank=1)
    nbest = generate(("recognize", "speech"), cfg)
    assert nbest.hypotheses[0].text == ("recognize", "speech")
    assert oracle_wer([nbest]).corpus_wer == 0.0


def test_singleton_confusion_forces_substitute() -> None:
    cfg = ChannelConfig(
        sub_rate=1.0, ins_rate=0.0, del_rate=0.0, confusion_table={"speech": {"peach": 1.0}}, n=3
    )
    nbest = generate(("speech",), cfg)
    assert [h.text for h in nbest.hypotheses] == [("peach",)] * 3


def test_duplicates_flagged_in_manifest() -> None:
    cfg = ChannelConfig(sub_rate=0.0, ins_rate=0.0, del_rate=0.0, n=3)
    _, manifest = generate_corpus([("a", ("x",)), ("b", ("y", "z"))], cfg)
    assert manifest.duplicate_ids == ("a", "b")
    assert manifest.to_dict()["channel"]["include_reference_rank"] == "never"


def test_same_seed_is_identical() -> None:
    cfg = ChannelConfig(sub_rate=0.2, vocabulary=VOCAB, seed=9, score_noise_sigma=0.3)
    a, _ = generate_corpus(_refs(30), cfg)
    b, _ = generate_corpus(_refs(30), cfg)
    assert a == b


def test_reorder_stable() -> None:
    cfg = ChannelConfig(sub_rate=0.2, vocabulary=VOCAB, seed=9, score_noise_sigma=0.3)
    refs = _refs(30)
    forward, _ = generate_corpus(refs, cfg)
    backward, _ = generate_corpus(list(reversed(refs)), cfg)
    assert {nb.utterance_id: nb for nb in forward} == {nb.utterance_id: nb for nb in backward}


def test_child_seed_depends_on_id() -> None:
    assert child_rng(1, "a").random() == child_rng(1, "a").random()
    assert child_rng(1, "a").random() != child_rng(1, "b").random()
    assert child_rng(1, "a").random() != child_rng(2, "a").random()


def test_corpus_first_pass_and_oracle() -> None:
    cfg = ChannelConfig(sub_rate=0.1, ins_rate=0.02, del_rate=0.02, vocabulary=VOCAB, seed=5)
    lists, manifest = generate_corpus(_refs(100), cfg)
    first = first_pass_wer(lists).corpus_wer
    assert first > 0.0
    assert oracle_wer(lists).corpus_wer <= first
    assert manifest.utterances == 100


def test_reference_rank_gives_zero_oracle() -> None:
    cfg = ChannelConfig(
        sub_rate=0.1, ins_rate=0.02, del_rate=0.02, vocabulary=VOCAB, seed=5, include_reference_rank=3
    )
    lists, _ = generate_corpus(_refs(100), cfg)
    assert oracle_wer(lists).corpus_wer == 0.0
    assert all(nb.hypotheses[2].text == nb.reference for nb in lists)


def test_scores_non_increasing_in_rank() -> None:
    for rank in (None, 1, 3, 5):
        cfg = ChannelConfig(
            sub_rate=0.3, ins_rate=0.1, del_rate=0.1, vocabulary=VOCAB, seed=2,
            include_reference_rank=rank, score_noise_sigma=1.0,
        )
        lists, _ = generate_corpus(_refs(40), cfg)
        for nb in lists:
            assert nb.n == 5
            assert all(a >= b for a, b in zip(nb.scores, nb.scores[1:]))


def test_substitution_rate_statistics() -> None:
    p = 0.3
    cfg = ChannelConfig(sub_rate=p, ins_rate=0.0, del_rate=0.0, vocabulary=VOCAB)
    rng = np.random.default_rng(77)
    substituted = words = 0
    for _, ref in _refs(100, length=100, seed=1):
        hyp, count = corrupt(ref, cfg, rng)
        assert len(hyp) == len(ref)
        substituted += count
        words += len(ref)
    assert words >= 10_000
    assert abs(substituted / words - p) <= 3 * math.sqrt(p * (1 - p) / words)


def test_channel_validation() -> None:
    with pytest.raises(ValueError):
        ChannelConfig(sub_rate=0.7, del_rate=0.4)
    with pytest.raises(ValueError):
        ChannelConfig(n=0)
    with pytest.raises(ValueError):
        ChannelConfig(n=2, include_reference_rank=3)
    with pytest.raises(ValueError):
        ChannelConfig(ins_rate=1.5)


def test_channel_dict_form() -> None:
    cfg = ChannelConfig.from_dict(
        {"sub_rate": 0.2, "n": 4, "include_reference_rank": "never", "confusion_table": {"speech": {"peach": 2}}}
    )
    assert cfg.include_reference_rank is None
    assert cfg.confusion_table == {"speech": {"peach": 2.0}}
    assert ChannelConfig.from_dict(cfg.to_dict()) == cfg


def test_empty_reference_rejected() -> None:
    with pytest.raises(ValueError):
        generate((), ChannelConfig())


def test_duplicate_ids_rejected() -> None:
    with pytest.raises(ValueError):
        generate_corpus([("a", ("x",)), ("a", ("y",))], ChannelConfig())


def test_read_references() -> None:
    refs = read_references(["first\tShow me, Flights\n", "\n", "bare line here\r\n"])
    assert refs == [("first", ("show", "me", "flights")), ("utt00002", ("bare", "line", "here"))]


def test_read_references_empty_line_number() -> None:
    with pytest.raises(NBestFormatError, match="line 2"):
        read_references(["ok words\n", "id\t  ...  \n"])
