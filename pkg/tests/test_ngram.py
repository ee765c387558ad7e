from __future__ import annotations

import math

import pytest

from llmrescore.config import FusionConfig
from llmrescore.nbest import NBestList
from llmrescore.ngram import (
    ArpaFormatError,
    NgramProbSource,
    OovError,
    dump_arpa,
    load_arpa,
    ngram_rescore,
    score_sequence,
)
from llmrescore.pipelines import select_fused
from llmrescore.synth import ChannelConfig, generate_corpus

TOY_ARPA = """\
\\data\\
ngram 1=2
ngram 2=1

\\1-grams:
-0.5\ta
-0.7\tb

\\2-grams:
-0.2\ta b

\\end\\
"""


def _arpa(tables: dict[int, dict[tuple[str, ...], tuple[float, float | None]]]) -> str:
    lines = ["\\data\\"]
    lines += [f"ngram {n}={len(tables[n])}" for n in sorted(tables)]
    for n in sorted(tables):
        lines += ["", f"\\{n}-grams:"]
        for words, (prob, backoff) in tables[n].items():
            cols = [repr(prob), " ".join(words)]
            if backoff is not None:
                cols.append(repr(backoff))
            lines.append("\t".join(cols))
    lines += ["", "\\end\\", ""]
    return "\n".join(lines)


def _closed_vocab_model() -> str:
    """Hand-normalized bigram model over {a, b, </s>}."""
    lg = math.log10
    return _arpa(
        {
            1: {
                ("<s>",): (-99.0, lg(1.0)),
                ("a",): (lg(0.5), lg(0.6)),
                ("b",): (lg(0.3), lg(0.6)),
                ("</s>",): (lg(0.2), None),
            },
            2: {
                ("<s>", "a"): (lg(0.4), None),
                ("<s>", "b"): (lg(0.4), None),
                ("a", "b"): (lg(0.6), None),
                ("a", "</s>"): (lg(0.1), None),
                ("b", "a"): (lg(0.7), None),
            },
        }
    )


def test_load_toy_model() -> None:
    model = load_arpa(TOY_ARPA.splitlines())
    assert model.max_order == 2
    assert model.counts() == {1: 2, 2: 1}
    assert model.vocab == frozenset({"a", "b"})


def test_unigram_only_model() -> None:
    text = "\\data\\\nngram 1=2\n\n\\1-grams:\n-0.5\ta\n-0.7\tb\n\n\\end\\\n"
    model = load_arpa(text.splitlines())
    assert model.max_order == 1
    assert score_sequence(model, ["a", "b"], add_markers=False) == pytest.approx(-1.2, abs=1e-9)


def test_crlf_accepted() -> None:
    model = load_arpa(TOY_ARPA.replace("\n", "\r\n").splitlines(keepends=True))
    assert model.counts() == {1: 2, 2: 1}


def test_score_examples() -> None:
    model = load_arpa(TOY_ARPA.splitlines())
    assert score_sequence(model, ["a", "b"], add_markers=False) == pytest.approx(-0.7, abs=1e-9)
    assert score_sequence(model, ["b", "b"], add_markers=False) == pytest.approx(-1.4, abs=1e-9)
    assert score_sequence(model, [], add_markers=False) == 0.0


def test_score_is_additive() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    whole = score_sequence(model, ["a", "b", "a"], add_markers=False)
    running = model.word_logprob([], "a") + model.word_logprob(["a"], "b") + model.word_logprob(["a", "b"], "a")
    assert whole == pytest.approx(running, abs=1e-12)


def test_long_sentence_matches_full_history() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    words = ["a", "b", "b", "a", "a"] * 400

    expected, history = 0.0, ["<s>"]
    for token in [*words, "</s>"]:
        expected += model.word_logprob(history, token)
        history.append(token)

    assert score_sequence(model, words) == pytest.approx(expected)
    assert score_sequence(model, words[:3]) == pytest.approx(
        model.word_logprob(["<s>"], "a") + model.word_logprob(["a"], "b")
        + model.word_logprob(["b"], "b") + model.word_logprob(["b"], "</s>")
    )


def test_conditional_normalization() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    predicted = ["a", "b", "</s>"]
    for history in ([], ["<s>"], ["a"], ["b"]):
        total = sum(10 ** model.word_logprob(history, w) for w in predicted)
        assert total == pytest.approx(1.0, abs=1e-6), history


def test_markers() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    # <s> is context only; </s> is scored
    expected = math.log10(0.4) + math.log10(0.6) + math.log10(0.6) + math.log10(0.2)
    assert score_sequence(model, ["a", "b"]) == pytest.approx(expected, abs=1e-9)


def test_oov() -> None:
    model = load_arpa(TOY_ARPA.splitlines())
    with pytest.raises(OovError) as info:
        score_sequence(model, ["a", "zebra"], add_markers=False)
    assert info.value.words == ("zebra",)
    # No <unk> in the model, so mapping is impossible too
    with pytest.raises(OovError):
        score_sequence(model, ["zebra"], add_markers=False, oov="unk")


def test_oov_maps_to_unk() -> None:
    text = TOY_ARPA.replace("ngram 1=2", "ngram 1=3").replace("-0.7\tb\n", "-0.7\tb\n-3.0\t<unk>\n")
    model = load_arpa(text.splitlines())
    assert score_sequence(model, ["zebra"], add_markers=False, oov="unk") == pytest.approx(-3.0)


@pytest.mark.parametrize(
    ("text", "message"),
    [
        (TOY_ARPA.replace("ngram 2=1", "ngram 2=3"), "2-gram section has 1 entries"),
        (TOY_ARPA.replace("\\end\\\n", ""), "unterminated model"),
        (TOY_ARPA.replace("-0.2\ta b", "-0.2\tc b"), "dangling prefix"),
        (TOY_ARPA.replace("-0.5\ta", "abc\ta"), "non-numeric"),
        (TOY_ARPA.replace("-0.5\ta", "0.5\ta"), "positive"),
        (TOY_ARPA.replace("ngram 1=2\n", "ngram one=2\n"), "declares no n-gram counts"),
        ("no header here\n", "missing"),
    ],
)
def test_load_errors(text: str, message: str) -> None:
    with pytest.raises(ArpaFormatError, match=message):
        load_arpa(text.splitlines())


def test_load_error_names_line() -> None:
    bad = TOY_ARPA.replace("-0.7\tb", "-0.7\tb\textra\tfields")
    with pytest.raises(ArpaFormatError) as info:
        load_arpa(bad.splitlines())
    assert info.value.line_no == 7
    assert str(info.value).startswith("line 7: ")


def test_count_mismatch_reported_at_section_end() -> None:
    bad = TOY_ARPA.replace("ngram 1=2", "ngram 1=3")
    with pytest.raises(ArpaFormatError) as info:
        load_arpa(bad.splitlines())
    assert info.value.line_no == 9  # the \2-grams: marker


def test_dump_round_trip() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    again = load_arpa(dump_arpa(model).splitlines())
    assert again.tables == model.tables


def _nbest(scores: list[float]) -> NBestList:
    return NBestList.build("u", [((f"h{i}",), s) for i, s in enumerate(scores)], ("h0",))


def test_select_fused_lambda_zero_is_acoustic_argmax() -> None:
    nbest = _nbest([-3.0, -1.0, -2.0])
    assert select_fused(nbest, [0.0, -50.0, 10.0], FusionConfig(lambda_lm=0.0)) == 1


def test_select_fused_lm_breaks_equal_acoustic() -> None:
    nbest = _nbest([-1.0, -1.0])
    for lam in (0.01, 1.0, 100.0):
        assert select_fused(nbest, [-5.0, -4.0], FusionConfig(lambda_lm=lam)) == 1


def test_select_fused_shift_invariant() -> None:
    nbest = _nbest([-1.0, -2.0, -1.5])
    lm = [-3.0, -1.5, -2.25]
    fusion = FusionConfig(lambda_lm=1.0)
    base = select_fused(nbest, lm, fusion)
    for c in (-8.0, 0.5, 16.0):
        assert select_fused(nbest, [v + c for v in lm], fusion) == base


def test_ngram_rescore_lambda_zero() -> None:
    model = load_arpa(TOY_ARPA.splitlines())
    lists = [
        NBestList.build("u1", [(("a",), -2.0), (("b",), -1.0)], ("a",)),
        NBestList.build("u2", [(("b", "b"), -1.0), (("a", "b"), -1.0)], ("a", "b")),
    ]
    picks = ngram_rescore(lists, model, FusionConfig(lambda_lm=0.0), add_markers=False)
    assert picks == {"u1": 1, "u2": 0}
    picks = ngram_rescore(lists, model, FusionConfig(lambda_lm=1.0), add_markers=False)
    assert picks["u2"] == 1


def test_prob_source_in_unit_interval() -> None:
    model = load_arpa(_closed_vocab_model().splitlines())
    source = NgramProbSource(model, oov="error")
    nbest = NBestList.build("u", [(("a",), 0.0), (("b",), -1.0)], ("a", "b"))
    for hyp in nbest.hypotheses:
        p = source(hyp, nbest.reference or ())
        assert 0.0 < p <= 1.0


# ── Matched-LM scenario ──────────────────────────────────────────

def _matched_lm(references: list[tuple[str, tuple[str, ...]]]) -> str:
    """4-gram model containing exactly the n-grams of the references."""
    tables: dict[int, dict[tuple[str, ...], tuple[float, float | None]]] = {
        1: {("<s>",): (-99.0, -1.0), ("</s>",): (-2.0, None), ("<unk>",): (-2.0, -1.0)},
        2: {},
        3: {},
        4: {},
    }
    for _, words in references:
        tokens = ["<s>", *words, "</s>"]
        for n in range(1, 5):
            for i in range(len(tokens) - n + 1):
                gram = tuple(tokens[i:i + n])
                if n == 1:
                    tables[1].setdefault(gram, (-2.0, -1.0))
                else:
                    tables[n].setdefault(gram, (-0.3, -1.0 if n < 4 else None))
    return _arpa(tables)


def test_matched_lm_picks_reference() -> None:
    refs = [(f"s{s:03d}", tuple(f"w{s}x{k}" for k in range(8))) for s in range(500)]
    confusions = {w: {w + "z": 1.0} for _, words in refs for w in words}
    channel = ChannelConfig(
        sub_rate=0.15,
        ins_rate=0.05,
        del_rate=0.02,
        confusion_table=confusions,
        n=5,
        include_reference_rank=3,
        seed=2024,
        vocabulary=("uh", "um"),
    )
    lists, _ = generate_corpus(refs, channel)
    model = load_arpa(_matched_lm(refs).splitlines())

    picks = ngram_rescore(lists, model, FusionConfig(lambda_lm=100.0), oov="unk")
    hits = sum(nb.hypotheses[picks[nb.utterance_id]].text == nb.reference for nb in lists)
    assert hits >= 0.95 * len(lists)

    # Brute force: the reference has the best LM score in every list
    for nb in lists[:50]:
        lm = [score_sequence(model, h.text, oov="unk") for h in nb.hypotheses]
        assert lm[2] == max(lm)
