import math
import random

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mart.metrics import (MetricError, bleu4, cider_d, evaluate, format_report, ngrams, r4_repetition,
                          read_paragraph_file, repetition_at_4, write_paragraph_file)
from mart.data import tokenize


# ---------------------------------------------------------------------------
# independent oracles (lists and numpy, no shared helpers)


def oracle_grams(tokens, n):
    return [" ".join(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_cider(preds, refs, sigma=6.0):
    ids = sorted(preds)
    n_docs = len(ids)
    scores = []
    for vid in ids:
        hyp = preds[vid].lower().split()
        per_ref = []
        for ref_text in refs[vid]:
            ref = ref_text.lower().split()
            sims = []
            for n in range(1, 5):
                def df(g):
                    return sum(1 for v in ids if any(g in oracle_grams(r.lower().split(), n) for r in refs[v]))

                def tfidf(toks):
                    grams = oracle_grams(toks, n)
                    keys = sorted(set(grams))
                    return keys, np.array([grams.count(g) * (math.log(n_docs) - math.log(max(1, df(g)))) for g in keys])

                hk, hv = tfidf(hyp)
                rk, rv = tfidf(ref)
                rmap = dict(zip(rk, rv))
                num = sum(min(x, rmap.get(g, 0.0)) * rmap.get(g, 0.0) for g, x in zip(hk, hv))
                nh, nr = np.sqrt((hv ** 2).sum()), np.sqrt((rv ** 2).sum())
                sim = num / (nh * nr) if nh > 0 and nr > 0 else num
                sims.append(sim * math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma ** 2)))
            per_ref.append(sum(sims) / 4)
        scores.append(10 * sum(per_ref) / len(per_ref))
    return sum(scores) / len(scores)


TOY_PRED = {
    "v1": "a man is cutting bread on a table",
    "v2": "the woman plays the guitar",
    "v3": "a dog runs after a ball in the park",
}
TOY_REF = {
    "v1": ["a man cuts bread on the table", "a man is slicing bread on a table"],
    "v2": ["the woman is playing a guitar"],
    "v3": ["a dog runs after the ball in a park"],
}


# ---------------------------------------------------------------------------
# R@4


def test_r4_hand_cases():
    assert repetition_at_4("a b c d e f") == 0.0
    assert repetition_at_4("x x x x x x x") == 0.75
    assert repetition_at_4("a b c") == 0.0


def test_r4_corpus_mean():
    assert r4_repetition({"a": "x x x x x x x", "b": "a b c d"}) == pytest.approx(0.375)


@settings(max_examples=200, deadline=None)
@given(st.lists(st.lists(st.sampled_from("abc"), min_size=1, max_size=7), min_size=1, max_size=4), st.data())
def test_duplicating_long_sentence_adds_repeats(sents, data):
    # (occurrences - distinct) grows by at least L - 3 when an L >= 4 token sentence is repeated
    i = data.draw(st.integers(0, len(sents) - 1))
    if len(sents[i]) < 4:
        sents[i] = sents[i] + ["z"] * (4 - len(sents[i]))
    before = ngrams(sum(sents, []), 4)
    after = ngrams(sum(sents[: i + 1] + [sents[i]] + sents[i + 1:], []), 4)
    rep = lambda g: sum(g.values()) - len(g)
    assert rep(after) - rep(before) >= len(sents[i]) - 3
    assert repetition_at_4(sum(sents[: i + 1] + [sents[i]] + sents[i + 1:], [])) > 0


def test_r4_ratio_can_drop_under_duplication():
    # the ratio itself is not monotone: a short repeat can add more distinct than repeated 4-grams
    sents = [["a"], ["a"] * 6 + ["b"]]
    before = repetition_at_4(sum(sents, []))
    after = repetition_at_4(sum([sents[0], sents[1], sents[1]], []))
    assert after < before


# ---------------------------------------------------------------------------
# BLEU


def test_bleu_identity():
    refs = {k: [v] for k, v in TOY_PRED.items()}
    assert bleu4(TOY_PRED, refs) == pytest.approx(1.0, abs=1e-12)


def test_bleu_no_overlap_is_tiny():
    assert bleu4({"a": "x y z w"}, {"a": ["p q r s"]}) <= 1e-8


def test_bleu_two_video_hand_table():
    preds = {"v1": "the cat sat on the mat", "v2": "a dog runs fast today"}
    refs = {"v1": ["the cat is on the mat"], "v2": ["a dog runs fast today"]}
    # clipped matches / totals per n: 10/11, 7/9, 4/7, 2/5; equal lengths so BP = 1
    expect = (10 / 11 * 7 / 9 * 4 / 7 * 2 / 5) ** 0.25
    assert bleu4(preds, refs) == pytest.approx(expect, abs=1e-12)


def test_bleu_brevity_penalty():
    # hypothesis half the reference length; all n-grams match
    got = bleu4({"a": "a b c d"}, {"a": ["a b c d e f g h"]})
    assert got == pytest.approx(math.exp(1 - 8 / 4), abs=1e-12)


def test_bleu_empty_prediction():
    assert bleu4({"a": ""}, {"a": ["a b c d"]}) < 1e-9


def test_bleu_missing_reference():
    with pytest.raises(MetricError, match="v9"):
        bleu4({"v9": "a"}, {"v1": ["a"]})


# ---------------------------------------------------------------------------
# CIDEr-D


def test_cider_single_video_is_zero():
    assert cider_d({"a": "a man cuts bread"}, {"a": ["a man cuts bread"]}) == 0.0


def test_cider_identity_is_positive():
    refs = {k: [v] for k, v in TOY_PRED.items()}
    assert cider_d(TOY_PRED, refs) > 0


def test_cider_matches_transcribed_oracle():
    assert abs(cider_d(TOY_PRED, TOY_REF) - oracle_cider(TOY_PRED, TOY_REF)) < 1e-9


def test_cider_clipping_limits_repeats():
    refs = {"a": ["the dog runs"], "b": ["a cat sleeps"]}
    spam = cider_d({"a": "dog dog dog", "b": "a cat sleeps"}, refs)
    once = cider_d({"a": "dog x y", "b": "a cat sleeps"}, refs)
    assert spam <= once + 1e-12


def test_cider_reference_order_invariant():
    flipped = dict(TOY_REF, v1=TOY_REF["v1"][::-1])
    assert cider_d(TOY_PRED, flipped) == pytest.approx(cider_d(TOY_PRED, TOY_REF), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.permutations(sorted(TOY_PRED)))
def test_metrics_permutation_invariant(order):
    p = {k: TOY_PRED[k] for k in order}
    r = {k: TOY_REF[k] for k in order}
    assert cider_d(p, r) == pytest.approx(cider_d(TOY_PRED, TOY_REF), abs=1e-12)
    assert bleu4(p, r) == pytest.approx(bleu4(TOY_PRED, TOY_REF), abs=1e-12)
    assert r4_repetition(p) == pytest.approx(r4_repetition(TOY_PRED), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=8), min_size=1, max_size=4))
def test_bleu_self_is_one(paras):
    corpus = {f"v{i}": " ".join(p) for i, p in enumerate(paras)}
    if all(len(p) >= 4 for p in paras):
        assert bleu4(corpus, {k: [v] for k, v in corpus.items()}) == pytest.approx(1.0, abs=1e-12)


def test_random_corpora_match_oracle():
    rng = random.Random(0)
    words = "a the man dog runs cuts bread park ball fast".split()
    for _ in range(5):
        preds = {f"v{i}": " ".join(rng.choice(words) for _ in range(rng.randint(1, 9))) for i in range(4)}
        refs = {k: [" ".join(rng.choice(words) for _ in range(rng.randint(2, 9))) for _ in range(rng.randint(1, 3))]
                for k in preds}
        assert abs(cider_d(preds, refs) - oracle_cider(preds, refs)) < 1e-9


# ---------------------------------------------------------------------------
# tokenizer and files


def test_tokenize_lowercases_and_strips_punctuation():
    assert tokenize("The Man, then... left!") == ["the", "man", "then", "left"]


def test_evaluate_identity_and_golden(tmp_path):
    pred, ref = tmp_path / "p.tsv", tmp_path / "r.tsv"
    write_paragraph_file(pred, {k: [v] for k, v in TOY_PRED.items()})
    with open(ref, "w") as fh:
        for k, rs in TOY_REF.items():
            for r in rs:
                fh.write(f"{k}\t{r}\n")
    report = evaluate(pred, ref)
    assert report["cider"] == pytest.approx(oracle_cider(TOY_PRED, TOY_REF), abs=1e-9)
    self_report = evaluate(pred, pred)
    assert self_report["bleu4"] == pytest.approx(1.0)
    assert self_report["r4"] == r4_repetition(TOY_PRED)
    assert format_report(self_report).startswith("bleu4=1.000000 cider=")


def test_evaluate_missing_id(tmp_path):
    pred, ref = tmp_path / "p.tsv", tmp_path / "r.tsv"
    pred.write_text("v1\ta b\nv2\tc d\n")
    ref.write_text("v1\ta b\n")
    with pytest.raises(MetricError, match="v2"):
        evaluate(pred, ref)


def test_paragraph_file_roundtrip(tmp_path):
    path = tmp_path / "x.tsv"
    write_paragraph_file(path, {"v1": ["a b", "c d"], "v2": ["e"]})
    assert read_paragraph_file(path) == {"v1": ["a b c d"], "v2": ["e"]}
