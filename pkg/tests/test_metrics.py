"""Metric tests against independent brute-force counting oracles.

The oracles recount n-gram overlaps by list removal (not Counter
arithmetic) and compute the LCS by memoized recursion, so they share no
code path with the implementations they check.
"""

import math
from functools import lru_cache

import numpy as np
import pytest

from mrag.metrics import (MetricKind, bleu, corpus_bleu, delta, distinct_n,
                          rouge_l, rouge_n)
from mrag.text import tokenize


# -- independent oracles -----------------------------------------------------

def oracle_ngrams(tokens, n):
    return [tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1)]


def oracle_clipped_overlap(hyp_tokens, ref_tokens, n):
    pool = oracle_ngrams(ref_tokens, n)
    overlap = 0
    for gram in oracle_ngrams(hyp_tokens, n):
        if gram in pool:
            pool.remove(gram)
            overlap += 1
    return overlap


def oracle_rouge_n(hyp, ref, n, mode="f1"):
    hyp_tokens, ref_tokens = tokenize(hyp), tokenize(ref)
    hyp_count = max(len(hyp_tokens) - n + 1, 0)
    ref_count = max(len(ref_tokens) - n + 1, 0)
    if hyp_count == 0 or ref_count == 0:
        return 0.0
    overlap = oracle_clipped_overlap(hyp_tokens, ref_tokens, n)
    recall = overlap / ref_count
    if mode == "recall":
        return recall
    precision = overlap / hyp_count
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def oracle_lcs(a, b):
    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == len(a) or j == len(b):
            return 0
        if a[i] == b[j]:
            return 1 + rec(i + 1, j + 1)
        return max(rec(i + 1, j), rec(i, j + 1))
    return rec(0, 0)


def oracle_rouge_l(hyp, ref, mode="f1"):
    hyp_tokens, ref_tokens = tuple(tokenize(hyp)), tuple(tokenize(ref))
    if not hyp_tokens or not ref_tokens:
        return 0.0
    lcs = oracle_lcs(hyp_tokens, ref_tokens)
    recall = lcs / len(ref_tokens)
    if mode == "recall":
        return recall
    precision = lcs / len(hyp_tokens)
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def oracle_bleu(hyp, ref, max_n=4, eps=1e-9):
    hyp_tokens, ref_tokens = tokenize(hyp), tokenize(ref)
    if not hyp_tokens or not ref_tokens:
        return 0.0
    orders = min(max_n, len(hyp_tokens))
    product = 1.0
    for n in range(1, orders + 1):
        overlap = oracle_clipped_overlap(hyp_tokens, ref_tokens, n)
        total = len(hyp_tokens) - n + 1
        product *= (overlap / total) if overlap > 0 else eps
    score = product ** (1.0 / orders)
    if len(hyp_tokens) < len(ref_tokens):
        score *= math.exp(1 - len(ref_tokens) / len(hyp_tokens))
    return min(score, 1.0)


def oracle_distinct(hyps, n):
    grams = []
    for hyp in hyps:
        grams += oracle_ngrams(tokenize(hyp), n)
    if not grams:
        return 0.0
    return len(set(grams)) / len(grams)


def random_text(rng, vocab_size=12, max_len=10):
    length = int(rng.integers(0, max_len + 1))
    return " ".join(f"w{int(rng.integers(vocab_size))}" for _ in range(length))


# -- worked examples ---------------------------------------------------------

def test_rouge1_worked_example():
    assert rouge_n("the cat", "the cat sat", 1) == pytest.approx(0.8, abs=1e-12)


def test_rouge_identity():
    assert rouge_n("the cat sat", "the cat sat", 1) == 1.0
    assert rouge_n("the cat sat", "the cat sat", 2) == 1.0
    assert rouge_l("the cat sat", "the cat sat") == 1.0


def test_rouge_empty_sides():
    assert rouge_n("", "a", 1) == 0.0
    assert rouge_n("a", "", 1) == 0.0
    assert rouge_l("", "") == 0.0


def test_rouge_l_worked_example():
    assert rouge_l("a c", "a b c") == pytest.approx(0.8, abs=1e-12)


def test_rouge_l_disjoint():
    assert rouge_l("a b", "c d") == 0.0


def test_bleu_identity():
    assert bleu("the cat sat on the mat", "the cat sat on the mat") == pytest.approx(1.0)
    assert bleu("a b", "a b") == pytest.approx(1.0)


def test_bleu_clipping_worked_example():
    score = bleu("the the the the", "the cat")
    assert score < 0.01
    assert score == pytest.approx(oracle_bleu("the the the the", "the cat"), abs=1e-12)


def test_bleu_empty():
    assert bleu("", "ref text") == 0.0
    assert bleu("hyp text", "") == 0.0


def test_distinct_worked_example():
    assert distinct_n(["a b a"], 1) == pytest.approx(2 / 3)
    assert distinct_n(["a b c"], 1) == 1.0
    assert distinct_n([], 1) == 0.0


def test_distinct_across_hypotheses():
    assert distinct_n(["a b", "a b"], 2) == pytest.approx(0.5)


def test_corpus_bleu_identity():
    hyps = ["the cat sat", "a quick fox"]
    assert corpus_bleu(hyps, list(hyps)) == pytest.approx(1.0)


def test_delta_dispatch():
    kind = MetricKind("rouge1")
    assert delta(kind, "t u v", "t u v") == 1.0
    assert delta(kind, "the cat", "the cat sat") == rouge_n("the cat", "the cat sat", 1)
    assert delta(MetricKind("distinct1"), "a b a", "ignored") == pytest.approx(2 / 3)


def test_delta_both_empty_all_kinds():
    for name in ("rouge1", "rouge2", "rougeL", "bleu", "distinct1", "distinct2"):
        assert delta(MetricKind(name), "", "") == 0.0


# -- oracle equivalence and properties ----------------------------------------

def test_oracle_equivalence_randomized():
    rng = np.random.default_rng(77)
    for _ in range(50):
        hyp, ref = random_text(rng), random_text(rng)
        assert rouge_n(hyp, ref, 1) == pytest.approx(oracle_rouge_n(hyp, ref, 1), abs=1e-9)
        assert rouge_n(hyp, ref, 2) == pytest.approx(oracle_rouge_n(hyp, ref, 2), abs=1e-9)
        assert rouge_l(hyp, ref) == pytest.approx(oracle_rouge_l(hyp, ref), abs=1e-9)
        assert bleu(hyp, ref) == pytest.approx(oracle_bleu(hyp, ref), abs=1e-9)
        assert distinct_n([hyp, ref], 1) == pytest.approx(oracle_distinct([hyp, ref], 1), abs=1e-9)
        assert distinct_n([hyp, ref], 2) == pytest.approx(oracle_distinct([hyp, ref], 2), abs=1e-9)


def test_identity_scores_one_property():
    rng = np.random.default_rng(5)
    for _ in range(30):
        t = random_text(rng)
        if not tokenize(t):
            continue
        assert rouge_n(t, t, 1) == 1.0
        assert rouge_n(t, t, 2) == 1.0 or len(tokenize(t)) < 2
        assert rouge_l(t, t) == 1.0
        assert bleu(t, t) == pytest.approx(1.0)


def test_rouge_f1_swap_symmetry():
    rng = np.random.default_rng(8)
    for _ in range(40):
        a, b = random_text(rng), random_text(rng)
        assert rouge_n(a, b, 1) == pytest.approx(rouge_n(b, a, 1), abs=1e-12)
        assert rouge_l(a, b) == pytest.approx(rouge_l(b, a), abs=1e-12)


def test_scores_bounded():
    rng = np.random.default_rng(21)
    kinds = [MetricKind(k) for k in
             ("rouge1", "rouge2", "rougeL", "bleu", "distinct1", "distinct2")]
    for _ in range(40):
        hyp, ref = random_text(rng), random_text(rng)
        for kind in kinds:
            score = delta(kind, hyp, ref)
            assert 0.0 <= score <= 1.0


def test_rouge_recall_mode():
    # hyp "the cat" vs ref "the cat sat": recall = 2/3.
    assert rouge_n("the cat", "the cat sat", 1, mode="recall") == pytest.approx(2 / 3)
    assert rouge_l("a c", "a b c", mode="recall") == pytest.approx(2 / 3)


def test_metric_kind_validation():
    with pytest.raises(ValueError):
        MetricKind("rouge9")
    with pytest.raises(ValueError):
        MetricKind("rouge1", rouge_mode="banana")
