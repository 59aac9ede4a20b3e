"""Text generation quality metrics: ROUGE-1/2/L, BLEU, Distinct-1/2.

Every score lies in [0, 1]. All metrics share one tokenizer (lowercase,
whitespace/punctuation split) so reward deltas and evaluation reports use
the same token semantics. Pure functions, thread-safe.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass

from .text import ngrams, tokenize

METRIC_KINDS = ("rouge1", "rouge2", "rougeL", "bleu", "distinct1", "distinct2")

BLEU_EPSILON = 1e-9


@dataclass(frozen=True)
class MetricKind:
    kind: str
    rouge_mode: str = "f1"  # f1 | recall

    def __post_init__(self):
        if self.kind not in METRIC_KINDS:
            raise ValueError(f"unknown metric kind {self.kind!r}")
        if self.rouge_mode not in ("f1", "recall"):
            raise ValueError(f"unknown rouge mode {self.rouge_mode!r}")


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def rouge_n(hyp: str, ref: str, n: int, mode: str = "f1") -> float:
    """Clipped n-gram overlap; F1 by default, recall on request."""
    hyp_ngrams = ngrams(tokenize(hyp), n)
    ref_ngrams = ngrams(tokenize(ref), n)
    if not hyp_ngrams or not ref_ngrams:
        return 0.0
    hyp_counts = Counter(hyp_ngrams)
    ref_counts = Counter(ref_ngrams)
    overlap = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
    recall = overlap / len(ref_ngrams)
    if mode == "recall":
        return recall
    precision = overlap / len(hyp_ngrams)
    return _f1(precision, recall)


def _lcs_length(a: list[str], b: list[str]) -> int:
    # Standard O(len(a)*len(b)) dynamic program, one rolling row.
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        curr = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            if x == y:
                curr[j] = prev[j - 1] + 1
            else:
                curr[j] = max(prev[j], curr[j - 1])
        prev = curr
    return prev[-1]


def rouge_l(hyp: str, ref: str, mode: str = "f1") -> float:
    """Longest-common-subsequence ROUGE over token sequences."""
    hyp_tokens = tokenize(hyp)
    ref_tokens = tokenize(ref)
    if not hyp_tokens or not ref_tokens:
        return 0.0
    lcs = _lcs_length(hyp_tokens, ref_tokens)
    recall = lcs / len(ref_tokens)
    if mode == "recall":
        return recall
    precision = lcs / len(hyp_tokens)
    return _f1(precision, recall)


def bleu(hyp: str, ref: str, max_n: int = 4, smoothing_epsilon: float = BLEU_EPSILON) -> float:
    """Sentence-level BLEU with add-epsilon smoothing on zero counts.

    Geometric mean of modified n-gram precisions up to max_n (capped at
    the hypothesis length so identity always scores 1), times the brevity
    penalty exp(1 - |ref|/|hyp|) when the hypothesis is shorter.
    """
    hyp_tokens = tokenize(hyp)
    ref_tokens = tokenize(ref)
    if not hyp_tokens or not ref_tokens:
        return 0.0
    orders = min(max_n, len(hyp_tokens))
    log_sum = 0.0
    for n in range(1, orders + 1):
        hyp_counts = Counter(ngrams(hyp_tokens, n))
        ref_counts = Counter(ngrams(ref_tokens, n))
        clipped = sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
        total = sum(hyp_counts.values())
        precision = clipped / total if clipped > 0 else smoothing_epsilon
        log_sum += math.log(precision)
    score = math.exp(log_sum / orders)
    if len(hyp_tokens) < len(ref_tokens):
        score *= math.exp(1.0 - len(ref_tokens) / len(hyp_tokens))
    return min(score, 1.0)


def corpus_bleu(hyps: list[str], refs: list[str], max_n: int = 4) -> float:
    """Corpus BLEU: clipped counts aggregated across segments before combining."""
    if len(hyps) != len(refs):
        raise ValueError("hypothesis/reference count mismatch")
    if not hyps:
        return 0.0
    clipped = [0] * max_n
    totals = [0] * max_n
    hyp_len = 0
    ref_len = 0
    for hyp, ref in zip(hyps, refs):
        hyp_tokens = tokenize(hyp)
        ref_tokens = tokenize(ref)
        hyp_len += len(hyp_tokens)
        ref_len += len(ref_tokens)
        for n in range(1, max_n + 1):
            hyp_counts = Counter(ngrams(hyp_tokens, n))
            ref_counts = Counter(ngrams(ref_tokens, n))
            clipped[n - 1] += sum(min(c, ref_counts[g]) for g, c in hyp_counts.items())
            totals[n - 1] += sum(hyp_counts.values())
    if hyp_len == 0 or ref_len == 0:
        return 0.0
    # Orders with no hypothesis n-grams at all are skipped; zero matches
    # among existing n-grams are epsilon-smoothed.
    log_terms = [
        math.log(clipped[n] / totals[n]) if clipped[n] > 0 else math.log(BLEU_EPSILON)
        for n in range(max_n) if totals[n] > 0
    ]
    if not log_terms:
        return 0.0
    score = math.exp(sum(log_terms) / len(log_terms))
    if hyp_len < ref_len:
        score *= math.exp(1.0 - ref_len / hyp_len)
    return min(score, 1.0)


def distinct_n(hyps: list[str], n: int) -> float:
    """Distinct n-grams across all hypotheses over total n-gram tokens."""
    seen: set[tuple[str, ...]] = set()
    total = 0
    for hyp in hyps:
        grams = ngrams(tokenize(hyp), n)
        total += len(grams)
        seen.update(grams)
    if total == 0:
        return 0.0
    return len(seen) / total


def delta(kind: MetricKind, hyp: str, ref: str) -> float:
    """The per-example score used for rewards; dispatches on kind."""
    if kind.kind == "rouge1":
        return rouge_n(hyp, ref, 1, kind.rouge_mode)
    if kind.kind == "rouge2":
        return rouge_n(hyp, ref, 2, kind.rouge_mode)
    if kind.kind == "rougeL":
        return rouge_l(hyp, ref, kind.rouge_mode)
    if kind.kind == "bleu":
        return bleu(hyp, ref)
    if kind.kind == "distinct1":
        return distinct_n([hyp], 1)
    if kind.kind == "distinct2":
        return distinct_n([hyp], 2)
    raise ValueError(f"unknown metric kind {kind.kind!r}")
