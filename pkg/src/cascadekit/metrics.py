"""Text-similarity primitives and pairwise agreement scoring for ensembles.

Everything here is a pure function of its arguments, so concurrent use needs
no coordination. The n-gram family (``bleu``, ``rouge_n``, ``rouge_l``)
returns scores in [0, 1]; ``cosine_similarity`` returns scores in [-1, 1].
"""

from __future__ import annotations

import math
import unicodedata
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from .errors import (
    DimensionMismatch,
    FewerThanTwoOutputs,
    MissingEmbeddings,
    UnknownMetric,
    ZeroNormVector,
)

NGRAM_METRICS = ("bleu", "rouge_1", "rouge_2", "rouge_l")
EMBEDDING_METRIC = "embedding_cosine"
METRICS = NGRAM_METRICS + (EMBEDDING_METRIC,)


def tokenize(text: str) -> list[str]:
    """Deterministic tokenizer used by every n-gram metric.

    NFC-normalizes, lowercases, splits each punctuation character into its
    own token, then splits on whitespace. Empty input gives an empty list;
    no produced token is ever the empty string.
    """
    normalized = unicodedata.normalize("NFC", text).lower()
    parts: list[str] = []
    for ch in normalized:
        if unicodedata.category(ch).startswith("P"):
            parts.append(f" {ch} ")
        else:
            parts.append(ch)
    return "".join(parts).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(candidate: Sequence[str], reference: Sequence[str], max_n: int = 4) -> float:
    """Sentence BLEU over token sequences.

    Geometric mean of clipped n-gram precisions for n = 1..max_n, times the
    brevity penalty exp(min(0, 1 - |ref|/|cand|)). Any precision whose
    numerator is zero gets add-one smoothing on both numerator and
    denominator, which keeps the result reproducible without an external
    implementation. Returns 0.0 when the candidate is empty or shares no
    unigram with the reference.
    """
    if max_n < 1:
        raise ValueError(f"max_n must be >= 1, got {max_n}")
    if not candidate:
        return 0.0
    unigram_overlap = sum((_ngrams(candidate, 1) & _ngrams(reference, 1)).values())
    if unigram_overlap == 0:
        return 0.0
    log_precision_sum = 0.0
    for n in range(1, max_n + 1):
        cand_counts = _ngrams(candidate, n)
        matched = sum((cand_counts & _ngrams(reference, n)).values())
        total = sum(cand_counts.values())
        if matched == 0:
            matched += 1
            total += 1
        log_precision_sum += math.log(matched / total)
    brevity = math.exp(min(0.0, 1.0 - len(reference) / len(candidate)))
    return math.exp(log_precision_sum / max_n) * brevity


def rouge_n(candidate: Sequence[str], reference: Sequence[str], n: int = 1) -> float:
    """F1 of clipped n-gram overlap; 0.0 when either side has no n-grams."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    cand_counts = _ngrams(candidate, n)
    ref_counts = _ngrams(reference, n)
    cand_total = sum(cand_counts.values())
    ref_total = sum(ref_counts.values())
    if cand_total == 0 or ref_total == 0:
        return 0.0
    overlap = sum((cand_counts & ref_counts).values())
    if overlap == 0:
        return 0.0
    precision = overlap / cand_total
    recall = overlap / ref_total
    return 2.0 * precision * recall / (precision + recall)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # Two-row dynamic program; O(|a|*|b|) time, O(|b|) space.
    if not a or not b:
        return 0
    previous = [0] * (len(b) + 1)
    for token in a:
        current = [0]
        for j, other in enumerate(b, start=1):
            if token == other:
                current.append(previous[j - 1] + 1)
            else:
                current.append(max(previous[j], current[j - 1]))
        previous = current
    return previous[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """F1 of longest-common-subsequence overlap; 0.0 when either side is empty."""
    if not candidate or not reference:
        return 0.0
    lcs = _lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    precision = lcs / len(candidate)
    recall = lcs / len(reference)
    return 2.0 * precision * recall / (precision + recall)


def cosine_similarity(a: Sequence[float], b: Sequence[float]) -> float:
    """Cosine of the angle between two vectors, clamped to [-1, 1].

    The clamp only absorbs last-ulp drift from the norm product; it never
    moves a mathematically in-range value.
    """
    if len(a) != len(b) or len(a) == 0:
        raise DimensionMismatch(f"vector dims {len(a)} and {len(b)} (both must match, > 0)")
    norm_a = math.sqrt(sum(x * x for x in a))
    norm_b = math.sqrt(sum(x * x for x in b))
    if norm_a == 0.0 or norm_b == 0.0:
        raise ZeroNormVector("cosine similarity is undefined for a zero vector")
    dot = sum(x * y for x, y in zip(a, b))
    return max(-1.0, min(1.0, dot / (norm_a * norm_b)))


@dataclass(frozen=True)
class AgreementMatrix:
    """Symmetric n-by-n pairwise similarity among ensemble outputs."""

    n: int
    cells: tuple[tuple[float, ...], ...]

    def __post_init__(self) -> None:
        if self.n != len(self.cells) or any(len(row) != self.n for row in self.cells):
            raise ValueError("cells must be an n-by-n matrix")


def _pair_similarity(metric: str, a: Sequence[str], b: Sequence[str]) -> float:
    if metric == "bleu":
        return bleu(a, b)
    if metric == "rouge_1":
        return rouge_n(a, b, 1)
    if metric == "rouge_2":
        return rouge_n(a, b, 2)
    if metric == "rouge_l":
        return rouge_l(a, b)
    raise UnknownMetric(f"unsupported metric {metric!r}")


def agreement_matrix(
    outputs: Sequence[str],
    metric: str,
    embeddings: Sequence[Sequence[float]] | None = None,
) -> AgreementMatrix:
    """Pairwise similarity matrix over ensemble outputs under one metric.

    Directional metrics are symmetrized as (sim(i->j) + sim(j->i)) / 2, so
    the matrix is symmetric by construction. The diagonal holds each
    output's self-similarity. ``embeddings`` must be supplied (one vector
    per output) exactly when ``metric`` is ``embedding_cosine``; it is
    ignored otherwise.
    """
    n = len(outputs)
    if n < 2:
        raise FewerThanTwoOutputs(f"agreement needs >= 2 outputs, got {n}")
    if metric not in METRICS:
        raise UnknownMetric(f"unsupported metric {metric!r} (expected one of {METRICS})")

    cells = [[0.0] * n for _ in range(n)]
    if metric == EMBEDDING_METRIC:
        if embeddings is None or len(embeddings) != n:
            raise MissingEmbeddings(
                f"metric {metric!r} needs one embedding per output "
                f"(got {0 if embeddings is None else len(embeddings)} for {n} outputs)"
            )
        for i in range(n):
            for j in range(i, n):
                value = cosine_similarity(embeddings[i], embeddings[j])
                cells[i][j] = cells[j][i] = value
    else:
        token_seqs = [tokenize(text) for text in outputs]
        for i in range(n):
            cells[i][i] = _pair_similarity(metric, token_seqs[i], token_seqs[i])
            for j in range(i + 1, n):
                forward = _pair_similarity(metric, token_seqs[i], token_seqs[j])
                backward = _pair_similarity(metric, token_seqs[j], token_seqs[i])
                value = (forward + backward) / 2.0
                cells[i][j] = cells[j][i] = value
    return AgreementMatrix(n=n, cells=tuple(tuple(row) for row in cells))


def mean_pairwise_scores(matrix: AgreementMatrix) -> list[float]:
    """Per-output consensus: mean similarity to every *other* output.

    The diagonal is excluded. Addends are sorted before summing so the
    result is bit-identical under any permutation of the ensemble.
    """
    if matrix.n < 2:
        raise FewerThanTwoOutputs("mean pairwise score needs an n >= 2 matrix")
    scores: list[float] = []
    for i in range(matrix.n):
        others = sorted(matrix.cells[i][j] for j in range(matrix.n) if j != i)
        scores.append(sum(others) / (matrix.n - 1))
    return scores
