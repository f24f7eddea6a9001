from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadekit.errors import (
    DimensionMismatch,
    FewerThanTwoOutputs,
    MissingEmbeddings,
    UnknownMetric,
    ZeroNormVector,
)
from cascadekit.metrics import (
    AgreementMatrix,
    agreement_matrix,
    bleu,
    cosine_similarity,
    mean_pairwise_scores,
    rouge_l,
    rouge_n,
    tokenize,
)
from oracles import bleu_oracle, rouge_l_oracle, rouge_n_oracle

VOCAB = ["the", "cat", "sat", "on", "mat", "a", "dog", "ran"]


def random_tokens(rng: random.Random, max_len: int = 20) -> list[str]:
    return [rng.choice(VOCAB) for _ in range(rng.randrange(0, max_len + 1))]


class TestTokenize:
    def test_empty(self):
        assert tokenize("") == []

    def test_punctuation_and_case(self):
        assert tokenize("The cat, sat!") == ["the", "cat", ",", "sat", "!"]

    def test_identity_word(self):
        assert tokenize("abc") == ["abc"]

    def test_no_empty_tokens_and_unicode(self):
        tokens = tokenize("  Héllo,  wörld!?  ")
        assert tokens == ["héllo", ",", "wörld", "!", "?"]
        assert all(tokens)

    @given(st.text(max_size=80))
    def test_never_produces_empty_tokens(self, text):
        assert all(tok for tok in tokenize(text))


class TestBleu:
    def test_identity(self):
        seq = ["a", "b", "c", "d", "e", "f"]
        assert bleu(seq, seq, 4) == 1.0

    def test_disjoint(self):
        assert bleu(["a", "b"], ["c", "d"], 4) == 0.0

    def test_empty_candidate(self):
        assert bleu([], ["a"], 4) == 0.0

    def test_cat_mat_example(self):
        cand = tokenize("the cat sat on a mat")
        ref = tokenize("the cat sat on the mat")
        expected = (5 / 6 * 3 / 5 * 2 / 4 * 1 / 3) ** 0.25
        assert bleu(cand, ref, 4) == pytest.approx(expected, abs=1e-12)

    def test_brevity_penalty_applies_to_short_candidates(self):
        # candidate half the reference length: penalty exp(1 - 2) = e^-1
        score_short = bleu(["a", "b"], ["a", "b", "a", "b"], 1)
        assert score_short < bleu(["a", "b", "a", "b"], ["a", "b", "a", "b"], 1)

    def test_range(self):
        rng = random.Random(7)
        for _ in range(200):
            c, r = random_tokens(rng), random_tokens(rng)
            assert 0.0 <= bleu(c, r, 4) <= 1.0


class TestRouge:
    def test_rouge_n_identity(self):
        assert rouge_n(["x", "y"], ["x", "y"], 1) == 1.0

    def test_rouge_n_hand_count(self):
        assert rouge_n(["the", "cat", "sat"], ["the", "cat"], 1) == pytest.approx(0.8, abs=1e-12)

    def test_rouge_n_degenerate(self):
        assert rouge_n(["a"], ["a"], 2) == 0.0

    def test_rouge_l_identity(self):
        assert rouge_l(["a", "b", "c"], ["a", "b", "c"]) == 1.0

    def test_rouge_l_hand_lcs(self):
        assert rouge_l(["the", "cat", "sat"], ["cat", "sat", "down"]) == pytest.approx(
            2 / 3, abs=1e-12
        )

    def test_rouge_l_disjoint(self):
        assert rouge_l(["a"], ["b"]) == 0.0


def test_ngram_metrics_match_bruteforce_oracle():
    rng = random.Random(1234)
    for _ in range(300):
        cand, ref = random_tokens(rng), random_tokens(rng)
        assert bleu(cand, ref, 4) == pytest.approx(bleu_oracle(cand, ref, 4), abs=1e-12)
        assert rouge_n(cand, ref, 1) == pytest.approx(rouge_n_oracle(cand, ref, 1), abs=1e-12)
        assert rouge_n(cand, ref, 2) == pytest.approx(rouge_n_oracle(cand, ref, 2), abs=1e-12)
        assert rouge_l(cand, ref) == pytest.approx(rouge_l_oracle(cand, ref), abs=1e-12)


class TestCosine:
    def test_identical(self):
        assert cosine_similarity([3.0, 4.0], [3.0, 4.0]) == pytest.approx(1.0, abs=1e-12)

    def test_orthogonal(self):
        assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0

    def test_hand_dot(self):
        assert cosine_similarity([1.0, 2.0], [2.0, 1.0]) == pytest.approx(0.8, abs=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            cosine_similarity([1.0], [1.0, 2.0])
        with pytest.raises(DimensionMismatch):
            cosine_similarity([], [])

    def test_zero_norm(self):
        with pytest.raises(ZeroNormVector):
            cosine_similarity([0.0, 0.0], [1.0, 1.0])

    @given(
        st.lists(st.floats(-10, 10), min_size=1, max_size=6),
        st.floats(0.1, 100.0),
    )
    def test_scale_invariant(self, vec, scale):
        if all(abs(x) < 1e-6 for x in vec):
            return
        assert cosine_similarity(vec, [scale * x for x in vec]) == pytest.approx(1.0, abs=1e-9)


class TestAgreementMatrix:
    def test_identical_texts_all_ones(self):
        m = agreement_matrix(["same text here"] * 3, "rouge_l")
        assert m.cells == ((1.0, 1.0, 1.0),) * 3

    def test_disjoint_pair(self):
        m = agreement_matrix(["aa bb", "cc dd"], "rouge_1")
        assert m.cells == ((1.0, 0.0), (0.0, 1.0))

    def test_hand_computed_rouge_l_triple(self):
        # pairwise LCS: (0,1)=4/5, (0,2)=1/5, (1,2)=2/5 of length-5 sequences
        texts = ["a b c d e", "a b c d f", "a f g h i"]
        expected = [
            [1.0, 0.8, 0.2],
            [0.8, 1.0, 0.4],
            [0.2, 0.4, 1.0],
        ]
        m = agreement_matrix(texts, "rouge_l")
        for i in range(3):
            for j in range(3):
                assert m.cells[i][j] == pytest.approx(expected[i][j], abs=1e-12)

    def test_symmetry_exact(self):
        rng = random.Random(5)
        texts = [" ".join(random_tokens(rng, 8) or ["x"]) for _ in range(4)]
        for metric in ("bleu", "rouge_1", "rouge_2", "rouge_l"):
            m = agreement_matrix(texts, metric)
            for i in range(4):
                for j in range(4):
                    assert m.cells[i][j] == m.cells[j][i]

    def test_permutation_permutes_matrix(self):
        rng = random.Random(11)
        texts = [" ".join(random_tokens(rng, 8) or ["x"]) for _ in range(4)]
        m = agreement_matrix(texts, "rouge_l")
        for _ in range(20):
            perm = list(range(4))
            rng.shuffle(perm)
            permuted = agreement_matrix([texts[p] for p in perm], "rouge_l")
            for i in range(4):
                for j in range(4):
                    assert permuted.cells[i][j] == m.cells[perm[i]][perm[j]]

    def test_embedding_metric(self):
        embeddings = [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]
        m = agreement_matrix(["a", "b", "c"], "embedding_cosine", embeddings)
        assert m.cells[0][2] == pytest.approx(1.0, abs=1e-12)
        assert m.cells[0][1] == 0.0
        assert m.cells[0][0] == 1.0

    def test_errors(self):
        with pytest.raises(FewerThanTwoOutputs):
            agreement_matrix(["only one"], "rouge_l")
        with pytest.raises(MissingEmbeddings):
            agreement_matrix(["a", "b"], "embedding_cosine")
        with pytest.raises(UnknownMetric):
            agreement_matrix(["a", "b"], "meteor")


class TestMeanPairwiseScores:
    def test_all_ones(self):
        m = AgreementMatrix(3, ((1.0, 1.0, 1.0),) * 3)
        assert mean_pairwise_scores(m) == [1.0, 1.0, 1.0]

    def test_hand_average(self):
        m = AgreementMatrix(
            3,
            (
                (1.0, 0.8, 0.2),
                (0.8, 1.0, 0.4),
                (0.2, 0.4, 1.0),
            ),
        )
        scores = mean_pairwise_scores(m)
        assert scores == pytest.approx([0.5, 0.6, 0.3], abs=1e-12)

    def test_two_by_two_symmetry(self):
        for c in (0.0, 0.25, 0.9):
            m = AgreementMatrix(2, ((1.0, c), (c, 1.0)))
            assert mean_pairwise_scores(m) == [c, c]

    @given(st.floats(0, 1))
    def test_constant_off_diagonal(self, c):
        # n=3: two addends, (c+c)/2 is exact; n=4: 3c/3 can drift one ulp
        m3 = AgreementMatrix(3, tuple(
            tuple(1.0 if i == j else c for j in range(3)) for i in range(3)
        ))
        assert mean_pairwise_scores(m3) == [c] * 3
        m4 = AgreementMatrix(4, tuple(
            tuple(1.0 if i == j else c for j in range(4)) for i in range(4)
        ))
        assert mean_pairwise_scores(m4) == pytest.approx([c] * 4, rel=1e-15, abs=1e-15)

    def test_permutation_equivariant(self):
        rng = random.Random(3)
        texts = [" ".join(random_tokens(rng, 8) or ["x"]) for _ in range(5)]
        base = mean_pairwise_scores(agreement_matrix(texts, "rouge_1"))
        for _ in range(25):
            perm = list(range(5))
            rng.shuffle(perm)
            permuted = mean_pairwise_scores(
                agreement_matrix([texts[p] for p in perm], "rouge_1")
            )
            # sorted-addend summation makes this exact, not approximate
            assert permuted == [base[p] for p in perm]
