"""Candidate selection checks.

The multinomial-without-replacement selection is verified against the
exactly enumerated selection law (all ordered draw sequences) with a
Pearson chi-square test at the 1% level; probabilities are verified
against a brute-force restricted softmax.
"""

import itertools

import numpy as np
import pytest
from scipy.stats import chi2

from dusalab import autodiff as ad
from dusalab.csm import BudgetConfig, CandidateSet, csm, logit_norm, probs_over, select
from dusalab.rng import Rng


def exact_pair_law(probs, m=2):
    """Probability of each unordered draw set under sequential sampling
    without replacement (enumeration over ordered sequences)."""
    n = len(probs)
    law = {}
    for seq in itertools.permutations(range(n), m):
        p, remaining = 1.0, 1.0
        for i in seq:
            p *= probs[i] / remaining
            remaining -= probs[i]
        key = frozenset(seq)
        law[key] = law.get(key, 0.0) + p
    return law


class TestLogitNorm:
    def test_three_four_five(self):
        np.testing.assert_allclose(logit_norm(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([1.0, 0.0, 0.0])
        np.testing.assert_allclose(logit_norm(v), v, atol=1e-15)

    def test_norm_is_one_for_random_vectors(self):
        rng = Rng(0)
        z = rng.normal((10_000, 8)) * 10
        norms = np.linalg.norm(logit_norm(z), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_zero_vector_guarded(self):
        out = logit_norm(np.zeros(4))
        assert np.all(np.isfinite(out))
        np.testing.assert_array_equal(out, np.zeros(4))

    def test_gradient_flows_through_normalization(self):
        rng = Rng(1)
        z = rng.normal(6)

        def loss(p):
            return (logit_norm(p["z"]) * np.arange(6.0)).sum()

        assert ad.grad_check(loss, {"z": z}) <= 1e-6


class TestSelect:
    def test_full_budget_descending_order(self):
        z = np.array([0.3, 2.0, -1.0, 0.3])
        idx = select(z, BudgetConfig(4, 0))
        np.testing.assert_array_equal(idx, [1, 0, 3, 2])  # tie 0.3: lower index first

    def test_unique_max_single_budget(self):
        z = np.array([0.1, 0.9, 0.3])
        np.testing.assert_array_equal(select(z, BudgetConfig(1, 0)), [1])

    def test_budget_clipped_with_warning(self):
        z = np.arange(3.0)
        with pytest.warns(UserWarning, match="clipping"):
            idx = select(z, BudgetConfig(5, 2), Rng(0))
        assert sorted(idx.tolist()) == [0, 1, 2]

    def test_sampling_requires_rng(self):
        with pytest.raises(ValueError, match="rng"):
            select(np.arange(4.0), BudgetConfig(1, 2))

    def test_deterministic_given_seed(self):
        z = Rng(3).normal(12)
        a = select(z, BudgetConfig(4, 3), Rng(42))
        b = select(z, BudgetConfig(4, 3), Rng(42))
        np.testing.assert_array_equal(a, b)

    def test_multinomial_extras_follow_without_replacement_law(self):
        # K=10, k=4, m=2: over 1e5 seeded draws the top-4 always appear,
        # extras are distinct non-top classes, and the empirical law of
        # the drawn pair matches the enumerated softmax-without-
        # replacement law (chi-square, 1% level, df = 15 pairs - 1).
        rng_z = Rng(17)
        z = np.sort(rng_z.normal(10))[::-1].copy()  # descending, moderate spread
        cfg = BudgetConfig(4, 2)
        top4 = set(range(4))
        rest = np.arange(4, 10)
        soft = np.exp(z[rest] - z[rest].max())
        soft /= soft.sum()
        law = exact_pair_law(dict(enumerate(soft)), m=2)

        n_draws = 100_000
        rng = Rng(99)
        counts = {key: 0 for key in law}
        marg = np.zeros(6)
        for _ in range(n_draws):
            idx = select(z, cfg, rng)
            assert top4.issubset(idx[:4].tolist())
            extras = idx[4:]
            assert extras.size == 2 and extras[0] != extras[1]
            assert not top4.intersection(extras.tolist())
            local = frozenset(int(e) - 4 for e in extras)
            counts[local] += 1
            for e in extras:
                marg[int(e) - 4] += 1

        observed = np.array([counts[key] for key in law])
        expected = np.array([law[key] * n_draws for key in law])
        stat = np.sum((observed - expected) ** 2 / expected)
        assert stat <= chi2.ppf(0.99, df=len(law) - 1)

        # Marginal inclusion frequencies agree with the enumerated law.
        marg_law = np.zeros(6)
        for key, p in law.items():
            for i in key:
                marg_law[i] += p
        se = np.sqrt(marg_law * (1 - marg_law) / n_draws)
        assert np.all(np.abs(marg / n_draws - marg_law) <= 4 * se)


class TestProbsOver:
    def test_equal_logits_uniform(self):
        z = np.zeros(6)
        p = probs_over(z, np.array([0, 2, 4]))
        np.testing.assert_allclose(p, np.full(3, 1 / 3), atol=1e-15)

    def test_single_candidate(self):
        np.testing.assert_allclose(probs_over(np.array([0.5, -1.0]), np.array([1])), [1.0])

    def test_matches_bruteforce_softmax(self):
        rng = Rng(5)
        for _ in range(200):
            z = rng.normal(9)
            idx = rng.gen.permutation(9)[:4]
            p = probs_over(z, idx)
            brute = np.exp(z[idx])
            brute /= brute.sum()
            np.testing.assert_allclose(p, brute, atol=1e-12)

    def test_duplicate_index_rejected(self):
        with pytest.raises(ValueError, match="duplicate"):
            probs_over(np.zeros(4), np.array([1, 1]))

    def test_differentiable_with_respect_to_logits(self):
        rng = Rng(6)
        z = rng.normal(7)
        idx = np.array([0, 3, 5])

        def loss(p):
            probs = probs_over(logit_norm(p["z"]), idx)
            return (probs * np.array([1.0, -2.0, 0.5])).sum()

        assert ad.grad_check(loss, {"z": z}) <= 1e-6


class TestCsm:
    def test_full_budget_reproduces_softmax(self):
        rng = Rng(7)
        z = rng.normal(8)
        cand = csm(z, BudgetConfig(8, 0))
        full = np.zeros(8)
        full[cand.indices] = cand.probs
        zn = logit_norm(z)
        expected = np.exp(zn - zn.max())
        expected /= expected.sum()
        np.testing.assert_allclose(full, expected, atol=1e-12)

    def test_single_class_budget(self):
        cand = csm(np.array([0.2, 3.0, -1.0]), BudgetConfig(1, 0))
        np.testing.assert_array_equal(cand.indices, [1])
        np.testing.assert_array_equal(cand.probs, [1.0])

    def test_equals_stepwise_composition(self):
        rng_data = Rng(8)
        for trial in range(1000):
            z = rng_data.normal(10)
            cand = csm(z, BudgetConfig(3, 2), Rng(trial))
            idx = select(z, BudgetConfig(3, 2), Rng(trial))
            probs = probs_over(logit_norm(z), idx)
            np.testing.assert_array_equal(cand.indices, idx)
            np.testing.assert_array_equal(cand.probs, probs)

    def test_probs_sum_to_one_and_topk_included(self):
        rng = Rng(9)
        for trial in range(100):
            z = rng.normal(12)
            cand = csm(z, BudgetConfig(4, 3), Rng(1000 + trial))
            assert abs(cand.probs.sum() - 1.0) <= 1e-12
            top4 = np.argsort(-z, kind="stable")[:4]
            assert set(top4.tolist()).issubset(cand.indices.tolist())
            assert cand.indices.size == 7

    def test_candidate_set_validation(self):
        with pytest.raises(ValueError, match="distinct"):
            CandidateSet(np.array([0, 0]), np.array([0.5, 0.5]))
        with pytest.raises(ValueError, match="probability"):
            CandidateSet(np.array([0, 1]), np.array([0.9, 0.9]))
