import numpy as np
import pytest

from matchlab.core import FractionalAssignment, NotDecomposable, utilities, validate_instance
from matchlab.lottery import decompose, random_doubly_stochastic, sample, sinkhorn


class TestDecompose:
    def test_identity_single_term(self):
        lot = decompose(np.eye(3))
        assert len(lot.terms) == 1
        weight, matching = lot.terms[0]
        assert weight == pytest.approx(1.0)
        assert matching == (0, 1, 2)

    def test_all_half_two_terms(self):
        lot = decompose(np.full((2, 2), 0.5))
        assert len(lot.terms) == 2
        assert all(w == pytest.approx(0.5) for w, _ in lot.terms)
        assert np.allclose(lot.reconstruct(), 0.5)

    def test_three_cycle_reconstruction(self):
        p = np.array([[0.5, 0.5, 0.0], [0.5, 0.0, 0.5], [0.0, 0.5, 0.5]])
        lot = decompose(p)
        assert len(lot.terms) == 2
        assert np.allclose(lot.reconstruct(), p, atol=1e-12)

    def test_random_doubly_stochastic_fidelity(self):
        for seed, n in [(0, 3), (1, 5), (2, 8), (3, 12)]:
            p = random_doubly_stochastic(n, seed)
            lot = decompose(p)
            assert np.abs(lot.reconstruct() - p).max() <= 1e-8
            assert len(lot.terms) <= (n - 1) ** 2 + 1

    def test_substochastic_padding(self):
        # Partial mechanism output: rows sum to less than one.
        p = np.array([[0.4, 0.2], [0.1, 0.3]])
        lot = decompose(p)
        rec = lot.reconstruct()
        assert np.allclose(rec, p, atol=1e-9)
        assert lot.total_weight() == pytest.approx(1.0, abs=1e-9)
        # Some terms leave an agent unmatched.
        assert any(-1 in matching for _, matching in lot.terms)

    def test_rectangular_input(self):
        p = np.array([[0.5, 0.25, 0.25]])
        lot = decompose(p)
        assert np.allclose(lot.reconstruct(), p, atol=1e-9)

    def test_oversubscribed_raises(self):
        with pytest.raises(NotDecomposable):
            decompose(np.array([[0.8, 0.8], [0.3, 0.3]]))

    def test_deterministic(self):
        p = random_doubly_stochastic(6, 11)
        l1 = decompose(p)
        l2 = decompose(p)
        assert l1.terms == l2.terms

    def test_expected_utility_matches_marginals(self, table1):
        p = np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]])
        lot = decompose(p)
        direct = utilities(table1, p)
        via_lottery = np.zeros(3)
        for w, matching in lot.terms:
            for i, j in enumerate(matching):
                if j >= 0:
                    via_lottery[i] += w * float(table1.values[i, j])
        assert np.allclose(via_lottery, direct, atol=1e-9)


class TestSample:
    def test_single_term_always_returned(self):
        lot = decompose(np.eye(4))
        for seed in range(5):
            assert sample(lot, seed) == (0, 1, 2, 3)

    def test_two_term_frequencies_within_3_sigma(self):
        lot = decompose(np.full((2, 2), 0.5))
        draws = 10_000
        hits = sum(sample(lot, seed)[0] == lot.terms[0][1][0]
                   for seed in range(draws))
        sigma = (draws * 0.25) ** 0.5
        assert abs(hits - draws / 2) <= 3 * sigma

    def test_residual_goes_to_first_term(self):
        lot = decompose(np.eye(2))
        lot.residual = 0.3
        lot.terms = [(0.4, (0, 1)), (0.3, (1, 0))]
        # Weight of the first term becomes 0.7: frequencies reflect it.
        hits = sum(sample(lot, seed) == (0, 1) for seed in range(4000))
        assert abs(hits / 4000 - 0.7) < 0.03

    def test_reproducible_per_seed(self):
        lot = decompose(random_doubly_stochastic(5, 3))
        assert sample(lot, 42) == sample(lot, 42)


class TestSinkhorn:
    def test_balances(self, rng):
        a = sinkhorn(rng.uniform(0.1, 1.0, size=(6, 6)))
        assert np.abs(a.sum(axis=0) - 1).max() < 1e-10
        assert np.abs(a.sum(axis=1) - 1).max() < 1e-10
