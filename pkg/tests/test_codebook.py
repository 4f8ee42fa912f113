import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dab import codebook as cbm
from dab.codebook import (Codebook, CodebookFormatError, assignment_probs, commit_covariances,
                          commit_marginal, deserialize, hard_assignments, mutual_information,
                          serialize, uncertainty, update_covariances, update_marginal)
from dab.gauss import DiagGaussian, kl_matrix
from dab.rdfc import blahut_arimoto


def make_codebook(k=2, d=1, alpha=1.0, gamma=0.0, seed=0):
    return Codebook.init(k, d, alpha, gamma, np.random.default_rng(seed))


def encoders(mean, var):
    mean = np.atleast_2d(np.asarray(mean, float))
    return DiagGaussian(mean, np.sqrt(np.broadcast_to(np.asarray(var, float), mean.shape)))


class TestAssignment:
    def test_alpha_zero_returns_pi(self):
        pi = np.array([0.2, 0.5, 0.3])
        np.testing.assert_array_equal(assignment_probs(np.array([1.0, 5.0, 9.0]), pi, 0.0), pi)

    def test_single_centroid(self):
        np.testing.assert_array_equal(assignment_probs(np.array([7.3]), np.array([1.0]), 2.0), [1.0])

    def test_hand_value(self):
        rows = assignment_probs(np.array([1.0, 3.0]), np.array([0.5, 0.5]), 1.0)
        expected = np.array([math.exp(-1), math.exp(-3)]) / (math.exp(-1) + math.exp(-3))
        np.testing.assert_allclose(rows, expected, atol=1e-15)
        np.testing.assert_allclose(rows, [0.880797, 0.119203], atol=1e-6)

    def test_zero_pi(self):
        with pytest.raises(ValueError, match="positive"):
            assignment_probs(np.array([1.0, 2.0]), np.zeros(2), 1.0)

    def test_negative_distance(self):
        with pytest.raises(ValueError, match="negative"):
            assignment_probs(np.array([-0.5, 2.0]), np.array([0.5, 0.5]), 1.0)

    def test_rounding_noise_tolerated(self):
        rows = assignment_probs(np.array([-1e-15, 2.0]), np.array([0.5, 0.5]), 1.0)
        assert rows.sum() == pytest.approx(1.0, abs=1e-12)

    def test_huge_distances(self):
        rows = assignment_probs(np.array([1e6, 1e6 + 1.0]), np.array([0.5, 0.5]), 1.0)
        assert np.all(np.isfinite(rows)) and abs(rows.sum() - 1.0) < 1e-12

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), alpha=st.floats(0, 50))
    def test_simplex(self, seed, alpha):
        rng = np.random.default_rng(seed)
        k = rng.integers(1, 6)
        rows = assignment_probs(rng.uniform(0, 1e6, (4, k)) * rng.uniform(0, 1, (4, 1)),
                                rng.dirichlet(np.ones(k)), alpha)
        np.testing.assert_allclose(rows.sum(1), 1.0, atol=1e-12)
        assert np.all(rows >= 0)

    @settings(max_examples=50, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_monotone_in_own_distance(self, seed):
        rng = np.random.default_rng(seed)
        d, pi = rng.uniform(0, 5, 3), rng.dirichlet(np.ones(3))
        bumped = d.copy()
        bumped[0] += rng.uniform(0.1, 2.0)
        assert assignment_probs(bumped, pi, 1.5)[0] < assignment_probs(d, pi, 1.5)[0]


class TestUncertainty:
    def test_single_centroid_is_kl(self):
        cb = make_codebook(k=1, d=3)
        enc = DiagGaussian(np.array([0.4, -0.2, 1.0]), np.array([0.5, 1.2, 0.8]))
        expected = kl_matrix(DiagGaussian(enc.mean.data[None], enc.scale.data[None]),
                             cb.centroids()).data[0, 0]
        assert uncertainty(enc, cb) == expected

    def test_hand_value(self):
        # KL(N(0,1) || N(m,1)) = m^2 / 2, so means sqrt(2), sqrt(6) give distances 1 and 3
        cb = Codebook(np.array([[math.sqrt(2.0)], [math.sqrt(6.0)]]), np.ones((2, 1)),
                      np.array([0.5, 0.5]), 1.0, 0.0)
        enc = DiagGaussian(np.zeros(1), np.ones(1))
        assert uncertainty(enc, cb) == pytest.approx(1.238406, abs=1e-6)

    def test_equal_distances(self):
        cb = Codebook(np.array([[1.0], [-1.0]]), np.ones((2, 1)), np.array([0.9, 0.1]), 3.0, 0.0)
        enc = DiagGaussian(np.zeros(1), np.ones(1))
        assert uncertainty(enc, cb) == pytest.approx(0.5, abs=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            uncertainty(DiagGaussian(np.zeros(2), np.ones(2)), make_codebook(d=3))

    def test_batch_matches_single(self):
        cb = make_codebook(k=3, d=2, seed=4)
        rng = np.random.default_rng(5)
        batch = DiagGaussian(rng.normal(size=(5, 2)), rng.uniform(0.3, 2, (5, 2)))
        u = uncertainty(batch, cb)
        for i in range(5):
            assert u[i] == pytest.approx(uncertainty(batch[i], cb), abs=1e-14)

    def test_permutation_invariant(self):
        cb = make_codebook(k=4, d=2, alpha=2.0, seed=6)
        cb.pi = np.array([0.1, 0.2, 0.3, 0.4])
        cb.variances = np.random.default_rng(7).uniform(0.5, 2.0, (4, 2))
        perm = np.array([2, 0, 3, 1])
        shuffled = Codebook(cb.means.data[perm], cb.variances[perm], cb.pi[perm], cb.alpha, cb.gamma)
        enc = DiagGaussian(np.array([0.3, -0.8]), np.array([0.7, 1.1]))
        assert uncertainty(enc, shuffled) == pytest.approx(uncertainty(enc, cb), abs=1e-14)


class TestMutualInformation:
    def test_rows_equal_pi(self):
        pi = np.array([0.3, 0.7])
        assert mutual_information(np.tile(pi, (4, 1)), pi) == 0.0

    def test_hand_value(self):
        mi = mutual_information(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0.5, 0.5]))
        assert mi == pytest.approx(math.log(2), abs=1e-15)

    def test_deterministic_both_sides(self):
        assert mutual_information(np.array([[1.0, 0.0]]), np.array([1.0, 0.0])) == 0.0

    def test_absolute_continuity(self):
        with pytest.raises(ValueError, match="zero marginal"):
            mutual_information(np.array([[0.5, 0.5]]), np.array([1.0, 0.0]))

    @settings(max_examples=100, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1))
    def test_non_negative_when_pi_is_row_mean(self, seed):
        rng = np.random.default_rng(seed)
        rows = rng.dirichlet(np.ones(3), size=5)
        assert mutual_information(rows, rows.mean(0)) >= 0.0

    def test_zero_only_if_rows_equal_pi(self):
        rows = np.array([[0.6, 0.4], [0.4, 0.6]])
        assert mutual_information(rows, rows.mean(0)) > 0.0


class TestMarginal:
    def test_gamma_zero(self):
        cb = make_codebook(gamma=0.0)
        rows = np.array([[0.9, 0.1], [0.7, 0.3]])
        np.testing.assert_allclose(update_marginal(cb, rows), [0.8, 0.2], atol=1e-15)

    def test_gamma_one(self):
        cb = make_codebook(gamma=1.0)
        update_marginal(cb, np.array([[0.9, 0.1]]))
        np.testing.assert_array_equal(cb.pi_ma, [0.5, 0.5])

    def test_hand_value(self):
        cb = make_codebook(gamma=0.99)
        update_marginal(cb, np.array([[0.9, 0.1]]))
        np.testing.assert_allclose(cb.pi_ma, [0.504, 0.496], atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            update_marginal(make_codebook(k=2), np.ones((1, 3)) / 3)

    def test_commit(self):
        cb = make_codebook(gamma=0.0)
        update_marginal(cb, np.array([[0.25, 0.75]]))
        commit_marginal(cb)
        np.testing.assert_allclose(cb.pi, [0.25, 0.75])
        np.testing.assert_array_equal(cb.pi_ma, cb.pi)


class TestCovariances:
    def test_moment_matching_fixed_point(self):
        cb = Codebook(np.array([[0.7, -0.3]]), np.ones((1, 2)), np.ones(1), 1.0, 0.0)
        enc = encoders([0.7, -0.3], [0.25, 4.0])
        update_covariances(cb, enc, np.ones((1, 1)))
        np.testing.assert_allclose(commit_covariances(cb), [[0.25, 4.0]], atol=1e-15)

    def test_hand_value(self):
        cb = Codebook(np.zeros((1, 1)), np.ones((1, 1)), np.ones(1), 1.0, 0.0)
        update_covariances(cb, encoders([[-1.0], [1.0]], 1.0), np.array([[0.5], [0.5]]))
        assert commit_covariances(cb)[0, 0] == pytest.approx(2.0, abs=1e-15)

    def test_accumulates_over_batches(self):
        cb = Codebook(np.zeros((1, 1)), np.ones((1, 1)), np.ones(1), 1.0, 0.0)
        update_covariances(cb, encoders([[-1.0]], 1.0), np.ones((1, 1)))
        update_covariances(cb, encoders([[3.0]], 1.0), np.ones((1, 1)))
        assert commit_covariances(cb)[0, 0] == pytest.approx((2.0 + 10.0) / 2, abs=1e-15)

    def test_zero_weight_keeps_variance(self):
        cb = Codebook(np.zeros((2, 1)), np.array([[1.0], [3.5]]), np.array([0.5, 0.5]), 1.0, 0.0)
        update_covariances(cb, encoders([[1.0]], 1.0), np.array([[1.0, 0.0]]))
        new = commit_covariances(cb)
        assert new[1, 0] == 3.5 and new[0, 0] == 2.0

    def test_floor(self):
        cb = Codebook(np.zeros((1, 1)), np.ones((1, 1)), np.ones(1), 1.0, 0.0)
        update_covariances(cb, DiagGaussian(np.zeros((1, 1)), np.full((1, 1), 1e-8)),
                           np.ones((1, 1)))
        assert commit_covariances(cb)[0, 0] == cbm.VARIANCE_FLOOR

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="dimension"):
            update_covariances(make_codebook(d=2), encoders([[0.0]], 1.0), np.ones((1, 2)) / 2)


class TestHardAssignments:
    def test_ties_to_lowest(self):
        np.testing.assert_array_equal(hard_assignments(np.array([[1.0, 1.0, 2.0], [3.0, 0.5, 0.5]])),
                                      [0, 1])


class TestFixedPoint:
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_blahut_arimoto(self, seed):
        rng = np.random.default_rng(seed)
        n, k, dim, alpha = 12, 3, 2, 1.7
        enc = DiagGaussian(rng.normal(size=(n, dim)), rng.uniform(0.4, 1.5, (n, dim)))
        cb = Codebook(rng.normal(size=(k, dim)), rng.uniform(0.5, 2, (k, dim)),
                      np.full(k, 1.0 / k), alpha, 0.0)
        dist = cb.distances(enc).data
        for _ in range(20000):
            rows = assignment_probs(dist, cb.pi, alpha)
            update_marginal(cb, rows)
            old = cb.pi
            commit_marginal(cb)
            if np.max(np.abs(cb.pi - old)) < 1e-14:
                break
        rows = assignment_probs(dist, cb.pi, alpha)
        ba = blahut_arimoto(np.full(n, 1.0 / n), dist, alpha, tol=1e-14)
        assert mutual_information(rows, cb.pi) == pytest.approx(ba.rate, abs=1e-6)
        assert np.mean(np.sum(rows * dist, 1)) == pytest.approx(ba.distortion, abs=1e-6)


class TestSerialization:
    def full_codebook(self):
        cb = make_codebook(k=3, d=4, alpha=2.5, gamma=0.99, seed=9)
        rng = np.random.default_rng(10)
        cb.variances = rng.uniform(0.1, 3, (3, 4))
        cb.pi = rng.dirichlet(np.ones(3))
        cb.pi /= cb.pi.sum()
        cb.pi_ma = rng.dirichlet(np.ones(3))
        cb.cov_num = rng.uniform(0, 1, (3, 4))
        cb.cov_den = rng.uniform(0, 1, 3)
        return cb

    def test_round_trip(self):
        cb = self.full_codebook()
        blob = serialize(cb)
        back = deserialize(blob)
        for field in ("variances", "pi", "pi_ma", "cov_num", "cov_den"):
            np.testing.assert_array_equal(getattr(back, field), getattr(cb, field))
        np.testing.assert_array_equal(back.means.data, cb.means.data)
        assert (back.alpha, back.gamma) == (cb.alpha, cb.gamma)
        assert serialize(back) == blob
        assert len(blob) == cbm.serialized_size(3, 4)

    def test_bad_magic(self):
        blob = bytearray(serialize(make_codebook()))
        blob[:4] = b"XXXX"
        with pytest.raises(CodebookFormatError, match="magic"):
            deserialize(bytes(blob))

    def test_bad_version(self):
        blob = bytearray(serialize(make_codebook()))
        blob[4:8] = (99).to_bytes(4, "little")
        with pytest.raises(CodebookFormatError, match="version"):
            deserialize(bytes(blob))

    def test_truncated(self):
        blob = serialize(make_codebook())
        with pytest.raises(CodebookFormatError):
            deserialize(blob[:-3])
        with pytest.raises(CodebookFormatError, match="header"):
            deserialize(blob[:5])

    def test_pi_off_simplex(self):
        cb = make_codebook(k=2, d=1)
        blob = bytearray(serialize(cb))
        # pi starts after the header, means (k*d) and variances (k*d)
        off = cbm._HEADER.size + 8 * 4
        blob[off:off + 8] = np.array([0.51], "<f8").tobytes()
        with pytest.raises(CodebookFormatError, match="sums to"):
            deserialize(bytes(blob))


class TestValidation:
    def test_rejects_bad_gamma(self):
        with pytest.raises(ValueError, match="gamma"):
            Codebook(np.zeros((1, 1)), np.ones((1, 1)), np.ones(1), 1.0, 1.5)

    def test_rejects_non_positive_variance(self):
        with pytest.raises(ValueError, match="variances"):
            Codebook(np.zeros((1, 1)), np.zeros((1, 1)), np.ones(1), 1.0, 0.0)

    def test_init(self):
        cb = make_codebook(k=500, d=4, seed=1)
        assert abs(cb.means.data.std() - 0.1) < 0.01
        np.testing.assert_array_equal(cb.variances, 1.0)
        np.testing.assert_allclose(cb.pi, 1 / 500)
