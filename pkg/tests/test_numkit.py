import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvxq.numkit import RandomSource, pca_basis, sub_sample, variance_cluster


def rot(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


class TestPcaBasis:
    def test_axis_aligned_covariance(self):
        # four points with sample covariance proportional to diag(4, 1)
        pts = np.array([[2.0, 0.0], [-2.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        basis = pca_basis(pts)
        assert np.allclose(basis[:, 0], [1.0, 0.0], atol=1e-12)

    def test_single_sample_gives_identity(self):
        assert np.array_equal(pca_basis(np.array([[3.0, -1.0, 2.0]])), np.eye(3))

    def test_rotated_covariance_closed_form(self):
        # exact sample covariance: points carrying diag(9, 1) energy,
        # rotated by 30 degrees
        angle = math.pi / 6
        pts = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        rotated = pts @ rot(angle).T
        basis = pca_basis(rotated)
        # independent closed-form eigenvector of the 2x2 covariance
        cov = rotated.T @ rotated / len(rotated)
        theta = 0.5 * math.atan2(2 * cov[0, 1], cov[0, 0] - cov[1, 1])
        expected = np.array([math.cos(theta), math.sin(theta)])
        got = basis[:, 0] if basis[0, 0] >= 0 else -basis[:, 0]
        assert abs(math.atan2(*got[::-1]) - math.atan2(*expected[::-1])) < 1e-6

    def test_orthonormal_and_energy_ordered(self):
        src = RandomSource(4)
        samples = src.gaussian(0.0, 1.0, (200, 7)) * np.arange(1, 8)[::-1]
        basis = pca_basis(samples)
        assert np.abs(basis.T @ basis - np.eye(7)).max() < 1e-8
        projected = (samples - samples.mean(axis=0)) @ basis
        energy = projected.var(axis=0)
        assert np.all(np.diff(energy) <= 1e-12)

    def test_sign_convention(self):
        src = RandomSource(9)
        samples = src.gaussian(0.0, 1.0, (50, 4))
        basis = pca_basis(samples)
        anchors = np.abs(basis).argmax(axis=0)
        assert np.all(basis[anchors, np.arange(4)] > 0)

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="non-finite"):
            pca_basis(np.array([[1.0, np.nan], [0.0, 1.0]]))

    def test_deterministic(self):
        samples = RandomSource(2).gaussian(0.0, 1.0, (30, 5))
        assert np.array_equal(pca_basis(samples), pca_basis(samples.copy()))


class TestSubSample:
    def test_full_selection(self):
        assert np.array_equal(sub_sample(5, 5, RandomSource(0)), np.arange(5))

    def test_large_population(self):
        idx = sub_sample(2048, 17, RandomSource(3))
        assert idx.shape == (17,)
        assert len(set(idx.tolist())) == 17
        assert np.all(np.diff(idx) > 0)
        assert idx.min() >= 0 and idx.max() < 2048

    def test_same_seed_same_draw(self):
        assert np.array_equal(sub_sample(100, 10, RandomSource(7)),
                              sub_sample(100, 10, RandomSource(7)))

    def test_counter_advances(self):
        src = RandomSource(1)
        sub_sample(10, 3, src)
        sub_sample(10, 3, src)
        assert src.counter == 2

    def test_rejects_oversized(self):
        with pytest.raises(ValueError):
            sub_sample(4, 5, RandomSource(0))


class TestVarianceCluster:
    def test_sort_split(self):
        assignment = variance_cluster([1.0, 9.0, 2.0, 8.0], 2)
        assert assignment.tolist() == [0, 1, 0, 1]

    def test_ties_break_by_index(self):
        assignment = variance_cluster([5.0, 5.0, 5.0, 5.0], 2)
        assert assignment.tolist() == [0, 0, 1, 1]

    def test_quantile_property_brute_force(self):
        scores = RandomSource(12).uniform(0.0, 10.0, 1000)
        assignment = variance_cluster(scores, 4)
        sizes = np.bincount(assignment)
        assert sizes.tolist() == [250, 250, 250, 250]
        for g in range(3):
            assert scores[assignment == g].max() <= scores[assignment == g + 1].min()

    def test_rejects_too_many_groups(self):
        with pytest.raises(ValueError):
            variance_cluster([1.0, 2.0], 3)

    def test_rejects_negative_scores(self):
        with pytest.raises(ValueError):
            variance_cluster([1.0, -2.0], 1)

    @settings(deadline=None, max_examples=60)
    @given(st.lists(st.floats(min_value=0, max_value=1e6), min_size=1, max_size=60),
           st.data())
    def test_partition_property(self, scores, data):
        groups = data.draw(st.integers(min_value=1, max_value=len(scores)))
        assignment = variance_cluster(scores, groups)
        assert assignment.shape == (len(scores),)
        sizes = np.bincount(assignment, minlength=groups)
        assert sizes.sum() == len(scores)
        assert sizes.max() - sizes.min() <= 1
