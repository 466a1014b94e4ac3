import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvxq.numkit import RandomSource
from cvxq.quant import (QuantSpec, compand_quantize, compand_reconstruct,
                        compander, compander_inverse, error_variance,
                        lloyd_max, rtn_quantize, uniform_quantize)

LN2 = math.log(2.0)
SQRT2 = math.sqrt(2.0)


class TestUniformQuantize:
    def test_midrise_has_no_zero_level(self):
        assert uniform_quantize(0.0, 2, 1.0) == 0.5

    def test_saturates(self):
        assert uniform_quantize(10.0, 2, 1.0) == 1.5

    def test_negative_floor(self):
        assert uniform_quantize(-0.3, 3, 0.25) == -0.375

    def test_infinite_depth_is_identity(self):
        assert uniform_quantize(1.2345, math.inf, 0.5) == 1.2345

    def test_zero_bits_collapses_to_zero(self):
        vals = np.linspace(-3, 3, 11)
        assert np.all(uniform_quantize(vals, 0, 0.7) == 0.0)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            uniform_quantize(1.0, 2, 0.0)
        with pytest.raises(ValueError):
            uniform_quantize(1.0, -1, 1.0)

    @settings(deadline=None, max_examples=200)
    @given(st.floats(min_value=-1e6, max_value=1e6),
           st.integers(min_value=1, max_value=12),
           st.floats(min_value=1e-3, max_value=1e3))
    def test_output_is_a_reconstruction_point_and_idempotent(self, x, bits, step):
        q = uniform_quantize(x, bits, step)
        k = q / step - 0.5
        assert abs(k - round(k)) < 1e-9
        assert -(2 ** (bits - 1)) <= round(k) <= 2 ** (bits - 1) - 1
        assert uniform_quantize(q, bits, step) == q


class TestCompander:
    def test_half_at_mean(self):
        assert compander(1.0, 2.0, 1.0) == 0.5

    def test_three_quarters_point(self):
        mu, s = 1.0, 2.0
        assert compander(mu + 3 * s * LN2 / SQRT2, s, mu) == pytest.approx(0.75, abs=1e-12)

    def test_monotonic_on_sorted_samples(self):
        x = np.sort(RandomSource(0).laplace(0.0, 1.0, 1_000_000))
        u = compander(x, 1.0, 0.0)
        assert np.all(np.diff(u) >= 0)
        assert u.min() > 0 and u.max() < 1

    def test_inverse_at_median_and_three_quarters(self):
        mu, s = -0.7, 1.3
        assert compander_inverse(0.5, s, mu) == mu
        assert compander_inverse(0.75, s, mu) == pytest.approx(
            mu + 3 * s * LN2 / SQRT2, rel=1e-12)

    def test_roundtrip(self):
        x = RandomSource(5).laplace(0.4, 2.0, 100_000)
        back = compander_inverse(compander(x, 2.0, 0.4), 2.0, 0.4)
        rel = np.abs(back - x) / np.maximum(np.abs(x), 1e-6)
        assert rel.max() < 1e-10

    def test_rejects_bad_domain(self):
        with pytest.raises(ValueError):
            compander(1.0, 0.0, 0.0)
        with pytest.raises(ValueError):
            compander_inverse(0.0, 1.0, 0.0)
        with pytest.raises(ValueError):
            compander_inverse(1.0, 1.0, 0.0)


class TestCompandQuantize:
    def test_zero_bits_maps_to_mean(self):
        group = np.array([-2.0, 0.1, 5.0])
        out = compand_quantize(group, 0, 1.5, 0.3).decode()
        assert np.all(out == 0.3)

    def test_mean_group_stays_within_its_cell(self):
        mu, s = 0.2, 1.1
        for bits in (1, 2, 3, 4):
            out = compand_quantize(np.array([mu]), bits, s, mu).decode()[0]
            # analytic bounds of the u-cell containing sigma(mu) = 0.5
            step = 2.0 ** -bits
            cell = math.floor(0.5 / step)
            lo = compander_inverse(cell * step if cell else 1e-12, s, mu)
            hi = compander_inverse(min((cell + 1) * step, 1 - 1e-12), s, mu)
            assert lo <= out <= hi

    def test_beats_range_uniform_on_laplace(self):
        x = RandomSource(11).laplace(0.0, 1.0, 100_000)
        comp = compand_reconstruct(x, 4, 1.0, 0.0)
        lo, hi = x.min(), x.max()
        step = (hi - lo) / 16
        center = 0.5 * (lo + hi)
        k = np.clip(np.floor((x - center) / step), -8, 7)
        unif = center + step * (k + 0.5)
        assert np.mean((x - comp) ** 2) < np.mean((x - unif) ** 2)

    def test_codes_in_range_and_idempotent(self):
        x = RandomSource(2).laplace(0.0, 1.0, 5000)
        group = compand_quantize(x, 3, 1.0, 0.0)
        assert group.codes.min() >= 0 and group.codes.max() < 8
        again = compand_quantize(group.decode(), 3, 1.0, 0.0)
        assert np.array_equal(again.codes, group.codes)
        assert np.array_equal(again.decode(), group.decode())

    def test_fractional_bits_reconstruction_stays_in_domain(self):
        x = RandomSource(8).laplace(0.0, 1.0, 1000)
        for bits in (0.5, 1.7, 2.1, 3.9):
            out = compand_reconstruct(x, bits, 1.0, 0.0)
            assert np.isfinite(out).all()

    def test_rejects_empty_group(self):
        with pytest.raises(ValueError):
            compand_quantize(np.array([]), 2, 1.0, 0.0)


class TestRtn:
    def test_two_levels_over_unit_range(self):
        group = np.linspace(-1.0, 1.0, 101)
        out = rtn_quantize(group, 1).decode()
        assert set(np.round(out, 12)) == {-0.5, 0.5}

    def test_step_halves_per_bit(self):
        group = RandomSource(1).gaussian(0.0, 1.0, 500)
        s3 = rtn_quantize(group, 3).spec.step
        s4 = rtn_quantize(group, 4).spec.step
        assert s4 == pytest.approx(s3 / 2, rel=1e-12)

    def test_constant_group(self):
        out = rtn_quantize(np.full(10, 2.5), 3)
        assert np.all(out.decode() == 2.5)
        assert out.spec.step > 0

    def test_matched_to_uniform_data(self):
        # range-covering uniform steps are the right choice for uniform data
        x = RandomSource(4).uniform(-1.0, 1.0, 100_000)
        rtn = rtn_quantize(x, 4).decode()
        comp = compand_reconstruct(x, 4, float(x.std()), float(x.mean()))
        assert np.mean((x - rtn) ** 2) <= np.mean((x - comp) ** 2)

    def test_idempotent(self):
        x = RandomSource(6).gaussian(0.0, 1.0, 1000)
        group = rtn_quantize(x, 3)
        again = rtn_quantize(group.decode(), 3)
        assert np.allclose(again.decode(), group.decode())


class TestLloydMax:
    def test_uniform_two_levels(self):
        x = RandomSource(3).uniform(0.0, 1.0, 100_000)
        levels, _ = lloyd_max(x, 1, tol=1e-9)
        assert levels == pytest.approx([0.25, 0.75], abs=2e-3)

    def test_gaussian_two_levels_vs_grid_search(self):
        x = RandomSource(5).gaussian(0.0, 1.0, 100_000)
        levels, _ = lloyd_max(x, 1, tol=1e-9)
        assert levels == pytest.approx([-math.sqrt(2 / math.pi),
                                        math.sqrt(2 / math.pi)], abs=0.01)
        # independent oracle: direct minimization over symmetric level pairs
        grid = np.linspace(0.5, 1.1, 601)
        mses = [np.mean((np.abs(x) - a) ** 2) for a in grid]
        best = grid[int(np.argmin(mses))]
        assert abs(levels[1] - best) < 0.01

    def test_distortion_ordering(self):
        x = RandomSource(11).laplace(0.0, 1.0, 50_000)
        for bits in (4, 6):
            levels, thresholds = lloyd_max(x, bits, tol=1e-8)
            lm = levels[np.searchsorted(thresholds, x)]
            comp = compand_reconstruct(x, bits, 1.0, 0.0)
            lo, hi = x.min(), x.max()
            step = (hi - lo) / 2 ** bits
            center = 0.5 * (lo + hi)
            k = np.clip(np.floor((x - center) / step),
                        -(2 ** (bits - 1)), 2 ** (bits - 1) - 1)
            unif = center + step * (k + 0.5)
            mse_lm = np.mean((x - lm) ** 2)
            mse_comp = np.mean((x - comp) ** 2)
            mse_unif = np.mean((x - unif) ** 2)
            assert mse_lm <= mse_comp * (1 + 1e-9)
            assert mse_comp <= mse_unif

    def test_distortion_never_increases_across_iterations(self):
        x = RandomSource(9).gaussian(0.0, 1.0, 20_000)
        prev = math.inf
        for iters in (1, 2, 5, 10, 30):
            levels, thresholds = lloyd_max(x, 3, tol=0.0, max_iter=iters)
            mse = np.mean((x - levels[np.searchsorted(thresholds, x)]) ** 2)
            assert mse <= prev * (1 + 1e-12)
            prev = mse

    def test_rejects_too_few_distinct_samples(self):
        with pytest.raises(ValueError):
            lloyd_max(np.array([1.0, 1.0, 2.0]), 1)


class TestErrorVariance:
    def test_single_cell_uniform(self):
        step = 0.8
        mse = error_variance("uniform", lambda x, b: uniform_quantize(x, b, step),
                             0, 200_000, seed=3, scale=step)
        assert mse == pytest.approx(step ** 2 / 12, rel=0.02)

    def test_error_quarters_per_bit(self):
        comp = lambda x, b: compand_reconstruct(x, b, 1.0, 0.0)
        mses = {b: error_variance("laplace", comp, b, 100_000, seed=7)
                for b in range(6, 12)}
        for b in range(6, 11):
            assert 3.6 <= mses[b] / mses[b + 1] <= 4.4

    def test_rate_distortion_slope(self):
        comp = lambda x, b: compand_reconstruct(x, b, 1.0, 0.0)
        bs = np.arange(6, 11)
        logs = [math.log2(error_variance("laplace", comp, int(b), 100_000, seed=7))
                for b in bs]
        slope = np.polyfit(bs, logs, 1)[0]
        assert abs(slope + 2.0) < 0.1

    def test_companded_beats_rtn_on_laplace(self):
        comp = lambda x, b: compand_reconstruct(x, b, 1.0, 0.0)
        rtn = lambda x, b: rtn_quantize(x, b).decode()
        h_comp = error_variance("laplace", comp, 10, 100_000, seed=1) * 4.0 ** 10
        h_rtn = error_variance("laplace", rtn, 10, 100_000, seed=1) * 4.0 ** 10
        assert h_comp < h_rtn

    def test_rejects_thin_sampling(self):
        with pytest.raises(ValueError):
            error_variance("gaussian", lambda x, b: x, 4, 100, seed=0)


class TestQuantSpec:
    def test_validates(self):
        with pytest.raises(ValueError):
            QuantSpec(bits=2, step=0.0)
        with pytest.raises(ValueError):
            QuantSpec(bits=-1, step=1.0)
        with pytest.raises(ValueError):
            QuantSpec(bits=2, step=0.25, scale=0.0, mode="companded")
        with pytest.raises(ValueError):
            QuantSpec(bits=2, step=1.0, mode="nonsense")

    def test_levels_enumerate_reconstructions(self):
        spec = QuantSpec(bits=3, step=0.125, scale=1.0, mean=0.0, mode="companded")
        levels = spec.levels
        assert levels.shape == (8,)
        assert np.all(np.diff(levels) > 0)
