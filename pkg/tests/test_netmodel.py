import math

import numpy as np
import pytest

from cvxq.netmodel import (LayerSpec, ModelBundle, backward,
                           build_attention_model, build_calibration,
                           build_mlp, forward, substitute,
                           sum_squared_gradients)
from cvxq.numkit import RandomSource


def single_layer(weight, bias):
    w = np.asarray(weight, dtype=np.float64)
    return ModelBundle(
        layers=[LayerSpec("linear", "fc0", w.shape[0], w.shape[1])],
        weights={"fc0": w},
        biases={"fc0": np.asarray(bias, dtype=np.float64)})


class TestForward:
    def test_identity_layer(self):
        model = single_layer(np.eye(3), np.zeros(3))
        x = RandomSource(0).gaussian(0, 1, (5, 3))
        z, _ = forward(model, x)
        assert np.array_equal(z, x)

    def test_affine_arithmetic(self):
        model = single_layer([[2.0]], [1.0])
        z, _ = forward(model, [[3.0]])
        assert z[0, 0] == 7.0

    def test_deterministic(self):
        model = build_mlp(widths=(8, 8, 8, 8), seed=5)
        x = RandomSource(1).gaussian(0, 1, (6, 8))
        z1, _ = forward(model, x)
        z2, _ = forward(model, x)
        assert np.array_equal(z1, z2)

    def test_rejects_dim_mismatch(self):
        model = single_layer(np.eye(3), np.zeros(3))
        with pytest.raises(ValueError):
            forward(model, np.zeros((2, 4)))

    def test_layer_inputs_reproduce_outputs(self):
        model = build_mlp(widths=(6, 7, 5, 4), seed=2)
        x = RandomSource(3).gaussian(0, 1, (9, 6))
        z, inputs = forward(model, x)
        names = model.weight_names()
        # replaying each layer on its captured input must reproduce the
        # input captured by the next layer (after the activation), and the
        # last layer must reproduce the output
        for a, b in zip(names[:-1], names[1:]):
            y = inputs[a] @ model.weights[a] + model.biases[a]
            assert np.array_equal(np.tanh(y), inputs[b])
        y_last = inputs[names[-1]] @ model.weights[names[-1]] + model.biases[names[-1]]
        assert np.array_equal(y_last, z)

    def test_attention_inputs_reproduce_mix(self):
        model = build_attention_model(dim=5, seed=4)
        x = RandomSource(5).gaussian(0, 1, (6, 5))
        z, inputs = forward(model, x)
        q = inputs["attn0.q"] @ model.weights["attn0.q"] + model.biases["attn0.q"]
        k = inputs["attn0.k"] @ model.weights["attn0.k"] + model.biases["attn0.k"]
        v = inputs["attn0.v"] @ model.weights["attn0.v"] + model.biases["attn0.v"]
        scores = q @ k.T / math.sqrt(5)
        scores -= scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=1, keepdims=True)
        assert np.allclose(attn @ v, inputs["attn0.o"], atol=1e-12)


class TestBackward:
    def test_single_linear_gradient(self):
        model = single_layer([[1.5]], [0.0])
        grads = backward(model, [[3.0]], 0, 0)
        assert grads["fc0"][0, 0] == 3.0

    def test_chain_rule_through_tanh(self):
        theta = 0.8
        model = ModelBundle(
            layers=[LayerSpec("linear", "fc0", 1, 1), LayerSpec("activation")],
            weights={"fc0": np.array([[theta]])},
            biases={"fc0": np.zeros(1)})
        x = 1.7
        grads = backward(model, [[x]], 0, 0)
        expected = (1.0 - math.tanh(x * theta) ** 2) * x
        assert grads["fc0"][0, 0] == pytest.approx(expected, rel=1e-12)

    def _fd_worst(self, model, x, row, coeff, h=1e-4):
        grads = backward(model, x, row, coeff)
        worst = 0.0
        for nm, g in grads.items():
            w = model.weights[nm]
            for i in range(w.shape[0]):
                for j in range(w.shape[1]):
                    orig = w[i, j]
                    w[i, j] = orig + h
                    zp = forward(model, x)[0]
                    w[i, j] = orig - h
                    zm = forward(model, x)[0]
                    w[i, j] = orig
                    if np.ndim(coeff) == 0:
                        num = (zp[row, coeff] - zm[row, coeff]) / (2 * h)
                    else:
                        num = (zp[row] @ coeff - zm[row] @ coeff) / (2 * h)
                    worst = max(worst, abs(g[i, j] - num) / (abs(num) + 1e-8))
        return worst

    def test_finite_difference_mlp(self):
        model = build_mlp(widths=(8, 9, 7, 6), seed=7)
        x = RandomSource(7).gaussian(0, 1, (4, 8))
        u = RandomSource(8).gaussian(0, 1, 6)
        assert self._fd_worst(model, x, 1, u) < 1e-4

    def test_finite_difference_attention(self):
        model = build_attention_model(dim=6, seed=7)
        x = RandomSource(9).gaussian(0, 1, (5, 6))
        u = RandomSource(10).gaussian(0, 1, 6)
        assert self._fd_worst(model, x, 2, u) < 1e-4

    def test_rejects_bad_selector(self):
        model = single_layer(np.eye(2), np.zeros(2))
        with pytest.raises(ValueError):
            backward(model, np.zeros((2, 2)), 5, 0)
        with pytest.raises(ValueError):
            backward(model, np.zeros((2, 2)), 0, 9)

    def test_sum_squared_matches_per_row_loop(self):
        model = build_mlp(widths=(8, 10, 8, 5), seed=3)
        x = RandomSource(4).gaussian(0, 1, (12, 8))
        rows = np.array([1, 4, 9])
        u = RandomSource(6).gaussian(0, 1, 5)
        fast = sum_squared_gradients(model, x, rows, u)
        slow = {}
        for r in rows:
            for nm, g in backward(model, x, int(r), u).items():
                slow[nm] = slow.get(nm, 0.0) + g ** 2
        for nm in fast:
            assert np.allclose(fast[nm], slow[nm], rtol=1e-12, atol=1e-15)

    def test_sum_squared_attention_fallback(self):
        model = build_attention_model(dim=4, seed=1)
        x = RandomSource(2).gaussian(0, 1, (6, 4))
        rows = np.array([0, 3])
        u = RandomSource(3).gaussian(0, 1, 4)
        fast = sum_squared_gradients(model, x, rows, u)
        slow = {}
        for r in rows:
            for nm, g in backward(model, x, int(r), u).items():
                slow[nm] = slow.get(nm, 0.0) + g ** 2
        for nm in fast:
            assert np.allclose(fast[nm], slow[nm], rtol=1e-12, atol=1e-15)


class TestSubstitute:
    def test_noop_substitution_bit_identical(self):
        model = build_mlp(widths=(6, 6, 6), seed=8)
        x = RandomSource(1).gaussian(0, 1, (4, 6))
        twin = substitute(model, dict(model.weights), dict(model.biases))
        assert np.array_equal(forward(model, x)[0], forward(twin, x)[0])

    def test_bias_shift_moves_output(self):
        model = build_mlp(widths=(5, 5, 5), seed=9)
        x = RandomSource(2).gaussian(0, 1, (3, 5))
        last = model.weight_names()[-1]
        delta = 0.37
        shifted = substitute(model, biases={last: model.biases[last] + delta})
        z0 = forward(model, x)[0]
        z1 = forward(shifted, x)[0]
        assert np.allclose(z1 - z0, delta, atol=1e-12)

    def test_quantized_substitution_matches_independent_recompute(self):
        # oracle: a locally written mid-rise quantizer and a locally written
        # forward pass, no package code on that path
        model = build_mlp(widths=(6, 7, 5), seed=10)
        x = RandomSource(3).gaussian(0, 1, (8, 6))
        step = 0.05
        qweights = {}
        for nm, w in model.weights.items():
            k = np.clip(np.floor(w / step), -8, 7)  # 4-bit mid-rise
            qweights[nm] = step * (k + 0.5)
        quantized = substitute(model, qweights)
        z = forward(quantized, x)[0]

        names = model.weight_names()
        h = x
        for nm in names[:-1]:
            h = np.tanh(h @ qweights[nm] + model.biases[nm])
        expected = h @ qweights[names[-1]] + model.biases[names[-1]]
        z_orig = forward(model, x)[0]
        mse = np.mean((z - z_orig) ** 2)
        mse_expected = np.mean((expected - z_orig) ** 2)
        assert mse == pytest.approx(mse_expected, rel=1e-12)

    def test_no_aliasing_after_substitute(self):
        model = build_mlp(widths=(4, 4, 4), seed=11)
        replacement = {nm: w * 0.5 for nm, w in model.weights.items()}
        twin = substitute(model, replacement)
        replacement["fc0"][0, 0] = 999.0
        model.weights["fc0"][0, 0] = -999.0
        assert twin.weights["fc0"][0, 0] not in (999.0, -999.0)

    def test_rejects_shape_mismatch(self):
        model = build_mlp(widths=(4, 4), seed=0)
        with pytest.raises(ValueError):
            substitute(model, {"fc0": np.zeros((2, 2))})
        with pytest.raises(ValueError):
            substitute(model, {"nope": np.zeros((4, 4))})


class TestBuilders:
    def test_mlp_weights_are_f32_exact(self):
        model = build_mlp(widths=(8, 8, 8), seed=0)
        for w in model.weights.values():
            assert np.array_equal(w, w.astype(np.float32).astype(np.float64))

    def test_calibration_shares_mean(self):
        batches = build_calibration(16, batches=6, rows=40, seed=2)
        assert len(batches) == 6
        grand = np.vstack(batches).mean(axis=0)
        assert np.abs(grand).max() > 0.05  # the common offset survives averaging

    def test_validate_catches_missing_weight(self):
        model = build_mlp(widths=(4, 4), seed=0)
        del model.weights["fc0"]
        with pytest.raises(ValueError):
            model.validate()
