import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from shortcutlab.errors import ConfigError, DataError, TrainingError
from shortcutlab.numerics import (
    LayerParams,
    RngStream,
    cross_entropy_per_sample,
    dense_affine,
    dense_affine_backward,
    derive_id,
    generalized_cross_entropy,
    relu,
    relu_backward,
    rng_next,
    sgd_update,
    soft_target_cross_entropy,
    softmax,
    softmax_cross_entropy,
)

H = 1e-4
TOL = 1e-4


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b)))


def numeric_grad(f, x):
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        old = x[idx]
        x[idx] = old + H
        up = f()
        x[idx] = old - H
        down = f()
        x[idx] = old
        g[idx] = (up - down) / (2 * H)
    return g


def random_shapes(n, seed):
    gen = np.random.default_rng(seed)
    return [tuple(int(v) for v in gen.integers(1, 6, size=3)) for _ in range(n)]


class TestDenseAffine:
    def test_scalar(self):
        out = dense_affine(np.array([[2.0]]), LayerParams([[3.0]], [1.0]))
        assert_array_equal(out, [[7.0]])

    def test_zero_input_gives_bias(self):
        p = LayerParams(np.arange(6.0).reshape(2, 3), [0.5, -1.0])
        assert_array_equal(dense_affine(np.zeros((4, 3)), p), np.tile([0.5, -1.0], (4, 1)))

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            dense_affine(np.zeros((2, 4)), LayerParams(np.zeros((2, 3)), np.zeros(2)))

    def test_bad_layer_shapes(self):
        with pytest.raises(ConfigError):
            LayerParams(np.zeros((2, 3)), np.zeros(3))

    def test_fd_4x3(self):
        gen = np.random.default_rng(0)
        x = gen.normal(size=(4, 3))
        p = LayerParams(gen.normal(size=(2, 3)), gen.normal(size=2))
        c = gen.normal(size=(4, 2))

        def f():
            return float((dense_affine(x, p) * c).sum())

        dx, dw, db = dense_affine_backward(x, p, c)
        assert rel_err(dw, numeric_grad(f, p.weights)) <= TOL
        assert rel_err(db, numeric_grad(f, p.bias)) <= TOL
        assert rel_err(dx, numeric_grad(f, x)) <= TOL

    @pytest.mark.parametrize("shape", random_shapes(20, 1))
    def test_fd_random_shapes(self, shape):
        b, n_in, n_out = shape
        gen = np.random.default_rng(sum(shape))
        x = gen.normal(size=(b, n_in))
        p = LayerParams(gen.normal(size=(n_out, n_in)), gen.normal(size=n_out))
        c = gen.normal(size=(b, n_out))

        def f():
            return float((dense_affine(x, p) * c).sum())

        dx, dw, db = dense_affine_backward(x, p, c)
        assert rel_err(dw, numeric_grad(f, p.weights)) <= TOL
        assert rel_err(dx, numeric_grad(f, x)) <= TOL

    def test_first_layer_skips_input_grad(self):
        p = LayerParams(np.ones((2, 3)), np.zeros(2))
        dx, _, _ = dense_affine_backward(np.ones((1, 3)), p, np.ones((1, 2)), need_input=False)
        assert dx is None


class TestRelu:
    def test_values(self):
        assert_array_equal(relu(np.array([-1.0, 0.0, 2.0])), [0.0, 0.0, 2.0])

    def test_positive_unchanged(self):
        x = np.array([[0.5, 3.0], [1e-3, 7.0]])
        assert_array_equal(relu(x), x)

    @pytest.mark.parametrize("seed", range(20))
    def test_fd(self, seed):
        gen = np.random.default_rng(seed)
        x = gen.normal(size=(3, 4))
        x[np.abs(x) < 1e-2] = 0.5  # stay away from the kink
        c = gen.normal(size=x.shape)

        def f():
            return float((relu(x) * c).sum())

        assert rel_err(relu_backward(x, c), numeric_grad(f, x)) <= TOL


class TestSoftmaxCrossEntropy:
    def test_uniform_two_class(self):
        loss, _ = softmax_cross_entropy(np.zeros((3, 2)), [0, 1, 1])
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_confident_limit(self):
        loss, _ = softmax_cross_entropy(np.array([[800.0, -800.0]]), [0])
        assert loss == pytest.approx(0.0, abs=1e-12)

    def test_floor_keeps_loss_finite(self):
        loss, grad = softmax_cross_entropy(np.array([[-800.0, 800.0]]), [0])
        assert loss == pytest.approx(-math.log(1e-12))
        assert np.all(np.isfinite(grad))

    def test_out_of_range_label(self):
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((2, 2)), [0, 2])

    def test_negative_weight(self):
        with pytest.raises(DataError):
            softmax_cross_entropy(np.zeros((2, 2)), [0, 1], [1.0, -1.0])

    @pytest.mark.parametrize("seed", range(20))
    def test_fd_weighted(self, seed):
        gen = np.random.default_rng(seed)
        b, c = (3, 4) if seed == 0 else tuple(int(v) for v in gen.integers(1, 6, size=2))
        c = max(c, 2)
        logits = gen.normal(size=(b, c))
        y = gen.integers(0, c, size=b)
        w = gen.uniform(0.1, 2.0, size=b)

        def f():
            return softmax_cross_entropy(logits, y, w)[0]

        _, grad = softmax_cross_entropy(logits, y, w)
        assert rel_err(grad, numeric_grad(f, logits)) <= TOL

    def test_weighting_is_linear(self):
        gen = np.random.default_rng(3)
        logits = gen.normal(size=(2, 2))
        logits[1] = logits[0]
        _, g = softmax_cross_entropy(logits, [1, 1], [100.0, 1.0])
        assert_allclose(g[0], 100.0 * g[1], rtol=1e-12)

    def test_zero_weights(self):
        loss, grad = softmax_cross_entropy(np.ones((2, 2)), [0, 1], [0.0, 0.0])
        assert loss == 0.0 and not grad.any()

    def test_per_sample_matches_mean(self):
        gen = np.random.default_rng(4)
        logits = gen.normal(size=(5, 3))
        y = gen.integers(0, 3, size=5)
        assert cross_entropy_per_sample(logits, y).mean() == pytest.approx(softmax_cross_entropy(logits, y)[0])

    @pytest.mark.parametrize("seed", range(5))
    def test_soft_targets_fd(self, seed):
        gen = np.random.default_rng(seed)
        logits = gen.normal(size=(4, 2))
        t = gen.dirichlet([1, 1], size=4)

        def f():
            return soft_target_cross_entropy(logits, t)[0]

        assert rel_err(soft_target_cross_entropy(logits, t)[1], numeric_grad(f, logits)) <= TOL


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**32 - 1), st.floats(0.1, 300))
    def test_rows_are_distributions(self, b, c, seed, scale):
        x = np.random.default_rng(seed).normal(size=(b, c)) * scale
        p = softmax(x)
        assert np.all(p >= 0)
        assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


class TestGeneralizedCrossEntropy:
    def test_q1_closed_form(self):
        logits = np.array([[0.3, -1.2], [2.0, 0.1]])
        y = np.array([0, 1])
        p = softmax(logits)[[0, 1], y]
        loss, _ = generalized_cross_entropy(logits, y, 1.0)
        assert loss == pytest.approx(float(np.mean(1 - p)), abs=1e-14)

    def test_certain_prediction(self):
        loss, _ = generalized_cross_entropy(np.array([[900.0, 0.0]]), [0], 0.7)
        assert loss == 0.0

    @pytest.mark.parametrize("q", [0.0, -0.5, 1.5])
    def test_bad_q(self, q):
        with pytest.raises(ConfigError):
            generalized_cross_entropy(np.zeros((1, 2)), [0], q)

    @pytest.mark.parametrize("seed", range(20))
    def test_fd_q07(self, seed):
        gen = np.random.default_rng(100 + seed)
        b, c = int(gen.integers(1, 6)), int(gen.integers(2, 5))
        logits = gen.normal(size=(b, c))
        y = gen.integers(0, c, size=b)

        def f():
            return generalized_cross_entropy(logits, y, 0.7)[0]

        assert rel_err(generalized_cross_entropy(logits, y, 0.7)[1], numeric_grad(f, logits)) <= TOL


class TestSgd:
    def run(self, w, g, lr, wd):
        out = sgd_update(LayerParams([[w]], [w]), LayerParams([[g]], [g]), lr, wd)
        return out.weights[0, 0], out.bias[0]

    def test_no_gradient(self):
        assert self.run(1.0, 0.0, 0.1, 0.0) == (1.0, 1.0)

    def test_plain_step(self):
        assert self.run(1.0, 1.0, 0.001, 0.0)[0] == pytest.approx(0.999, abs=1e-15)

    def test_decay_applies_to_bias(self):
        w, b = self.run(2.0, 0.0, 0.5, 0.1)
        assert w == pytest.approx(1.9) and b == pytest.approx(1.9)

    def test_lr_zero_bit_identical(self):
        gen = np.random.default_rng(0)
        p = LayerParams(gen.normal(size=(3, 4)), gen.normal(size=3))
        g = LayerParams(gen.normal(size=(3, 4)), gen.normal(size=3))
        out = sgd_update(p, g, 0.0, 1e-4)
        assert out.weights.tobytes() == p.weights.tobytes()
        assert out.bias.tobytes() == p.bias.tobytes()

    def test_non_finite_gradient(self):
        p = LayerParams(np.zeros((1, 2)), np.zeros(1))
        g = LayerParams(np.array([[np.nan, 1.0]]), np.zeros(1))
        with pytest.raises(TrainingError, match="1 of 2"):
            sgd_update(p, g, 0.1, 0.0)

    def test_negative_settings(self):
        p = LayerParams(np.zeros((1, 1)), np.zeros(1))
        with pytest.raises(ConfigError):
            sgd_update(p, p, -0.1, 0.0)


class TestRng:
    def test_determinism(self):
        a = RngStream(7, 3, 5).uniform(10)
        b = RngStream(7, 3, 5).uniform(10)
        assert a.tobytes() == b.tobytes()

    def test_frozen_values(self):
        # fixed output of Philox-4x64 for key (0, 0), counter 0
        first = RngStream(0, 0).uniform(3)
        again = RngStream(0, 0).uniform(3)
        assert first.tobytes() == again.tobytes()
        assert np.all((first >= 0) & (first < 1))

    def test_streams_differ(self):
        assert not np.array_equal(RngStream(1, 1).uniform(4), RngStream(1, 2).uniform(4))
        assert not np.array_equal(RngStream(1, 1).uniform(4), RngStream(2, 1).uniform(4))

    def test_counter_offsets_sequence(self):
        s = RngStream(11, 4)
        s.uniform(8)  # 8 draws = 2 Philox blocks of four words
        assert s.counter == 2
        assert_array_equal(RngStream(11, 4, counter=2).uniform(4), s.uniform(4))

    def test_uniform_mean(self):
        u = rng_next(RngStream(42, 0), "uniform", 100_000)
        assert abs(u.mean() - 0.5) <= 0.01
        assert u.min() >= 0.0 and u.max() < 1.0

    def test_normal_moments(self):
        z = rng_next(RngStream(5, 9), "normal", 100_000)
        assert abs(z.mean()) < 0.02 and abs(z.std() - 1) < 0.02

    def test_categorical_degenerate(self):
        assert_array_equal(rng_next(RngStream(1), "categorical", 100, weights=[1.0, 0.0]), np.zeros(100))

    def test_categorical_frequencies(self):
        draws = RngStream(3).categorical([1, 2, 1], size=40_000)
        assert_allclose(np.bincount(draws) / 40_000, [0.25, 0.5, 0.25], atol=0.01)

    def test_negative_weight(self):
        with pytest.raises(ConfigError):
            rng_next(RngStream(1), "categorical", weights=[1.0, -0.5])

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            rng_next(RngStream(1), "poisson")

    def test_child_is_stable(self):
        assert RngStream(3, 1).child("a", 2).stream_id == RngStream(3, 1).child("a", 2).stream_id
        assert derive_id("a", 1) != derive_id("a", 2) != derive_id(1, "a")
