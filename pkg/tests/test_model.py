import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from shortcutlab.augment import AugmentationPool
from shortcutlab.errors import ConfigError, FormatError
from shortcutlab.methods import ce_step
from shortcutlab.model import (
    CKPT_VERSION,
    ModelParams,
    extractor_backward,
    extractor_forward,
    flatten_images,
    forward_features,
    head_logits,
    init_params,
    lle_predict,
    lle_training_step,
    load_checkpoint,
    parse_mode,
    retrain_last_layer_only,
    save_checkpoint,
)
from shortcutlab.numerics import (
    LayerParams,
    RngStream,
    dense_affine,
    dense_affine_backward,
    softmax_cross_entropy,
)

LLE_HEADS = ("identity", "background_swap", "coobject_swap")


def small_model(input_dim=12, heads=("identity",), hidden=(6, 5), seed=0):
    return init_params(input_dim, heads, RngStream(seed), hidden)


def model_loss(params, x, y):
    feats, _ = extractor_forward(params, x)
    return softmax_cross_entropy(head_logits(params, feats), y)[0]


class TestExtractor:
    def test_zero_weights_zero_features(self):
        p = small_model()
        for layer in p.extractor:
            layer.weights[:] = 0
            layer.bias[:] = 0
        assert not forward_features(p, np.ones((3, 3, 2, 2))).any()

    def test_batch_consistency(self):
        p = small_model()
        x = RngStream(1).uniform((4, 12))
        f_all, _ = extractor_forward(p, x)
        f_one, _ = extractor_forward(p, x[2:3])
        # BLAS may round differently for a single row
        assert_allclose(f_all[2:3], f_one, rtol=1e-12, atol=1e-15)

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            extractor_forward(small_model(), np.zeros((2, 11)))

    def test_centred_input(self):
        assert_array_equal(flatten_images(np.full((1, 3, 2, 2), 0.5)), np.zeros((1, 12)))

    @pytest.mark.parametrize("seed", range(5))
    def test_fd_full_network(self, seed):
        p = small_model(seed=seed)
        gen = np.random.default_rng(seed)
        x = gen.normal(size=(4, 12))
        y = gen.integers(0, 2, size=4)
        feats, cache = extractor_forward(p, x)
        _, dlogits = softmax_cross_entropy(head_logits(p, feats), y)
        head = p.heads["identity"]
        dfeat, _, _ = dense_affine_backward(feats, head, dlogits)
        grads = extractor_backward(p, cache, dfeat)
        h = 1e-5
        for layer, g in zip(p.extractor, grads):
            for idx in [(0, 0), (1, 3), (layer.weights.shape[0] - 1, layer.weights.shape[1] - 1)]:
                old = layer.weights[idx]
                layer.weights[idx] = old + h
                up = model_loss(p, x, y)
                layer.weights[idx] = old - h
                down = model_loss(p, x, y)
                layer.weights[idx] = old
                num = (up - down) / (2 * h)
                assert abs(num - g.weights[idx]) <= 1e-4 * max(1e-6, abs(num) + abs(g.weights[idx])) + 1e-10


class TestParams:
    def test_heads_identical_across_models(self):
        a = init_params(12, ["identity"], RngStream(3), (6, 5))
        b = init_params(12, LLE_HEADS, RngStream(3), (6, 5))
        assert_array_equal(a.heads["identity"].weights, b.heads["identity"].weights)
        assert a.extractor_hash() == b.extractor_hash()

    def test_duplicate_heads(self):
        with pytest.raises(ConfigError):
            small_model(heads=("identity", "identity"))

    def test_shift_head_shape_checked(self):
        p = small_model(heads=LLE_HEADS)
        with pytest.raises(ConfigError):
            ModelParams(p.extractor, p.heads, LayerParams(np.zeros((2, 5)), np.zeros(2)))

    def test_hash_tracks_values(self):
        p = small_model()
        q = p.copy()
        assert p.param_hash() == q.param_hash()
        q.heads["identity"].bias[0] += 1e-12
        assert p.param_hash() != q.param_hash()


class TestLleStep:
    def setup_method(self):
        self.rng = RngStream(21)

    def model(self, split):
        return init_params(split.images[0].size, LLE_HEADS, RngStream(0), (8, 6))

    def test_stop_gradient(self, tiny):
        pool = AugmentationPool(tiny.train)
        p = self.model(tiny.train)
        start = p.extractor_hash()
        for k in range(5):
            p, info = lle_training_step(p, pool, np.arange(32), self.rng.child(k), lr=0.1,
                                        weight_decay=0.0, lambda_shift=3.0, target_weight=0.0)
            assert info["shift_loss"] > 0
        assert p.extractor_hash() == start

    def test_without_stop_gradient_extractor_moves(self, tiny):
        pool = AugmentationPool(tiny.train)
        p = self.model(tiny.train)
        q, _ = lle_training_step(p, pool, np.arange(32), self.rng, lr=0.1, weight_decay=0.0,
                                 target_weight=0.0, stop_gradient=False)
        assert q.extractor_hash() != p.extractor_hash()

    def test_route_fractions(self, tiny):
        pool = AugmentationPool(tiny.train)
        p = self.model(tiny.train)
        idx = np.arange(80)
        counts = np.zeros(3)
        for k in range(125):  # 10^4 routed examples
            _, info = lle_training_step(p, pool, idx, self.rng.child(k), lr=0.0, weight_decay=0.0)
            counts += [info["route_counts"][n] for n in LLE_HEADS]
        assert counts.sum() == 10_000
        assert_allclose(counts / 10_000, 1 / 3, atol=0.02)

    def test_identity_only_matches_ce_step(self, tiny):
        sp = tiny.train
        p = init_params(sp.images[0].size, ["identity"], RngStream(0), (8, 6))
        idx = np.arange(16)
        a, _ = lle_training_step(p, AugmentationPool(sp), idx, self.rng, lr=0.05,
                                 weight_decay=1e-4, lambda_shift=0.0)
        b, _ = ce_step(p, flatten_images(sp.images[idx]), sp.y[idx], None, 0.05, 1e-4)
        assert a.param_hash() == b.param_hash()

    def test_empty_routing_allowed(self, tiny):
        pool = AugmentationPool(tiny.train)
        p = self.model(tiny.train)
        q, info = lle_training_step(p, pool, np.arange(1), self.rng, lr=0.1, weight_decay=0.0)
        assert sum(info["route_counts"].values()) == 1
        untouched = [n for n in LLE_HEADS if info["route_counts"][n] == 0]
        assert len(untouched) == 2
        for n in untouched:
            assert_array_equal(q.heads[n].weights, p.heads[n].weights)


class TestLlePredict:
    def setup_method(self):
        self.p = init_params(12, LLE_HEADS, RngStream(4), (6, 5))
        self.images = RngStream(5).uniform((7, 3, 2, 2))

    def test_uniform_posterior_equals_mean(self):
        p = self.p.copy()
        p.shift_head.weights[:] = 0
        p.shift_head.bias[:] = 0
        _, shift, dyn = lle_predict(p, self.images, "dynamic")
        _, _, mean = lle_predict(p, self.images, "mean")
        assert_allclose(shift, 1 / 3, atol=1e-15)
        assert np.max(np.abs(dyn - mean)) <= 1e-12

    def test_one_hot_posterior_is_single_head(self):
        p = self.p.copy()
        p.shift_head.weights[:] = 0
        p.shift_head.bias[:] = [-1e4, 1e4, -1e4]
        _, _, dyn = lle_predict(p, self.images, "dynamic")
        _, _, single = lle_predict(p, self.images, "single:background_swap")
        assert_array_equal(dyn, single)

    def test_identical_heads(self):
        p = self.p.copy()
        for n in LLE_HEADS:
            p.heads[n] = p.heads["identity"].copy()
        feats = forward_features(p, self.images)
        ref = dense_affine(feats, p.heads["identity"])
        for mode in ("dynamic", "mean", "single:coobject_swap"):
            assert_allclose(lle_predict(p, self.images, mode)[2], ref, atol=1e-12)

    def test_probs_are_distributions(self):
        probs, shift, _ = lle_predict(self.p, self.images)
        assert_allclose(probs.sum(axis=1), 1.0)
        assert_allclose(shift.sum(axis=1), 1.0)

    def test_modes(self):
        assert parse_mode("single:identity") == ("single", "identity")
        with pytest.raises(ConfigError):
            parse_mode("median")
        with pytest.raises(ConfigError):
            lle_predict(self.p, self.images, "single:nope")


class TestHeadTrainer:
    def test_freeze_contract(self):
        p = small_model()
        gen = np.random.default_rng(0)
        images = gen.uniform(size=(20, 3, 2, 2))
        y = gen.integers(0, 2, size=20)
        trainer = retrain_last_layer_only(p)
        start = p.extractor_hash()
        for _ in range(100):
            trainer.step(images, y, lr=0.1, weight_decay=1e-4)
        assert trainer.params.extractor_hash() == start
        trainer.unfreeze()
        trainer.step(images, y, lr=0.1, weight_decay=1e-4)
        assert trainer.params.extractor_hash() != start

    def test_separable_features_loss_drops(self):
        p = init_params(2, ["identity"], RngStream(1), hidden=())
        gen = np.random.default_rng(1)
        feats = gen.normal(size=(200, 2))
        y = (feats[:, 0] + feats[:, 1] > 0).astype(int)
        trainer = retrain_last_layer_only(p)
        first = trainer.step(lr=0.5, weight_decay=0.0, labels=y, feats=feats)
        for _ in range(200):
            last = trainer.step(lr=0.5, weight_decay=0.0, labels=y, feats=feats)
        assert last < 0.5 * first


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        p = small_model(heads=LLE_HEADS)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, p, {"method": "lle"})
        q, meta = load_checkpoint(path)
        assert q.param_hash() == p.param_hash()
        assert q.head_names == LLE_HEADS and meta == {"method": "lle"}

    def test_truncated(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model())
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(FormatError, match="truncated"):
            load_checkpoint(path)

    def test_version(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, small_model())
        path.write_bytes(path.read_bytes().replace(CKPT_VERSION.encode(), b"shortcutlab-ckpt-v0"))
        with pytest.raises(FormatError, match="version"):
            load_checkpoint(path)
