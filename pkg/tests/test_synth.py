import json
import os

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import small_config
from shortcutlab.errors import ConfigError, FormatError
from shortcutlab.synth import (
    FORMAT_VERSION,
    CueSpec,
    DatasetConfig,
    GroupKey,
    all_group_keys,
    generate_dataset,
    generate_split,
    plan_group_counts,
    read_dataset,
    read_manifest,
    render_background,
    render_sample,
    write_dataset,
)


def key(y, *bits):
    return GroupKey(y, tuple(bits))


class TestPlan:
    def test_default_train_counts(self):
        plan = plan_group_counts(DatasetConfig(), "train")
        for y in (0, 1):
            assert [plan[key(y, 1, 1)], plan[key(y, 1, 0)], plan[key(y, 0, 1)], plan[key(y, 0, 0)]] == [
                3610, 190, 190, 10]

    def test_default_marginals_and_independence(self):
        plan = plan_group_counts(DatasetConfig(), "train")
        for y in (0, 1):
            n = sum(v for k, v in plan.items() if k.y == y)
            pb = sum(v for k, v in plan.items() if k.y == y and k.cue_bits[0]) / n
            pc = sum(v for k, v in plan.items() if k.y == y and k.cue_bits[1]) / n
            assert pb == 0.95 and pc == 0.95
            for b in (0, 1):
                for c in (0, 1):
                    joint = plan[key(y, b, c)] / n
                    expect = (pb if b else 1 - pb) * (pc if c else 1 - pc)
                    assert joint == pytest.approx(expect, abs=1e-12)

    def test_eval_splits_balanced(self):
        plan = plan_group_counts(DatasetConfig(), "test")
        assert set(plan.values()) == {62, 63}
        assert sum(plan.values()) == 500

    def test_odd_eval_total(self):
        plan = plan_group_counts(DatasetConfig(test_total=7), "test")
        assert sum(v for k, v in plan.items() if k.y == 0) == 4
        assert sum(v for k, v in plan.items() if k.y == 1) == 3

    def test_three_cues_cover_16_groups(self):
        plan = plan_group_counts(DatasetConfig.watermark(), "train")
        assert len(plan) == 16
        assert sum(plan.values()) == 8000

    def test_rho_one_leaves_minorities_empty(self, caplog):
        cfg = DatasetConfig(cues=(CueSpec("background", 1.0), CueSpec("coobject", 1.0)))
        plan = plan_group_counts(cfg, "train")
        assert plan[key(0, 1, 1)] == 4000 and plan[key(0, 0, 0)] == 0
        assert "minority" in caplog.text

    @pytest.mark.parametrize("rho", [0.5, 0.6, 0.77, 0.9, 0.99])
    def test_counts_sum_per_class(self, rho):
        cfg = DatasetConfig(train_per_class=333, cues=(CueSpec("background", rho), CueSpec("coobject", rho)))
        plan = plan_group_counts(cfg, "train")
        for y in (0, 1):
            assert sum(v for k, v in plan.items() if k.y == y) == 333


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"channels": 1}, {"classes": 3}, {"train_per_class": 0}, {"image_height": 8},
        {"pixel_noise_sigma": -0.1}, {"cues": (CueSpec("background"),)},
        {"cues": (CueSpec("background", 0.4), CueSpec("coobject"))},
        {"cues": (CueSpec("background"), CueSpec("coobject"), CueSpec("sky"))},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            DatasetConfig(**kw)

    def test_rho_error_names_field(self):
        with pytest.raises(ConfigError, match=r"cues\[1\].rho=1.2"):
            DatasetConfig(cues=(CueSpec("background"), CueSpec("coobject", 1.2)))

    def test_dict_round_trip(self):
        cfg = DatasetConfig.watermark(train_per_class=10)
        again = DatasetConfig.from_dict(cfg.to_dict())
        assert again == cfg and again.config_hash() == cfg.config_hash()

    def test_unknown_preset(self):
        with pytest.raises(ConfigError):
            DatasetConfig.from_dict({"preset": "imagenet"})

    def test_group_key_string(self):
        k = key(1, 0, 1)
        assert str(k) == "y1_01" and GroupKey.parse(str(k)) == k

    def test_all_keys_common_first(self):
        assert all_group_keys(2)[:4] == [key(0, 1, 1), key(0, 1, 0), key(0, 0, 1), key(0, 0, 0)]


class TestRendering:
    def test_repeatable(self):
        cfg = small_config()
        a = render_sample(1, {"background": 0, "coobject": 1}, 1234, cfg)
        b = render_sample(1, {"background": 0, "coobject": 1}, 1234, cfg)
        assert a == b and a.image.tobytes() == b.image.tobytes()

    def test_range_and_dtype(self, tiny):
        assert tiny.train.images.dtype == np.float32
        assert tiny.train.images.min() >= 0.0 and tiny.train.images.max() <= 1.0

    def test_masks_disjoint_and_class_shaped(self, tiny):
        sp = tiny.train
        assert not np.any(sp.target_mask & sp.coobject_mask)
        for c in (0, 1):
            masks = sp.target_mask[sp.y == c]
            assert (masks == masks[0]).all()
        assert not np.array_equal(sp.target_mask[sp.y == 0][0], sp.target_mask[sp.y == 1][0])

    def test_background_matches_image_off_masks(self, tiny):
        sp = tiny.train
        for i in range(5):
            bg = render_background(int(sp.cue("background")[i]), int(sp.sample_seed[i]), sp.config)
            off = ~(sp.target_mask[i] | sp.coobject_mask[i])
            assert_array_equal(bg[:, off], sp.images[i][:, off])

    def test_noise_free(self):
        cfg = small_config(pixel_noise_sigma=0.0)
        s = render_sample(0, {"background": 0, "coobject": 0}, 7, cfg)
        bg = render_background(0, 7, cfg, noisy=False)
        off = ~(s.target_mask | s.coobject_mask)
        assert_array_equal(bg[:, off], s.image[:, off])

    def test_cue_changes_only_its_region(self):
        cfg = small_config()
        a = render_sample(0, {"background": 0, "coobject": 0}, 99, cfg)
        b = render_sample(0, {"background": 0, "coobject": 1}, 99, cfg)
        region = a.coobject_mask | b.coobject_mask
        assert_array_equal(a.image[:, ~region], b.image[:, ~region])
        assert not np.array_equal(a.image, b.image)

    def test_watermark_drawn_for_label_zero(self, tiny_wm):
        sp = tiny_wm.train
        i0 = int(np.flatnonzero(sp.cue("watermark") == 0)[0])
        s = sp[i0]
        again = render_sample(s.y, {**s.cue_labels, "watermark": 1}, s.sample_seed, sp.config)
        assert not np.array_equal(s.image, again.image)


class TestDataset:
    def test_split_sizes(self, tiny):
        assert len(tiny.train) == 80 and len(tiny.val) == 32 and len(tiny.test) == 32

    def test_counts_follow_plan(self, tiny):
        for s in ("train", "val", "test"):
            plan = {k: v for k, v in plan_group_counts(tiny.config, s).items() if v}
            assert tiny.split(s).group_counts() == plan

    def test_generation_is_deterministic(self, tiny):
        again = generate_split(tiny.config, "val")
        assert again.images.tobytes() == tiny.val.images.tobytes()
        assert_array_equal(again.sample_seed, tiny.val.sample_seed)

    def test_master_seed_changes_content(self, tiny):
        other = generate_split(small_config(master_seed=1), "val")
        assert other.images.tobytes() != tiny.val.images.tobytes()

    def test_train_frequencies(self, tiny):
        f = tiny.train_group_frequencies()
        assert sum(f.values()) == pytest.approx(1.0)
        assert f[key(0, 1, 1)] == pytest.approx(26 / 80)

    def test_disabled_cue_not_in_key(self):
        cfg = small_config(cues=(CueSpec("background", 0.8), CueSpec("coobject", 0.8),
                                 CueSpec("watermark", 0.9, enabled=False)))
        sp = generate_split(cfg, "train")
        assert all(len(k.cue_bits) == 2 for k in sp.group_keys())
        assert set(np.unique(sp.cue("watermark"))) <= {0, 1}

    def test_subset(self, tiny):
        sub = tiny.train.subset([3, 1])
        assert_array_equal(sub.y, tiny.train.y[[3, 1]])
        assert sub[0] == tiny.train[3]


class TestSerialization:
    def test_round_trip(self, tiny, tmp_path):
        manifest = write_dataset(tiny, tmp_path)
        assert manifest.format_version == FORMAT_VERSION
        back = read_dataset(tmp_path)
        assert back.content_hash() == tiny.content_hash()
        assert back.config == tiny.config
        assert back.test[5] == tiny.test[5]

    def test_manifest_counts(self, tiny, tmp_path):
        write_dataset(tiny, tmp_path)
        m = read_manifest(tmp_path)
        assert m.split_sizes == {"train": 80, "val": 32, "test": 32}
        assert m.group_counts["train"]["y0_11"] == 26

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(FormatError, match="manifest"):
            read_dataset(tmp_path)

    def test_version_mismatch(self, tiny, tmp_path):
        write_dataset(tiny, tmp_path)
        path = os.path.join(tmp_path, "manifest.json")
        raw = json.load(open(path))
        raw["format_version"] = "shortcutlab-ds-v0"
        json.dump(raw, open(path, "w"))
        with pytest.raises(FormatError, match="version mismatch"):
            read_dataset(tmp_path)

    def test_truncated_payload(self, tiny, tmp_path):
        write_dataset(tiny, tmp_path)
        path = os.path.join(tmp_path, "samples.bin")
        data = open(path, "rb").read()
        open(path, "wb").write(data[:-10])
        with pytest.raises(FormatError, match="truncated"):
            read_dataset(tmp_path)

    def test_corrupted_payload(self, tiny, tmp_path):
        write_dataset(tiny, tmp_path)
        path = os.path.join(tmp_path, "samples.bin")
        data = bytearray(open(path, "rb").read())
        data[100] ^= 0xFF
        open(path, "wb").write(bytes(data))
        with pytest.raises(FormatError, match="hash mismatch"):
            read_dataset(tmp_path)
