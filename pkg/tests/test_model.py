"""Model assembly, forward contracts, parameter counts and checkpoint files."""

import struct

import numpy as np
import pytest

from lmdvit import tensor as T
from lmdvit.config import FULL, NUM_STAGES, TINY, ModelConfig
from lmdvit.errors import ConfigError, FormatError, UsageError
from lmdvit.model import FORMAT_VERSION, MAGIC, build, forward, load, pad_input, parameter_count, save
from helpers import randomize_params

TINY_PARAMS = 1_399_723


@pytest.fixture(scope="module")
def trained_like():
    """A tiny model with every parameter perturbed away from its initialization."""
    return randomize_params(build(TINY, seed=3), seed=4)


def image(seed, h=64, w=64, n=None):
    shape = (3, h, w) if n is None else (n, 3, h, w)
    return np.random.default_rng(seed).random(shape)


class TestBuild:
    def test_same_seed_bit_identical(self):
        a, b = build(TINY, 11), build(TINY, 11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        a, b = build(TINY, 1), build(TINY, 2)
        assert not np.array_equal(a.in_weight.data, b.in_weight.data)

    def test_tiny_count_matches_enumeration(self):
        assert build(TINY).num_parameters() == parameter_count(TINY) == TINY_PARAMS

    @pytest.mark.parametrize("changes", [
        dict(prune_stages=()),
        dict(depths=(1, 2, 3, 1, 2, 1, 3, 2, 1)),
        dict(window_size=8, channels_per_head=4),
        dict(mlp_ratio=2, leff_variant="leff"),
    ])
    def test_analytic_count_other_configs(self, changes):
        cfg = TINY.with_updates(**changes)
        assert build(cfg).num_parameters() == parameter_count(cfg)

    def test_full_profile_near_reported_size(self):
        n = parameter_count(FULL)
        assert abs(n - 54.50e6) / 54.50e6 <= 0.10

    def test_init_conventions(self):
        m = build(TINY, 0)
        assert not m.out_weight.data.any()
        blk = m.stages[0].blocks[0]
        assert not blk.attn.proj.weight.data.any() and not blk.ffn.fc2.weight.data.any()
        w = blk.attn.qkv.weight.data
        assert np.abs(w).max() <= 0.04 and abs(w.std() - 0.02) < 0.004

    def test_bad_config(self):
        with pytest.raises(ConfigError):
            ModelConfig(base_channels=8, channels_per_head=3)
        with pytest.raises(ConfigError):
            ModelConfig(prune_stages=(0, 9))


class TestForward:
    @pytest.mark.parametrize("mode", ["train", "infer"])
    def test_identity_at_init(self, mode):
        img = image(0)
        out = forward(build(TINY, 0), img, mode).output.data
        np.testing.assert_array_equal(out, img)

    @pytest.mark.parametrize("hw", [(64, 64), (70, 90), (1, 5)])
    def test_shape_preserved(self, trained_like, hw):
        img = image(1, *hw)
        res = forward(trained_like, img, "infer")
        assert res.output.shape == img.shape
        assert res.padded == (128 if hw == (70, 90) else 64, 128 if hw == (70, 90) else 64)

    def test_batched_matches_single(self, trained_like):
        imgs = image(2, n=2)
        both = forward(trained_like, imgs, "infer").output.data
        one = forward(trained_like, imgs[1], "infer").output.data
        np.testing.assert_allclose(both[1], one, atol=1e-12)

    def test_non_rgb_rejected(self, trained_like):
        with pytest.raises(UsageError):
            forward(trained_like, np.zeros((4, 64, 64)), "infer")

    def test_decision_scales(self, trained_like):
        res = forward(trained_like, image(3), "infer")
        assert res.grids == [(64, 64), (32, 32), (16, 16), (8, 8), (4, 4), (8, 8), (16, 16),
                             (32, 32), (64, 64)]
        for i, d in enumerate(res.decisions):
            assert d.shape == (1,) + res.grids[i]
            assert set(np.unique(d)) <= {0.0, 1.0}

    def test_all_keep_infer_equals_train_bit_exact(self, trained_like):
        img = image(4)
        forced = [np.ones((64 // s, 64 // s)) for s in (1, 2, 4, 8, 16, 8, 4, 2, 1)]
        a = forward(trained_like, img, "train", forced=forced).output.data
        T.clear_tape()
        b = forward(trained_like, img, "infer", forced=forced).output.data
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("seed", range(3))
    def test_random_forced_patterns_train_matches_infer(self, trained_like, seed):
        rng = np.random.default_rng(seed)
        img = image(10 + seed)
        forced = [(rng.random((64 // s, 64 // s)) < 0.5).astype(float)
                  for s in (1, 2, 4, 8, 16, 8, 4, 2, 1)]
        a = forward(trained_like, img, "train", forced=forced).output.data
        T.clear_tape()
        b = forward(trained_like, img, "infer", forced=forced).output.data
        assert np.abs(a - b).max() <= 1e-9

    def test_no_pruning_configuration_ignores_beta(self):
        m = randomize_params(build(TINY.with_updates(prune_stages=()), 0), seed=1)
        img = image(5)
        a = forward(m, img, "infer", beta=0.1)
        b = forward(m, img, "infer", beta=0.9)
        np.testing.assert_array_equal(a.output.data, b.output.data)
        assert all(d is None for d in a.decisions)
        assert a.kept_ratios() == [1.0] * NUM_STAGES

    def test_train_mode_reproducible_from_model_seed(self, trained_like):
        img = image(6)
        a = forward(trained_like, img, "train")
        T.clear_tape()
        b = forward(trained_like, img, "train")
        T.clear_tape()
        np.testing.assert_array_equal(a.output.data, b.output.data)

    def test_kept_counts_and_ratios_agree(self, trained_like):
        res = forward(trained_like, image(7, n=2), "infer", beta=0.5)
        windows = [(h // 4) * (w // 4) for h, w in res.grids]
        for i, counts in enumerate(res.kept_counts()):
            assert res.kept_ratio(i) == pytest.approx(np.mean(counts) / windows[i])
        km = res.window_keep_map(8, 0)
        assert km.shape == (2, 16, 16)


class TestPadInput:
    def test_reflect_bottom_right(self):
        img = np.arange(12.0).reshape(1, 3, 4)
        out = pad_input(img, 4)
        assert out.shape == (1, 4, 4)
        np.testing.assert_array_equal(out[0, 3], img[0, 1])

    def test_already_multiple_untouched(self):
        img = np.ones((3, 8, 8))
        assert pad_input(img, 8) is img

    def test_single_pixel_axis_edge_mode(self):
        out = pad_input(np.array([[[2.0, 3.0]]]), 4)
        np.testing.assert_array_equal(out[0], [[2, 3, 3, 3]] * 4)


class TestCheckpoint:
    def test_round_trip_bit_exact(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(trained_like, path)
        back = load(path)
        assert back.config == trained_like.config
        img = image(8)
        np.testing.assert_array_equal(forward(back, img, "infer").output.data,
                                      forward(trained_like, img, "infer").output.data)
        for (_, a), (_, b) in zip(back.named_parameters(), trained_like.named_parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_bad_magic(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(trained_like, path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"XXXX"
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError):
            load(path)

    def test_version_bump_rejected(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(trained_like, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(raw))
        with pytest.raises(FormatError, match="version"):
            load(path)

    def test_truncated(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(trained_like, path)
        raw = path.read_bytes()
        path.write_bytes(raw[:-100])
        with pytest.raises(FormatError):
            load(path)

    def test_header_layout(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(trained_like, path)
        raw = path.read_bytes()
        assert raw[:4] == MAGIC
        version, blob = struct.unpack("<IQ", raw[4:16])
        assert version == FORMAT_VERSION and blob > 0

    def test_config_mismatch_rejected(self, trained_like, tmp_path):
        path = tmp_path / "m.ckpt"
        save(build(TINY.with_updates(prune_stages=()), 0), path)
        raw = path.read_bytes()
        other = tmp_path / "o.ckpt"
        save(trained_like, other)
        # splice the parameter records of one model behind the header of another
        head_len = 16 + struct.unpack("<IQ", raw[4:16])[1]
        o = other.read_bytes()
        o_head = 16 + struct.unpack("<IQ", o[4:16])[1]
        path.write_bytes(raw[:head_len] + o[o_head:])
        with pytest.raises(FormatError):
            load(path)
