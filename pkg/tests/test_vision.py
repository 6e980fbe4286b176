import numpy as np
import pytest

from cxrvlm import vision
from cxrvlm.images import GrayImage
from cxrvlm.layers import ConfigError, named_rng
from cxrvlm.vision import VisionConfig, encode, freeze_flags, patchify


def small_cfg(**kw):
    base = dict(image_side=8, patch_size=4, d_vision=8, n_layers=3, n_heads=2)
    base.update(kw)
    return VisionConfig(**base)


def random_image(side, seed=0):
    rng = np.random.default_rng(seed)
    return GrayImage(side, side, rng.integers(0, 256, size=(side, side)).astype(np.uint8))


class TestPatchify:
    def test_layout_4x4_patch2(self):
        img = GrayImage(4, 4, np.arange(16, dtype=np.uint8).reshape(4, 4))
        out = patchify(img, 2)
        assert out.shape == (4, 4)
        assert np.allclose(out.data[0] * 255, [0, 1, 4, 5])

    def test_constant_white_scales_to_one(self):
        img = GrayImage(4, 4, np.full((4, 4), 255, dtype=np.uint8))
        assert np.allclose(patchify(img, 2).data, 1.0)

    def test_top_right_patch_of_ramp(self):
        img = GrayImage(4, 4, np.arange(16, dtype=np.uint8).reshape(4, 4))
        out = patchify(img, 2)
        assert np.allclose(out.data[1] * 255, [2, 3, 6, 7])

    def test_divisibility_error(self):
        with pytest.raises(ConfigError):
            patchify(GrayImage(6, 6, np.zeros((6, 6), dtype=np.uint8)), 4)


class TestEncode:
    def test_output_shape(self):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(0, "init"))
        feats = encode(random_image(cfg.image_side), cfg, params)
        assert feats.tokens.shape == (cfg.num_patches, cfg.d_vision)
        assert feats.source_layer == cfg.n_layers - 1

    def test_zeroed_blocks_pass_embedding_through(self):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(0, "init"))
        for name, t in params.items():
            if ".block" in name and name.endswith(".weight"):
                t.data = np.zeros_like(t.data)
        img = random_image(cfg.image_side)
        feats = encode(img, cfg, params)
        expected = (patchify(img, cfg.patch_size).data @ params["vision.patch_embed.weight"].data.T
                    + params["vision.patch_embed.bias"].data
                    + params["vision.pos_embed"].data)
        assert np.allclose(feats.tokens.data, expected, atol=1e-6)

    @pytest.mark.parametrize("seed", range(4))
    def test_single_patch_perturbation_reaches_its_position(self, seed):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(seed, "init"))
        img = random_image(cfg.image_side, seed)
        px = img.pixels.copy()
        # flip every pixel of patch (0, 0) only
        px[:4, :4] ^= 0xFF
        other = GrayImage(cfg.image_side, cfg.image_side, px)
        a = encode(img, cfg, params).tokens.data
        b = encode(other, cfg, params).tokens.data
        assert not np.allclose(a[0], b[0])

    def test_penultimate_selection_ignores_final_block(self):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(1, "init"))
        img = random_image(cfg.image_side, 1)
        before = encode(img, cfg, params).tokens.data.copy()
        last = cfg.n_layers - 1
        for name, t in params.items():
            if f".block{last}." in name:
                t.data = t.data + 123.0
        after = encode(img, cfg, params).tokens.data
        assert np.array_equal(before, after)

    def test_deterministic(self):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(2, "init"))
        img = random_image(cfg.image_side, 2)
        a = encode(img, cfg, params).tokens.data
        b = encode(img, cfg, params).tokens.data
        assert a.tobytes() == b.tobytes()


class TestFreeze:
    def test_all_vision_params_frozen(self):
        cfg = small_cfg()
        params = vision.init_params(cfg, named_rng(0, "init"))
        flags = freeze_flags(params)
        assert set(flags) == set(params)
        assert all(flags.values())


class TestConfig:
    def test_needs_two_layers(self):
        with pytest.raises(ConfigError):
            small_cfg(n_layers=1)

    def test_side_divisible_by_patch(self):
        with pytest.raises(ConfigError):
            small_cfg(image_side=10, patch_size=4)
