import dataclasses

import numpy as np
import pytest

from ltd.backbone import (BackboneConfig, BackboneWeights, encode_layers, expected_shapes, init_random_backbone,
                          parameter_count, patchify, zero_residual)
from ltd.errors import ConfigError, DimensionError, MissingTensorError
from oracles import reference_vit_cls

# Independent count: transformers' CLIPVisionModel at 224/14, 24 layers, width 1024,
# minus its post-LayerNorm (2048), which this encoder never applies.
CLIP_L14_PARAMS = 303_177_728
TOY_PARAMS = 106_944


def test_toy_parameter_count():
    cfg = BackboneConfig.toy()
    assert parameter_count(cfg) == TOY_PARAMS
    assert init_random_backbone(cfg, 0).parameter_count() == TOY_PARAMS


def test_full_scale_shape_table():
    cfg = BackboneConfig.clip_vit_l14()
    shapes = expected_shapes(cfg)
    assert sum(int(np.prod(s)) for s in shapes.values()) == CLIP_L14_PARAMS == parameter_count(cfg)
    assert shapes["pos_embed"] == (257, 1024)
    assert shapes["patch_embed.weight"] == (14 * 14 * 3, 1024)
    assert shapes["blocks.23.mlp.fc1.weight"] == (1024, 4096)
    assert "patch_embed.bias" not in shapes and "ln_pre.weight" in shapes
    assert len([k for k in shapes if k.endswith("attn.qkv.weight")]) == 24


@pytest.mark.parametrize("cfg", [
    BackboneConfig.toy(),
    dataclasses.replace(BackboneConfig.clip_vit_l14(), image_size=28, patch_size=14, depth=3, width=16, heads=2),
])
def test_matches_reference_forward(cfg):
    w = init_random_backbone(cfg, 5)
    imgs = np.random.default_rng(0).uniform(size=(3, cfg.image_size, cfg.image_size, 3)).astype(np.float32)
    got = encode_layers(imgs, w)
    want = reference_vit_cls(imgs, w.tensors, cfg, w.norm)
    assert got.shape == (3, cfg.depth, cfg.width) and got.dtype == np.float32
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


def test_single_image_equals_batch_row(toy_weights):
    imgs = np.random.default_rng(1).uniform(size=(4, 28, 28, 3)).astype(np.float32)
    batch = encode_layers(imgs, toy_weights)
    for i in range(4):
        assert np.array_equal(encode_layers(imgs[i], toy_weights), batch[i])


def test_wrong_input_size(toy_weights):
    with pytest.raises(DimensionError):
        encode_layers(np.zeros((32, 32, 3)), toy_weights)


def test_weights_are_read_only(toy_weights):
    with pytest.raises(ValueError):
        toy_weights.tensors["cls_token"][0] = 1.0


def test_missing_tensor_is_named():
    w = init_random_backbone(BackboneConfig.toy(), 0)
    tensors = dict(w.tensors)
    del tensors["pos_embed"]
    with pytest.raises(MissingTensorError, match="pos_embed"):
        BackboneWeights(w.config, tensors)


def test_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(image_size=30, patch_size=7).validate()
    with pytest.raises(ConfigError):
        BackboneConfig(width=30, heads=4).validate()
    with pytest.raises(ConfigError):
        BackboneConfig.from_dict({"depth": 8, "colour": "red"})


def test_patch_order_is_row_major():
    img = np.arange(4 * 4 * 3, dtype=np.float32).reshape(1, 4, 4, 3)
    p = patchify(img, 2)
    np.testing.assert_array_equal(p[0, 1], img[0, 0:2, 2:4].reshape(-1))
    np.testing.assert_array_equal(p[0, 2], img[0, 2:4, 0:2].reshape(-1))


def test_zero_residual_gives_constant_cls(toy_weights):
    z = zero_residual(toy_weights)
    out = encode_layers(np.random.default_rng(2).uniform(size=(2, 28, 28, 3)), z)
    assert np.array_equal(out, np.broadcast_to(out[:, :1], out.shape))
    assert z.content_hash() != toy_weights.content_hash()


def test_content_hash_is_stable(toy_weights):
    again = init_random_backbone(BackboneConfig.toy(), 0)
    assert again.content_hash() == toy_weights.content_hash()
    assert init_random_backbone(BackboneConfig.toy(), 1).content_hash() != toy_weights.content_hash()
