from dataclasses import replace

import numpy as np
import pytest

from app.autodiff import Tensor
from app.backbone import (
    FeaturePyramid,
    build_pyramid,
    extract_features,
    handcrafted_channels,
    normalize_patch,
    stage_padding,
    topdown_merge,
)
from app.config import BackboneConfig
from app.errors import ShapeError
from app.model import SataNetwork


def test_default_stage_sides_floor_halve():
    assert BackboneConfig().stage_sides == (62, 31, 15)
    assert BackboneConfig(input_side=25).stage_sides == (12, 6, 3)


def test_stage_padding_by_parity():
    assert stage_padding(125) == "valid"
    assert stage_padding(62) == "same"


def test_tiny_cnn_stage_shapes(small_net):
    patch = Tensor(np.zeros((3, 25, 25)))
    stages = extract_features(patch, small_net.config.backbone, small_net.stage_kernels())
    assert [s.shape for s in stages] == [(4, 12, 12), (4, 6, 6), (8, 3, 3)]


def test_handcrafted_stage_shapes(rng):
    cfg = BackboneConfig(kind="handcrafted", input_side=25)
    stages = extract_features(Tensor(rng.standard_normal((3, 25, 25))), cfg)
    assert [s.shape for s in stages] == [(3, 12, 12), (3, 6, 6), (3, 3, 3)]


def test_wrong_patch_side_raises(small_net):
    with pytest.raises(ShapeError):
        extract_features(Tensor(np.zeros((3, 24, 24))), small_net.config.backbone, small_net.stage_kernels())


def test_tiny_cnn_needs_kernels():
    with pytest.raises(ShapeError):
        extract_features(Tensor(np.zeros((3, 25, 25))), BackboneConfig(input_side=25))


def test_pyramid_is_deepest_first(small_net, rng):
    pyramid = small_net.frame_pyramid(Tensor(rng.standard_normal((3, 25, 25))))
    assert pyramid.sides == (3, 6, 12)
    assert {level.shape[0] for level in pyramid.levels} == {4}


def test_build_pyramid_rejects_channel_mismatch(rng):
    stages = [Tensor(rng.standard_normal((2, s, s))) for s in (12, 6, 3)]
    kernels = [Tensor(rng.standard_normal((4, 3, 3, 3)))] * 3
    with pytest.raises(ShapeError):
        build_pyramid(stages, kernels)


def test_merge_of_constant_levels_is_constant():
    levels = tuple(Tensor(np.full((2, s, s), 1.5)) for s in (3, 6, 12))
    merged = topdown_merge(FeaturePyramid(levels), 25)
    assert merged.shape == (2, 25, 25)
    np.testing.assert_allclose(merged.data, 4.5)


def test_merge_rejects_channel_disagreement():
    levels = (Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((3, 6, 6))), Tensor(np.zeros((2, 12, 12))))
    with pytest.raises(ShapeError):
        topdown_merge(FeaturePyramid(levels), 25)


def test_handcrafted_gradients_of_a_ramp():
    ramp = np.tile(np.arange(5.0), (3, 5, 1))
    gray, gx, gy = handcrafted_channels(ramp)
    np.testing.assert_allclose(gx, 1.0)
    np.testing.assert_allclose(gy, 0.0)
    np.testing.assert_allclose(gray, ramp[0])


def test_normalize_patch_range():
    out = normalize_patch(np.full((3, 2, 2), 255.0), (0.5, 0.5, 0.5))
    np.testing.assert_allclose(out, 0.5)


def test_smooth_merge_starts_as_identity(small_cfg, rng):
    cfg = replace(small_cfg, backbone=replace(small_cfg.backbone, smooth_merge=True))
    net = SataNetwork.create(cfg, seed=0)
    pyramid = net.frame_pyramid(Tensor(rng.standard_normal((3, 25, 25))))
    plain = topdown_merge(pyramid, 25)
    np.testing.assert_allclose(net.merge(pyramid).data, plain.data, atol=1e-12)
