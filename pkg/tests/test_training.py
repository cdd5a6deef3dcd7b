from dataclasses import replace

import numpy as np
import pytest

from app.autodiff import Tensor
from app.config import TrainConfig
from app.datasets import synth_corpus
from app.errors import DataError
from app.model import SataNetwork
from app.training import (
    SgdState,
    apply_affine,
    batch_loss_and_grads,
    clip_patches,
    grad_check_suite,
    sample_clip,
    sgd_update,
    small_clip_sequence,
    train,
    train_step,
)


@pytest.fixture
def clip_sequence():
    return small_clip_sequence(seed=0)


def test_clip_indices_respect_windows(clip_sequence):
    for seed in range(50):
        clip = sample_clip(clip_sequence, seed, T=3, template_window=10, history_window=20)
        assert len(set(clip.indices())) == 5
        assert all(clip.search_index - 20 <= i < clip.search_index for i in clip.history_indices)
        assert abs(clip.template_index - clip.search_index) <= 10
        assert 3 <= clip.search_index < len(clip_sequence)


def test_clip_sampling_is_seeded(clip_sequence):
    assert sample_clip(clip_sequence, 5) == sample_clip(clip_sequence, 5)


def test_short_sequence_cannot_be_clipped(tiny_sequence):
    with pytest.raises(DataError):
        sample_clip(tiny_sequence, 0)


def test_identity_affine(rng):
    patch = rng.standard_normal((3, 9, 9))
    np.testing.assert_allclose(apply_affine(patch), patch, atol=1e-12)


def test_integer_translation(rng):
    patch = rng.standard_normal((9, 9))
    moved = apply_affine(patch, translation=(2.0, 0.0))
    np.testing.assert_allclose(moved[2:, :], patch[:-2, :], atol=1e-12)


def test_clip_patches_shapes(clip_sequence, small_cfg):
    clip = sample_clip(clip_sequence, 0, T=2)
    template, search, history = clip_patches(clip, small_cfg, rng=0)
    assert template.shape == search.shape == (3, 25, 25)
    assert len(history) == 2


def _params(value):
    return {"backbone.stage0": Tensor(np.full(3, value)), "lateral.0": Tensor(np.full(3, value))}


def test_zero_learning_rate_changes_nothing():
    params = _params(2.0)
    grads = {n: np.ones(3) for n in params}
    out = sgd_update(params, grads, SgdState(), TrainConfig(lr=0.0))
    for n in params:
        np.testing.assert_array_equal(out[n].data, params[n].data)


def test_weight_decay_on_zero_gradient():
    params = _params(2.0)
    grads = {n: np.zeros(3) for n in params}
    cfg = TrainConfig(lr=0.1, weight_decay=0.5, momentum=0.9)
    out = sgd_update(params, grads, SgdState(), cfg)
    np.testing.assert_allclose(out["lateral.0"].data, 2.0 * (1 - 0.1 * 0.5))


def test_momentum_accumulates():
    params = _params(0.0)
    grads = {n: np.ones(3) for n in params}
    cfg = TrainConfig(lr=1.0, weight_decay=0.0, momentum=0.5)
    state = SgdState()
    params = sgd_update(params, grads, state, cfg)
    params = sgd_update(params, grads, state, cfg)
    # v1 = 1, v2 = 1.5
    np.testing.assert_allclose(params["lateral.0"].data, -2.5)
    assert state.steps == 2


def test_frozen_group_is_untouched():
    params = _params(1.0)
    grads = {n: np.ones(3) for n in params}
    out = sgd_update(params, grads, SgdState(), TrainConfig(lr=0.1), frozen=("backbone",))
    assert out["backbone.stage0"] is params["backbone.stage0"]
    assert not np.array_equal(out["lateral.0"].data, params["lateral.0"].data)


def _fixed_batch(net, clip_sequence):
    clip = sample_clip(clip_sequence, 1, T=net.config.train.T)
    return [clip_patches(clip, net.config, augment=False)]


def test_small_step_lowers_loss(small_net, clip_sequence):
    batch = _fixed_batch(small_net, clip_sequence)
    loss0, grads = batch_loss_and_grads(small_net, batch)
    norm2 = sum(float(np.sum(g * g)) for g in grads.values())
    assert norm2 > 0
    cfg = TrainConfig(lr=1e-3 * loss0 / norm2, momentum=0.0, weight_decay=0.0)
    net, _ = train_step(small_net, batch, SgdState(), cfg)
    loss1, _ = batch_loss_and_grads(net, batch)
    assert loss1 < loss0


def test_freeze_backbone_keeps_stage_kernels(small_net, clip_sequence):
    batch = _fixed_batch(small_net, clip_sequence)
    cfg = TrainConfig(lr=1e-6, freeze_backbone=True)
    net, _ = train_step(small_net, batch, SgdState(), cfg)
    np.testing.assert_array_equal(net.params["backbone.stage0"].data, small_net.params["backbone.stage0"].data)


def test_train_writes_checkpoint(tmp_path, small_cfg, clip_sequence):
    cfg = replace(small_cfg, train=replace(small_cfg.train, steps_per_epoch=2, epochs=1, lr=1e-7))
    net = SataNetwork.create(cfg, seed=0)
    ckpt = tmp_path / "ckpt.satw"
    net, losses = train([clip_sequence], net, checkpoint=str(ckpt))
    assert len(losses) == 2
    assert all(np.isfinite(losses))
    assert ckpt.exists()


def test_train_is_deterministic(small_cfg, clip_sequence):
    cfg = replace(small_cfg, train=replace(small_cfg.train, lr=1e-6))
    runs = [train([clip_sequence], SataNetwork.create(cfg, seed=0), steps=2) for _ in range(2)]
    assert runs[0][1] == runs[1][1]
    for n in runs[0][0].params:
        np.testing.assert_array_equal(runs[0][0].params[n].data, runs[1][0].params[n].data)


def test_gradcheck_requires_double(small_cfg):
    cfg = replace(small_cfg, runtime=replace(small_cfg.runtime, dtype="float32"))
    with pytest.raises(ValueError):
        grad_check_suite(SataNetwork.create(cfg, seed=0), n_params=1)


def test_gradcheck_passes_and_detects_corruption(small_net):
    report = grad_check_suite(small_net, n_params=8)
    assert report.ok, [(e.module, e.parameter, e.error) for e in report.violations]
    corrupted = grad_check_suite(small_net, n_params=8, corrupt=True)
    assert not corrupted.ok


@pytest.mark.slow
def test_full_gradcheck_at_init(small_net):
    report = grad_check_suite(small_net, n_params=200)
    assert report.ok
    assert report.max_error <= 1e-4


@pytest.mark.slow
def test_fixed_clip_training_reduces_loss(small_net, clip_sequence):
    batch = _fixed_batch(small_net, clip_sequence)
    loss0, grads = batch_loss_and_grads(small_net, batch)
    norm2 = sum(float(np.sum(g * g)) for g in grads.values())
    cfg = TrainConfig(lr=1e-3 * loss0 / norm2, momentum=0.0, weight_decay=0.0)
    net, state = small_net, SgdState()
    for _ in range(20):
        net, _ = train_step(net, batch, state, cfg)
    assert batch_loss_and_grads(net, batch)[0] < loss0


@pytest.fixture
def corpus():
    return synth_corpus(count=10, seed=0)


@pytest.mark.slow
def test_corpus_training_halves_the_loss(small_cfg, corpus):
    cfg = replace(small_cfg, train=replace(small_cfg.train, lr=1.5e-5))
    _, losses = train(corpus, SataNetwork.create(cfg, seed=0), steps=400)
    assert np.mean(losses[-10:]) < 0.5 * np.mean(losses[:10])
    _, replay = train(corpus, SataNetwork.create(cfg, seed=0), steps=3)
    assert replay == losses[:3]


@pytest.mark.slow
def test_gradcheck_after_training(small_net, corpus):
    trained, _ = train(corpus, small_net, steps=50)
    report = grad_check_suite(trained, n_params=200)
    assert report.ok, [(e.module, e.parameter, e.error) for e in report.violations]
