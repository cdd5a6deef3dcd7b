from dataclasses import replace

import numpy as np
import pytest

from app.config import AppConfig, TrackerConfig
from app.datasets import SynthSpec, synth_sequence
from app.errors import TrackingError
from app.model import SataNetwork
from app.tracker import (
    BBox,
    TrackResult,
    crop_pixels,
    crop_size,
    init,
    prepare_patch,
    scale_factors,
    track_sequence,
    track_step,
)


def _static_sequence(frames=5):
    return synth_sequence(SynthSpec(size=(48, 64), target_size=(8.0, 8.0), velocity=(0.0, 0.0),
                                    frames=frames, seed=11, name="static"))


def test_bbox_from_otb_line():
    box = BBox.from_xywh(10, 20, 30, 40)
    assert (box.cx, box.cy, box.w, box.h) == (24.5, 39.5, 30.0, 40.0)
    assert box.to_xywh() == (10.0, 20.0, 30.0, 40.0)


def test_bbox_rejects_empty_size():
    with pytest.raises(ValueError):
        BBox(0, 0, 0, 5)


def test_crop_size_with_padding():
    assert crop_size(BBox(50, 50, 20, 10), 1.0, 2.0) == (60.0, 30.0)


def test_default_scale_factors():
    np.testing.assert_allclose(scale_factors(TrackerConfig()), [1 / 1.03, 1.0, 1.03])
    assert scale_factors(TrackerConfig())[0] == pytest.approx(0.97087, abs=1e-5)


def test_scale_factors_need_odd_count():
    with pytest.raises(ValueError):
        scale_factors(TrackerConfig(S=2))


def test_crop_of_constant_image_is_constant():
    image = np.full((3, 30, 40), 77.0)
    out = crop_pixels(image, BBox(5, 5, 10, 10), 1.0, 2.0, 9)
    assert out.shape == (3, 9, 9)
    np.testing.assert_allclose(out, 77.0)


def test_crop_samples_the_box_center():
    rows = np.arange(31, dtype=np.float64)[:, None] * np.ones((1, 31))
    image = np.stack([rows] * 3)
    out = crop_pixels(image, BBox(15, 15, 6, 6), 1.0, 0.0, 5)
    assert out[0, 2, 2] == pytest.approx(15.0)


def test_init_rejects_tiny_frame(handcrafted_net):
    with pytest.raises(TrackingError):
        init(np.zeros((3, 6, 6)), BBox(3, 3, 2, 2), handcrafted_net)


def test_init_rejects_box_outside_frame(handcrafted_net):
    with pytest.raises(TrackingError):
        init(np.zeros((3, 40, 40)), BBox(200, 200, 10, 10), handcrafted_net)


def test_static_target_stays_put(handcrafted_net):
    seq = _static_sequence()
    result = track_sequence(seq.frames, seq.boxes[0], handcrafted_net)
    assert len(result.boxes) == len(seq)
    for box in result.boxes:
        assert box.cx == pytest.approx(seq.boxes[0].cx)
        assert box.cy == pytest.approx(seq.boxes[0].cy)
        assert box.w == pytest.approx(seq.boxes[0].w)


def test_history_is_capped_at_T(handcrafted_net):
    seq = _static_sequence(frames=5)
    state = init(seq.frames[0], seq.boxes[0], handcrafted_net)
    for frame in seq.frames[1:]:
        state, _ = track_step(state, frame)
    assert state.frame_index == 4
    assert len(state.history) == handcrafted_net.config.tracker.T
    assert [idx for idx, _ in state.history] == [3, 4]


def test_weight_stats_cover_current_and_history(handcrafted_net):
    seq = _static_sequence(frames=4)
    result = track_sequence(seq.frames, seq.boxes[0], handcrafted_net)
    assert result.weight_stats[0] == {}
    assert set(result.weight_stats[1]) == {0, 1}
    assert set(result.weight_stats[2]) == {0, 1, 2}
    assert sum(result.weight_stats[2].values()) == pytest.approx(1.0)


def test_no_history_when_T_is_zero(handcrafted_cfg):
    cfg = replace(handcrafted_cfg, tracker=replace(handcrafted_cfg.tracker, T=0))
    seq = _static_sequence(frames=3)
    state = init(seq.frames[0], seq.boxes[0], SataNetwork.create(cfg, seed=0))
    state, _ = track_step(state, seq.frames[1])
    assert len(state.history) == 0
    assert state.weight_stats == [{}]


def test_track_result_fps():
    boxes = [BBox(1, 1, 2, 2)] * 11
    assert TrackResult(boxes, 2.0, []).fps == pytest.approx(5.0)


@pytest.mark.slow
def test_constant_velocity_acceptance():
    cfg = replace(AppConfig(), backbone=replace(AppConfig().backbone, kind="handcrafted"),
                  runtime=replace(AppConfig().runtime, dtype="float64"))
    net = SataNetwork.create(cfg, seed=0)
    seq = synth_sequence(SynthSpec(velocity=(2.0, 0.0), frames=64, seed=0))
    result = track_sequence(seq.frames, seq.boxes[0], net)
    errors = np.array([np.hypot(p.cx - t.cx, p.cy - t.cy) for p, t in zip(result.boxes, seq.boxes)])
    assert errors.mean() <= 2.0
    assert errors.max() <= 5.0


@pytest.mark.slow
def test_scale_ramp_acceptance():
    cfg = replace(AppConfig(), backbone=replace(AppConfig().backbone, kind="handcrafted"),
                  runtime=replace(AppConfig().runtime, dtype="float64"))
    net = SataNetwork.create(cfg, seed=0)
    seq = synth_sequence(SynthSpec(motion="scale_ramp", scale_end=1.3, frames=64, seed=0))
    result = track_sequence(seq.frames, seq.boxes[0], net)
    assert result.boxes[-1].w == pytest.approx(seq.boxes[-1].w, rel=0.1)


def test_patch_is_windowed():
    cfg = AppConfig()
    cfg = replace(cfg, runtime=replace(cfg.runtime, dtype="float64"))
    pixels = np.full((3, 9, 9), 255.0)
    patch = prepare_patch(pixels, cfg).data
    expected = (1.0 - np.array(cfg.backbone.mean))[:, None, None] * np.outer(np.hanning(9), np.hanning(9))
    np.testing.assert_allclose(patch, expected, atol=1e-12)
    assert np.all(patch[:, 0, :] == 0.0)
    plain = replace(cfg, tracker=replace(cfg.tracker, hann=False))
    np.testing.assert_allclose(prepare_patch(pixels, plain).data[:, 4, 4], 1.0 - np.array(cfg.backbone.mean))
