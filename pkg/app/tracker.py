"""
Online tracking loop.

Each frame: crop the search patch at every scale factor, align and
aggregate the buffered history onto it, correlate with the CF model, pick
the best (scale, row, col), move the box, and update the model.
"""

import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Deque, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from tqdm import tqdm

from app.autodiff import Tensor
from app.backbone import FeaturePyramid, normalize_patch
from app.cf_layer import CfModel, make_label, respond, solve_filter, update_model
from app.config import AppConfig, TrackerConfig
from app.errors import TrackingError
from app.logging_config import progress_enabled
from app.model import SataNetwork
from app.utils import hann_window

logger = logging.getLogger(__name__)

MIN_FRAME_SIDE = 8
MIN_BOX_SIDE = 2.0


@dataclass(frozen=True)
class BBox:
    """Center (cx, cy) and size (w, h) in image pixels."""

    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"BBox size must be positive, got w={self.w}, h={self.h}")

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "BBox":
        """Top-left (x, y) plus size, as written in OTB ground truth."""
        return cls(x + (w - 1) / 2.0, y + (h - 1) / 2.0, float(w), float(h))

    def to_xywh(self) -> Tuple[float, float, float, float]:
        return self.cx - (self.w - 1) / 2.0, self.cy - (self.h - 1) / 2.0, self.w, self.h

    def corners(self) -> Tuple[float, float, float, float]:
        """Continuous (left, top, right, bottom)."""
        return self.cx - self.w / 2, self.cy - self.h / 2, self.cx + self.w / 2, self.cy + self.h / 2

    def moved(self, dx: float, dy: float, factor: float = 1.0) -> "BBox":
        return BBox(self.cx + dx, self.cy + dy, self.w * factor, self.h * factor)


# =====================================
# PATCHES
# =====================================
def as_frame(image: np.ndarray) -> np.ndarray:
    """[3,H,W] float pixels in 0..255; grayscale [H,W] is replicated."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = np.repeat(image[None], 3, axis=0)
    if image.ndim != 3 or image.shape[0] != 3:
        raise TrackingError(f"frame must be [3,H,W] or [H,W], got {image.shape}")
    return image


def crop_size(box: BBox, scale: float, padding: float) -> Tuple[float, float]:
    """(width, height) of the context window around `box`."""
    return box.w * (1 + padding) * scale, box.h * (1 + padding) * scale


def crop_pixels(image: np.ndarray, box: BBox, scale: float, padding: float, side: int) -> np.ndarray:
    """
    Resample the context window to side x side with bilinear interpolation.
    Samples outside the image take the nearest edge pixel.
    """
    if scale <= 0:
        raise TrackingError(f"crop scale must be positive, got {scale}")
    crop_w, crop_h = crop_size(box, scale, padding)
    if crop_w <= 0 or crop_h <= 0:
        raise TrackingError(f"non-positive crop size {crop_w}x{crop_h}")
    steps = (np.arange(side) + 0.5) / side - 0.5
    rows = box.cy + steps * crop_h
    cols = box.cx + steps * crop_w
    grid = np.meshgrid(rows, cols, indexing="ij")
    return np.stack([
        ndimage.map_coordinates(channel, grid, order=1, mode="nearest") for channel in image
    ])


def prepare_patch(pixels: np.ndarray, cfg: AppConfig) -> Tensor:
    """Normalize, window, and cast to the runtime dtype."""
    patch = normalize_patch(pixels, cfg.backbone.mean)
    if cfg.tracker.hann:
        patch = patch * hann_window(*patch.shape[1:])
    return Tensor(patch.astype(cfg.runtime.np_dtype))


def crop_patch(image: np.ndarray, box: BBox, scale: float, cfg: AppConfig) -> Tensor:
    pixels = crop_pixels(as_frame(image), box, scale, cfg.tracker.padding, cfg.tracker.patch_side)
    return prepare_patch(pixels, cfg)


def scale_factors(config: TrackerConfig) -> List[float]:
    """alpha**s for s = -(S-1)/2 .. (S-1)/2."""
    if config.S < 1 or config.S % 2 == 0:
        raise ValueError(f"scale_factors: S must be odd, got {config.S}")
    half = (config.S - 1) // 2
    return [float(config.alpha ** s) for s in range(-half, half + 1)]


# =====================================
# STATE
# =====================================
@dataclass
class TrackState:
    bbox: BBox
    template_feature: Tensor
    model: CfModel
    net: SataNetwork
    history: Deque[Tuple[int, FeaturePyramid]]
    frame_index: int = 0
    weight_stats: List[Dict[int, float]] = field(default_factory=list)


def _detach_model(model: CfModel) -> CfModel:
    return CfModel(model.numerator.detach(), model.denominator.detach(), model.lam, model.label)


def _detach_pyramid(pyramid: FeaturePyramid) -> FeaturePyramid:
    return FeaturePyramid(tuple(level.detach() for level in pyramid.levels))


def _clip_box(box: BBox, width: int, height: int) -> BBox:
    left, top, right, bottom = box.corners()
    left, top = max(left, -0.5), max(top, -0.5)
    right, bottom = min(right, width - 0.5), min(bottom, height - 0.5)
    w, h = right - left, bottom - top
    if w < MIN_BOX_SIDE or h < MIN_BOX_SIDE:
        raise TrackingError(f"degenerate box after clipping to the image: {w:.2f}x{h:.2f}")
    return BBox((left + right) / 2, (top + bottom) / 2, w, h)


def _check_frame(frame: np.ndarray) -> np.ndarray:
    frame = as_frame(frame)
    if frame.shape[1] < MIN_FRAME_SIDE or frame.shape[2] < MIN_FRAME_SIDE:
        raise TrackingError(f"frame {frame.shape[1]}x{frame.shape[2]} is smaller than {MIN_FRAME_SIDE}x{MIN_FRAME_SIDE}")
    return frame


def init(first_frame: np.ndarray, box: BBox, net: SataNetwork) -> TrackState:
    """Template from the first frame; CF model solved against the Gaussian label."""
    cfg = net.config
    frame = _check_frame(first_frame)
    box = _clip_box(box, frame.shape[2], frame.shape[1])
    side = cfg.tracker.patch_side

    template = net.template_feature(crop_patch(frame, box, 1.0, cfg)).detach()
    label = make_label(side, side, cfg.cf.bandwidth)
    model = _detach_model(solve_filter(template, label, cfg.cf.lam))
    logger.debug(f"tracker init at ({box.cx:.1f}, {box.cy:.1f}) size {box.w:.1f}x{box.h:.1f}")
    return TrackState(bbox=box, template_feature=template, model=model, net=net,
                      history=deque(maxlen=cfg.tracker.T))


def _tau_weights(masks: Dict[int, Tensor], frame_index: int, history_indices: Sequence[int],
                 include_current: bool) -> Dict[int, float]:
    """Mean weight per tau over pixels, averaged across aggregated levels."""
    if not masks:
        return {}
    taus = ([0] if include_current else []) + [frame_index - i for i in history_indices]
    per_level = np.array([[float(m.data[t].mean()) for t in range(m.shape[0])] for m in masks.values()])
    return {tau: float(w) for tau, w in zip(taus, per_level.mean(axis=0))}


def track_step(state: TrackState, frame: np.ndarray) -> Tuple[TrackState, BBox]:
    """Advance one frame; mutates and returns `state` with the new box."""
    net = state.net
    cfg = net.config
    tr = cfg.tracker
    frame = _check_frame(frame)
    frame_index = state.frame_index + 1
    side = tr.patch_side
    center = side // 2

    history_indices = [idx for idx, _ in state.history]
    history = [pyr for _, pyr in state.history]

    best = None
    for s, factor in enumerate(scale_factors(tr)):
        pyramid = net.frame_pyramid(crop_patch(frame, state.bbox, factor, cfg))
        feature, masks = net.search_feature(pyramid, history)
        response = respond(state.model, feature).data
        if factor != 1.0:
            response = response * tr.scale_penalty
        flat = int(np.argmax(response))
        score = response.flat[flat]
        if best is None or score > best[0]:
            best = (score, s, factor, flat, pyramid, feature, masks)

    _, s, factor, flat, pyramid, feature, masks = best
    row, col = divmod(flat, side)
    crop_w, crop_h = crop_size(state.bbox, factor, tr.padding)
    dy = (row - center) * crop_h / side
    dx = (col - center) * crop_w / side
    new_box = state.bbox.moved(dx, dy, factor)

    recentered = np.roll(feature.data, shift=(center - row, center - col), axis=(1, 2))
    state.model = _detach_model(update_model(state.model, Tensor(recentered), tr.update_rate))
    if tr.T > 0:
        state.history.append((frame_index, _detach_pyramid(pyramid)))
    state.weight_stats.append(_tau_weights(masks, frame_index, history_indices, cfg.aggregate.include_current))
    state.bbox = new_box
    state.frame_index = frame_index
    logger.debug(f"frame {frame_index}: scale {s} peak ({row}, {col}) -> ({new_box.cx:.2f}, {new_box.cy:.2f})")
    return state, new_box


@dataclass
class TrackResult:
    boxes: List[BBox]
    seconds: float
    weight_stats: List[Dict[int, float]]

    @property
    def fps(self) -> float:
        steps = max(len(self.boxes) - 1, 1)
        return steps / self.seconds if self.seconds > 0 else float("inf")


def track_sequence(frames: Sequence[np.ndarray], init_box: BBox, net: SataNetwork,
                   desc: Optional[str] = None) -> TrackResult:
    """
    One-pass run: init on frame 0, then track every later frame.
    The timer covers track_step calls only.
    """
    state = init(frames[0], init_box, net)
    boxes, elapsed = [state.bbox], 0.0
    for frame in tqdm(frames[1:], desc=desc or "tracking", leave=False, disable=not progress_enabled(logger)):
        start = time.perf_counter()
        state, box = track_step(state, frame)
        elapsed += time.perf_counter() - start
        boxes.append(box)
    return TrackResult(boxes=boxes, seconds=elapsed, weight_stats=state.weight_stats)
