"""
Per-frame feature extraction and the three-level feature pyramid.

Stages are listed shallow to deep (62, 31, 15 for a 125 px patch);
pyramid levels are listed deepest first so index 0 is always P^l.
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from app.autodiff import (
    Tensor,
    add,
    as_tensor,
    conv2d,
    interpolation_matrix,
    relu,
    upsample_bilinear,
)
from app.config import BackboneConfig
from app.errors import ShapeError

logger = logging.getLogger(__name__)

# ITU-R BT.601 luma
LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True)
class FeaturePyramid:
    """Projected levels [P^l, P^{l-1}, P^{l-2}] and the optional merged map."""

    levels: Tuple[Tensor, ...]
    merged: Optional[Tensor] = None

    @property
    def sides(self) -> Tuple[int, ...]:
        return tuple(level.shape[-1] for level in self.levels)

    def with_merged(self, merged: Tensor) -> "FeaturePyramid":
        return FeaturePyramid(self.levels, merged)


def stage_padding(side: int) -> str:
    """A stride-2 3x3 stage floor-halves odd sides with 'valid' and even sides with 'same'."""
    return "valid" if side % 2 else "same"


def normalize_patch(pixels: np.ndarray, mean: Sequence[float]) -> np.ndarray:
    """Scale 0..255 pixels to [0, 1] and subtract the fixed per-channel mean."""
    return pixels / 255.0 - np.asarray(mean, dtype=pixels.dtype)[:, None, None]


def _check_patch(patch: Tensor, config: BackboneConfig) -> None:
    if patch.shape != (3, config.input_side, config.input_side):
        raise ShapeError(
            f"extract_features: patch must be [3,{config.input_side},{config.input_side}], got {patch.shape}"
        )


def _check_stage_sides(stages: Sequence[Tensor], config: BackboneConfig) -> None:
    sides = tuple(s.shape[-1] for s in stages)
    if sides != config.stage_sides:
        raise ShapeError(f"backbone stage sides {sides} != expected {config.stage_sides}")


def handcrafted_channels(patch: np.ndarray) -> np.ndarray:
    """Grayscale plus x and y intensity gradients, shape [3,h,w]."""
    gray = np.tensordot(LUMA.astype(patch.dtype), patch, axes=(0, 0))
    gy, gx = np.gradient(gray)
    return np.stack([gray, gx, gy])


def extract_features(patch: Tensor, config: BackboneConfig,
                     stage_kernels: Optional[Sequence[Tensor]] = None) -> List[Tensor]:
    """
    Raw stage maps, shallow to deep.

    Args:
        patch: Normalized [3, side, side] patch
        config: Backbone section
        stage_kernels: One [w_i, c_{i-1}, 3, 3] kernel per stage (tiny_cnn only)

    Returns:
        Three stage maps with sides config.stage_sides

    Raises:
        ShapeError: Wrong patch side or missing stage kernels
    """
    patch = as_tensor(patch)
    _check_patch(patch, config)

    if config.kind == "handcrafted":
        base = handcrafted_channels(patch.data)
        stages = []
        for side in config.stage_sides:
            ry = interpolation_matrix(base.shape[1], side)
            rx = interpolation_matrix(base.shape[2], side)
            stages.append(Tensor(np.einsum("ij,cjk,lk->cil", ry, base, rx).astype(patch.dtype)))
    else:
        if stage_kernels is None or len(stage_kernels) != len(config.widths):
            raise ShapeError(f"extract_features: tiny_cnn needs {len(config.widths)} stage kernels")
        stages, x = [], patch
        for kernel in stage_kernels:
            x = relu(conv2d(x, kernel, padding=stage_padding(x.shape[-1]), stride=2))
            stages.append(x)

    _check_stage_sides(stages, config)
    return stages


def stage_channels(config: BackboneConfig) -> Tuple[int, ...]:
    """Input channel count seen by each lateral projection."""
    if config.kind == "handcrafted":
        return (3,) * len(config.widths)
    return tuple(config.widths)


def build_pyramid(stages: Sequence[Tensor], lateral_kernels: Sequence[Tensor]) -> FeaturePyramid:
    """Project each stage to the pyramid width with a 'same' 3x3 conv; reorder deepest first."""
    if len(stages) != len(lateral_kernels):
        raise ShapeError(f"build_pyramid: {len(stages)} stages but {len(lateral_kernels)} lateral kernels")
    projected = []
    for stage, kernel in zip(stages, lateral_kernels):
        kernel = as_tensor(kernel)
        if kernel.shape[1] != stage.shape[0]:
            raise ShapeError(
                f"build_pyramid: lateral kernel expects {kernel.shape[1]} channels, stage has {stage.shape[0]}"
            )
        projected.append(conv2d(stage, kernel, padding="same"))
    return FeaturePyramid(tuple(reversed(projected)))


def topdown_merge(pyramid: FeaturePyramid, side: int, smooth_kernel: Optional[Tensor] = None) -> Tensor:
    """
    FPN top-down pathway: upsample the coarser map, add the next level, and
    finally upsample to the patch side.
    """
    levels = pyramid.levels
    if len(levels) != 3 or any(level is None for level in levels):
        raise ShapeError(f"topdown_merge: need three pyramid levels, got {len(levels)}")
    channels = {level.shape[0] for level in levels}
    if len(channels) != 1:
        raise ShapeError(f"topdown_merge: levels disagree on channels: {sorted(channels)}")

    merged = levels[0]
    for finer in levels[1:]:
        merged = add(upsample_bilinear(merged, finer.shape[-2:]), finer)
    merged = upsample_bilinear(merged, (side, side))
    if smooth_kernel is not None:
        merged = conv2d(merged, smooth_kernel, padding="same")
    return merged
