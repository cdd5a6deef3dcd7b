"""
Alignment of a historical pyramid onto the search frame.

For every level: concatenate search and historical features, predict a
per-pixel offset for each deformable tap, then resample the historical
feature at the displaced taps and contract with the deformable kernel.
"""

import logging
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from app.autodiff import (
    Tensor,
    add,
    as_tensor,
    bilinear_sample,
    concat_channels,
    conv2d,
    relu,
    slice_axis0,
    stack,
    tap_contract,
)
from app.backbone import FeaturePyramid
from app.errors import ShapeError

logger = logging.getLogger(__name__)

LAYER_COUNTS = (2, 3, 3)


@dataclass(frozen=True)
class AlignNetWeights:
    """
    Offset-predicting conv stacks and deformable kernels, one per level
    (deepest first). Offset channels are interleaved per tap: channel 2k is
    the row offset of tap k, channel 2k+1 its column offset.
    """

    offset_stacks: Tuple[Tuple[Tensor, ...], ...]
    deform_kernels: Tuple[Tensor, ...]
    dilation: int = 1

    def __post_init__(self):
        counts = tuple(len(stack_) for stack_ in self.offset_stacks)
        if counts != LAYER_COUNTS:
            raise ShapeError(f"align: offset stacks must have {LAYER_COUNTS} layers, got {counts}")
        if len(self.deform_kernels) != len(LAYER_COUNTS):
            raise ShapeError(f"align: need {len(LAYER_COUNTS)} deformable kernels, got {len(self.deform_kernels)}")
        for level, (stack_, kernel) in enumerate(zip(self.offset_stacks, self.deform_kernels)):
            k = kernel.shape[-1]
            if stack_[-1].shape[0] != 2 * k * k:
                raise ShapeError(
                    f"align: level {level} final layer outputs {stack_[-1].shape[0]} channels, expected {2 * k * k}"
                )

    @property
    def kernel_side(self) -> int:
        return self.deform_kernels[0].shape[-1]


def predict_offsets(f_search: Tensor, f_hist: Tensor, weights: AlignNetWeights, level: int) -> Tensor:
    """OffsetField [2*K*K, h, w] for one pyramid level (0 = deepest)."""
    f_search, f_hist = as_tensor(f_search), as_tensor(f_hist)
    if f_search.shape != f_hist.shape:
        raise ShapeError(f"predict_offsets: search {f_search.shape} and history {f_hist.shape} differ")
    if level not in range(len(LAYER_COUNTS)):
        raise ShapeError(f"predict_offsets: level {level} outside 0..{len(LAYER_COUNTS) - 1}")

    x = concat_channels(f_search, f_hist)
    layers = weights.offset_stacks[level]
    for j, kernel in enumerate(layers):
        x = conv2d(x, kernel, padding="same", dilation=weights.dilation)
        if j < len(layers) - 1:
            x = relu(x)
    return x


def tap_grid(kernel_side: int, h: int, w: int) -> np.ndarray:
    """Undisplaced sampling points per tap, shape [K*K, 2, h, w], taps in row-major order."""
    r = kernel_side // 2
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    grid = np.empty((kernel_side * kernel_side, 2, h, w))
    for u in range(kernel_side):
        for v in range(kernel_side):
            k = u * kernel_side + v
            grid[k, 0] = rows + (u - r)
            grid[k, 1] = cols + (v - r)
    return grid


def deformable_conv(f_hist: Tensor, offsets: Tensor, kernel: Tensor) -> Tensor:
    """
    Deformable convolution with border-clamped bilinear taps.

    Output at p sums kernel[:, :, u, v] * f_hist(p + (u - r, v - r) + offset_k(p)).
    """
    f_hist, offsets, kernel = as_tensor(f_hist), as_tensor(offsets), as_tensor(kernel)
    c, h, w = f_hist.shape
    k = kernel.shape[-1]
    if offsets.shape != (2 * k * k, h, w):
        raise ShapeError(f"deformable_conv: offsets {offsets.shape} do not match [{2 * k * k},{h},{w}]")
    if kernel.shape[1] != c:
        raise ShapeError(f"deformable_conv: kernel expects {kernel.shape[1]} channels, feature has {c}")

    grid = tap_grid(k, h, w).astype(f_hist.dtype)
    samples = []
    for tap in range(k * k):
        points = add(Tensor(grid[tap]), slice_axis0(offsets, 2 * tap, 2 * tap + 2))
        samples.append(bilinear_sample(f_hist, points))
    return tap_contract(stack(samples), kernel)


def align_level(f_search: Tensor, f_hist: Tensor, weights: AlignNetWeights, level: int) -> Tensor:
    offsets = predict_offsets(f_search, f_hist, weights, level)
    return deformable_conv(f_hist, offsets, weights.deform_kernels[level])


def align_pair(search: FeaturePyramid, hist: FeaturePyramid, weights: AlignNetWeights,
               levels: Optional[Sequence[int]] = None) -> FeaturePyramid:
    """
    Warp every requested level of `hist` onto `search`. Levels are never mixed;
    levels outside `levels` are passed through unaligned.
    """
    if len(search.levels) != len(hist.levels) or len(search.levels) != len(LAYER_COUNTS):
        raise ShapeError("align_pair: both pyramids need all three levels")
    wanted = range(len(LAYER_COUNTS)) if levels is None else set(levels)
    aligned = []
    for i, (fs, fh) in enumerate(zip(search.levels, hist.levels)):
        aligned.append(align_level(fs, fh, weights, i) if i in wanted else fh)
    return FeaturePyramid(tuple(aligned))
