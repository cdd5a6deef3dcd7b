"""
Parameter set and forward branches shared by the tracker and the trainer.

Parameters live in one flat name -> Tensor mapping so they can be
differentiated, decayed, saved and loaded uniformly:

    backbone.stage{i}        tiny CNN stage kernels (tiny_cnn only)
    lateral.{i}              3x3 lateral projections, stages shallow to deep
    merge.smooth             optional post-merge 3x3 conv
    align.{level}.conv{j}    offset-predicting stack, level 0 = P^l
    align.{level}.deform     deformable kernel
    embed.shared.conv{j}     embedding network (embed.{level}.conv{j} when not shared)
"""

import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from app.aggregation import EmbeddingNetWeights, aggregate_level
from app.align import LAYER_COUNTS, AlignNetWeights, align_pair
from app.autodiff import Tensor, as_tensor
from app.backbone import (
    FeaturePyramid,
    build_pyramid,
    extract_features,
    stage_channels,
    topdown_merge,
)
from app.cf_layer import make_label, respond, solve_filter, training_loss
from app.config import AppConfig
from app.utils import make_rng

logger = logging.getLogger(__name__)


def _he_normal(rng: np.random.Generator, shape: Tuple[int, ...], dtype) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def _center_identity(channels: int, side: int, dtype) -> np.ndarray:
    kernel = np.zeros((channels, channels, side, side), dtype=dtype)
    kernel[np.arange(channels), np.arange(channels), side // 2, side // 2] = 1.0
    return kernel


def init_params(cfg: AppConfig, seed: Optional[int] = None) -> Dict[str, Tensor]:
    """
    Fresh parameters for `cfg`.

    He-normal everywhere except: the last offset layer of each level is zero,
    deformable kernels and the smoothing conv start as center-tap identities.
    """
    rng = make_rng(cfg.runtime.seed if seed is None else seed)
    dtype = cfg.runtime.np_dtype
    bb, al, ag = cfg.backbone, cfg.align, cfg.aggregate
    channels = bb.pyramid_channels
    params: Dict[str, np.ndarray] = {}

    if bb.kind == "tiny_cnn":
        prev = 3
        for i, width in enumerate(bb.widths):
            params[f"backbone.stage{i}"] = _he_normal(rng, (width, prev, 3, 3), dtype)
            prev = width

    for i, c_in in enumerate(stage_channels(bb)):
        params[f"lateral.{i}"] = _he_normal(rng, (channels, c_in, 3, 3), dtype)

    if bb.smooth_merge:
        params["merge.smooth"] = _center_identity(channels, 3, dtype)

    k = al.kernel_side
    for level, n_layers in enumerate(LAYER_COUNTS):
        widths = [2 * channels] + [al.hidden] * (n_layers - 1) + [2 * k * k]
        for j in range(n_layers):
            shape = (widths[j + 1], widths[j], 3, 3)
            last = j == n_layers - 1
            params[f"align.{level}.conv{j}"] = np.zeros(shape, dtype=dtype) if last else _he_normal(rng, shape, dtype)
        params[f"align.{level}.deform"] = _center_identity(channels, k, dtype)

    owners = ["shared"] if ag.shared_embedding else [str(level) for level in range(len(LAYER_COUNTS))]
    for owner in owners:
        prev = channels
        for j, (side, width) in enumerate(zip((1, 3, 1), ag.widths)):
            params[f"embed.{owner}.conv{j}"] = _he_normal(rng, (width, prev, side, side), dtype)
            prev = width

    return {name: Tensor(value) for name, value in params.items()}


def param_group(name: str) -> str:
    return name.split(".", 1)[0]


def params_l2(params: Dict[str, Tensor]) -> float:
    return float(sum(np.sum(np.square(p.data, dtype=np.float64)) for p in params.values()))


@dataclass(frozen=True)
class SataNetwork:
    """Configuration plus parameters; every branch of the tracker runs through here."""

    config: AppConfig
    params: Dict[str, Tensor] = field(repr=False)

    @classmethod
    def create(cls, cfg: AppConfig, seed: Optional[int] = None) -> "SataNetwork":
        return cls(cfg, init_params(cfg, seed))

    def with_params(self, params: Dict[str, Tensor]) -> "SataNetwork":
        missing = sorted(set(self.params) - set(params))
        if missing:
            raise KeyError(f"with_params: missing parameters {missing}")
        return SataNetwork(self.config, {name: as_tensor(params[name]) for name in self.params})

    def names(self, group: Optional[str] = None) -> List[str]:
        return [n for n in self.params if group is None or param_group(n) == group]

    # ----- weight views -----
    def stage_kernels(self) -> Optional[List[Tensor]]:
        if self.config.backbone.kind != "tiny_cnn":
            return None
        return [self.params[f"backbone.stage{i}"] for i in range(len(self.config.backbone.widths))]

    def lateral_kernels(self) -> List[Tensor]:
        return [self.params[f"lateral.{i}"] for i in range(len(self.config.backbone.widths))]

    def align_weights(self) -> AlignNetWeights:
        stacks = tuple(
            tuple(self.params[f"align.{level}.conv{j}"] for j in range(n_layers))
            for level, n_layers in enumerate(LAYER_COUNTS)
        )
        kernels = tuple(self.params[f"align.{level}.deform"] for level in range(len(LAYER_COUNTS)))
        return AlignNetWeights(stacks, kernels, dilation=self.config.align.dilation)

    def embedding(self, level: int) -> EmbeddingNetWeights:
        owner = "shared" if self.config.aggregate.shared_embedding else str(level)
        return EmbeddingNetWeights(tuple(self.params[f"embed.{owner}.conv{j}"] for j in range(3)))

    # ----- branches -----
    def frame_pyramid(self, patch: Tensor) -> FeaturePyramid:
        stages = extract_features(patch, self.config.backbone, self.stage_kernels())
        return build_pyramid(stages, self.lateral_kernels())

    def merge(self, pyramid: FeaturePyramid) -> Tensor:
        return topdown_merge(pyramid, self.config.backbone.input_side, self.params.get("merge.smooth"))

    def template_feature(self, patch: Tensor) -> Tensor:
        return self.merge(self.frame_pyramid(patch))

    def search_feature(self, search: FeaturePyramid,
                       history: Sequence[FeaturePyramid] = ()) -> Tuple[Tensor, Dict[int, Tensor]]:
        """
        Merged search feature after per-level alignment and aggregation.

        Levels outside aggregate.levels keep the search feature. With no
        history or no levels selected, alignment and aggregation are skipped.
        Returns the merged map and the weight mask of each aggregated level.
        """
        ag = self.config.aggregate
        if not history or not ag.levels:
            return self.merge(search), {}

        selected = sorted(set(ag.levels))
        weights = self.align_weights()
        warped = [align_pair(search, hist, weights, selected) for hist in history]
        levels, masks = list(search.levels), {}
        for level in selected:
            aligned = [pyramid.levels[level] for pyramid in warped]
            levels[level], masks[level] = aggregate_level(search.levels[level], aligned, self.embedding(level),
                                                          ag.include_current)
        return self.merge(FeaturePyramid(tuple(levels))), masks

    def clip_loss(self, template_patch: Tensor, search_patch: Tensor,
                  history_patches: Sequence[Tensor] = ()) -> Tensor:
        """Data term ||g - y||^2 for one clip: solve on the template, respond on the search."""
        cf = self.config.cf
        side = self.config.backbone.input_side
        label = make_label(side, side, cf.bandwidth)
        model = solve_filter(self.template_feature(template_patch), label, cf.lam)
        history = [self.frame_pyramid(p) for p in history_patches]
        feature, _ = self.search_feature(self.frame_pyramid(search_patch), history)
        return training_loss(respond(model, feature), label)
