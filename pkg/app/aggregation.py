"""
Adaptive temporal aggregation of aligned features.

Weights are per pixel: the cosine similarity between each aligned
embedding and the search embedding, exponentiated and normalized over the
frame axis.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence, Tuple

from app.autodiff import (
    Tensor,
    as_tensor,
    conv2d,
    cosine_similarity,
    relu,
    softmax_frames,
    stack,
    weighted_sum,
)
from app.errors import ShapeError

logger = logging.getLogger(__name__)

EMBED_KERNEL_SIDES = (1, 3, 1)


@dataclass(frozen=True)
class EmbeddingNetWeights:
    """Bottleneck 1x1 -> 3x3 -> 1x1 embedding kernels."""

    kernels: Tuple[Tensor, Tensor, Tensor]

    def __post_init__(self):
        if len(self.kernels) != len(EMBED_KERNEL_SIDES):
            raise ShapeError(f"embedding: expected 3 layers, got {len(self.kernels)}")
        sides = tuple(k.shape[-1] for k in self.kernels)
        if sides != EMBED_KERNEL_SIDES:
            raise ShapeError(f"embedding: kernel sides must be {EMBED_KERNEL_SIDES}, got {sides}")
        for prev, nxt in zip(self.kernels, self.kernels[1:]):
            if nxt.shape[1] != prev.shape[0]:
                raise ShapeError(f"embedding: layer widths do not chain: {prev.shape} -> {nxt.shape}")

    @property
    def widths(self) -> Tuple[int, ...]:
        return tuple(k.shape[0] for k in self.kernels)


def embed(feature: Tensor, weights: EmbeddingNetWeights) -> Tensor:
    feature = as_tensor(feature)
    if feature.shape[0] != weights.kernels[0].shape[1]:
        raise ShapeError(
            f"embed: network expects {weights.kernels[0].shape[1]} channels, feature has {feature.shape[0]}"
        )
    x = feature
    for j, kernel in enumerate(weights.kernels):
        x = conv2d(x, kernel, padding="same")
        if j < len(weights.kernels) - 1:
            x = relu(x)
    return x


def weight_mask(embeddings_aligned: Sequence[Tensor], embedding_search: Tensor) -> Tensor:
    """
    WeightMask [T', h, w]; sums to 1 over the frame axis at every pixel.
    Zero-norm embeddings count as similarity 0.
    """
    if not embeddings_aligned:
        raise ShapeError("weight_mask: need at least one aligned embedding")
    similarities = [cosine_similarity(e, embedding_search) for e in embeddings_aligned]
    return softmax_frames(stack(similarities))


def aggregate(features_aligned: Sequence[Tensor], mask: Tensor) -> Tensor:
    """Per-pixel convex combination sum_t mask[t] * F_t."""
    if len(features_aligned) != mask.shape[0]:
        raise ShapeError(f"aggregate: {len(features_aligned)} features but mask has {mask.shape[0]} frames")
    return weighted_sum(stack(list(features_aligned)), mask)


def aggregate_level(search_feature: Tensor, aligned: Sequence[Tensor], weights: EmbeddingNetWeights,
                    include_current: bool = True) -> Tuple[Tensor, Tensor]:
    """
    Aggregate one pyramid level.

    With include_current the search feature itself joins as the first frame
    (tau = 0). Returns the aggregated feature and its mask.
    """
    frames: List[Tensor] = ([search_feature] if include_current else []) + list(aligned)
    if not frames:
        raise ShapeError("aggregate_level: nothing to aggregate")
    e_search = embed(search_feature, weights)
    embeddings = [e_search if f is search_feature else embed(f, weights) for f in frames]
    mask = weight_mask(embeddings, e_search)
    return aggregate(frames, mask), mask
