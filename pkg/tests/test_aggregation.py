import numpy as np
import pytest

from app.aggregation import EmbeddingNetWeights, aggregate, aggregate_level, embed, weight_mask
from app.autodiff import Tensor
from app.errors import ShapeError


def _embedding_weights(rng, c=3, hidden=4, out=3):
    return EmbeddingNetWeights((
        Tensor(rng.standard_normal((hidden, c, 1, 1))),
        Tensor(rng.standard_normal((hidden, hidden, 3, 3))),
        Tensor(rng.standard_normal((out, hidden, 1, 1))),
    ))


def test_mask_normalizes_per_pixel(rng):
    for _ in range(1000):
        t, c = rng.integers(1, 5), rng.integers(1, 4)
        search = Tensor(rng.standard_normal((c, 3, 4)))
        others = [Tensor(rng.standard_normal((c, 3, 4))) for _ in range(t)]
        mask = weight_mask(others, search).data
        assert mask.shape == (t, 3, 4)
        np.testing.assert_allclose(mask.sum(axis=0), 1.0, atol=1e-6)
        assert np.all(mask > 0)


def test_identical_embeddings_give_uniform_weights(rng):
    e = Tensor(rng.standard_normal((4, 5, 5)))
    mask = weight_mask([e, e, e, e], e).data
    np.testing.assert_array_equal(mask, np.full((4, 5, 5), 0.25))


def test_aggregate_is_convex(rng):
    for _ in range(50):
        frames = [Tensor(rng.standard_normal((2, 4, 4))) for _ in range(3)]
        mask = weight_mask([Tensor(rng.standard_normal((2, 4, 4))) for _ in range(3)],
                           Tensor(rng.standard_normal((2, 4, 4))))
        out = aggregate(frames, mask).data
        stacked = np.stack([f.data for f in frames])
        assert np.all(out >= stacked.min(axis=0) - 1e-12)
        assert np.all(out <= stacked.max(axis=0) + 1e-12)


def test_identical_frames_are_a_fixed_point(rng):
    f = Tensor(rng.standard_normal((3, 4, 4)))
    weights = _embedding_weights(rng)
    out, mask = aggregate_level(f, [f, f], weights)
    np.testing.assert_allclose(out.data, f.data, atol=1e-12)
    assert mask.shape == (3, 4, 4)


def test_include_current_controls_frame_count(rng):
    f = Tensor(rng.standard_normal((3, 4, 4)))
    history = [Tensor(rng.standard_normal((3, 4, 4))) for _ in range(2)]
    weights = _embedding_weights(rng)
    _, with_current = aggregate_level(f, history, weights, include_current=True)
    _, history_only = aggregate_level(f, history, weights, include_current=False)
    assert with_current.shape[0] == 3
    assert history_only.shape[0] == 2


def test_current_frame_outweighs_dissimilar_history(rng):
    f = Tensor(rng.standard_normal((3, 4, 4)))
    weights = _embedding_weights(rng)
    _, mask = aggregate_level(f, [Tensor(-f.data)], weights)
    assert np.all(mask.data[0] >= mask.data[1] - 1e-12)


def test_embed_checks_channels(rng):
    with pytest.raises(ShapeError):
        embed(Tensor(rng.standard_normal((5, 4, 4))), _embedding_weights(rng))


def test_embedding_weights_check_kernel_sides(rng):
    with pytest.raises(ShapeError):
        EmbeddingNetWeights((
            Tensor(rng.standard_normal((4, 3, 3, 3))),
            Tensor(rng.standard_normal((4, 4, 3, 3))),
            Tensor(rng.standard_normal((3, 4, 1, 1))),
        ))


def test_aggregate_frame_count_mismatch(rng):
    mask = Tensor(np.full((2, 3, 3), 0.5))
    with pytest.raises(ShapeError):
        aggregate([Tensor(np.zeros((1, 3, 3)))] * 3, mask)
