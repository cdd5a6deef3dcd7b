import numpy as np
import pytest

from app.autodiff import (
    DifferentiableOp,
    Tensor,
    add,
    bilinear_sample,
    conv2d,
    cosine_similarity,
    divide,
    fft2,
    finite_diff_check,
    gradients,
    ifft2,
    mul,
    reduce_sum,
    relative_error,
    resize_bilinear,
    scale,
    softmax_frames,
    tap_contract,
    upsample_bilinear,
    weighted_sum,
)
from app.errors import DegenerateDenominatorError, ShapeError


def test_conv2d_valid_example():
    x = Tensor(np.arange(1, 10, dtype=np.float64).reshape(1, 3, 3))
    k = Tensor(np.ones((1, 1, 2, 2)))
    out = conv2d(x, k)
    np.testing.assert_array_equal(out.data[0], [[12, 16], [24, 28]])


def test_conv2d_same_and_stride_shapes(rng):
    x = Tensor(rng.standard_normal((2, 7, 7)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    assert conv2d(x, k, padding="same").shape == (3, 7, 7)
    assert conv2d(x, k, padding="valid", stride=2).shape == (3, 3, 3)


def test_conv2d_channel_mismatch_raises(rng):
    with pytest.raises(ShapeError):
        conv2d(Tensor(rng.standard_normal((2, 5, 5))), Tensor(rng.standard_normal((1, 3, 3, 3))))


def test_softmax_two_frames():
    scores = Tensor(np.array([1.0, 0.0]).reshape(2, 1, 1))
    out = softmax_frames(scores).data.ravel()
    np.testing.assert_allclose(out, [0.7311, 0.2689], atol=1e-4)


def test_divide_rejects_tiny_denominator():
    with pytest.raises(DegenerateDenominatorError):
        divide(Tensor(np.ones(3)), Tensor(np.array([1.0, 1e-14, 2.0])))


def test_gradients_of_independent_input_are_zero(rng):
    a = Tensor(rng.standard_normal((2, 3)))
    b = Tensor(rng.standard_normal((2, 3)))
    loss = reduce_sum(mul(a, a))
    ga, gb = gradients(loss, [a, b])
    np.testing.assert_allclose(ga, 2 * a.data)
    np.testing.assert_array_equal(gb, np.zeros((2, 3)))


def test_gradient_accumulates_over_shared_input(rng):
    a = Tensor(rng.standard_normal(4))
    loss = reduce_sum(add(mul(a, a), a))
    (g,) = gradients(loss, [a])
    np.testing.assert_allclose(g, 2 * a.data + 1)


def test_gradients_requires_scalar_without_seed(rng):
    a = Tensor(rng.standard_normal(3))
    with pytest.raises(ShapeError):
        gradients(mul(a, a), [a])


def test_fft_inverse_recovers_input(rng):
    x = rng.standard_normal((2, 6, 5))
    np.testing.assert_allclose(ifft2(fft2(Tensor(x))).data, x, atol=1e-12)


def test_bilinear_sample_on_grid_points_reads_values(rng):
    feature = rng.standard_normal((2, 4, 5))
    rows, cols = np.meshgrid(np.arange(4.0), np.arange(5.0), indexing="ij")
    out = bilinear_sample(Tensor(feature), Tensor(np.stack([rows, cols])))
    np.testing.assert_allclose(out.data, feature, atol=1e-12)


def test_bilinear_sample_clamps_outside_points():
    feature = np.arange(6, dtype=np.float64).reshape(1, 2, 3)
    points = np.array([[[-5.0]], [[10.0]]])
    out = bilinear_sample(Tensor(feature), Tensor(points))
    assert out.data.item() == feature[0, 0, 2]


def test_resize_identity_when_sizes_match(rng):
    x = rng.standard_normal((3, 4, 6))
    np.testing.assert_allclose(resize_bilinear(Tensor(x), (4, 6)).data, x, atol=1e-12)


def test_cosine_similarity_zero_norm_is_zero(rng):
    a = rng.standard_normal((3, 2, 2))
    b = a.copy()
    b[:, 0, 0] = 0.0
    out = cosine_similarity(Tensor(a), Tensor(b)).data
    assert out[0, 0] == 0.0
    np.testing.assert_allclose(out[1:, :].ravel(), 1.0)


def test_relative_error_scales_with_gradient_size():
    assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)
    assert relative_error(1e-5, 2e-5) == pytest.approx(0.5)
    assert relative_error(0.0, 1e-6, scale=1.0) == pytest.approx(1e-6)
    assert relative_error(0.0, 0.0) == 0.0


class _WrongScale(DifferentiableOp):
    """Backward reports twice the true slope."""

    name = "wrong_scale"

    def forward(self, a, factor: float):
        return a * factor

    def backward(self, arrays, out, grad, needs, factor: float):
        return (grad * 2 * factor,)


def test_small_gradients_are_checked_relatively(rng):
    x = [rng.standard_normal((3, 4))]
    assert finite_diff_check(lambda t: scale(t, 1e-5), x).max_error <= 1e-6
    wrong = _WrongScale()
    assert finite_diff_check(lambda t: wrong(t, factor=1e-5), x).max_error > 1e-4


@pytest.mark.parametrize("name, op, shapes", [
    ("conv2d_same", lambda x, k: conv2d(x, k, padding="same"), [(2, 5, 5), (3, 2, 3, 3)]),
    ("conv2d_stride", lambda x, k: conv2d(x, k, padding="valid", stride=2), [(2, 7, 7), (2, 2, 3, 3)]),
    ("conv2d_dilated", lambda x, k: conv2d(x, k, padding="same", dilation=2), [(1, 6, 6), (2, 1, 3, 3)]),
    ("resize", lambda x: resize_bilinear(x, (7, 5)), [(2, 3, 4)]),
    ("tap_contract", tap_contract, [(4, 2, 3, 3), (3, 2, 2, 2)]),
    ("softmax", softmax_frames, [(3, 2, 2)]),
    ("weighted_sum", weighted_sum, [(3, 2, 4, 4), (3, 4, 4)]),
    ("cosine", cosine_similarity, [(3, 4, 4), (3, 4, 4)]),
    ("fft_roundtrip", lambda x: ifft2(mul(fft2(x), fft2(x))), [(2, 4, 4)]),
])
def test_finite_differences_agree(name, op, shapes, rng):
    inputs = [rng.standard_normal(s) for s in shapes]
    report = finite_diff_check(op, inputs, eps=1e-6)
    assert report.max_error <= 1e-6, name


def test_bilinear_sample_gradient_off_grid(rng):
    feature = rng.standard_normal((2, 5, 5))
    points = rng.uniform(0.1, 3.9, size=(2, 3, 3))
    points = np.where(np.abs(points - np.round(points)) < 0.05, points + 0.1, points)
    report = finite_diff_check(bilinear_sample, [feature, points], eps=1e-6)
    assert report.max_error <= 1e-6


def test_finite_diff_check_rejects_bad_eps(rng):
    with pytest.raises(ValueError):
        finite_diff_check(softmax_frames, [rng.standard_normal((2, 2, 2))], eps=1e-2)


def test_fft_parseval_and_conjugate_symmetry(rng):
    x = rng.standard_normal((2, 6, 5))
    X = fft2(Tensor(x)).data
    np.testing.assert_allclose(np.sum(np.abs(X) ** 2, axis=(1, 2)), 30 * np.sum(x ** 2, axis=(1, 2)))
    mirrored = np.roll(X[:, ::-1, ::-1], shift=(1, 1), axis=(1, 2))
    np.testing.assert_allclose(X, np.conj(mirrored), atol=1e-12)


def test_upsample_rejects_smaller_target(rng):
    x = Tensor(rng.standard_normal((1, 6, 6)))
    with pytest.raises(ShapeError):
        upsample_bilinear(x, (5, 6))
    assert upsample_bilinear(x, (12, 12)).shape == (1, 12, 12)
