"""
Differentiable Fourier-domain correlation filter.

The closed-form filter for one training feature X (D channels) against a
label y is, per frequency bin,

    w_hat[d] = X_hat[d] * conj(y_hat) / (sum_d X_hat[d] * conj(X_hat[d]) + lam)

and the response to a search feature Z is
g = ifft2(sum_d conj(w_hat[d]) * Z_hat[d]). Numerator and denominator are
kept apart so online updates interpolate them separately. Everything is
built from autodiff ops, so gradients reach both X and Z.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from app.autodiff import (
    Spectrum,
    Tensor,
    add,
    add_scalar,
    as_tensor,
    conjugate,
    divide,
    fft2,
    ifft2,
    imaginary_residue,
    mul,
    reduce_sum,
    scale,
    sub,
    sum_over_channels,
)
from app.errors import ShapeError

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA = 1e-4
RESPONSE_IMAG_TOLERANCE = 1e-9


@dataclass(frozen=True)
class GaussianLabel:
    """Ideal response: a Gaussian with peak 1 at bin (m // 2, n // 2)."""

    values: np.ndarray
    sigma: float

    @property
    def shape(self) -> Tuple[int, int]:
        return self.values.shape

    @property
    def center(self) -> Tuple[int, int]:
        m, n = self.values.shape
        return m // 2, n // 2

    @cached_property
    def spectrum(self) -> Spectrum:
        return Spectrum(np.fft.fft2(self.values))


def make_label(m: int, n: int, bandwidth_factor: float = 0.1) -> GaussianLabel:
    """sigma = bandwidth_factor * sqrt(m * n)."""
    if m < 3 or n < 3:
        raise ShapeError(f"make_label: label needs m, n >= 3, got {m}x{n}")
    if bandwidth_factor <= 0:
        raise ValueError(f"make_label: bandwidth factor must be positive, got {bandwidth_factor}")
    sigma = bandwidth_factor * np.sqrt(m * n)
    di = (np.arange(m) - m // 2)[:, None]
    dj = (np.arange(n) - n // 2)[None, :]
    values = np.exp(-(di ** 2 + dj ** 2) / (2 * sigma ** 2))
    values.flags.writeable = False
    return GaussianLabel(values=values, sigma=float(sigma))


@dataclass(frozen=True)
class CfModel:
    """
    numerator:   [D, m, n] spectra X_hat * conj(y_hat)
    denominator: [m, n] shared spectrum sum_d |X_hat|^2, lam not included
    """

    numerator: Tensor
    denominator: Tensor
    lam: float
    label: GaussianLabel

    @property
    def channels(self) -> int:
        return self.numerator.shape[0]

    def filter_spectrum(self) -> Tensor:
        return divide(self.numerator, add_scalar(self.denominator, self.lam))


def _check_feature(feature: Tensor, label: GaussianLabel, name: str) -> None:
    if len(feature.shape) != 3:
        raise ShapeError(f"{name}: expected a [D,m,n] feature, got {feature.shape}")
    if tuple(feature.shape[-2:]) != tuple(label.shape):
        raise ShapeError(f"{name}: feature {feature.shape[-2:]} does not match label {label.shape}")


def _fresh_terms(F_x: Tensor, label: GaussianLabel) -> Tuple[Tensor, Tensor]:
    X = fft2(F_x)
    numerator = mul(X, conjugate(label.spectrum))
    denominator = sum_over_channels(mul(X, conjugate(X)))
    return numerator, denominator


def solve_filter(F_x: Tensor, label: GaussianLabel, lam: float = DEFAULT_LAMBDA) -> CfModel:
    F_x = as_tensor(F_x)
    _check_feature(F_x, label, "solve_filter")
    if lam <= 0:
        raise ValueError(f"solve_filter: lambda must be positive, got {lam}")
    numerator, denominator = _fresh_terms(F_x, label)
    return CfModel(numerator=numerator, denominator=denominator, lam=float(lam), label=label)


def response_spectrum(model: CfModel, F_z: Tensor) -> Tensor:
    F_z = as_tensor(F_z)
    _check_feature(F_z, model.label, "respond")
    if F_z.shape[0] != model.channels:
        raise ShapeError(f"respond: model has {model.channels} channels, search feature has {F_z.shape[0]}")
    return sum_over_channels(mul(conjugate(model.filter_spectrum()), fft2(F_z)))


def respond(model: CfModel, F_z: Tensor) -> Tensor:
    """Real response map g of shape [m, n]."""
    spectrum = response_spectrum(model, F_z)
    if logger.isEnabledFor(logging.DEBUG):
        residue = imaginary_residue(spectrum)
        if residue > RESPONSE_IMAG_TOLERANCE:
            logger.debug(f"⚠️ response imaginary residue {residue:.2e}")
    return ifft2(spectrum)


def update_model(model: CfModel, F_x_new: Tensor, rate: float) -> CfModel:
    """new = (1 - rate) * old + rate * fresh, for numerator and denominator alike."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"update_model: rate must be in [0, 1], got {rate}")
    F_x_new = as_tensor(F_x_new)
    _check_feature(F_x_new, model.label, "update_model")
    fresh_num, fresh_den = _fresh_terms(F_x_new, model.label)
    numerator = add(scale(model.numerator, 1.0 - rate), scale(fresh_num, rate))
    denominator = add(scale(model.denominator, 1.0 - rate), scale(fresh_den, rate))
    return CfModel(numerator=numerator, denominator=denominator, lam=model.lam, label=model.label)


def training_loss(g: Tensor, label: GaussianLabel, params_l2: float = 0.0, lam_reg: float = 0.0) -> Tensor:
    """||g - y||^2 + lam_reg * params_l2."""
    g = as_tensor(g)
    if tuple(g.shape) != tuple(label.shape):
        raise ShapeError(f"training_loss: response {g.shape} does not match label {label.shape}")
    diff = sub(g, Tensor(label.values))
    return add_scalar(reduce_sum(mul(diff, diff)), lam_reg * params_l2)


def materialize_filter(model: CfModel) -> np.ndarray:
    """Spatial filter w [D, m, n]; only used for inspection and oracle tests."""
    return np.fft.ifft2(model.filter_spectrum().data, axes=(-2, -1)).real
