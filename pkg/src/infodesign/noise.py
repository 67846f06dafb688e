"""Sensor noise models with reparameterized sampling and analytic H(Y|X).

Sampling is written as ``y = g(x, n)`` with ``n`` a standard-normal draw
that depends only on the seed and the array shape, so ``y`` is a
differentiable function of ``x`` once the seed is fixed.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from ._rng import make_rng
from .errors import DomainError

LOG2_2PIE = np.log2(2.0 * np.pi * np.e)
LN2 = np.log(2.0)


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float

    def __post_init__(self):
        if not self.sigma > 0:
            raise DomainError(f"sigma must be positive, got {self.sigma}")


@dataclass(frozen=True)
class PoissonApproxNoise:
    """Gaussian surrogate of shot noise: mean ``s·x``, variance ``s·x + floor``."""

    photon_scale: float
    floor: float = 1e-3

    def __post_init__(self):
        if not self.photon_scale > 0:
            raise DomainError(f"photon_scale must be positive, got {self.photon_scale}")
        if not self.floor > 0:
            raise DomainError(f"floor must be positive, got {self.floor}")


NoiseModel = Union[GaussianNoise, PoissonApproxNoise]


def _check(model, x):
    x = np.asarray(x, dtype=np.float64)
    if isinstance(model, PoissonApproxNoise) and x.size and x.min() < 0:
        raise DomainError(f"Poisson-approximate noise needs x >= 0, min is {x.min():.3g}")
    return x


def standard_draw(shape, seed):
    """The standard-normal variates used by :func:`sample` for ``seed``."""
    return make_rng(seed, "noise").standard_normal(shape)


def apply_noise(model, x, n):
    x = _check(model, x)
    if isinstance(model, GaussianNoise):
        return x + model.sigma * n
    mean = model.photon_scale * x
    return mean + np.sqrt(mean + model.floor) * n


def noise_jacobian(model, x, n):
    """Elementwise ∂y/∂x at fixed standard draw ``n``."""
    x = _check(model, x)
    if isinstance(model, GaussianNoise):
        return np.ones_like(x)
    s = model.photon_scale
    return s + s * n / (2.0 * np.sqrt(s * x + model.floor))


def sample(model, x, seed):
    x = _check(model, x)
    return apply_noise(model, x, standard_draw(x.shape, seed))


def pixel_variance(model, x):
    x = _check(model, x)
    if isinstance(model, GaussianNoise):
        return np.full_like(x, model.sigma**2)
    return model.photon_scale * x + model.floor


def pixel_entropies(model, x):
    """Per-pixel conditional entropy in bits."""
    return 0.5 * (LOG2_2PIE + np.log2(pixel_variance(model, x)))


def conditional_entropy(model, x):
    """H(Y|X=x) in bits, summed over every pixel of ``x``."""
    return float(np.sum(pixel_entropies(model, x)))


def conditional_entropy_grad(model, x):
    x = _check(model, x)
    if isinstance(model, GaussianNoise):
        return np.zeros_like(x)
    s = model.photon_scale
    return s / (2.0 * LN2 * (s * x + model.floor))
