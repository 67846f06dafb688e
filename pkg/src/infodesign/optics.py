"""Optical forward models: PSF generation, image formation and their adjoints.

Two encoder parameterizations are supported:

* :class:`HeightMapParams` -- a pixelwise diffractive height map lit by a
  uniform plane wave and propagated to the sensor with the angular spectrum
  method.
* :class:`LensletPsfParams` -- a PSF built directly as an equal-weight sum
  of 2-D Gaussians whose means and Cholesky-factored covariances are free.

Image formation is circular convolution, with the PSF indexed so that pixel
``(0, 0)`` is the zero shift. Every map has a hand-written vector-Jacobian
product; nothing here relies on automatic differentiation.

Optimizer coordinates: ``vector()`` flattens an encoder into the
dimensionless coordinates the optimizer steps in (heights in waves, i.e.
units of ``wavelength / delta_n``; lenslet parameters in sensor pixels).
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DegeneratePsfError, DomainError, ShapeError, SizingError
from .io import KIND_HEIGHT_MAP, KIND_LENSLETS, read_container, write_container

CHOL_FLOOR = 1e-3


@dataclass(frozen=True)
class HeightMapParams:
    heights: np.ndarray
    pixel_pitch: float
    wavelength: float
    delta_n: float
    distance: float
    h_max: float | None = None

    def __post_init__(self):
        h = np.asarray(self.heights, dtype=np.float64)
        if h.ndim != 2:
            raise ShapeError(f"height map must be 2-D, got shape {h.shape}")
        if not np.all(np.isfinite(h)):
            raise DomainError("height map contains non-finite values")
        for name in ("pixel_pitch", "wavelength", "distance"):
            if getattr(self, name) <= 0:
                raise DomainError(f"{name} must be positive")
        object.__setattr__(self, "heights", h)
        if self.h_max is None:
            object.__setattr__(self, "h_max", self.wave_height)

    @property
    def wave_height(self):
        """Height giving one full wave of phase delay."""
        return self.wavelength / self.delta_n

    @property
    def side(self):
        return self.heights.shape[0]

    def vector(self):
        return self.heights.ravel() / self.wave_height

    def with_vector(self, v):
        return dataclasses.replace(self, heights=np.reshape(v, self.heights.shape) * self.wave_height)

    def grad_vector(self, grad):
        return grad.heights.ravel() * self.wave_height

    def project(self):
        return dataclasses.replace(self, heights=np.clip(self.heights, 0.0, self.h_max))


@dataclass(frozen=True)
class LensletPsfParams:
    """Gaussian-sum PSF. ``means`` is ``(K, 2)`` as (x=column, y=row) in
    pixels; ``chol_factors`` is ``(K, 2, 2)`` lower-triangular.
    ``chol_floor`` is the smallest diagonal factor kept by :meth:`project`
    (a spot-size limit, in pixels)."""

    means: np.ndarray
    chol_factors: np.ndarray
    side: int
    chol_floor: float = CHOL_FLOOR

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64).reshape(-1, 2)
        chol = np.tril(np.asarray(self.chol_factors, dtype=np.float64).reshape(-1, 2, 2))
        if means.shape[0] < 1 or chol.shape[0] != means.shape[0]:
            raise ShapeError(f"need K >= 1 matching means/factors, got {means.shape[0]} and {chol.shape[0]}")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "chol_factors", chol)

    @property
    def count(self):
        return self.means.shape[0]

    @property
    def weights(self):
        return np.full(self.count, 1.0 / self.count)

    def vector(self):
        L = self.chol_factors
        return np.concatenate([self.means.ravel(), np.stack([L[:, 0, 0], L[:, 1, 0], L[:, 1, 1]], 1).ravel()])

    def with_vector(self, v):
        k = self.count
        v = np.asarray(v, dtype=np.float64)
        means = v[: 2 * k].reshape(k, 2)
        tri = v[2 * k:].reshape(k, 3)
        L = np.zeros((k, 2, 2))
        L[:, 0, 0], L[:, 1, 0], L[:, 1, 1] = tri[:, 0], tri[:, 1], tri[:, 2]
        return dataclasses.replace(self, means=means, chol_factors=L)

    def grad_vector(self, grad):
        return grad.vector()

    def project(self):
        L = self.chol_factors.copy()
        L[:, 0, 0] = np.maximum(L[:, 0, 0], self.chol_floor)
        L[:, 1, 1] = np.maximum(L[:, 1, 1], self.chol_floor)
        means = np.clip(self.means, 0.0, self.side - 1.0)
        return dataclasses.replace(self, means=means, chol_factors=L)


EncoderParams = Union[HeightMapParams, LensletPsfParams]


@dataclass(frozen=True)
class Psf:
    values: np.ndarray
    normalization: float

    @property
    def side(self):
        return self.values.shape[0]

    def peak_fraction(self):
        return float(self.values.max() / self.values.sum())


def encoder_side(params):
    return params.side


# --------------------------------------------------------------------------
# height-map encoder


def phase_from_height(params):
    return (2.0 * np.pi / params.wavelength) * params.delta_n * params.heights


def transfer_function(side, z, wavelength, pitch):
    """Angular spectrum transfer function with a hard evanescent cutoff."""
    f = np.fft.fftfreq(side, d=pitch)
    arg = 1.0 / wavelength**2 - f[:, None] ** 2 - f[None, :] ** 2
    propagating = arg >= 0
    kz = np.sqrt(np.where(propagating, arg, 0.0))
    return np.where(propagating, np.exp(1j * 2.0 * np.pi * z * kz), 0.0)


def angular_spectrum_propagate(field, z, wavelength, pitch):
    field = np.asarray(field, dtype=np.complex128)
    if field.ndim != 2 or field.shape[0] != field.shape[1]:
        raise ShapeError(f"field must be square, got shape {field.shape}")
    n = field.shape[0]
    if n & (n - 1):
        raise SizingError(f"field side must be a power of two, got {n}")
    if z < 0:
        raise DomainError(f"propagation distance must be nonnegative, got {z}")
    if z == 0:
        return field.copy()
    H = transfer_function(n, z, wavelength, pitch)
    return np.fft.ifft2(np.fft.fft2(field) * H)


def _heightmap_forward(params):
    u0 = np.exp(1j * phase_from_height(params))
    H = transfer_function(params.side, params.distance, params.wavelength, params.pixel_pitch)
    u = np.fft.ifft2(np.fft.fft2(u0) * H)
    intensity = u.real**2 + u.imag**2
    return u0, H, u, intensity


def psf_from_heightmap(params):
    n = params.side
    if n & (n - 1):
        raise SizingError(f"height map side must be a power of two, got {n}")
    _, _, _, intensity = _heightmap_forward(params)
    total = intensity.sum()
    if not total > 0:
        raise DegeneratePsfError("propagated field carries no energy")
    return Psf(intensity / total, float(total))


def _heightmap_psf_vjp(params, g_psf):
    u0, H, u, intensity = _heightmap_forward(params)
    total = intensity.sum()
    p = intensity / total
    g_int = (g_psf - np.sum(g_psf * p)) / total
    g_u = 2.0 * g_int * u
    g_u0 = np.fft.ifft2(np.fft.fft2(g_u) * np.conj(H))
    g_phase = np.real(np.conj(g_u0) * 1j * u0)
    g_h = g_phase * (2.0 * np.pi / params.wavelength) * params.delta_n
    return dataclasses.replace(params, heights=g_h)


# --------------------------------------------------------------------------
# lenslet encoder


def _lenslet_terms(params, side):
    """Per-lenslet whitened offsets and Gaussian values on the pixel grid."""
    idx = np.arange(side, dtype=np.float64)
    dx = idx[None, None, :] - params.means[:, 0, None, None]
    dy = idx[None, :, None] - params.means[:, 1, None, None]
    L = params.chol_factors
    a = L[:, 0, 0, None, None]
    b = L[:, 1, 0, None, None]
    c = L[:, 1, 1, None, None]
    z1 = dx / a
    z2 = (dy - b * z1) / c
    gauss = np.exp(-0.5 * (z1**2 + z2**2)) / (2.0 * np.pi * a * c)
    return z1, z2, a, b, c, gauss


def psf_from_lenslets(params, side):
    *_, gauss = _lenslet_terms(params, side)
    raw = gauss.mean(axis=0)
    total = raw.sum()
    if not total >= 1e-12:
        raise DegeneratePsfError(f"lenslet PSF mass on the sensor is {total:.3g}")
    return Psf(raw / total, float(total))


def _lenslet_psf_vjp(params, g_psf):
    side = g_psf.shape[0]
    z1, z2, a, b, c, gauss = _lenslet_terms(params, side)
    raw = gauss.mean(axis=0)
    total = raw.sum()
    p = raw / total
    g_raw = (g_psf - np.sum(g_psf * p)) / total
    w = g_raw[None] * gauss / params.count
    g_means = np.stack([
        np.sum(w * (z1 / a - z2 * b / (a * c)), axis=(1, 2)),
        np.sum(w * (z2 / c), axis=(1, 2)),
    ], axis=1)
    g_L = np.zeros_like(params.chol_factors)
    g_L[:, 0, 0] = np.sum(w * (z1**2 / a - b * z1 * z2 / (a * c) - 1.0 / a), axis=(1, 2))
    g_L[:, 1, 0] = np.sum(w * (z1 * z2 / c), axis=(1, 2))
    g_L[:, 1, 1] = np.sum(w * (z2**2 / c - 1.0 / c), axis=(1, 2))
    return dataclasses.replace(params, means=g_means, chol_factors=g_L)


# --------------------------------------------------------------------------
# shared


def compute_psf(params):
    if isinstance(params, HeightMapParams):
        return psf_from_heightmap(params)
    if isinstance(params, LensletPsfParams):
        return psf_from_lenslets(params, params.side)
    raise TypeError(f"unknown encoder type {type(params).__name__}")


def psf_vjp(params, g_psf):
    """Pull a cotangent on the normalized PSF back to encoder parameters."""
    if isinstance(params, HeightMapParams):
        return _heightmap_psf_vjp(params, g_psf)
    return _lenslet_psf_vjp(params, g_psf)


def image_formation(scene, psf):
    """Circular convolution of a scene (or a stack of scenes) with the PSF."""
    scene = np.asarray(scene, dtype=np.float64)
    kernel = psf.values if isinstance(psf, Psf) else np.asarray(psf)
    if scene.shape[-2:] != kernel.shape:
        raise ShapeError(f"scene grid {scene.shape[-2:]} does not match PSF grid {kernel.shape}")
    out = np.fft.ifft2(np.fft.fft2(scene) * np.fft.fft2(kernel)).real
    return np.maximum(out, 0.0)


def convolution_psf_vjp(scene, cotangent):
    """Cotangent on the PSF of ``x = scene ⊛ psf`` (summed over a stack)."""
    G = np.fft.fft2(cotangent) * np.conj(np.fft.fft2(scene))
    if G.ndim == 3:
        G = G.sum(axis=0)
    return np.fft.ifft2(G).real


def forward_vjp(params, scene, cotangent):
    """Vector-Jacobian product of θ ↦ image_formation(scene, psf(θ)).

    ``scene`` and ``cotangent`` may be single images or matching stacks, in
    which case the contributions are summed. The result has the same type
    as ``params`` with each array field holding its gradient.
    """
    scene = np.asarray(scene, dtype=np.float64)
    cotangent = np.asarray(cotangent, dtype=np.float64)
    if scene.shape != cotangent.shape:
        raise ShapeError(f"cotangent shape {cotangent.shape} does not match scene shape {scene.shape}")
    return psf_vjp(params, convolution_psf_vjp(scene, cotangent))


def simulate(params, scenes):
    """Noiseless measurements for a stack of scenes."""
    return image_formation(scenes, compute_psf(params))


# --------------------------------------------------------------------------
# initializers and persistence


def zone_plate_heights(side, pixel_pitch, wavelength, delta_n, focal_length):
    """Height map of a wrapped thin-lens (Fresnel) phase profile."""
    c = (np.arange(side) - side / 2) * pixel_pitch
    r2 = c[:, None] ** 2 + c[None, :] ** 2
    phase = np.mod(-np.pi * r2 / (wavelength * focal_length), 2.0 * np.pi)
    return phase / (2.0 * np.pi) * wavelength / delta_n


def save_encoder(path, params):
    if isinstance(params, HeightMapParams):
        n = params.side
        write_container(path, KIND_HEIGHT_MAP, n * n, n, [
            params.heights.ravel(),
            [params.pixel_pitch, params.wavelength, params.delta_n, params.distance, params.h_max],
        ])
    else:
        write_container(path, KIND_LENSLETS, params.side, params.count, [
            params.means.ravel(), params.chol_factors.ravel(), [params.chol_floor],
        ])


def load_encoder(path):
    kind, dim, k, payload = read_container(path)
    if kind == KIND_HEIGHT_MAP:
        heights = payload[:dim].reshape(k, k)
        pitch, wl, dn, z, h_max = payload[dim:dim + 5]
        return HeightMapParams(heights, pitch, wl, dn, z, h_max)
    if kind == KIND_LENSLETS:
        means = payload[: 2 * k].reshape(k, 2)
        chol = payload[2 * k: 6 * k].reshape(k, 2, 2)
        floor = float(payload[6 * k]) if payload.size > 6 * k else CHOL_FLOOR
        return LensletPsfParams(means, chol, int(dim), floor)
    raise ValueError(f"{path}: container kind {kind} is not an encoder")
