"""Patch-based mutual information estimation, Î(X;Y) = Ĥ(Y) − H(Y|X).

Patches are cut from measurement stacks at non-wrapping offsets. Noise is
drawn per chunk of ``CHUNK`` patches from a stream keyed by (seed, chunk
index), so a batch can be regenerated piecewise without holding it all in
memory and still match the all-at-once result exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import density, noise as noise_mod, optics
from ._rng import derive_seed, make_rng
from .density import LN2, PatchBatch
from .errors import ShapeError, SizingError, StateError

CHUNK = 512


@dataclass(frozen=True)
class MiEstimate:
    h_y: float
    h_y_given_x: float
    mi_total: float
    mi_per_pixel: float
    m_test: int

    @classmethod
    def assemble(cls, h_y, h_y_given_x, dim, m_test):
        mi = h_y - h_y_given_x
        return cls(float(h_y), float(h_y_given_x), float(mi), float(mi / dim), int(m_test))

    def as_dict(self):
        return {"h_y": self.h_y, "h_y_given_x": self.h_y_given_x, "mi_total": self.mi_total,
                "mi_per_pixel": self.mi_per_pixel, "m_test": self.m_test}


@dataclass(frozen=True)
class PatchIndex:
    """Patch locations ``(image, row, col)`` within an ``(n, side, side)`` stack."""

    image: np.ndarray
    row: np.ndarray
    col: np.ndarray
    patch_side: int
    image_side: int

    def __len__(self):
        return self.image.shape[0]

    def linear(self, start=0, stop=None):
        """Flat indices into the stack for patches ``start:stop``, shape ``(k, P*P)``."""
        s, p = self.image_side, self.patch_side
        sl = slice(start, stop)
        base = (self.image[sl] * s + self.row[sl]) * s + self.col[sl]
        local = (np.arange(p)[:, None] * s + np.arange(p)[None, :]).ravel()
        return base[:, None] + local[None, :]

    def chunks(self, size=CHUNK):
        n = len(self)
        for c, lo in enumerate(range(0, n, size)):
            yield c, lo, min(lo + size, n)


def sample_offsets(n_images, image_side, patch_side, count, seed):
    """Draw ``count`` distinct (image, offset) pairs, repeating only once
    every pair has been used."""
    if patch_side > image_side:
        raise SizingError(f"patch side {patch_side} exceeds measurement side {image_side}")
    if count < 1:
        raise SizingError("patch count must be at least 1")
    per_axis = image_side - patch_side + 1
    total = n_images * per_axis * per_axis
    full, rest = divmod(count, total)
    parts = [np.arange(total)] * full
    if rest:
        parts.append(make_rng(seed, "offsets").choice(total, size=rest, replace=False))
    flat = np.concatenate(parts).astype(np.int64)
    image, pos = np.divmod(flat, per_axis * per_axis)
    row, col = np.divmod(pos, per_axis)
    return PatchIndex(image, row, col, patch_side, image_side)


def gather(stack, index, start=0, stop=None):
    return np.asarray(stack).ravel()[index.linear(start, stop)]


def scatter(grads, index, n_images, start=0, stop=None, out=None):
    """Adjoint of :func:`gather`: accumulate patch cotangents onto the stack."""
    s = index.image_side
    lin = index.linear(start, stop)
    acc = np.bincount(lin.ravel(), weights=np.asarray(grads).ravel(), minlength=n_images * s * s)
    acc = acc.reshape(n_images, s, s)
    if out is None:
        return acc
    out += acc
    return out


def _stack(measurements):
    if hasattr(measurements, "images"):
        return measurements.images
    arr = np.asarray(measurements, dtype=np.float64)
    return arr[None] if arr.ndim == 2 else arr


def extract_patches(measurements, patch_side, count, seed):
    stack = _stack(measurements)
    if stack.shape[1] != stack.shape[2]:
        raise ShapeError("measurements must be square")
    index = sample_offsets(stack.shape[0], stack.shape[1], patch_side, count, seed)
    return PatchBatch(gather(stack, index), patch_side)


def noisy_chunks(noise, stack, index, seed, size=CHUNK):
    """Yield ``(lo, hi, x, n, y)`` for consecutive chunks of patches."""
    for c, lo, hi in index.chunks(size):
        x = gather(stack, index, lo, hi)
        n = noise_mod.standard_draw(x.shape, derive_seed(seed, "chunk", c))
        yield lo, hi, x, n, noise_mod.apply_noise(noise, x, n)


def noisy_patches(noise, stack, index, seed):
    """All patches of ``index`` at once as ``(x, n, y)`` arrays."""
    parts = list(noisy_chunks(noise, stack, index, seed))
    return tuple(np.concatenate([p[k] for p in parts]) for k in (2, 3, 4))


def estimate_mi(model, noise, noiseless_test, seed):
    """One-draw-per-patch MI estimate on held-out noiseless patches."""
    x = noiseless_test.patches if isinstance(noiseless_test, PatchBatch) else np.asarray(noiseless_test)
    if x.ndim != 2 or x.shape[1] != model.dim:
        raise ShapeError(f"test patches of shape {x.shape} do not match model dim {model.dim}")
    y = noise_mod.sample(noise, x, seed)
    h_y = density.cross_entropy(model, y)
    h_ygx = float(np.sum(noise_mod.pixel_entropies(noise, x)) / x.shape[0])
    return MiEstimate.assemble(h_y, h_ygx, x.shape[1], x.shape[0])


@dataclass(frozen=True)
class MiLoss:
    """Loss ``−Î`` in bits/patch, its encoder gradient, and the two entropy terms."""

    loss: float
    grad: object
    h_y: float
    h_y_given_x: float
    m_test: int


def evaluate_mi_loss(params, model, noise, scenes, patch_side, seed, count):
    """Loss and gradient with the density model held fixed.

    The gradient chains ∇_y log p through the reparameterized noise, adds
    ∂H(Y|X)/∂x, scatters patch cotangents onto the measurement stack and
    pulls them back through the optics.
    """
    if model is None:
        raise StateError("the density model has not been fitted")
    if model.dim != patch_side**2:
        raise ShapeError(f"model dim {model.dim} does not match patch side {patch_side}")
    scene_stack = _stack(scenes)
    meas = optics.simulate(params, scene_stack)
    nimg = meas.shape[0]
    index = sample_offsets(nimg, meas.shape[1], patch_side, count, derive_seed(seed, "offsets"))
    m = len(index)
    g_meas = np.zeros_like(meas)
    logp_sum = 0.0
    hygx_sum = 0.0
    for lo, hi, x, n, y in noisy_chunks(noise, meas, index, derive_seed(seed, "noise")):
        lp, g_lp = density.log_prob_and_grad(model, y)
        logp_sum += float(np.sum(lp))
        hygx_sum += float(np.sum(noise_mod.pixel_entropies(noise, x)))
        g_y = g_lp / (m * LN2)
        g_x = g_y * noise_mod.noise_jacobian(noise, x, n) + noise_mod.conditional_entropy_grad(noise, x) / m
        scatter(g_x, index, nimg, lo, hi, out=g_meas)
    h_y = -logp_sum / (m * LN2)
    h_ygx = hygx_sum / m
    grad = optics.forward_vjp(params, scene_stack, g_meas)
    return MiLoss(-(h_y - h_ygx), grad, h_y, h_ygx, m)


def mi_loss_grad(params, model, noise, scenes, patch_side, seed, count=1024):
    r = evaluate_mi_loss(params, model, noise, scenes, patch_side, seed, count)
    return r.loss, r.grad


def compare_models(models, test):
    """Rank models by held-out cross-entropy: list of ``(index, bits)``,
    ascending, ties broken by index."""
    dims = {m.dim for m in models}
    if len(dims) > 1:
        raise ShapeError(f"models disagree on dimension: {sorted(dims)}")
    scores = [(density.cross_entropy(m, test), i) for i, m in enumerate(models)]
    return [(i, ce) for ce, i in sorted(scores)]
