"""Density models for measurement patches.

All log-densities are in nats; entropies and cross-entropies returned by
this module are in bits.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Union

import numpy as np
from scipy.linalg import LinAlgError, cho_solve, cholesky, solve_triangular
from scipy.special import logsumexp

from ._rng import make_rng
from .errors import NumericalError, ShapeError, SizingError, UnsupportedModelError
from .io import KIND_GAUSSIAN, KIND_GMM, read_container, write_container

LN2 = np.log(2.0)
LOG_2PI = np.log(2.0 * np.pi)
LAMBDA_REL = 1e-4


@dataclass(frozen=True)
class PatchBatch:
    """``patches`` is ``(count, patch_side**2)``, rows are flattened patches."""

    patches: np.ndarray
    patch_side: int

    def __post_init__(self):
        p = np.asarray(self.patches, dtype=np.float64)
        if p.ndim == 1:
            p = p[:, None]
        if p.ndim != 2 or p.shape[1] != self.patch_side**2:
            raise ShapeError(f"patches of shape {p.shape} do not match patch_side={self.patch_side}")
        object.__setattr__(self, "patches", p)

    def __len__(self):
        return self.patches.shape[0]

    @property
    def dim(self):
        return self.patches.shape[1]


def _as_array(batch):
    if isinstance(batch, PatchBatch):
        return batch.patches
    a = np.asarray(batch, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


@dataclass(frozen=True)
class GaussianModel:
    mean: np.ndarray
    chol_cov: np.ndarray
    lambda_reg: float = 0.0

    @property
    def dim(self):
        return self.mean.shape[0]


@dataclass(frozen=True)
class GmmModel:
    weights: np.ndarray
    means: np.ndarray
    chols: np.ndarray
    lambda_reg: float = 0.0
    # mean train log-likelihood (nats) after each E-step; not serialized
    history: tuple = field(default=(), compare=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be positive and sum to 1")

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def n_components(self):
        return self.weights.shape[0]

    def component(self, k):
        return GaussianModel(self.means[k], self.chols[k], self.lambda_reg)


DensityModel = Union[GaussianModel, GmmModel]


def default_lambda(patches):
    return LAMBDA_REL * float(np.mean(np.var(patches, axis=0, ddof=1)))


def _cholesky(cov, lambda_reg):
    try:
        return cholesky(cov, lower=True, check_finite=True)
    except (LinAlgError, ValueError) as exc:
        raise NumericalError(
            f"covariance Cholesky failed with lambda_reg={lambda_reg:.3g}; increase lambda_reg"
        ) from exc


class GaussianMoments:
    """Streaming accumulator for the sample mean and unbiased covariance.

    Sums are taken about a shift fixed by the first chunk, which keeps the
    one-pass covariance formula well conditioned.
    """

    def __init__(self, dim):
        self.dim = dim
        self.n = 0
        self.shift = None
        self.s1 = np.zeros(dim)
        self.s2 = np.zeros((dim, dim))

    def update(self, chunk):
        chunk = _as_array(chunk)
        if chunk.shape[1] != self.dim:
            raise ShapeError(f"chunk dim {chunk.shape[1]} does not match accumulator dim {self.dim}")
        if self.shift is None:
            self.shift = chunk.mean(axis=0)
        c = chunk - self.shift
        self.n += chunk.shape[0]
        self.s1 += c.sum(axis=0)
        self.s2 += c.T @ c

    def finalize(self, lambda_reg=None):
        if self.n < 2:
            raise SizingError(f"fitting a Gaussian needs at least 2 patches, got {self.n}")
        mean_c = self.s1 / self.n
        cov = (self.s2 - np.outer(self.s1, mean_c)) / (self.n - 1)
        cov = 0.5 * (cov + cov.T)
        if lambda_reg is None:
            lambda_reg = LAMBDA_REL * float(np.mean(np.diag(cov)))
        cov[np.diag_indices_from(cov)] += lambda_reg
        return GaussianModel(self.shift + mean_c, _cholesky(cov, lambda_reg), float(lambda_reg))


def fit_gaussian(train, lambda_reg=None):
    """Sample mean and unbiased covariance plus ``lambda_reg·I``.

    ``lambda_reg=None`` uses 1e-4 times the mean per-pixel variance.
    """
    y = _as_array(train)
    acc = GaussianMoments(y.shape[1])
    acc.update(y)
    return acc.finalize(lambda_reg)


def fit_gaussian_streaming(chunks, dim, lambda_reg=None):
    acc = GaussianMoments(dim)
    for chunk in chunks:
        acc.update(chunk)
    return acc.finalize(lambda_reg)


# --------------------------------------------------------------------------
# evaluation


def _check_dim(model, y):
    y = np.asarray(y, dtype=np.float64)
    single = y.ndim == 1
    y2 = y[None] if single else y
    if y2.shape[-1] != model.dim:
        raise ShapeError(f"patch length {y2.shape[-1]} does not match model dim {model.dim}")
    return y2, single


def _gauss_logpdf(mean, chol, y2):
    z = solve_triangular(chol, (y2 - mean).T, lower=True, check_finite=False)
    return (-0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol)))
            - 0.5 * mean.shape[0] * LOG_2PI)


def _gauss_grad(mean, chol, y2):
    return -cho_solve((chol, True), (y2 - mean).T, check_finite=False).T


def _component_logpdfs(model, y2):
    return np.stack([np.log(model.weights[k]) + _gauss_logpdf(model.means[k], model.chols[k], y2)
                     for k in range(model.n_components)], axis=1)


def log_prob(model, patch):
    """Exact log-density in nats of one patch ``(d,)`` or a batch ``(n, d)``."""
    y2, single = _check_dim(model, patch)
    if isinstance(model, GaussianModel):
        lp = _gauss_logpdf(model.mean, model.chol_cov, y2)
    else:
        lp = logsumexp(_component_logpdfs(model, y2), axis=1)
    return float(lp[0]) if single else lp


def log_prob_grad_y(model, patch):
    """∇_y log p(y) for one patch or a batch."""
    y2, single = _check_dim(model, patch)
    if isinstance(model, GaussianModel):
        g = _gauss_grad(model.mean, model.chol_cov, y2)
    else:
        lc = _component_logpdfs(model, y2)
        resp = np.exp(lc - logsumexp(lc, axis=1, keepdims=True))
        g = np.zeros_like(y2)
        for k in range(model.n_components):
            g += resp[:, k:k + 1] * _gauss_grad(model.means[k], model.chols[k], y2)
    return g[0] if single else g


def log_prob_and_grad(model, patches):
    """Batched ``(log p, ∇_y log p)`` sharing the whitening solves."""
    y2, _ = _check_dim(model, patches)
    if isinstance(model, GaussianModel):
        return _gauss_logpdf_grad(model.mean, model.chol_cov, y2)
    lps, grads = zip(*(_gauss_logpdf_grad(model.means[k], model.chols[k], y2)
                       for k in range(model.n_components)))
    lc = np.log(model.weights)[None, :] + np.stack(lps, axis=1)
    lse = logsumexp(lc, axis=1)
    resp = np.exp(lc - lse[:, None])
    g = np.zeros_like(y2)
    for k in range(model.n_components):
        g += resp[:, k:k + 1] * grads[k]
    return lse, g


def _gauss_logpdf_grad(mean, chol, y2):
    z = solve_triangular(chol, (y2 - mean).T, lower=True, check_finite=False)
    lp = -0.5 * np.sum(z * z, axis=0) - np.sum(np.log(np.diag(chol))) - 0.5 * mean.shape[0] * LOG_2PI
    g = -solve_triangular(chol, z, lower=True, trans="T", check_finite=False).T
    return lp, g


def gaussian_entropy_analytic(model):
    d = model.dim
    return float(0.5 * d * np.log2(2.0 * np.pi * np.e) + np.sum(np.log2(np.diag(model.chol_cov))))


def cross_entropy(model, test):
    """Held-out cross-entropy ``-(1/M) Σ log2 p(y_i)`` in bits per patch."""
    y = _as_array(test)
    if y.shape[0] == 0:
        raise SizingError("cross-entropy needs at least one test patch")
    return float(-np.mean(log_prob(model, y)) / LN2)


# --------------------------------------------------------------------------
# coupled fit: gradients through (mean, covariance) estimation


def _phi(x):
    """Lower triangle with the diagonal halved."""
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def cholesky_vjp(L, g_L):
    """Symmetric cotangent on Σ for ``L = cholesky(Σ)`` given ``g_L``."""
    P = _phi(L.T @ np.tril(g_L))
    X = solve_triangular(L, P, lower=True, trans="T", check_finite=False)      # L⁻ᵀ P
    X = solve_triangular(L, X.T, lower=True, trans="T", check_finite=False).T  # · L⁻¹
    return 0.5 * (X + X.T)


def triangular_solve_vjp(L, Z, g_Z):
    """Cotangents ``(g_L, g_R)`` for ``Z = L⁻¹ R`` with ``L`` lower-triangular."""
    g_R = solve_triangular(L, g_Z, lower=True, trans="T", check_finite=False)
    return -np.tril(g_R @ Z.T), g_R


def coupled_cross_entropy_vjp(train, test, lambda_reg):
    """Cross-entropy of held-out patches under a Gaussian fitted to ``train``.

    Forward: sample mean, sample covariance + ridge, Cholesky, whitening
    solve, log-determinant. The reverse pass runs the adjoint of each
    stage in turn. Returns ``(ce_bits, grad_train, grad_test, model)``:
    ``grad_train`` is the pathway through the fitted parameters,
    ``grad_test`` the direct pathway through the evaluated patches.
    ``lambda_reg`` is held constant.
    """
    y_tr = _as_array(train)
    y_te = _as_array(test)
    n, m = y_tr.shape[0], y_te.shape[0]
    if n < 2:
        raise SizingError(f"fitting a Gaussian needs at least 2 patches, got {n}")
    if m < 1:
        raise SizingError("cross-entropy needs at least one test patch")
    d = y_tr.shape[1]

    mu = y_tr.mean(axis=0)
    C = y_tr - mu
    sigma = C.T @ C / (n - 1)
    sigma[np.diag_indices_from(sigma)] += lambda_reg
    L = _cholesky(sigma, lambda_reg)
    R = (y_te - mu).T
    Z = solve_triangular(L, R, lower=True, check_finite=False)
    diag = np.diag(L)
    ce_nats = 0.5 * np.sum(Z * Z) / m + np.sum(np.log(diag)) + 0.5 * d * LOG_2PI

    s = 1.0 / LN2
    g_L, g_R = triangular_solve_vjp(L, Z, s * Z / m)
    g_L[np.diag_indices_from(g_L)] += s / diag
    g_sigma = cholesky_vjp(L, g_L)
    grad_test = g_R.T
    g_mu = -g_R.sum(axis=1)
    grad_train = (2.0 / (n - 1)) * (C @ g_sigma) + g_mu[None, :] / n
    model = GaussianModel(mu, L, float(lambda_reg))
    return float(ce_nats * s), grad_train, grad_test, model


def fit_gaussian_differentiable(train, test, lambda_reg, cotangent=1.0, kind="gaussian"):
    """VJP of the held-out cross-entropy (bits) with respect to the train
    patches, i.e. the fitted-parameter pathway only."""
    if kind != "gaussian":
        raise UnsupportedModelError(
            f"'{kind}' fitting is iterative and cannot be differentiated; "
            "only Gaussian models support the coupled gradient")
    _, grad_train, _, _ = coupled_cross_entropy_vjp(train, test, lambda_reg)
    return cotangent * grad_train


# --------------------------------------------------------------------------
# Gaussian mixture via EM


def _kmeanspp(y, k, rng):
    n = y.shape[0]
    centers = [int(rng.integers(n))]
    d2 = np.sum((y - y[centers[0]]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = int(rng.integers(n))
        centers.append(idx)
        d2 = np.minimum(d2, np.sum((y - y[idx]) ** 2, axis=1))
    return y[centers].copy()


def fit_gmm_em(train, K, max_iters=100, tol=1e-6, lambda_reg=None, seed=0):
    """Fit a K-component full-covariance mixture by expectation maximization.

    Initial means come from distance-weighted (k-means++) seeding, initial
    covariances are the pooled sample covariance. Each M-step covariance
    receives ``+ lambda_reg·I``. Iteration stops once the mean train
    log-likelihood improves by less than ``tol`` nats.
    """
    y = _as_array(train)
    n, d = y.shape
    if K < 1:
        raise ValueError("K must be positive")
    if n < K:
        raise SizingError(f"need at least K={K} train patches, got {n}")
    if lambda_reg is None:
        lambda_reg = default_lambda(y)
    if K == 1:
        g = fit_gaussian(y, lambda_reg)
        ll = float(np.mean(log_prob(g, y)))
        return GmmModel(np.ones(1), g.mean[None], g.chol_cov[None], g.lambda_reg, history=(ll,))

    rng = make_rng(seed, "gmm_init")
    reg = lambda_reg * np.eye(d)
    pooled = np.cov(y, rowvar=False).reshape(d, d) + reg
    means = _kmeanspp(y, K, rng)
    covs = np.repeat(pooled[None], K, axis=0)
    weights = np.full(K, 1.0 / K)
    chols = np.stack([_cholesky(c, lambda_reg) for c in covs])
    history = []
    reseeds = 0
    for _ in range(max_iters):
        lc = np.stack([np.log(weights[k]) + _gauss_logpdf(means[k], chols[k], y) for k in range(K)], axis=1)
        lse = logsumexp(lc, axis=1)
        ll = float(np.mean(lse))
        if history and ll - history[-1] < tol:
            history.append(ll)
            break
        history.append(ll)
        resp = np.exp(lc - lse[:, None])
        nk = resp.sum(axis=0)
        empty = np.flatnonzero(nk < 1e-12)
        if empty.size:
            reseeds += 1
            if reseeds > 3:
                raise NumericalError(f"mixture component(s) {empty.tolist()} stayed empty after 3 reseeds")
            worst = np.argsort(lse)[: empty.size]
            for k, i in zip(empty, worst):
                # hard-assign the least-explained patch to the empty component
                resp[i] = 0.0
                resp[i, k] = 1.0
            nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ y) / nk[:, None]
        for k in range(K):
            c = y - means[k]
            cov = (resp[:, k, None] * c).T @ c / nk[k]
            covs[k] = 0.5 * (cov + cov.T) + reg
            chols[k] = _cholesky(covs[k], lambda_reg)
    weights = weights / weights.sum()
    return GmmModel(weights, means, chols, float(lambda_reg), history=tuple(history))


# --------------------------------------------------------------------------
# persistence


def save_model(path, model):
    if isinstance(model, GaussianModel):
        write_container(path, KIND_GAUSSIAN, model.dim, 1,
                        [model.mean, model.chol_cov.ravel(), [model.lambda_reg]])
    elif isinstance(model, GmmModel):
        blocks = []
        for k in range(model.n_components):
            blocks += [[model.weights[k]], model.means[k], model.chols[k].ravel()]
        write_container(path, KIND_GMM, model.dim, model.n_components, blocks + [[model.lambda_reg]])
    else:
        raise UnsupportedModelError(f"cannot serialize {type(model).__name__}")


def load_model(path):
    kind, d, k, payload = read_container(path)
    if kind == KIND_GAUSSIAN:
        mean = payload[:d]
        chol = payload[d:d + d * d].reshape(d, d)
        return GaussianModel(mean, chol, float(payload[d + d * d]))
    if kind == KIND_GMM:
        step = 1 + d + d * d
        comp = payload[: k * step].reshape(k, step)
        return GmmModel(comp[:, 0].copy(), comp[:, 1:1 + d].copy(),
                        comp[:, 1 + d:].reshape(k, d, d).copy(), float(payload[k * step]))
    raise ValueError(f"{path}: container kind {kind} is not a density model")
