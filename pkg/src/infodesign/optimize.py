"""Encoder optimization: coupled IDEAL and the alternating IDEAL-IO scheme.

IDEAL differentiates the held-out cross-entropy through the Gaussian fit
itself, so every step carries the mean/covariance adjoint over the full
train batch. IDEAL-IO refits the density with no gradient bookkeeping
(streamed moments for Gaussians, EM for mixtures) every ``refit_every``
steps and only differentiates the evaluation of a fixed model.
"""
from __future__ import annotations

import csv
import dataclasses
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import density, mi, noise as noise_mod, optics
from ._rng import derive_seed, make_rng
from .errors import InfoDesignError, OptimizationError, SizingError, UnsupportedModelError
from .scenes import split

IDEAL = "ideal"
IDEAL_IO = "ideal_io"
TRACE_COLUMNS = ("step", "loss_bits", "h_y_bits", "h_ygx_bits", "refit", "wall_time_s", "peak_alloc_bytes")


@dataclass(frozen=True)
class DensitySpec:
    kind: str = "gaussian"
    components: int = 4
    em_iters: int = 100
    tol: float = 1e-6
    lambda_reg: float | None = None

    def __post_init__(self):
        if self.kind not in ("gaussian", "gmm"):
            raise ValueError(f"density kind must be 'gaussian' or 'gmm', got {self.kind!r}")


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("adam", "sgd"):
            raise ValueError(f"optimizer kind must be 'adam' or 'sgd', got {self.kind!r}")


@dataclass(frozen=True)
class OptConfig:
    mode: str = IDEAL_IO
    steps: int = 100
    # None picks 1e-2 for lenslets and 0.1 waves (0.1·λ/Δn) for height maps
    step_size: float | None = None
    refit_every: int = 1
    patch_side: int = 4
    train_patch_count: int | None = None
    test_patch_count: int = 1024
    density: DensitySpec = field(default_factory=DensitySpec)
    optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    seed: int = 0
    train_fraction: float = 0.8
    # scenes simulated per step (random subset); None uses every scene
    scene_batch: int | None = None
    enforce_sizing_rule: bool = True
    track_memory: bool = False

    def __post_init__(self):
        if self.mode not in (IDEAL, IDEAL_IO):
            raise ValueError(f"mode must be 'ideal' or 'ideal_io', got {self.mode!r}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.step_size is not None and self.step_size < 0:
            raise ValueError(f"step_size must be nonnegative, got {self.step_size}")
        if self.refit_every < 1:
            raise ValueError(f"refit_every must be >= 1, got {self.refit_every}")
        if self.patch_side < 1 or self.test_patch_count < 1:
            raise ValueError("patch_side and test_patch_count must be positive")
        if self.train_patch_count is None:
            object.__setattr__(self, "train_patch_count", 5 * self.patch_side**2)
        elif self.enforce_sizing_rule and self.train_patch_count < 5 * self.patch_side**2:
            raise SizingError(
                f"train_patch_count={self.train_patch_count} is below 5*P^2={5 * self.patch_side**2}; "
                "set enforce_sizing_rule=False to override")
        if self.train_patch_count < 2:
            raise SizingError("train_patch_count must be at least 2")

    def alpha_for(self, params):
        if self.step_size is not None:
            return self.step_size
        return 0.1 if isinstance(params, optics.HeightMapParams) else 1e-2


@dataclass
class StepRecord:
    step: int
    loss_bits: float
    h_y_bits: float
    h_ygx_bits: float
    refit: bool
    wall_time_s: float
    peak_alloc_bytes: int


@dataclass
class OptTrace:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def column(self, name):
        return np.array([getattr(r, name) for r in self.records])

    @property
    def losses(self):
        return self.column("loss_bits")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_COLUMNS)
            for r in self.records:
                w.writerow([r.step, repr(r.loss_bits), repr(r.h_y_bits), repr(r.h_ygx_bits),
                            int(r.refit), f"{r.wall_time_s:.6f}", r.peak_alloc_bytes])


@dataclass(frozen=True)
class Problem:
    train: np.ndarray
    test: np.ndarray
    noise: object


@dataclass(frozen=True)
class OptState:
    params: object
    problem: Problem
    step: int = 0
    model: object = None
    moment1: np.ndarray | None = None
    moment2: np.ndarray | None = None
    last: StepRecord | None = None


def smoothed(values, window=20):
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, len(values) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


# --------------------------------------------------------------------------
# batch simulation


def _scene_batch(stack, config, seed, label):
    if config.scene_batch is None or config.scene_batch >= stack.shape[0]:
        return stack
    pick = make_rng(seed, label).choice(stack.shape[0], size=config.scene_batch, replace=False)
    return stack[np.sort(pick)]


def _train_seed_and_scenes(state, config):
    seed = derive_seed(config.seed, "train", state.step)
    return seed, _scene_batch(state.problem.train, config, seed, "scenes")


def _train_batch(state, config):
    seed, scenes_tr = _train_seed_and_scenes(state, config)
    meas = optics.simulate(state.params, scenes_tr)
    index = mi.sample_offsets(meas.shape[0], meas.shape[1], config.patch_side,
                              config.train_patch_count, derive_seed(seed, "offsets"))
    return scenes_tr, meas, index, derive_seed(seed, "noise")


def _test_seed_and_scenes(state, config):
    seed = derive_seed(config.seed, "test", state.step)
    return seed, _scene_batch(state.problem.test, config, seed, "scenes")


def fit_density(state, config):
    """Fit the configured density to fresh train measurements under the
    current encoder, outside any gradient computation."""
    spec = config.density
    _, meas, index, nseed = _train_batch(state, config)
    noise = state.problem.noise
    if spec.kind == "gaussian":
        chunks = (y for *_, y in mi.noisy_chunks(noise, meas, index, nseed))
        return density.fit_gaussian_streaming(chunks, config.patch_side**2, spec.lambda_reg)
    _, _, y = mi.noisy_patches(noise, meas, index, nseed)
    return fit_patches(y, spec, derive_seed(config.seed, "em", state.step))


# --------------------------------------------------------------------------
# coupled IDEAL objective


@dataclass(frozen=True)
class IdealLoss:
    loss: float
    grad: object
    grad_coupled: object
    h_y: float
    h_y_given_x: float
    model: object


def ideal_loss_grad(params, noise, train_scenes, test_scenes, patch_side, train_count, test_count,
                    train_seed, test_seed, lambda_reg=None):
    """Held-out Gaussian cross-entropy minus H(Y|X), differentiated through
    the fit. ``grad_coupled`` is the ∂ψ/∂θ pathway alone.

    ``lambda_reg=None`` sets the ridge from the current train batch, then
    treats it as a constant.
    """
    meas_tr = optics.simulate(params, train_scenes)
    idx_tr = mi.sample_offsets(meas_tr.shape[0], meas_tr.shape[1], patch_side, train_count,
                               derive_seed(train_seed, "offsets"))
    x_tr, n_tr, y_tr = mi.noisy_patches(noise, meas_tr, idx_tr, derive_seed(train_seed, "noise"))

    meas_te = optics.simulate(params, test_scenes)
    idx_te = mi.sample_offsets(meas_te.shape[0], meas_te.shape[1], patch_side, test_count,
                               derive_seed(test_seed, "offsets"))
    x_te, n_te, y_te = mi.noisy_patches(noise, meas_te, idx_te, derive_seed(test_seed, "noise"))

    if lambda_reg is None:
        lambda_reg = density.default_lambda(y_tr)
    ce, g_tr, g_te, model = density.coupled_cross_entropy_vjp(y_tr, y_te, lambda_reg)
    m = y_te.shape[0]
    h_ygx = float(np.sum(noise_mod.pixel_entropies(noise, x_te)) / m)

    gx_te = -g_te * noise_mod.noise_jacobian(noise, x_te, n_te) + noise_mod.conditional_entropy_grad(noise, x_te) / m
    gx_tr = -g_tr * noise_mod.noise_jacobian(noise, x_tr, n_tr)
    psf_cot_te = optics.convolution_psf_vjp(test_scenes, mi.scatter(gx_te, idx_te, meas_te.shape[0]))
    psf_cot_tr = optics.convolution_psf_vjp(train_scenes, mi.scatter(gx_tr, idx_tr, meas_tr.shape[0]))
    grad = optics.psf_vjp(params, psf_cot_te + psf_cot_tr)
    grad_coupled = optics.psf_vjp(params, psf_cot_tr)
    return IdealLoss(-(ce - h_ygx), grad, grad_coupled, ce, h_ygx, model)


# --------------------------------------------------------------------------
# parameter updates


def _update(state, config, grad_vec):
    alpha = config.alpha_for(state.params)
    v = state.params.vector()
    if config.optimizer.kind == "sgd":
        v_new = v - alpha * grad_vec
        m1, m2 = state.moment1, state.moment2
    else:
        o = config.optimizer
        t = state.step + 1
        m1 = np.zeros_like(v) if state.moment1 is None else state.moment1
        m2 = np.zeros_like(v) if state.moment2 is None else state.moment2
        m1 = o.beta1 * m1 + (1 - o.beta1) * grad_vec
        m2 = o.beta2 * m2 + (1 - o.beta2) * grad_vec**2
        mhat = m1 / (1 - o.beta1**t)
        vhat = m2 / (1 - o.beta2**t)
        v_new = v - alpha * mhat / (np.sqrt(vhat) + o.eps)
    return state.params.with_vector(v_new).project(), m1, m2


class _StepMeter:
    def __init__(self, track_memory):
        self.track = track_memory
        self.peak = 0

    def __enter__(self):
        if self.track:
            if not tracemalloc.is_tracing():
                tracemalloc.start()
            tracemalloc.reset_peak()
            self.base = tracemalloc.get_traced_memory()[0]
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = max(time.perf_counter() - self.t0, 1e-9)
        if self.track:
            self.peak = max(tracemalloc.get_traced_memory()[1] - self.base, 0)
        return False


def _finish(state, config, meter_cb, loss, h_y, h_ygx, grad, model, refit):
    grad_vec = state.params.grad_vector(grad)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad_vec))):
        raise OptimizationError("non-finite loss or gradient", state.step, last_good=state)
    params, m1, m2 = _update(state, config, grad_vec)
    if not np.all(np.isfinite(params.vector())):
        raise OptimizationError("non-finite parameters after update", state.step, last_good=state)
    rec = StepRecord(state.step, float(loss), float(h_y), float(h_ygx), bool(refit), 0.0, 0)
    meter_cb(rec)
    return dataclasses.replace(state, params=params, step=state.step + 1, model=model,
                               moment1=m1, moment2=m2, last=rec)


def ideal_io_step(state, config):
    """Refit on schedule with gradients frozen, then step θ against the
    fixed model."""
    if config.mode != IDEAL_IO:
        raise ValueError("ideal_io_step requires mode='ideal_io'")
    with _StepMeter(config.track_memory) as meter:
        refit = state.step % config.refit_every == 0 or state.model is None
        model = state.model
        if refit:
            try:
                model = fit_density(state, config)
            except InfoDesignError as exc:
                raise type(exc)(f"density fit failed at step {state.step}: {exc}") from exc
        seed, scenes_te = _test_seed_and_scenes(state, config)
        r = mi.evaluate_mi_loss(state.params, model, state.problem.noise, scenes_te,
                                config.patch_side, seed, config.test_patch_count)
        pending = []
        new = _finish(state, config, pending.append, r.loss, r.h_y, r.h_y_given_x, r.grad, model, refit)
    return _stamp(new, pending[0], meter)


def ideal_step(state, config):
    """One coupled step: fit inside the differentiation path, both pathways."""
    if config.mode != IDEAL:
        raise ValueError("ideal_step requires mode='ideal'")
    if config.density.kind != "gaussian":
        raise UnsupportedModelError(
            f"IDEAL cannot use density kind '{config.density.kind}': its fit is not differentiable")
    with _StepMeter(config.track_memory) as meter:
        train_seed, scenes_tr = _train_seed_and_scenes(state, config)
        test_seed, scenes_te = _test_seed_and_scenes(state, config)
        r = ideal_loss_grad(state.params, state.problem.noise, scenes_tr, scenes_te, config.patch_side,
                            config.train_patch_count, config.test_patch_count, train_seed, test_seed,
                            config.density.lambda_reg)
        pending = []
        new = _finish(state, config, pending.append, r.loss, r.h_y, r.h_y_given_x, r.grad, r.model, True)
    return _stamp(new, pending[0], meter)


def _stamp(state, rec, meter):
    rec.wall_time_s = meter.elapsed
    rec.peak_alloc_bytes = int(meter.peak)
    return state


def make_problem(scenes, noise, config):
    train, test = split(scenes, config.train_fraction, derive_seed(config.seed, "split"))
    return Problem(train.images, test.images, noise)


def run(scenes, encoder_init, noise, config, callback=None):
    """Run ``config.steps`` steps and return ``(params, trace, model)``.

    The returned model is refit once on measurements of the final design.
    """
    if config.mode == IDEAL and config.density.kind != "gaussian":
        raise UnsupportedModelError(
            f"IDEAL cannot use density kind '{config.density.kind}': its fit is not differentiable")
    state = OptState(encoder_init.project(), make_problem(scenes, noise, config))
    step_fn = ideal_step if config.mode == IDEAL else ideal_io_step
    trace = OptTrace()
    for _ in range(config.steps):
        state = step_fn(state, config)
        trace.records.append(state.last)
        if callback is not None:
            callback(state)
    final_cfg = config if config.mode == IDEAL_IO else dataclasses.replace(config, mode=IDEAL_IO)
    model = fit_density(state, final_cfg)
    return state.params, trace, model


def fit_patches(y, spec, seed):
    """Fit ``spec`` (a :class:`DensitySpec`) to noisy patches ``y``."""
    if spec.kind == "gaussian":
        return density.fit_gaussian(y, spec.lambda_reg)
    return density.fit_gmm_em(y, spec.components, spec.em_iters, spec.tol, spec.lambda_reg, seed=seed)


def evaluate_design(params, scenes, noise, patch_side, spec, train_count, test_count, seed):
    """Held-out MI of a fixed design.

    The scenes are split in half: the density named by ``spec`` is fit to
    noisy patches from the first half and evaluated on fresh patches from
    the second. Returns an :class:`~infodesign.mi.MiEstimate`.
    """
    stack = mi._stack(scenes)
    if stack.shape[0] < 2:
        raise SizingError("held-out evaluation needs at least 2 scenes")
    meas = optics.simulate(params, stack)
    half = meas.shape[0] // 2
    idx_tr = mi.sample_offsets(half, meas.shape[1], patch_side, train_count, derive_seed(seed, "eval_train"))
    _, _, y_tr = mi.noisy_patches(noise, meas[:half], idx_tr, derive_seed(seed, "eval_train_noise"))
    model = fit_patches(y_tr, spec, derive_seed(seed, "eval_em"))
    idx_te = mi.sample_offsets(meas.shape[0] - half, meas.shape[1], patch_side, test_count,
                               derive_seed(seed, "eval_test"))
    x_te = mi.gather(meas[half:], idx_te)
    return mi.estimate_mi(model, noise, x_te, derive_seed(seed, "eval_test_noise"))


# --------------------------------------------------------------------------
# gradient verification


def check_gradient(fun, x0, grad, probes, seed=0, rel_step=1e-4, floor=1e-10):
    """Worst relative error between ``grad`` and central differences of
    ``fun`` at ``probes`` random coordinates of ``x0``.

    Probes where both values fall below ``floor`` count as passing.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64).ravel()
    rng = make_rng(seed, "fd_probes")
    coords = rng.choice(x0.size, size=min(probes, x0.size), replace=False)
    worst = 0.0
    for j in coords:
        h = rel_step * (1.0 + abs(x0.flat[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp.flat[j] += h
        xm.flat[j] -= h
        num = (fun(xp) - fun(xm)) / (2.0 * h)
        ana = grad[j]
        if abs(ana) < floor and abs(num) < floor:
            continue
        worst = max(worst, abs(ana - num) / max(abs(ana), abs(num)))
    return worst


def finite_diff_check(params, model, noise, scenes, patch_side, seed, probes, count=256):
    """Check the fixed-model MI loss gradient in optimizer coordinates."""
    _, grad = mi.mi_loss_grad(params, model, noise, scenes, patch_side, seed, count)

    def fun(v):
        loss, _ = mi.mi_loss_grad(params.with_vector(v), model, noise, scenes, patch_side, seed, count)
        return loss

    return check_gradient(fun, params.vector(), params.grad_vector(grad), probes, seed=seed)
