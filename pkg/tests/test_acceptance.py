"""Acceptance criteria 1-8, each at its stated tolerance.

Every test prints one ``criterion N: PASS|FAIL (...)`` line; the lines are
repeated in the terminal summary. Run alone with
``pytest -v tests/test_acceptance.py``.
"""
import csv
import json
from pathlib import Path

import numpy as np
import pytest

from infodesign import bench, cli, density, mi, noise, optics, optimize, scenes
from infodesign._rng import make_rng
from infodesign.optimize import IDEAL, IDEAL_IO, DensitySpec, OptConfig

from oracles import LOG2_2PIE

pytestmark = pytest.mark.slow

WL, DN = 650e-9, 0.4599


def heightmap(side, z, seed, label="init"):
    h = make_rng(seed, label).uniform(0, 1, (side, side)) * WL / DN
    return optics.HeightMapParams(h, 2e-6, WL, DN, z)


# --------------------------------------------------------------------------
# 1. Gaussian-channel oracle


def test_criterion_1_gaussian_channel_oracle(verdict):
    worst = 0.0
    for dim in (4, 9, 16):
        rng = np.random.default_rng(dim)
        x_tr = rng.standard_normal((100_000, dim))
        x_te = rng.standard_normal((100_000, dim))
        nz = noise.GaussianNoise(1.0)
        model = density.fit_gaussian(noise.sample(nz, x_tr, dim + 1))
        est = mi.estimate_mi(model, nz, x_te, dim + 2)
        worst = max(worst, abs(est.mi_per_pixel - 0.5 * np.log2(1 + 1.0)))
    assert verdict(1, worst < 0.05, f"max |estimate - 0.5| = {worst:.4f} bits/pixel over dims 4, 9, 16; need < 0.05")


# --------------------------------------------------------------------------
# 2. gradient suite


def _suite():
    rng = np.random.default_rng(0)
    out = {}

    for nz in (noise.GaussianNoise(0.7), noise.PoissonApproxNoise(50.0)):
        x = rng.uniform(0.1, 1.0, 24)
        n = rng.standard_normal(24)
        w = rng.standard_normal(24)
        name = type(nz).__name__
        out[f"noise_jacobian[{name}]"] = optimize.check_gradient(
            lambda v: float(w @ noise.apply_noise(nz, v, n)), x, w * noise.noise_jacobian(nz, x, n), 20)
        out[f"conditional_entropy_grad[{name}]"] = optimize.check_gradient(
            lambda v: noise.conditional_entropy(nz, v), x, noise.conditional_entropy_grad(nz, x), 20)

    y = rng.normal(size=(400, 4)) @ rng.normal(size=(4, 4))
    for model in (density.fit_gaussian(y), density.fit_gmm_em(y, 3, seed=1)):
        pts = rng.normal(size=(6, 4))
        w = rng.standard_normal(6)
        g = w[:, None] * density.log_prob_grad_y(model, pts)
        out[f"log_prob_grad_y[{type(model).__name__}]"] = optimize.check_gradient(
            lambda v: float(w @ density.log_prob(model, v.reshape(6, 4))), pts.ravel(), g.ravel(), 20)

    field = np.stack(scenes.gen_correlated_field(20, 16, 2.0, 0).images)
    lens = optics.LensletPsfParams(rng.uniform(4, 12, (5, 2)), np.tile([[1.3, 0.0], [0.2, 1.1]], (5, 1, 1)), 16)
    hmap = heightmap(16, 150e-6, 0)
    nz = noise.PoissonApproxNoise(100.0)
    cot = rng.standard_normal(field[:4].shape)
    for name, p in (("lenslets", lens), ("height_map", hmap)):
        g = p.grad_vector(optics.forward_vjp(p, field[:4], cot))
        out[f"forward_vjp[{name}]"] = optimize.check_gradient(
            lambda v: float(np.sum(cot * optics.simulate(p.with_vector(v), field[:4]))), p.vector(), g, 20)

        y = mi.extract_patches(noise.sample(nz, optics.simulate(p, field), 0), 4, 2000, 1)
        model = density.fit_gaussian(y)
        out[f"ideal_io_loss[{name}]"] = optimize.finite_diff_check(p, model, nz, field, 4, seed=2, probes=20)

        def ideal(v):
            return optimize.ideal_loss_grad(p.with_vector(v), nz, field[:10], field[10:], 4, 400, 512, 3, 4, 1e-3)

        out[f"ideal_loss[{name}]"] = optimize.check_gradient(
            lambda v: ideal(v).loss, p.vector(), p.grad_vector(ideal(p.vector()).grad), 20)
    return out


def test_criterion_2_gradient_suite(verdict):
    errs = _suite()
    for name, e in errs.items():
        print(f"  {name:<45} {e:.2e}")
    worst = max(errs, key=errs.get)
    ok = errs[worst] < 1e-3
    assert verdict(2, ok, f"{len(errs)} gradients x 20 probes, worst {worst} = {errs[worst]:.2e}; need < 1e-3")


# --------------------------------------------------------------------------
# 3. upper bound


def test_criterion_3_upper_bound(verdict):
    hits = 0
    for seed in range(20):
        rng = np.random.default_rng(100 + seed)
        A = rng.normal(size=(4, 4))
        cov = A @ A.T + 0.5 * np.eye(4)
        tr = rng.multivariate_normal(np.zeros(4), cov, 2000)
        te = rng.multivariate_normal(np.zeros(4), cov, 2000)
        model = density.fit_gaussian(tr)
        nll_bits = -density.log_prob(model, te) / np.log(2)
        se = nll_bits.std(ddof=1) / np.sqrt(len(te))
        h_true = 0.5 * (4 * LOG2_2PIE + np.linalg.slogdet(cov)[1] / np.log(2))
        hits += density.cross_entropy(model, te) >= h_true - 3 * se
    assert verdict(3, hits >= 19, f"bound held in {hits}/20 trials; need >= 19")


# --------------------------------------------------------------------------
# 4. scaling trend


def test_criterion_4_scaling_trend(verdict):
    sides = [4, 8, 12, 16, 20]
    rep = bench.bench_scaling(sides, 3, 50, OptConfig(test_patch_count=256, refit_every=1))
    print(rep.summary())
    s = rep.slopes
    t_ratio = s[IDEAL]["time_per_100px_s"] / s[IDEAL_IO]["time_per_100px_s"]
    m_ratio = s[IDEAL_IO]["pixels_per_GB"] / s[IDEAL]["pixels_per_GB"]
    # refit amortization is available only to IDEAL-IO; shown for information, not gated
    amort = bench.bench_scaling(sides, 3, 20, OptConfig(test_patch_count=256, refit_every=10), modes=(IDEAL_IO,))
    t10 = s[IDEAL]["time_per_100px_s"] / amort.slopes[IDEAL_IO]["time_per_100px_s"]
    print(f"  info: IDEAL-IO with refit every 10 steps, time-slope ratio {t10:.2f}x")
    ok = t_ratio >= 3 and m_ratio >= 3
    assert verdict(4, ok, f"time-slope ratio {t_ratio:.2f}x, memory-slope ratio {m_ratio:.2f}x at refit every step; "
                          "need both >= 3")


# --------------------------------------------------------------------------
# 5. expressivity


def _expressivity(kind, seed):
    side, P = 32, 4
    if kind == "sparse":
        sc = scenes.gen_sparse_spots(60, side, 0.02, 1.0, seed)
    else:
        sc = scenes.gen_correlated_field(60, side, 2.0, seed)
    tr, te = scenes.split(sc, 0.67, seed)
    rng = make_rng(seed, "lens")
    enc = optics.LensletPsfParams(rng.uniform(4, side - 4, (4, 2)), np.tile(np.eye(2) * 1.5, (4, 1, 1)), side, 0.5)
    nz = noise.PoissonApproxNoise(100.0)
    held_out = DensitySpec("gmm", components=8, em_iters=200, tol=1e-6)
    res = []
    for dk, k in (("gaussian", 1), ("gmm", 10)):
        cfg = OptConfig(steps=200, patch_side=P, seed=seed, train_patch_count=4000, test_patch_count=1024,
                        density=DensitySpec(dk, components=4, em_iters=50), refit_every=k, step_size=0.2)
        p, _, _ = optimize.run(tr, enc, nz, cfg)
        res.append(optimize.evaluate_design(p, te, nz, P, held_out, 8000, 4000, seed).mi_per_pixel)
    return res


def test_criterion_5_expressivity(verdict):
    gains = []
    for seed in range(5):
        g, m = _expressivity("sparse", seed)
        gains.append(m - g)
        print(f"  sparse seed {seed}: gaussian-optimized {g:.4f}, gmm-optimized {m:.4f} bits/pixel")
    g, m = _expressivity("corr", 0)
    print(f"  correlated field: gaussian-optimized {g:.4f}, gmm-optimized {m:.4f} bits/pixel")
    wins = sum(d >= 0.02 for d in gains)
    ok = wins >= 4 and abs(m - g) <= 0.05
    assert verdict(5, ok, f"sparse gain >= 0.02 in {wins}/5 seeds (need >= 4); "
                          f"correlated |difference| {abs(m - g):.4f} (need <= 0.05)")


# --------------------------------------------------------------------------
# 6. Fresnel convergence


def test_criterion_6_fresnel(verdict):
    sc = scenes.gen_correlated_field(40, 32, 2.0, 0)
    enc = heightmap(32, 300e-6, 0)
    pf0 = optics.compute_psf(enc).peak_fraction()
    cfg = OptConfig(steps=500, patch_side=8, seed=0)
    p, _, _ = optimize.run(sc, enc, noise.PoissonApproxNoise(1e4), cfg)
    ratio = optics.compute_psf(p).peak_fraction() / pf0
    assert verdict(6, ratio >= 5, f"peak-pixel energy fraction grew {ratio:.1f}x; need >= 5")


# --------------------------------------------------------------------------
# 7. IDEAL vs IDEAL-IO


def test_criterion_7_mode_agreement(verdict):
    gaps = []
    for seed in range(3):
        sc = scenes.gen_correlated_field(40, 16, 2.0, seed)
        enc = heightmap(16, 150e-6, seed)
        final = []
        for mode in (IDEAL, IDEAL_IO):
            cfg = OptConfig(mode=mode, steps=600, patch_side=4, seed=seed, train_patch_count=16024,
                            test_patch_count=1602, step_size=0.03)
            _, trace, _ = optimize.run(sc, enc, noise.PoissonApproxNoise(100.0), cfg)
            final.append(optimize.smoothed(trace.losses)[-1])
        gaps.append(abs(final[0] - final[1]))
        print(f"  seed {seed}: IDEAL {final[0]:.3f}, IDEAL-IO {final[1]:.3f} bits/patch")
    assert verdict(7, max(gaps) < 0.1, f"max final smoothed-loss gap {max(gaps):.3f} bits/patch; need < 0.1")


# --------------------------------------------------------------------------
# 8. CLI determinism

# timing columns hold wall-clock and allocator readings and are masked
TIMING_COLUMNS = {"trace.csv": {"wall_time_s", "peak_alloc_bytes"},
                  "bench.csv": {"mean_step_time_s", "std_step_time_s", "mean_peak_alloc_bytes"},
                  "slopes.csv": {"time_per_100px_s", "pixels_per_GB"}}

DETERMINISM_CONFIG = {
    "seed": 5,
    "output_dir": "unused",
    "scenes": {"kind": "correlated_field", "count": 6, "side": 16, "spectral_exponent": 2.0},
    "encoder": {"kind": "height_map", "init": "random", "pixel_pitch": 2e-6, "distance": 150e-6},
    "noise": {"kind": "poisson", "photon_scale": 100.0},
    "optimize": {"steps": 5, "patch_side": 4, "test_patch_count": 256},
    "bench": {"patch_sides": [2, 3, 4, 5], "trials": 3, "steps_per_trial": 2},
    "compare": {"models": [{"kind": "gaussian"}, {"kind": "gmm", "components": 2}],
                "train_patch_count": 400, "test_patch_count": 200},
    "export": {"noiseless": True},
}


def _masked(path):
    cols = TIMING_COLUMNS.get(path.name)
    if cols is None:
        return path.read_bytes()
    with open(path) as fh:
        rows = list(csv.reader(fh))
    keep = [i for i, c in enumerate(rows[0]) if c not in cols]
    return [[r[i] for i in keep] for r in rows]


def _manifest(path):
    data = json.loads(path.read_text())
    data.pop("started")
    data.pop("finished")
    data.pop("config")
    for a in data["artifacts"]:
        if Path(a["file"]).name in TIMING_COLUMNS:
            a.pop("sha256")
            a.pop("bytes")
    return data


def _run_all(cfg_path, out, capsys):
    out.mkdir()
    base = ["--config", str(cfg_path), "--out", str(out)]
    printed = {}
    for argv in (["simulate"], ["optimize"], ["compare"], ["bench"],
                 ["estimate", "--model", str(out / "model.idio"), "--measurements", str(out / "noiseless")]):
        assert cli.main(argv + base) == 0
        printed[argv[0]] = capsys.readouterr().out
    return printed


def test_criterion_8_cli_determinism(verdict, tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "0")
    cfg_path = tmp_path / "det.json"
    cfg_path.write_text(json.dumps(DETERMINISM_CONFIG))
    out_a = _run_all(cfg_path, tmp_path / "a", capsys)
    out_b = _run_all(cfg_path, tmp_path / "b", capsys)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert files == sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file())
    diffs = []
    for rel in files:
        a, b = tmp_path / "a" / rel, tmp_path / "b" / rel
        same = _manifest(a) == _manifest(b) if rel.name.endswith("_manifest.json") else _masked(a) == _masked(b)
        if not same:
            diffs.append(str(rel))
    # simulate only echoes its output directory
    for cmd in ("optimize", "compare", "estimate"):
        if out_a[cmd] != out_b[cmd]:
            diffs.append(f"stdout of {cmd}")
    assert verdict(8, not diffs, f"{len(files)} artifacts from 5 commands compared, "
                                 f"{'differences: ' + ', '.join(diffs) if diffs else 'all identical'}")
