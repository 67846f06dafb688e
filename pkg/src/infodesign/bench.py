"""Runtime and memory scaling of IDEAL vs IDEAL-IO with patch size."""
from __future__ import annotations

import csv
import dataclasses
import math
import statistics
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import noise as noise_mod, optics, optimize, scenes as scenes_mod
from ._rng import make_rng
from .optimize import IDEAL, IDEAL_IO

ROW_COLUMNS = ("mode", "patch_side", "patch_pixels", "mean_step_time_s", "std_step_time_s",
               "mean_peak_alloc_bytes", "trials")
SLOPE_COLUMNS = ("mode", "time_per_100px_s", "pixels_per_GB")
BYTES_PER_GB = 1e9
MIN_SIZES_FOR_FIT = 4


@dataclass
class BenchRow:
    mode: str
    patch_side: int
    patch_pixels: int
    mean_step_time_s: float
    std_step_time_s: float
    mean_peak_alloc_bytes: float | None
    trials: int


@dataclass
class ScalingReport:
    rows: list = field(default_factory=list)
    # mode -> {"time_per_100px_s": ..., "pixels_per_GB": ...}; empty with < 4 sizes
    slopes: dict = field(default_factory=dict)

    def mode_rows(self, mode):
        return sorted((r for r in self.rows if r.mode == mode), key=lambda r: r.patch_pixels)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ROW_COLUMNS)
            for r in self.rows:
                mem = "" if r.mean_peak_alloc_bytes is None else f"{r.mean_peak_alloc_bytes:.1f}"
                w.writerow([r.mode, r.patch_side, r.patch_pixels, f"{r.mean_step_time_s:.6g}",
                            f"{r.std_step_time_s:.6g}", mem, r.trials])

    def slopes_to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(SLOPE_COLUMNS)
            for mode, s in self.slopes.items():
                w.writerow([mode, _fmt(s["time_per_100px_s"]), _fmt(s["pixels_per_GB"])])

    def summary(self):
        lines = [f"{'mode':<9}{'P':>4}{'pixels':>8}{'step time (s)':>22}{'peak alloc (MB)':>18}"]
        for r in self.rows:
            mem = "-" if r.mean_peak_alloc_bytes is None else f"{r.mean_peak_alloc_bytes / 1e6:.3f}"
            lines.append(f"{r.mode:<9}{r.patch_side:>4}{r.patch_pixels:>8}"
                         f"{r.mean_step_time_s:>13.5f} ± {r.std_step_time_s:<7.5f}{mem:>17}")
        if self.slopes:
            lines.append("")
            lines.append(f"{'mode':<9}{'time per +100 px (s)':>22}{'pixels per +1 GB':>20}")
            for mode, s in self.slopes.items():
                lines.append(f"{mode:<9}{_fmt(s['time_per_100px_s']):>22}{_fmt(s['pixels_per_GB']):>20}")
        return "\n".join(lines)


def _fmt(v):
    return "" if v is None else f"{v:.6g}"


def _slope(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.polyfit(x, y, 1)[0])


def fit_slopes(report):
    for mode in sorted({r.mode for r in report.rows}):
        rows = report.mode_rows(mode)
        if len(rows) < MIN_SIZES_FOR_FIT:
            continue
        px = [r.patch_pixels for r in rows]
        t_slope = _slope(px, [r.mean_step_time_s for r in rows])
        if any(r.mean_peak_alloc_bytes is None for r in rows):
            ppg = None
        else:
            m_slope = _slope(px, [r.mean_peak_alloc_bytes for r in rows])
            ppg = BYTES_PER_GB / m_slope if m_slope > 0 else math.inf
        report.slopes[mode] = {"time_per_100px_s": 100.0 * t_slope, "pixels_per_GB": ppg}
    return report


def default_problem(seed=0, side=32, count=40):
    """Dense correlated scenes, a random 32×32 DOE and shot-limited noise."""
    sc = scenes_mod.gen_correlated_field(count, side, 2.0, seed)
    rng = make_rng(seed, "bench_init")
    wl, dn = 650e-9, 0.4599
    enc = optics.HeightMapParams(rng.uniform(0, 1, (side, side)) * wl / dn, 2e-6, wl, dn, 300e-6)
    return sc, enc, noise_mod.PoissonApproxNoise(1000.0)


def _memory_available():
    try:
        was = tracemalloc.is_tracing()
        if not was:
            tracemalloc.start()
            tracemalloc.stop()
        return True
    except RuntimeError:
        return False


def bench_scaling(patch_sides, trials, steps_per_trial, base_config, scenes=None, encoder=None,
                  noise=None, modes=(IDEAL, IDEAL_IO), memory_steps=2, progress=None):
    """Time and memory per optimizer step for each (mode, patch side).

    Timing runs are untraced and drop the first (warm-up) step. Peak
    transient allocation comes from a separate short traced run per trial,
    so tracing overhead never enters the timings. Train patch count is
    always 5·P².
    """
    if steps_per_trial < 2:
        raise ValueError("steps_per_trial must be >= 2 (the first step is warm-up)")
    if scenes is None or encoder is None or noise is None:
        d_sc, d_enc, d_noise = default_problem(base_config.seed)
        scenes = scenes if scenes is not None else d_sc
        encoder = encoder if encoder is not None else d_enc
        noise = noise if noise is not None else d_noise
    memory_ok = _memory_available()
    report = ScalingReport()
    for mode in modes:
        for p in patch_sides:
            step_means, peaks = [], []
            for trial in range(trials):
                cfg = dataclasses.replace(base_config, mode=mode, patch_side=p, train_patch_count=5 * p * p,
                                          steps=steps_per_trial, seed=base_config.seed + trial,
                                          track_memory=False, enforce_sizing_rule=True)
                _, trace, _ = optimize.run(scenes, encoder, noise, cfg)
                step_means.append(float(np.mean(trace.column("wall_time_s")[1:])))
                if memory_ok:
                    mcfg = dataclasses.replace(cfg, steps=memory_steps, track_memory=True)
                    _, mtrace, _ = optimize.run(scenes, encoder, noise, mcfg)
                    tracemalloc.stop()
                    peaks.append(float(np.max(mtrace.column("peak_alloc_bytes"))))
            row = BenchRow(mode, p, p * p, statistics.fmean(step_means),
                           statistics.stdev(step_means) if len(step_means) > 1 else 0.0,
                           statistics.fmean(peaks) if peaks else None, trials)
            report.rows.append(row)
            if progress is not None:
                progress(row)
    return fit_slopes(report)
