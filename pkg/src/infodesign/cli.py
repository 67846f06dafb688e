"""Command-line entry point: ``infodesign {simulate,optimize,estimate,bench,compare}``.

Every command reads a JSON experiment config, writes its artifacts under
the output directory together with ``<command>_manifest.json`` (sha256 per file),
and exits 0 only on success. Failures print one line to stderr of the
form ``error[category]: message``.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import bench, density, mi, noise as noise_mod, optics, optimize
from ._rng import derive_seed
from .config import load_config, with_seed
from .errors import ConfigError, InfoDesignError, ShapeError, SizingError
from .io import read_pfm, write_pfm

THREADS_ENV = "INFODESIGN_THREADS"
EXIT_FAILURE = 2


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


class Manifest:
    """Artifact list written as ``<command>_manifest.json`` once a command finishes."""

    def __init__(self, command, cfg, out_dir):
        self.out_dir = Path(out_dir)
        self.command = command
        self.data = {
            "command": command,
            "seed": cfg.seed,
            "config": None if cfg.source is None else str(cfg.source),
            "config_sha256": None if cfg.source is None else _sha256(cfg.source),
            "started": _now(),
            "artifacts": [],
        }

    def add(self, path, **meta):
        path = Path(path)
        entry = {"file": str(path.relative_to(self.out_dir)), "sha256": _sha256(path),
                 "bytes": path.stat().st_size}
        entry.update(meta)
        self.data["artifacts"].append(entry)

    def write(self):
        self.data["finished"] = _now()
        path = self.out_dir / f"{self.command}_manifest.json"
        path.write_text(json.dumps(self.data, indent=2, sort_keys=True) + "\n")
        return path


def thread_limit(env=None):
    """Thread cap from ``INFODESIGN_THREADS``; 0 or unset means one thread."""
    env = os.environ if env is None else env
    raw = env.get(THREADS_ENV, "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"expected a nonnegative integer, got {raw!r}", THREADS_ENV) from None
    if n < 0:
        raise ConfigError(f"expected a nonnegative integer, got {n}", THREADS_ENV)
    return max(n, 1)


def load_measurements(path):
    """Stack of measurements from one PFM file or a directory of them."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"path does not exist: {path}", "--measurements")
    files = sorted(path.glob("*.pfm")) if path.is_dir() else [path]
    if not files:
        raise SizingError(f"no .pfm measurements in {path}")
    images = [read_pfm(f) for f in files]
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise ShapeError(f"measurements in {path} have mixed shapes {sorted(shapes)}")
    return np.stack(images).astype(np.float64)


def _side(stack):
    if stack.shape[1] != stack.shape[2]:
        raise ShapeError(f"measurements must be square, got {stack.shape[1:]}")
    return stack.shape[1]


# --------------------------------------------------------------------------
# commands


def cmd_simulate(cfg, args):
    out = cfg.output_dir
    sc = cfg.build_scenes()
    enc = cfg.build_encoder(sc.side)
    nz = cfg.build_noise()
    meas = optics.simulate(enc, sc.images)
    man = Manifest("simulate", cfg, out)
    if cfg.export.noiseless:
        (out / "noiseless").mkdir(exist_ok=True)
    for i, x in enumerate(meas):
        if cfg.export.noiseless:
            path = out / "noiseless" / f"scene_{i:04d}.pfm"
            write_pfm(path, x)
            man.add(path, scene_index=i, kind="noiseless")
        for d in range(cfg.noise_draws):
            seed = derive_seed(cfg.seed, "simulate", i, d)
            path = out / f"meas_{i:04d}_{d:02d}.pfm"
            write_pfm(path, noise_mod.sample(nz, x, seed))
            man.add(path, scene_index=i, draw=d, seed=seed)
    man.write()
    print(f"wrote {len(meas) * cfg.noise_draws} measurements to {out}")


def cmd_optimize(cfg, args):
    out = cfg.output_dir
    sc = cfg.build_scenes()
    enc = cfg.build_encoder(sc.side)
    nz = cfg.build_noise()
    params, trace, model = optimize.run(sc, enc, nz, cfg.optimize)
    man = Manifest("optimize", cfg, out)
    if cfg.export.trace:
        trace.to_csv(out / "trace.csv")
        man.add(out / "trace.csv", rows=len(trace))
    if cfg.export.psf:
        write_pfm(out / "psf.pfm", optics.compute_psf(params).values)
        man.add(out / "psf.pfm")
    if cfg.export.encoder:
        optics.save_encoder(out / "encoder.idio", params)
        man.add(out / "encoder.idio")
    if cfg.export.model:
        density.save_model(out / "model.idio", model)
        man.add(out / "model.idio")
    man.write()
    tail = optimize.smoothed(trace.losses)[-1]
    print(json.dumps({"steps": len(trace), "final_loss_bits": float(trace.losses[-1]),
                      "smoothed_final_loss_bits": float(tail),
                      "psf_peak_fraction": optics.compute_psf(params).peak_fraction()}, sort_keys=True))


def cmd_estimate(cfg, args):
    if args.model is None or args.measurements is None:
        raise ConfigError("estimate needs both --model and --measurements", "argv")
    model = density.load_model(args.model)
    p = cfg.optimize.patch_side
    if model.dim != p * p:
        raise ShapeError(f"model dimension {model.dim} does not match patch side {p} (dim {p * p})")
    stack = load_measurements(args.measurements)
    _side(stack)
    nz = cfg.build_noise()
    index = mi.sample_offsets(stack.shape[0], stack.shape[1], p, cfg.optimize.test_patch_count,
                              derive_seed(cfg.seed, "estimate_offsets"))
    est = mi.estimate_mi(model, nz, mi.gather(stack, index), derive_seed(cfg.seed, "estimate_noise"))
    text = json.dumps(est.as_dict(), sort_keys=True)
    man = Manifest("estimate", cfg, cfg.output_dir)
    path = cfg.output_dir / "estimate.json"
    path.write_text(text + "\n")
    man.add(path)
    man.write()
    print(text)


def cmd_bench(cfg, args):
    out = cfg.output_dir
    sc = cfg.build_scenes()
    enc = cfg.build_encoder(sc.side)
    nz = cfg.build_noise()
    b = cfg.bench
    report = bench.bench_scaling(b.patch_sides, b.trials, b.steps_per_trial, cfg.optimize, scenes=sc,
                                 encoder=enc, noise=nz, memory_steps=b.memory_steps)
    man = Manifest("bench", cfg, out)
    report.to_csv(out / "bench.csv")
    man.add(out / "bench.csv", rows=len(report.rows))
    if report.slopes:
        report.slopes_to_csv(out / "slopes.csv")
        man.add(out / "slopes.csv")
    man.write()
    print(report.summary())


def _compare_patches(cfg, args):
    """Noisy train/test patches for compare: from ``--measurements`` when
    given, else simulated from the configured scenes and encoder."""
    nz = cfg.build_noise()
    if args.measurements is not None:
        stack = load_measurements(args.measurements)
    else:
        sc = cfg.build_scenes()
        stack = optics.simulate(cfg.build_encoder(sc.side), sc.images)
    if stack.shape[0] < 2:
        raise SizingError("compare needs at least 2 measurements (train and test halves)")
    side = _side(stack)
    p = cfg.optimize.patch_side
    half = stack.shape[0] // 2
    c = cfg.compare
    idx_tr = mi.sample_offsets(half, side, p, c.train_patch_count, derive_seed(cfg.seed, "compare_train"))
    idx_te = mi.sample_offsets(stack.shape[0] - half, side, p, c.test_patch_count,
                               derive_seed(cfg.seed, "compare_test"))
    _, _, y_tr = mi.noisy_patches(nz, stack[:half], idx_tr, derive_seed(cfg.seed, "compare_train_noise"))
    _, _, y_te = mi.noisy_patches(nz, stack[half:], idx_te, derive_seed(cfg.seed, "compare_test_noise"))
    return y_tr, y_te


def cmd_compare(cfg, args):
    out = cfg.output_dir
    y_tr, y_te = _compare_patches(cfg, args)
    specs = cfg.compare.models
    models = [optimize.fit_patches(y_tr, s, derive_seed(cfg.seed, "compare_em", i)) for i, s in enumerate(specs)]
    ranking = mi.compare_models(models, y_te)
    man = Manifest("compare", cfg, out)
    for i, m in enumerate(models):
        path = out / f"model_{i}.idio"
        density.save_model(path, m)
        man.add(path, model_index=i, kind=specs[i].kind)
    path = out / "ranking.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("rank", "model_index", "kind", "components", "cross_entropy_bits"))
        for rank, (i, ce) in enumerate(ranking):
            comps = specs[i].components if specs[i].kind == "gmm" else 1
            w.writerow((rank, i, specs[i].kind, comps, repr(ce)))
    man.add(path)
    man.write()
    for rank, (i, ce) in enumerate(ranking):
        print(json.dumps({"rank": rank, "model_index": i, "kind": specs[i].kind,
                          "cross_entropy_bits": ce}, sort_keys=True))


COMMANDS = {
    "simulate": cmd_simulate,
    "optimize": cmd_optimize,
    "estimate": cmd_estimate,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="infodesign", description="Information-driven optical encoder design.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="experiment config (JSON)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name in ("estimate", "compare"):
            p.add_argument("--measurements", default=None, help="noiseless measurement PFM file or directory")
        if name == "estimate":
            p.add_argument("--model", default=None, help="density model container")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = with_seed(cfg, args.seed)
    if args.out is not None:
        cfg.output_dir = Path(args.out)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    with threadpool_limits(limits=thread_limit()):
        COMMANDS[args.command](cfg, args)


def main(argv=None):
    try:
        run(argv)
    except InfoDesignError as exc:
        print(f"error[{exc.category}]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"error[io]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (ValueError, TypeError) as exc:
        print(f"error[invalid]: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
