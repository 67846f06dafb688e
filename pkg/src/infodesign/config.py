"""Experiment configuration: strict JSON loading and object construction.

Every section is a JSON object whose keys are checked against a fixed set;
an unknown key, a wrong type or a missing referenced file raises
:class:`~infodesign.errors.ConfigError` naming the dotted key.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import noise as noise_mod, optics, optimize, scenes as scenes_mod
from ._rng import make_rng
from .errors import ConfigError, InfoDesignError

DEFAULT_WAVELENGTH = 650e-9
DEFAULT_DELTA_N = 0.4599

_NUMBER = (int, float)


class _Section:
    """A dict view that records which keys were read."""

    def __init__(self, data, path):
        if not isinstance(data, dict):
            raise ConfigError("expected a JSON object", path)
        self.data = data
        self.path = path
        self.seen = set()

    def key(self, name):
        return f"{self.path}.{name}" if self.path else name

    def get(self, name, default=None, types=None, required=False):
        self.seen.add(name)
        if name not in self.data:
            if required:
                raise ConfigError("missing required key", self.key(name))
            return default
        value = self.data[name]
        if types is not None and value is not None:
            ok = isinstance(value, types) and not (isinstance(value, bool) and bool not in _tuple(types))
            if not ok:
                raise ConfigError(f"expected {_type_name(types)}, got {type(value).__name__}", self.key(name))
        return value

    def section(self, name):
        self.seen.add(name)
        return _Section(self.data.get(name, {}), self.key(name))

    def done(self):
        extra = sorted(set(self.data) - self.seen)
        if extra:
            raise ConfigError(f"unknown key(s) {extra}", self.path or "<root>")


def _tuple(t):
    return t if isinstance(t, tuple) else (t,)


def _type_name(types):
    names = {int: "integer", float: "number", str: "string", bool: "boolean", list: "array", dict: "object"}
    return " or ".join(names.get(t, t.__name__) for t in _tuple(types))


def _choice(sec, name, options, default):
    value = sec.get(name, default, str)
    if value not in options:
        raise ConfigError(f"must be one of {list(options)}, got {value!r}", sec.key(name))
    return value


def _existing_path(sec, name, base, required=True):
    raw = sec.get(name, None, str, required=required)
    if raw is None:
        return None
    p = Path(raw)
    if not p.is_absolute():
        p = base / p
    if not p.exists():
        raise ConfigError(f"path does not exist: {p}", sec.key(name))
    return p


@dataclass
class SceneSpec:
    kind: str = "correlated_field"
    count: int = 40
    side: int = 32
    spectral_exponent: float = 2.0
    density: float = 0.02
    amplitude: float = 1.0
    mean: float = 10.0
    std: float = 1.0
    path: Path | None = None
    count_limit: int | None = None


@dataclass
class EncoderSpec:
    kind: str = "height_map"
    init: str = "random"
    # height map
    pixel_pitch: float = 2e-6
    wavelength: float = DEFAULT_WAVELENGTH
    delta_n: float = DEFAULT_DELTA_N
    distance: float = 300e-6
    h_max: float | None = None
    focal_length: float | None = None
    # lenslets
    count: int = 4
    sigma: float = 1.5
    chol_floor: float = optics.CHOL_FLOOR
    margin: float = 4.0
    means: list | None = None
    chol_factors: list | None = None
    path: Path | None = None


@dataclass
class NoiseSpec:
    kind: str = "poisson"
    photon_scale: float = 1000.0
    floor: float = 1e-3
    sigma: float = 1.0


@dataclass
class BenchSpec:
    patch_sides: list = field(default_factory=lambda: [4, 8, 12, 16, 20])
    trials: int = 3
    steps_per_trial: int = 50
    memory_steps: int = 2


@dataclass
class CompareSpec:
    models: list = field(default_factory=lambda: [optimize.DensitySpec("gaussian"),
                                                  optimize.DensitySpec("gmm")])
    train_patch_count: int = 4000
    test_patch_count: int = 1024


@dataclass
class ExportSpec:
    noiseless: bool = False
    psf: bool = True
    encoder: bool = True
    model: bool = True
    trace: bool = True


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: Path = Path("out")
    scenes: SceneSpec = field(default_factory=SceneSpec)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    optimize: optimize.OptConfig = field(default_factory=optimize.OptConfig)
    bench: BenchSpec = field(default_factory=BenchSpec)
    compare: CompareSpec = field(default_factory=CompareSpec)
    export: ExportSpec = field(default_factory=ExportSpec)
    noise_draws: int = 1
    source: Path | None = None

    def build_scenes(self):
        return build_scenes(self.scenes, self.seed)

    def build_encoder(self, side):
        return build_encoder(self.encoder, side, self.seed)

    def build_noise(self):
        return build_noise(self.noise)


# --------------------------------------------------------------------------
# parsing


def _parse_scenes(sec, base):
    kind = _choice(sec, "kind", ("correlated_field", "sparse_spots", "gaussian_iid", "raw"), "correlated_field")
    spec = SceneSpec(kind=kind)
    spec.count = sec.get("count", spec.count, int)
    spec.side = sec.get("side", spec.side, int)
    spec.spectral_exponent = float(sec.get("spectral_exponent", spec.spectral_exponent, _NUMBER))
    spec.density = float(sec.get("density", spec.density, _NUMBER))
    spec.amplitude = float(sec.get("amplitude", spec.amplitude, _NUMBER))
    spec.mean = float(sec.get("mean", spec.mean, _NUMBER))
    spec.std = float(sec.get("std", spec.std, _NUMBER))
    spec.count_limit = sec.get("count_limit", None, int)
    spec.path = _existing_path(sec, "path", base, required=kind == "raw")
    if spec.count < 1:
        raise ConfigError("must be positive", sec.key("count"))
    if spec.side < 1:
        raise ConfigError("must be positive", sec.key("side"))
    sec.done()
    return spec


def _parse_encoder(sec, base):
    kind = _choice(sec, "kind", ("height_map", "lenslets"), "height_map")
    inits = ("random", "flat", "zone_plate", "file") if kind == "height_map" else ("random", "explicit", "file")
    spec = EncoderSpec(kind=kind, init=_choice(sec, "init", inits, "random"))
    for name in ("pixel_pitch", "wavelength", "delta_n", "distance", "sigma", "chol_floor", "margin"):
        setattr(spec, name, float(sec.get(name, getattr(spec, name), _NUMBER)))
    for name in ("h_max", "focal_length"):
        v = sec.get(name, None, _NUMBER)
        setattr(spec, name, None if v is None else float(v))
    spec.count = sec.get("count", spec.count, int)
    spec.means = sec.get("means", None, list)
    spec.chol_factors = sec.get("chol_factors", None, list)
    spec.path = _existing_path(sec, "path", base, required=spec.init == "file")
    if spec.init == "explicit" and (spec.means is None or spec.chol_factors is None):
        raise ConfigError("explicit lenslet init needs 'means' and 'chol_factors'", sec.path)
    for name in ("pixel_pitch", "wavelength", "delta_n", "sigma", "chol_floor"):
        if not getattr(spec, name) > 0:
            raise ConfigError("must be positive", sec.key(name))
    if spec.distance < 0:
        raise ConfigError("must be nonnegative", sec.key("distance"))
    if spec.count < 1:
        raise ConfigError("must be positive", sec.key("count"))
    sec.done()
    return spec


def _parse_noise(sec):
    kind = _choice(sec, "kind", ("poisson", "gaussian"), "poisson")
    spec = NoiseSpec(kind=kind)
    spec.photon_scale = float(sec.get("photon_scale", spec.photon_scale, _NUMBER))
    spec.floor = float(sec.get("floor", spec.floor, _NUMBER))
    spec.sigma = float(sec.get("sigma", spec.sigma, _NUMBER))
    names = ("photon_scale", "floor") if kind == "poisson" else ("sigma",)
    for name in names:
        if not getattr(spec, name) > 0:
            raise ConfigError("must be positive", sec.key(name))
    sec.done()
    return spec


def _parse_density(sec):
    kind = _choice(sec, "kind", ("gaussian", "gmm"), "gaussian")
    d = optimize.DensitySpec()
    spec = optimize.DensitySpec(
        kind=kind,
        components=sec.get("components", d.components, int),
        em_iters=sec.get("em_iters", d.em_iters, int),
        tol=float(sec.get("tol", d.tol, _NUMBER)),
        lambda_reg=sec.get("lambda_reg", None, _NUMBER),
    )
    if spec.components < 1:
        raise ConfigError("must be positive", sec.key("components"))
    sec.done()
    return spec


def _parse_optimizer(sec):
    d = optimize.OptimizerSpec()
    spec = optimize.OptimizerSpec(
        kind=_choice(sec, "kind", ("adam", "sgd"), "adam"),
        beta1=float(sec.get("beta1", d.beta1, _NUMBER)),
        beta2=float(sec.get("beta2", d.beta2, _NUMBER)),
        eps=float(sec.get("eps", d.eps, _NUMBER)),
    )
    sec.done()
    return spec


def _parse_optimize(sec, seed):
    d = optimize.OptConfig()
    kwargs = dict(
        mode=_choice(sec, "mode", (optimize.IDEAL, optimize.IDEAL_IO), d.mode),
        steps=sec.get("steps", d.steps, int),
        step_size=sec.get("step_size", None, _NUMBER),
        refit_every=sec.get("refit_every", d.refit_every, int),
        patch_side=sec.get("patch_side", d.patch_side, int),
        train_patch_count=sec.get("train_patch_count", None, int),
        test_patch_count=sec.get("test_patch_count", d.test_patch_count, int),
        density=_parse_density(sec.section("density")),
        optimizer=_parse_optimizer(sec.section("optimizer")),
        train_fraction=float(sec.get("train_fraction", d.train_fraction, _NUMBER)),
        scene_batch=sec.get("scene_batch", None, int),
        enforce_sizing_rule=sec.get("enforce_sizing_rule", True, bool),
        track_memory=sec.get("track_memory", False, bool),
        seed=seed,
    )
    sec.done()
    try:
        return optimize.OptConfig(**kwargs)
    except InfoDesignError as exc:
        raise ConfigError(str(exc), sec.path) from exc
    except ValueError as exc:
        raise ConfigError(str(exc), sec.path) from exc


def _parse_bench(sec):
    spec = BenchSpec()
    spec.patch_sides = sec.get("patch_sides", spec.patch_sides, list)
    if not spec.patch_sides or not all(isinstance(p, int) and p >= 1 for p in spec.patch_sides):
        raise ConfigError("must be a nonempty array of positive integers", sec.key("patch_sides"))
    spec.trials = sec.get("trials", spec.trials, int)
    spec.steps_per_trial = sec.get("steps_per_trial", spec.steps_per_trial, int)
    spec.memory_steps = sec.get("memory_steps", spec.memory_steps, int)
    if spec.trials < 1:
        raise ConfigError("must be positive", sec.key("trials"))
    if spec.steps_per_trial < 2:
        raise ConfigError("must be at least 2 (the first step is warm-up)", sec.key("steps_per_trial"))
    sec.done()
    return spec


def _parse_compare(sec):
    spec = CompareSpec()
    raw = sec.get("models", None, list)
    if raw is not None:
        if len(raw) < 1:
            raise ConfigError("needs at least one model", sec.key("models"))
        spec.models = [_parse_density(_Section(m, f"{sec.key('models')}[{i}]")) for i, m in enumerate(raw)]
    spec.train_patch_count = sec.get("train_patch_count", spec.train_patch_count, int)
    spec.test_patch_count = sec.get("test_patch_count", spec.test_patch_count, int)
    if spec.train_patch_count < 2 or spec.test_patch_count < 1:
        raise ConfigError("patch counts must be positive (train >= 2)", sec.path)
    sec.done()
    return spec


def _parse_export(sec):
    spec = ExportSpec()
    for name in ("noiseless", "psf", "encoder", "model", "trace"):
        setattr(spec, name, sec.get(name, getattr(spec, name), bool))
    sec.done()
    return spec


def parse_config(data, base_dir="."):
    """Build an :class:`ExperimentConfig` from a decoded JSON object.

    Relative paths resolve against ``base_dir`` (the config file's folder).
    """
    base = Path(base_dir)
    root = _Section(data, "")
    seed = root.get("seed", 0, int)
    out = root.get("output_dir", "out", str)
    out = Path(out) if Path(out).is_absolute() else base / out
    cfg = ExperimentConfig(
        seed=seed,
        output_dir=out,
        scenes=_parse_scenes(root.section("scenes"), base),
        encoder=_parse_encoder(root.section("encoder"), base),
        noise=_parse_noise(root.section("noise")),
        optimize=_parse_optimize(root.section("optimize"), seed),
        bench=_parse_bench(root.section("bench")),
        compare=_parse_compare(root.section("compare")),
        export=_parse_export(root.section("export")),
        noise_draws=root.get("noise_draws", 1, int),
    )
    if cfg.noise_draws < 1:
        raise ConfigError("must be positive", "noise_draws")
    root.done()
    return cfg


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}", str(path)) from exc
    cfg = parse_config(data, path.parent)
    cfg.source = path
    return cfg


def with_seed(cfg, seed):
    """Copy of ``cfg`` with the top-level seed and every derived seed replaced."""
    import dataclasses

    return dataclasses.replace(cfg, seed=seed, optimize=dataclasses.replace(cfg.optimize, seed=seed))


# --------------------------------------------------------------------------
# construction


def build_scenes(spec, seed):
    if spec.kind == "correlated_field":
        return scenes_mod.gen_correlated_field(spec.count, spec.side, spec.spectral_exponent, seed)
    if spec.kind == "sparse_spots":
        return scenes_mod.gen_sparse_spots(spec.count, spec.side, spec.density, spec.amplitude, seed)
    if spec.kind == "gaussian_iid":
        return scenes_mod.gen_gaussian_iid(spec.count, spec.side, spec.mean, spec.std, seed)
    return scenes_mod.load_raw_images(spec.path, spec.side, spec.count_limit)


def build_encoder(spec, side, seed):
    if spec.init == "file":
        enc = optics.load_encoder(spec.path)
        if enc.side != side:
            raise ConfigError(f"encoder side {enc.side} does not match scene side {side}", "encoder.path")
        return enc
    if spec.kind == "height_map":
        h_max = spec.h_max if spec.h_max is not None else spec.wavelength / spec.delta_n
        if spec.init == "flat":
            heights = np.zeros((side, side))
        elif spec.init == "zone_plate":
            f = spec.focal_length if spec.focal_length is not None else spec.distance
            heights = optics.zone_plate_heights(side, spec.pixel_pitch, spec.wavelength, spec.delta_n, f)
        else:
            heights = make_rng(seed, "encoder_init").uniform(0.0, h_max, (side, side))
        return optics.HeightMapParams(heights, spec.pixel_pitch, spec.wavelength, spec.delta_n,
                                      spec.distance, h_max)
    if spec.init == "explicit":
        try:
            enc = optics.LensletPsfParams(np.asarray(spec.means, dtype=np.float64),
                                          np.asarray(spec.chol_factors, dtype=np.float64), side, spec.chol_floor)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc), "encoder.means") from exc
        return enc.project()
    rng = make_rng(seed, "encoder_init")
    lo, hi = min(spec.margin, side - 1.0), max(side - 1.0 - spec.margin, 0.0)
    means = rng.uniform(min(lo, hi), max(lo, hi), (spec.count, 2))
    chol = np.tile(np.eye(2) * spec.sigma, (spec.count, 1, 1))
    return optics.LensletPsfParams(means, chol, side, spec.chol_floor).project()


def build_noise(spec):
    if spec.kind == "gaussian":
        return noise_mod.GaussianNoise(spec.sigma)
    return noise_mod.PoissonApproxNoise(spec.photon_scale, spec.floor)
