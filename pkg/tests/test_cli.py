"""Command-line entry point and experiment configs."""
import csv
import json
import shutil
import subprocess
import sys
from pathlib import Path

import pytest

from infodesign import cli, config, density
from infodesign.errors import ConfigError
from infodesign.io import read_pfm

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SIMPLE = {
    "seed": 3,
    "output_dir": "out",
    "scenes": {"kind": "correlated_field", "count": 3, "side": 16, "spectral_exponent": 2.0},
    "encoder": {"kind": "lenslets", "init": "random", "count": 2, "sigma": 1.5},
    "noise": {"kind": "poisson", "photon_scale": 100.0},
    "optimize": {"steps": 3, "patch_side": 2, "test_patch_count": 64},
}


def write_config(tmp_path, data, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data))
    return path


def run_cli(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


# --------------------------------------------------------------------------
# config parsing


def test_presets_load():
    for path in sorted(CONFIGS.glob("*.json")):
        cfg = config.load_config(path)
        assert cfg.source == path


def test_unknown_key_rejected(tmp_path):
    data = json.loads(json.dumps(SIMPLE))
    data["optimize"]["stepz"] = 3
    with pytest.raises(ConfigError, match="stepz"):
        config.load_config(write_config(tmp_path, data))


def test_invalid_noise_spec_names_key(tmp_path, capsys):
    data = json.loads(json.dumps(SIMPLE))
    data["noise"] = {"kind": "poisson", "photon_scale": -5.0}
    code, _, err = run_cli(capsys, "simulate", "--config", write_config(tmp_path, data))
    assert code != 0
    assert err.startswith("error[config]:") and "noise.photon_scale" in err

    data["noise"] = {"kind": "laplace"}
    code, _, err = run_cli(capsys, "simulate", "--config", write_config(tmp_path, data))
    assert code != 0 and "noise.kind" in err


def test_referenced_paths_must_exist(tmp_path):
    data = json.loads(json.dumps(SIMPLE))
    data["scenes"] = {"kind": "raw", "path": "missing_dir"}
    with pytest.raises(ConfigError, match="scenes.path"):
        config.load_config(write_config(tmp_path, data))


def test_seed_override_is_applied(tmp_path):
    cfg = config.with_seed(config.load_config(write_config(tmp_path, SIMPLE)), 11)
    assert cfg.seed == 11 and cfg.optimize.seed == 11


@pytest.mark.parametrize("value,expected", [("", 1), ("0", 1), ("3", 3)])
def test_thread_limit(value, expected):
    assert cli.thread_limit({cli.THREADS_ENV: value}) == expected


def test_bad_thread_limit(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "many")
    code, _, err = run_cli(capsys, "simulate", "--config", write_config(tmp_path, SIMPLE))
    assert code != 0 and cli.THREADS_ENV in err


# --------------------------------------------------------------------------
# simulate


def test_simulate_writes_measurements_and_manifest(tmp_path, capsys):
    out = tmp_path / "deep" / "run"            # does not exist yet
    code, _, _ = run_cli(capsys, "simulate", "--config", write_config(tmp_path, SIMPLE), "--out", out)
    assert code == 0
    files = sorted(out.glob("meas_*.pfm"))
    assert len(files) == 3
    assert read_pfm(files[0]).shape == (16, 16)
    man = json.loads((out / "simulate_manifest.json").read_text())
    assert len(man["artifacts"]) == 3
    assert [a["scene_index"] for a in man["artifacts"]] == [0, 1, 2]
    assert all("seed" in a and len(a["sha256"]) == 64 for a in man["artifacts"])


def test_seed_flag_changes_measurements(tmp_path, capsys):
    cfg = write_config(tmp_path, SIMPLE)
    run_cli(capsys, "simulate", "--config", cfg, "--out", tmp_path / "a")
    run_cli(capsys, "simulate", "--config", cfg, "--out", tmp_path / "b", "--seed", 4)
    a = (tmp_path / "a" / "meas_0000_00.pfm").read_bytes()
    b = (tmp_path / "b" / "meas_0000_00.pfm").read_bytes()
    assert a != b


# --------------------------------------------------------------------------
# optimize


def test_optimize_lenslet_preset(tmp_path, capsys):
    code, out, _ = run_cli(capsys, "optimize", "--config", CONFIGS / "lenslet_ideal_io.json", "--out", tmp_path)
    assert code == 0
    steps = config.load_config(CONFIGS / "lenslet_ideal_io.json").optimize.steps
    with open(tmp_path / "trace.csv") as fh:
        assert len(list(csv.reader(fh))) == steps + 1
    for name in ("psf.pfm", "encoder.idio", "model.idio", "optimize_manifest.json"):
        assert (tmp_path / name).exists()
    assert json.loads(out)["steps"] == steps


def test_optimize_ideal_with_gmm_fails(tmp_path, capsys):
    data = json.loads(json.dumps(SIMPLE))
    data["optimize"].update(mode="ideal", density={"kind": "gmm", "components": 2})
    code, _, err = run_cli(capsys, "optimize", "--config", write_config(tmp_path, data))
    assert code != 0
    assert err.startswith("error[unsupported-model]:")


# --------------------------------------------------------------------------
# estimate and compare


@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """Noiseless toy measurements plus fitted models from compare."""
    out = tmp_path_factory.mktemp("toy")
    cfg = CONFIGS / "gaussian_toy.json"
    assert cli.main(["simulate", "--config", str(cfg), "--out", str(out)]) == 0
    assert cli.main(["compare", "--config", str(cfg), "--out", str(out),
                     "--measurements", str(out / "noiseless")]) == 0
    return cfg, out


def test_estimate_gaussian_toy(toy_run, capsys):
    cfg, out = toy_run
    capsys.readouterr()
    code, text, _ = run_cli(capsys, "estimate", "--config", cfg, "--out", out,
                            "--model", out / "model_0.idio", "--measurements", out / "noiseless")
    assert code == 0
    est = json.loads(text)
    assert abs(est["mi_per_pixel"] - 0.5) < 0.05
    assert json.loads((out / "estimate.json").read_text()) == est


def test_compare_ranking(toy_run):
    _, out = toy_run
    with open(out / "ranking.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sorted(int(r["model_index"]) for r in rows) == [0, 1]
    ce = [float(r["cross_entropy_bits"]) for r in rows]
    assert ce == sorted(ce)
    assert density.load_model(out / "model_1.idio").n_components == 2


def test_estimate_dimension_mismatch(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    data = json.loads(Path(cfg).read_text())
    data["optimize"]["patch_side"] = 3
    data["output_dir"] = str(tmp_path)
    code, _, err = run_cli(capsys, "estimate", "--config", write_config(tmp_path, data),
                           "--model", out / "model_0.idio", "--measurements", out / "noiseless")
    assert code != 0 and err.startswith("error[shape]:")


def test_estimate_empty_directory(toy_run, tmp_path, capsys):
    cfg, out = toy_run
    (tmp_path / "empty").mkdir()
    code, _, err = run_cli(capsys, "estimate", "--config", cfg, "--out", tmp_path,
                           "--model", out / "model_0.idio", "--measurements", tmp_path / "empty")
    assert code != 0 and err.startswith("error[sizing]:")


# --------------------------------------------------------------------------
# bench and the installed script


def test_bench_command(tmp_path, capsys):
    data = json.loads(json.dumps(SIMPLE))
    data["bench"] = {"patch_sides": [2, 3, 4, 5], "trials": 3, "steps_per_trial": 2}
    code, out, _ = run_cli(capsys, "bench", "--config", write_config(tmp_path, data), "--out", tmp_path)
    assert code == 0
    assert (tmp_path / "bench.csv").exists() and (tmp_path / "slopes.csv").exists()
    assert "pixels" in out


def test_console_script(tmp_path):
    exe = shutil.which("infodesign")
    cmd = [exe] if exe else [sys.executable, "-m", "infodesign.cli"]
    res = subprocess.run(cmd + ["simulate", "--config", str(write_config(tmp_path, SIMPLE)),
                                "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0, res.stderr
    res = subprocess.run(cmd + ["simulate"], capture_output=True, text=True)
    assert res.returncode != 0
