"""Scene generators, loaders and splitting."""
import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from infodesign import io, scenes
from infodesign.errors import ParseError, SizingError


def test_white_field_has_no_lag1_correlation():
    ds = scenes.gen_correlated_field(4, 16, 0.0, 7)
    assert len(ds) == 4 and ds.images.min() >= 0 and ds.images.max() <= 1
    for img in ds.images:
        z = img - img.mean()
        lag1 = np.sum(z[:, 1:] * z[:, :-1]) / np.sum(z * z)
        assert abs(lag1) < 0.1


def radial_spectrum_slope(images):
    # oracle: radially averaged periodogram regressed in log-log against 1 + |f|
    side = images.shape[-1]
    power = np.mean(np.abs(np.fft.fft2(images - images.mean(axis=(1, 2), keepdims=True))) ** 2, axis=0)
    f = np.fft.fftfreq(side) * side
    r = np.rint(np.hypot(f[:, None], f[None, :])).astype(int)
    radii = np.arange(1, side // 2)
    prof = np.array([power[r == k].mean() for k in radii])
    return np.polyfit(np.log1p(radii), np.log(prof), 1)[0]


def test_correlated_field_spectral_slope():
    ds = scenes.gen_correlated_field(2, 32, 2.0, 1)
    assert abs(radial_spectrum_slope(ds.images) + 2.0) < 0.3


def test_correlated_field_determinism_and_sizing():
    a = scenes.gen_correlated_field(1, 16, 1.0, 5).images
    b = scenes.gen_correlated_field(1, 16, 1.0, 5).images
    assert a.tobytes() == b.tobytes()
    with pytest.raises(SizingError):
        scenes.gen_correlated_field(1, 12, 1.0, 0)


def test_sparse_spots_examples():
    img = scenes.gen_sparse_spots(1, 10, 0.05, 1.0, 0).images[0]
    assert np.count_nonzero(img) == 5 and set(np.unique(img)) == {0.0, 1.0}
    ds = scenes.gen_sparse_spots(100, 16, 0.02, 1.0, 3)
    # ceil(0.02 * 256) = 6 spots per image, so the mean is 6/256 exactly
    assert np.all(np.count_nonzero(ds.images.reshape(100, -1), axis=1) == 6)
    assert ds.images.mean() == pytest.approx(6 / 256, rel=1e-12)
    full = scenes.gen_sparse_spots(1, 4, 1.0, 2.0, 9).images[0]
    np.testing.assert_array_equal(full, np.full((4, 4), 2.0))
    with pytest.raises(SizingError):
        scenes.gen_sparse_spots(1, 4, 0.01, 1.0, 0)


def test_gaussian_iid_statistics():
    ds = scenes.gen_gaussian_iid(50, 16, 10.0, 1.0, 0)
    assert abs(ds.images.mean() - 10.0) < 0.02
    assert abs(ds.images.std() - 1.0) < 0.02


def test_load_idx(tmp_path):
    imgs = np.random.default_rng(0).integers(0, 200, (3, 28, 28), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    p = tmp_path / "x.idx"
    io.write_idx(p, imgs)
    ds = scenes.load_raw_images(p, 28)
    assert len(ds) == 3 and ds.images.max() == 1.0
    with pytest.raises(SizingError):
        scenes.load_raw_images(p, 16)
    p.write_bytes(b"\x00\x00\x08\x01" + p.read_bytes()[4:])
    with pytest.raises(ParseError, match="offset 0"):
        scenes.load_raw_images(p, 28)


def test_load_pfm_directory(tmp_path):
    rng = np.random.default_rng(1)
    for i in range(2):
        io.write_pfm(tmp_path / f"{i}.pfm", rng.uniform(0, 5, (16, 16)))
    assert len(scenes.load_raw_images(tmp_path, 16, count_limit=1)) == 1
    ds = scenes.load_raw_images(tmp_path, 16)
    assert ds.images.min() == 0.0 and ds.images.max() == 1.0
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(SizingError):
        scenes.load_raw_images(empty, 16)


def test_split_examples():
    ds = scenes.gen_sparse_spots(10, 8, 0.1, 1.0, 0)
    tr, te = scenes.split(ds, 0.8, 0)
    assert (len(tr), len(te)) == (8, 2)
    tr, te = scenes.split(ds, 0.95, 0)
    assert (len(tr), len(te)) == (9, 1)
    with pytest.raises(SizingError):
        scenes.split(scenes.gen_sparse_spots(1, 8, 0.1, 1.0, 0), 0.5, 0)


@settings(max_examples=40, deadline=None)
@given(n=st.integers(2, 30), frac=st.floats(0.01, 0.99), seed=st.integers(0, 2**32))
def test_split_is_a_disjoint_partition(n, frac, seed):
    assume(int(frac * n + 1e-9) >= 1)
    imgs = np.arange(n, dtype=float)[:, None, None] * np.ones((1, 2, 2))
    ds = scenes.SceneDataset(imgs)
    tr, te = scenes.split(ds, frac, seed)
    ids = np.concatenate([tr.images[:, 0, 0], te.images[:, 0, 0]])
    assert len(tr) >= 1 and len(te) >= 1
    np.testing.assert_array_equal(np.sort(ids), np.arange(n))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32), exponent=st.floats(0, 4))
def test_generators_are_deterministic_and_nonnegative(seed, exponent):
    a = scenes.gen_correlated_field(2, 8, exponent, seed).images
    assert a.tobytes() == scenes.gen_correlated_field(2, 8, exponent, seed).images.tobytes()
    assert a.min() >= 0
    b = scenes.gen_sparse_spots(2, 8, 0.1, 1.5, seed).images
    assert b.tobytes() == scenes.gen_sparse_spots(2, 8, 0.1, 1.5, seed).images.tobytes()


def test_dataset_rejects_negative_and_is_immutable():
    with pytest.raises(ValueError):
        scenes.SceneDataset(-np.ones((2, 2, 2)))
    ds = scenes.SceneDataset(np.ones((2, 2, 2)))
    with pytest.raises(ValueError):
        ds.images[0, 0, 0] = 3.0
