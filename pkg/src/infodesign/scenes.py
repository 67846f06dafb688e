"""Object datasets: synthetic generators, raw-image loading, and splitting."""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._rng import make_rng
from .errors import SizingError
from .io import read_idx, read_pfm


@dataclass(frozen=True)
class SceneDataset:
    """A stack of nonnegative square intensity images.

    ``images`` has shape ``(count, side, side)``; intensities live on a
    [0, 1] scale and photon counts are applied later by the noise model.
    """

    images: np.ndarray
    label: str = ""

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        if images.ndim != 3 or images.shape[1] != images.shape[2]:
            raise SizingError(f"scene images must be a (count, side, side) stack, got {images.shape}")
        if images.shape[0] < 1:
            raise SizingError("a scene dataset needs at least one image")
        if not np.all(np.isfinite(images)) or images.min() < 0:
            raise ValueError("scene pixels must be finite and nonnegative")
        images.setflags(write=False)
        object.__setattr__(self, "images", images)

    @property
    def side(self):
        return self.images.shape[1]

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices, label=None):
        return SceneDataset(self.images[np.asarray(indices)], label=self.label if label is None else label)


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def gen_correlated_field(count, side, spectral_exponent, seed):
    """Stationary Gaussian random fields with power ∝ (1 + |f|)^-exponent.

    ``|f|`` is measured in cycles per image. Each image is min-max rescaled
    to [0, 1] independently.
    """
    if not _is_pow2(side):
        raise SizingError(f"side must be a power of two, got {side}")
    if not 0 <= spectral_exponent <= 4:
        raise ValueError(f"spectral_exponent must lie in [0, 4], got {spectral_exponent}")
    if count < 1:
        raise SizingError("count must be positive")
    rng = make_rng(seed, "correlated_field")
    white = rng.standard_normal((count, side, side))
    f = np.fft.fftfreq(side) * side
    fr = np.hypot(f[:, None], f[None, :])
    amp = (1.0 + fr) ** (-spectral_exponent / 2.0)
    fields = np.fft.ifft2(np.fft.fft2(white) * amp).real
    lo = fields.min(axis=(1, 2), keepdims=True)
    hi = fields.max(axis=(1, 2), keepdims=True)
    images = (fields - lo) / np.where(hi > lo, hi - lo, 1.0)
    return SceneDataset(images, label=f"correlated_field(exponent={spectral_exponent}, seed={seed})")


def gen_sparse_spots(count, side, density, amplitude, seed):
    """Images that are zero except ⌈density·side²⌉ pixels equal to ``amplitude``."""
    if not 0 < density <= 1:
        raise ValueError(f"density must lie in (0, 1], got {density}")
    n_px = side * side
    if density * n_px < 1:
        raise SizingError(f"density*side^2 = {density * n_px:g} < 1: no spots would be placed")
    n_on = math.ceil(density * n_px - 1e-9)
    rng = make_rng(seed, "sparse_spots")
    images = np.zeros((count, n_px))
    for i in range(count):
        images[i, rng.choice(n_px, size=n_on, replace=False)] = amplitude
    return SceneDataset(images.reshape(count, side, side),
                        label=f"sparse_spots(density={density}, seed={seed})")


def gen_gaussian_iid(count, side, mean, std, seed):
    """Pixels drawn i.i.d. from N(mean, std²), clipped at 0.

    With ``mean`` several ``std`` above zero the clip never binds in
    practice, giving a dense Gaussian source with known statistics.
    """
    if count < 1 or side < 1:
        raise SizingError(f"count and side must be positive, got {count} and {side}")
    if not std > 0:
        raise ValueError(f"std must be positive, got {std}")
    images = make_rng(seed, "gaussian_iid").normal(mean, std, (count, side, side))
    return SceneDataset(np.maximum(images, 0.0), label=f"gaussian_iid(mean={mean}, std={std}, seed={seed})")


def load_raw_images(path, side, count_limit=None):
    """Load an IDX unsigned-byte tensor file or a directory of PFM files.

    IDX bytes are divided by 255; PFM stacks are min-max rescaled over the
    whole dataset so relative intensities between images survive.
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.pfm"))
        if count_limit is not None:
            files = files[:count_limit]
        if not files:
            raise SizingError(f"{path}: no PFM files found")
        images = []
        for fp in files:
            img = read_pfm(fp)
            if img.shape != (side, side):
                raise SizingError(f"{fp}: image is {img.shape[0]}x{img.shape[1]}, expected {side}x{side}")
            images.append(img)
        stack = np.stack(images)
        lo, hi = stack.min(), stack.max()
        stack = (stack - lo) / (hi - lo) if hi > lo else np.zeros_like(stack)
    else:
        raw = read_idx(path, count_limit=count_limit)
        if raw.shape[0] == 0:
            raise SizingError(f"{path}: IDX file holds no images")
        if raw.shape[1:] != (side, side):
            raise SizingError(f"{path}: images are {raw.shape[1]}x{raw.shape[2]}, expected {side}x{side}")
        stack = raw.astype(np.float64) / 255.0
    return SceneDataset(stack, label=f"raw:{path}")


def split(dataset, train_fraction, seed):
    """Shuffle and partition into disjoint (train, test) datasets.

    The train count is ``floor(fraction * n)``, reduced by one if that
    would leave the test side empty.
    """
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = min(math.floor(train_fraction * n + 1e-9), n - 1)
    if n_train < 1 or n - n_train < 1:
        raise SizingError(f"cannot split {n} images with train_fraction={train_fraction}")
    order = make_rng(seed, "split").permutation(n)
    return dataset.subset(np.sort(order[:n_train])), dataset.subset(np.sort(order[n_train:]))
