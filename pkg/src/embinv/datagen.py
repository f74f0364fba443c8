"""Datasets: duathlon mixture, double-well objectives, MNIST/IDX, synthetic shapes."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .operators import LinearOperator, Summation, add_noise, apply, from_descriptor
from .training import FormatError, parse_container, split_indices, write_container

DUATHLON_MEANS = ((2.0, 8.0), (8.0, 5.0), (5.0, 1.0))
DUATHLON_COV_SCALE = 0.5


@dataclass
class Dataset:
    x: np.ndarray  # (n,) + model shape
    b: np.ndarray  # (n, M)
    operator: dict
    noise: float
    seed: int
    train_idx: np.ndarray
    val_idx: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.x.shape[0]

    @property
    def x_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def train(self) -> tuple[np.ndarray, np.ndarray]:
        return self.b[self.train_idx], self.x[self.train_idx]

    def val(self) -> tuple[np.ndarray, np.ndarray]:
        return self.b[self.val_idx], self.x[self.val_idx]

    def save(self, path) -> None:
        meta = {
            "section": "DATA",
            "version": 1,
            "operator": self.operator,
            "noise": self.noise,
            "seed": self.seed,
            "meta": self.meta,
        }
        arrays = {"x": self.x, "b": self.b, "train_idx": self.train_idx, "val_idx": self.val_idx}
        write_container(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "Dataset":
        meta, arrays = parse_container(Path(path).read_bytes())
        if meta.get("section") != "DATA":
            raise FormatError("container does not hold a dataset")
        return cls(
            arrays["x"],
            arrays["b"],
            meta["operator"],
            meta["noise"],
            meta["seed"],
            arrays["train_idx"].astype(np.int64),
            arrays["val_idx"].astype(np.int64),
            meta["meta"],
        )


def sample_seed(seed: int, i: int) -> list[int]:
    """Noise seed of sample ``i``: independent of every other sample."""
    return [int(seed), 1, int(i)]


def build_dataset(models, op: LinearOperator, noise: float, seed: int, val_fraction: float = 0.1, meta: dict | None = None) -> Dataset:
    """b_i = add_noise(A x_i, noise, per-sample seed) for every model x_i."""
    x = np.asarray(models, dtype=np.float64)
    if x.ndim < 2:
        raise ValueError("models must be a stack of samples")
    n = x.shape[0]
    if int(np.prod(x.shape[1:])) != op.domain_dim:
        raise ValueError(f"model size {x.shape[1:]} does not match operator domain {op.domain_dim}")
    b = np.empty((n, op.range_dim))
    for i in range(n):
        b[i] = add_noise(apply(op, x[i]), noise, sample_seed(seed, i))
    tr, va = split_indices(n, val_fraction, seed)
    return Dataset(x, b, op.descriptor(), float(noise), int(seed), tr, va, dict(meta or {}))


def regenerate(ds: Dataset) -> Dataset:
    """Rebuild ``ds`` from its models, operator descriptor and seed."""
    op = from_descriptor(ds.operator)
    frac = len(ds.val_idx) / max(len(ds), 1)
    return build_dataset(ds.x, op, ds.noise, ds.seed, frac, ds.meta)


# ---------------------------------------------------------------------------
# duathlon
# ---------------------------------------------------------------------------


def sample_mixture(n: int, means, cov_scale: float, seed) -> tuple[np.ndarray, np.ndarray]:
    means = np.asarray(means, dtype=np.float64)
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, len(means), size=n)
    x = means[labels] + cov_scale * rng.standard_normal((n, means.shape[1]))
    return x, labels


def gen_duathlon(n: int = 10_000, means=DUATHLON_MEANS, cov_scale: float = DUATHLON_COV_SCALE, noise: float = 0.01, seed: int = 0, val_fraction: float = 0.1) -> Dataset:
    """Equal-weight Gaussian mixture in R^2 observed through b = x1 + x2 + eps."""
    if n < 1:
        raise ValueError("need at least one sample")
    means = np.asarray(means, dtype=np.float64)
    if means.shape != (3, 2):
        raise ValueError("three 2D means are required")
    for i in range(3):
        for j in range(i + 1, 3):
            if np.linalg.norm(means[i] - means[j]) < 1e-9:
                raise ValueError(f"means {i} and {j} coincide")
    if not cov_scale > 0:
        raise ValueError("cov_scale must be positive")
    x, labels = sample_mixture(n, means, cov_scale, [seed, 0])
    meta = {"experiment": "duathlon", "means": means.tolist(), "cov_scale": cov_scale, "labels": labels.tolist()}
    return build_dataset(x, Summation(2), noise, seed, val_fraction, meta)


class GaussianMixture:
    """Equal-weight isotropic mixture with an exact log-density gradient."""

    def __init__(self, means, cov_scale: float, weights=None):
        self.means = np.asarray(means, dtype=np.float64)
        self.s2 = float(cov_scale) ** 2
        k = len(self.means)
        self.logw = np.log(np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64))

    def responsibilities(self, x):
        x = np.asarray(x, dtype=np.float64)
        d2 = np.sum((x[..., None, :] - self.means) ** 2, axis=-1)  # (..., k)
        logp = self.logw - 0.5 * d2 / self.s2
        logp -= logp.max(axis=-1, keepdims=True)
        w = np.exp(logp)
        return w / w.sum(axis=-1, keepdims=True)

    def neg_log_prior(self, x):
        x = np.asarray(x, dtype=np.float64)
        d2 = np.sum((x[..., None, :] - self.means) ** 2, axis=-1)
        logp = self.logw - 0.5 * d2 / self.s2 - 0.5 * x.shape[-1] * math.log(2 * math.pi * self.s2)
        m = logp.max(axis=-1)
        return -(m + np.log(np.sum(np.exp(logp - m[..., None]), axis=-1)))

    def grad(self, x):
        """Gradient of -log p(x)."""
        x = np.asarray(x, dtype=np.float64)
        r = self.responsibilities(x)
        return (x - r @ self.means) / self.s2


# ---------------------------------------------------------------------------
# double well
# ---------------------------------------------------------------------------


@dataclass
class Objective:
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]


def doublewell_problem(mu: float = 1.0, gamma: float = 0.1, sigma: float = 0.5, b: float = 0.9) -> tuple[Objective, Objective]:
    """f1(x) on R and f2(z) on R^2 with E = [1, 0]; f2(z1, 0) = f1(z1).

    Both take arrays whose last axis is the coordinate (size 1 or 2), so
    batches of starts can be evaluated at once.
    """
    if not (mu > 0 and gamma > 0 and sigma > 0):
        raise ValueError("mu, gamma and sigma must be positive")

    def f1(x):
        x = np.asarray(x, dtype=np.float64)[..., 0]
        # (x - mu)^2 (x + mu)^2 written as the ring term so f2(z1, 0) == f1(z1) bitwise
        r = x * x - mu * mu
        return (x - b) ** 2 / (2 * sigma) + r * r / gamma

    def g1(x):
        x = np.asarray(x, dtype=np.float64)
        t = x[..., 0]
        return ((t - b) / sigma + 4 * t * (t * t - mu * mu) / gamma)[..., None]

    def f2(z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        r = z1 * z1 + z2 * z2 - mu * mu
        return (z1 - b) ** 2 / (2 * sigma) + r * r / gamma

    def g2(z):
        z = np.asarray(z, dtype=np.float64)
        z1, z2 = z[..., 0], z[..., 1]
        r = z1 * z1 + z2 * z2 - mu * mu
        return np.stack([(z1 - b) / sigma + 4 * r * z1 / gamma, 4 * r * z2 / gamma], axis=-1)

    return Objective(f1, g1), Objective(f2, g2)


def doublewell_prior_grads(mu: float, gamma: float):
    """Prior gradients for map_gd/langevin: 1D double well and its 2D ring lift."""

    def r1(x):
        return 4 * x * (x * x - mu * mu) / gamma

    def r2(z):
        r = np.sum(z * z, axis=-1, keepdims=True) - mu * mu
        return 4 * r * z / gamma

    return r1, r2


# ---------------------------------------------------------------------------
# IDX / MNIST
# ---------------------------------------------------------------------------

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def write_idx(path, array: np.ndarray) -> None:
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise ValueError("only unsigned byte IDX files are written")
    magic = 0x0800 | a.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{a.ndim}I", *a.shape))
        fh.write(a.tobytes())


def read_idx(path, expect_magic: int | None = None) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise FormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", data[:4])
    if expect_magic is not None and magic != expect_magic:
        raise FormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expect_magic:08x}")
    if magic >> 8 != 0x08:
        raise FormatError(f"{path}: bad magic 0x{magic:08x} (unsigned-byte IDX expected)")
    ndim = magic & 0xFF
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"{path}: truncated IDX header")
    shape = struct.unpack(f">{ndim}I", data[4:head])
    size = int(np.prod(shape))
    if len(data) - head < size:
        raise FormatError(f"{path}: truncated: {len(data) - head} of {size} bytes present")
    if len(data) - head > size:
        raise FormatError(f"{path}: {len(data) - head - size} trailing bytes")
    return np.frombuffer(data, dtype=np.uint8, offset=head).reshape(shape)


def load_mnist(images_path, labels_path=None) -> tuple[np.ndarray, np.ndarray | None]:
    """28x28 images scaled to [0, 1] and, if given, their labels."""
    images = read_idx(images_path, IDX_IMAGES)
    if images.ndim != 3:
        raise FormatError("image file must be three-dimensional")
    labels = None
    if labels_path is not None:
        labels = read_idx(labels_path, IDX_LABELS)
        if labels.shape[0] != images.shape[0]:
            raise FormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float64) / 255.0, labels


def load_stl10_binary(path, count: int | None = None) -> np.ndarray:
    """STL-10 ``*_X.bin``: uint8, 3x96x96 per image, column-major planes.

    Returns grayscale images (n, 96, 96) in [0, 1].
    """
    raw = np.fromfile(path, dtype=np.uint8)
    per = 3 * 96 * 96
    if raw.size % per:
        raise FormatError(f"{path}: size is not a multiple of one image")
    imgs = raw.reshape(-1, 3, 96, 96).transpose(0, 1, 3, 2)
    if count is not None:
        imgs = imgs[:count]
    return imgs.astype(np.float64).mean(axis=1) / 255.0


# ---------------------------------------------------------------------------
# synthetic shapes
# ---------------------------------------------------------------------------


def _shape_image(rng: np.random.Generator, n: int) -> np.ndarray:
    img = np.zeros((n, n))
    ii, jj = np.mgrid[0:n, 0:n]
    for _ in range(rng.integers(1, 4)):
        val = rng.uniform(0.3, 1.0)
        if rng.random() < 0.5:
            h, w = rng.integers(n // 8, n // 2 + 1, size=2)
            i0 = rng.integers(0, n - h + 1)
            j0 = rng.integers(0, n - w + 1)
            mask = (ii >= i0) & (ii < i0 + h) & (jj >= j0) & (jj < j0 + w)
        else:
            r = rng.uniform(n / 10, n / 4)
            ci, cj = rng.uniform(r, n - r, size=2)
            mask = (ii + 0.5 - ci) ** 2 + (jj + 0.5 - cj) ** 2 <= r * r
        img[mask] = val
    return img


def gen_shapes(count: int, n: int, seed: int) -> list[np.ndarray]:
    """Rectangles and discs with intensities in [0.3, 1] on a zero background."""
    if n < 8:
        raise ValueError("grid side must be at least 8")
    if count < 0:
        raise ValueError("count must be non-negative")
    return [_shape_image(np.random.default_rng([seed, i]), n) for i in range(count)]


def resize_images(images: Sequence[np.ndarray], n: int) -> np.ndarray:
    """Block-average or nearest-neighbor resample square images to side n."""
    out = []
    for img in images:
        m = img.shape[0]
        if m == n:
            out.append(np.asarray(img, dtype=np.float64))
        elif m % n == 0:
            f = m // n
            out.append(img.reshape(n, f, n, f).mean(axis=(1, 3)))
        else:
            idx = (np.arange(n) + 0.5) * m / n
            idx = np.minimum(idx.astype(int), m - 1)
            out.append(np.asarray(img, dtype=np.float64)[np.ix_(idx, idx)])
    return np.stack(out) if out else np.zeros((0, n, n))
