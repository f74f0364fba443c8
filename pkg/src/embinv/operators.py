"""Forward maps A with exact adjoints, and Gaussian noise injection."""
from __future__ import annotations

import math
from functools import cached_property

import numpy as np
from scipy import signal

# materialize blur operators as dense matrices up to this grid side
DENSE_MAX_SIDE = 32


class LinearOperator:
    """A linear map R^N -> R^M acting on flattened vectors.

    Subclasses implement ``apply_batch`` / ``adjoint_batch`` on (B, N) and
    (B, M) arrays.  Instances are immutable after construction.
    """

    domain_dim: int
    range_dim: int

    def apply_batch(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def adjoint_batch(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def descriptor(self) -> dict:
        raise NotImplementedError

    @cached_property
    def T(self) -> "LinearOperator":
        return _Adjoint(self)

    def dense(self) -> np.ndarray:
        return self.apply_batch(np.eye(self.domain_dim)).T.copy()

    @cached_property
    def gram(self) -> "LinearOperator":
        """A^T A, materialized when that is cheaper than two applications."""
        if self.domain_dim <= DENSE_MAX_SIDE**2:
            m = self.dense()
            return DenseOperator(m.T @ m)
        return _Composed(self.T, self)

    def norm_estimate(self, iters: int = 50, seed: int = 0) -> float:
        """Largest singular value by the power method."""
        v = np.random.default_rng(seed).standard_normal((1, self.domain_dim))
        v /= np.linalg.norm(v)
        s = 0.0
        for _ in range(iters):
            w = self.adjoint_batch(self.apply_batch(v))
            nw = np.linalg.norm(w)
            if nw == 0:
                return 0.0
            v = w / nw
            s = math.sqrt(nw)
        return s


def _as_batch(x, n, name):
    x = np.asarray(x, dtype=np.float64)
    if x.size != n:
        raise ValueError(f"{name}: expected {n} entries, got shape {x.shape}")
    return x.reshape(1, n)


def apply(op: LinearOperator, x) -> np.ndarray:
    return op.apply_batch(_as_batch(x, op.domain_dim, "apply"))[0]


def adjoint(op: LinearOperator, y) -> np.ndarray:
    return op.adjoint_batch(_as_batch(y, op.range_dim, "adjoint"))[0]


class _Adjoint(LinearOperator):
    def __init__(self, base: LinearOperator):
        self.base = base
        self.domain_dim = base.range_dim
        self.range_dim = base.domain_dim

    def apply_batch(self, x):
        return self.base.adjoint_batch(x)

    def adjoint_batch(self, y):
        return self.base.apply_batch(y)

    @property
    def T(self):
        return self.base

    def descriptor(self):
        return {"kind": "adjoint", "of": self.base.descriptor()}


class _Composed(LinearOperator):
    def __init__(self, outer: LinearOperator, inner: LinearOperator):
        self.outer, self.inner = outer, inner
        self.domain_dim = inner.domain_dim
        self.range_dim = outer.range_dim

    def apply_batch(self, x):
        return self.outer.apply_batch(self.inner.apply_batch(x))

    def adjoint_batch(self, y):
        return self.inner.adjoint_batch(self.outer.adjoint_batch(y))

    def descriptor(self):
        return {"kind": "composed", "outer": self.outer.descriptor(), "inner": self.inner.descriptor()}


class DenseOperator(LinearOperator):
    def __init__(self, matrix: np.ndarray):
        self.matrix = np.ascontiguousarray(matrix, dtype=np.float64)
        self.matrix.setflags(write=False)
        self.range_dim, self.domain_dim = self.matrix.shape

    def apply_batch(self, x):
        return x @ self.matrix.T

    def adjoint_batch(self, y):
        return y @ self.matrix

    def dense(self):
        return self.matrix.copy()

    def descriptor(self):
        return {"kind": "dense", "shape": list(self.matrix.shape)}


class Summation(LinearOperator):
    """A = [1 1 ... 1]."""

    def __init__(self, n: int = 2):
        self.n = int(n)
        self.domain_dim = self.n
        self.range_dim = 1

    def apply_batch(self, x):
        return x.sum(axis=1, keepdims=True)

    def adjoint_batch(self, y):
        return np.repeat(y, self.n, axis=1)

    def descriptor(self):
        return {"kind": "summation", "n": self.n}


class Identity(LinearOperator):
    def __init__(self, n: int):
        self.n = int(n)
        self.domain_dim = self.range_dim = self.n

    def apply_batch(self, x):
        return x.copy()

    def adjoint_batch(self, y):
        return y.copy()

    def descriptor(self):
        return {"kind": "identity", "n": self.n}


def blur_kernel(s: float) -> np.ndarray:
    """exp(-|d|/s) on integer offsets within radius ceil(4 s), unit sum."""
    if not s > 0:
        raise ValueError(f"blur width must be positive, got {s}")
    r = int(math.ceil(4.0 * s))
    d = np.arange(-r, r + 1, dtype=np.float64)
    dist = np.hypot(d[:, None], d[None, :])
    k = np.where(dist <= r, np.exp(-dist / s), 0.0)
    return k / k.sum()


class Blur2D(LinearOperator):
    """Zero-padded convolution of an n x n image with :func:`blur_kernel`."""

    def __init__(self, n: int, s: float):
        if n < 2:
            raise ValueError("grid side must be at least 2")
        self.n = int(n)
        self.s = float(s)
        self.kernel = blur_kernel(self.s)
        self.kernel.setflags(write=False)
        self.domain_dim = self.range_dim = self.n * self.n
        self._matrix = self._materialize() if self.n <= DENSE_MAX_SIDE else None

    def _materialize(self):
        n, k = self.n, self.kernel
        r = k.shape[0] // 2
        ii, jj = np.divmod(np.arange(n * n), n)
        di = ii[:, None] - ii[None, :]
        dj = jj[:, None] - jj[None, :]
        inside = (np.abs(di) <= r) & (np.abs(dj) <= r)
        m = np.zeros((n * n, n * n))
        m[inside] = k[di[inside] + r, dj[inside] + r]
        return m

    def _filter(self, x, kernel):
        imgs = x.reshape(-1, self.n, self.n)
        out = np.stack([signal.fftconvolve(img, kernel, mode="same") for img in imgs])
        return out.reshape(x.shape[0], -1)

    def apply_batch(self, x):
        if self._matrix is not None:
            return x @ self._matrix.T
        # kernel is point-symmetric, so convolution equals correlation
        return self._filter(x, self.kernel)

    def adjoint_batch(self, y):
        if self._matrix is not None:
            return y @ self._matrix
        return self._filter(y, self.kernel[::-1, ::-1])

    def dense(self):
        return self._matrix.copy() if self._matrix is not None else super().dense()

    def descriptor(self):
        return {"kind": "blur", "n": self.n, "s": self.s}


def dipole_kernel(r, n_i, n_j) -> float:
    """n_i^T H(r) n_j with H the Hessian of 1/|r|: (3 r r^T / |r|^2 - I) / |r|^3."""
    r = np.asarray(r, dtype=np.float64)
    d = float(np.linalg.norm(r))
    if d == 0.0:
        raise ValueError("receiver coincides with a cell center")
    rhat = r / d
    return float((3.0 * (n_i @ rhat) * (rhat @ n_j) - n_i @ n_j) / d**3)


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,) or abs(np.linalg.norm(v) - 1.0) > 1e-12:
        raise ValueError(f"{name} must be a unit 3-vector, got {v}")
    return v


class Magnetics2D(LinearOperator):
    """Midpoint-rule magnetic kernel for a vertical n x n section.

    Image row i is the depth index (cell centers at depth (i + 1/2) h_c),
    column j the horizontal position (j + 1/2) h_c.  One receiver sits above
    every column at height ``h_r`` over the surface.
    """

    def __init__(self, n: int, h_c: float = 1.0, h_r: float | None = None, n_I=(0.0, 0.0, 1.0), n_J=(0.0, 0.0, 1.0)):
        if n < 2:
            raise ValueError("grid side must be at least 2")
        if h_c <= 0 or (h_r is not None and h_r <= 0):
            raise ValueError("cell size and receiver height must be positive")
        self.n = int(n)
        self.h_c = float(h_c)
        self.h_r = float(h_c if h_r is None else h_r)
        self.n_I = _unit(n_I, "n_I")
        self.n_J = _unit(n_J, "n_J")
        self.domain_dim = self.n * self.n
        self.range_dim = self.n
        self.matrix = self._assemble()
        self.matrix.setflags(write=False)

    def _assemble(self):
        n, h = self.n, self.h_c
        xs = (np.arange(n) + 0.5) * h
        depth = (np.arange(n) + 0.5) * h
        # r = receiver - cell, z axis pointing up
        rx = xs[:, None, None] - xs[None, None, :]  # (receiver, depth, column)
        rz = self.h_r + depth[None, :, None] + 0.0 * rx
        rx = np.broadcast_to(rx, rz.shape)
        r = np.stack([rx, np.zeros_like(rx), rz], axis=-1)
        d = np.linalg.norm(r, axis=-1)
        if np.any(d == 0):
            raise ValueError("receiver coincides with a cell center")
        rhat = r / d[..., None]
        val = (3.0 * (rhat @ self.n_I) * (rhat @ self.n_J) - self.n_I @ self.n_J) / d**3
        return (val * h * h).reshape(n, n * n)

    def apply_batch(self, x):
        return x @ self.matrix.T

    def adjoint_batch(self, y):
        return y @ self.matrix

    def dense(self):
        return self.matrix.copy()

    def descriptor(self):
        return {
            "kind": "magnetics",
            "n": self.n,
            "h_c": self.h_c,
            "h_r": self.h_r,
            "n_I": self.n_I.tolist(),
            "n_J": self.n_J.tolist(),
        }


def make_blur(n: int, s: float) -> Blur2D:
    return Blur2D(n, s)


def make_magnetics(n: int, h_c: float = 1.0, h_r: float | None = None, n_I=(0.0, 0.0, 1.0), n_J=(0.0, 0.0, 1.0)) -> Magnetics2D:
    return Magnetics2D(n, h_c, h_r, n_I, n_J)


def from_descriptor(d: dict) -> LinearOperator:
    kind = d["kind"]
    if kind == "summation":
        return Summation(d.get("n", 2))
    if kind == "identity":
        return Identity(d["n"])
    if kind == "blur":
        return Blur2D(d["n"], d["s"])
    if kind == "magnetics":
        return Magnetics2D(d["n"], d.get("h_c", 1.0), d.get("h_r"), d.get("n_I", (0, 0, 1)), d.get("n_J", (0, 0, 1)))
    raise ValueError(f"unknown operator kind {kind!r}")


def add_noise(b, level: float, seed) -> np.ndarray:
    """b + eps, eps ~ N(0, sigma^2 I), sigma = level * |b|_2 / sqrt(M)."""
    if level < 0:
        raise ValueError("noise level must be non-negative")
    b = np.asarray(b, dtype=np.float64)
    if level == 0:
        return b.copy()
    sigma = level * np.linalg.norm(b) / math.sqrt(b.size)
    return b + sigma * np.random.default_rng(seed).standard_normal(b.shape)
