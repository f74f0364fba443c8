"""Over-complete embedding x = E z, the time-dependent E(t), and the
active/null-space split of a full-row-rank E."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class StaticEmbedding:
    """A fixed matrix.  For images ``E`` is a (1, C, 1, 1) channel-mixing kernel."""

    E: np.ndarray

    @property
    def kind(self):
        return "dense" if self.E.ndim == 2 else "conv"

    def at(self, t: float) -> np.ndarray:
        return self.E

    def to_dict(self, prefix: str = "E") -> dict[str, np.ndarray]:
        return {prefix: self.E}


@dataclass
class TimedEmbedding:
    """E(t) = reshape(W2 tanh(t W1 + c)), a two-layer network of time."""

    W1: np.ndarray  # (1, m)
    c: np.ndarray  # (m,)
    W2: np.ndarray  # (prod(shape), m)
    shape: tuple[int, ...]

    @property
    def kind(self):
        return "dense" if len(self.shape) == 2 else "conv"

    def at(self, t: float) -> np.ndarray:
        h = np.tanh(t * self.W1[0] + self.c)
        return (self.W2 @ h).reshape(self.shape)

    def to_dict(self, prefix: str = "E") -> dict[str, np.ndarray]:
        return {f"{prefix}.W1": self.W1, f"{prefix}.c": self.c, f"{prefix}.W2": self.W2}


EmbeddingParams = StaticEmbedding | TimedEmbedding


def init_static(rng: np.random.Generator, n: int, k: int) -> StaticEmbedding:
    if k <= n:
        raise ValueError("embedding must be over-complete (K > N)")
    return StaticEmbedding(rng.standard_normal((n, k)) / np.sqrt(k))


def init_static_conv(rng: np.random.Generator, channels: int) -> StaticEmbedding:
    # unit-norm channel weights give E E^T = I, as the dense init does on average
    e = rng.standard_normal((1, channels, 1, 1))
    return StaticEmbedding(e / np.linalg.norm(e))


def init_timed(rng: np.random.Generator, shape: tuple[int, ...], hidden: int = 16) -> TimedEmbedding:
    size = int(np.prod(shape))
    fan = shape[1] if len(shape) >= 2 else size
    # W2 ~ N(0, 1/m) gives E(t) entries of size ~1; rescale by 1/sqrt(K) so
    # E(t) matches the static initialization
    emb = TimedEmbedding(
        rng.standard_normal((1, hidden)),
        rng.standard_normal(hidden),
        rng.standard_normal((size, hidden)) / np.sqrt(hidden) / np.sqrt(fan),
        tuple(shape),
    )
    # pin |E(0)|_F^2 to its expected value; with few entries (image channel
    # mixing) the raw draw can be far off and set a huge initial step
    norm2 = float(np.sum(emb.at(0.0) ** 2))
    if norm2 > 0:
        emb.W2 *= np.sqrt(size / fan / norm2)
    return emb


def embed(E, z) -> np.ndarray:
    E = np.asarray(E, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if E.ndim != 2 or E.shape[1] != z.shape[0]:
        raise ValueError(f"cannot embed: E {E.shape}, z {z.shape}")
    return E @ z


def embedding_at(params: EmbeddingParams, t: float) -> np.ndarray:
    return params.at(t)


def decompose_embedding(E, rtol: float = 1e-10) -> tuple[np.ndarray, np.ndarray]:
    """X = pinv(E) and an orthonormal basis Y of null(E).

    E X = I, E Y = 0, Y^T Y = I and z = X E z + Y Y^T z.
    """
    E = np.asarray(E, dtype=np.float64)
    n, k = E.shape
    u, s, vt = np.linalg.svd(E, full_matrices=True)
    if s.size == 0 or s[-1] < rtol * s[0]:
        raise np.linalg.LinAlgError("embedding matrix is rank deficient")
    X = vt[:n].T @ np.diag(1.0 / s) @ u.T
    Y = vt[n:].T.copy()
    return X, Y


# -- graph helpers -------------------------------------------------------


def embedding_leaves(graph: dc.Graph, params: EmbeddingParams, prefix: str = "E", trainable: bool = True):
    leaf = graph.param if trainable else graph.input
    if isinstance(params, StaticEmbedding):
        return leaf(prefix)
    return (leaf(f"{prefix}.W1"), leaf(f"{prefix}.c"), leaf(f"{prefix}.W2"))


def embedding_node(leaves, params: EmbeddingParams, t: float) -> dc.Node:
    if isinstance(params, StaticEmbedding):
        return leaves
    W1, c, W2 = leaves
    h = dc.tanh(W1 * t + dc.reshape(c, (1, -1)))  # (1, m)
    flat = h @ W2.T  # (1, size)
    return dc.reshape(flat, params.shape)


def apply_node(z: dc.Node, E: dc.Node, kind: str) -> dc.Node:
    """x = E z for a batch of embedded vectors."""
    return z @ E.T if kind == "dense" else dc.conv(z, E)


def adjoint_node(x: dc.Node, E: dc.Node, kind: str) -> dc.Node:
    """E^T x for a batch."""
    return x @ E if kind == "dense" else dc.conv(x, dc.flipT(E))
