"""The learnable potential phi(z, theta, t) = q^T s(K_n s(... s(K_1 z + t b_1) ...) + t b_n).

``s`` is log-cosh throughout.  Kernels are dense matrices (``kind="dense"``,
z of shape (K,)) or 2D convolution stencils over embedding channels
(``kind="conv"``, z of shape (C, n, n)).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc


@dataclass
class PotentialParams:
    kernels: list[np.ndarray]
    biases: list[np.ndarray]
    readout: np.ndarray
    kind: str = "dense"

    def __post_init__(self):
        if not self.kernels:
            raise ValueError("a potential needs at least one layer")
        if len(self.kernels) != len(self.biases):
            raise ValueError("one time bias per layer is required")
        if not np.all(np.isfinite(self.readout)):
            raise ValueError("readout must be finite")
        for a, b in zip(self.kernels, self.kernels[1:]):
            if a.shape[0] != b.shape[1]:
                raise ValueError(f"layer shapes do not compose: {a.shape} -> {b.shape}")

    @property
    def depth(self) -> int:
        return len(self.kernels)

    @property
    def in_shape(self) -> tuple[int, ...]:
        k0 = self.kernels[0]
        if self.kind == "dense":
            return (k0.shape[1],)
        return (k0.shape[1],) + self.biases[0].shape[1:]

    def to_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"{prefix}K{i}"] = k
            out[f"{prefix}b{i}"] = b
        out[f"{prefix}q"] = self.readout
        return out

    @classmethod
    def from_dict(cls, d: dict, prefix: str = "", kind: str = "dense") -> "PotentialParams":
        n = 0
        while f"{prefix}K{n}" in d:
            n += 1
        return cls(
            [d[f"{prefix}K{i}"] for i in range(n)],
            [d[f"{prefix}b{i}"] for i in range(n)],
            d[f"{prefix}q"],
            kind,
        )


def init_potential(
    rng: np.random.Generator,
    in_channels: int,
    kind: str = "dense",
    depth: int = 3,
    width: int | None = None,
    grid: int | None = None,
    stencil: int = 3,
) -> PotentialParams:
    """Kernels and readout ~ N(0, 1/fan_in), biases zero.

    ``width`` defaults to 4x the input channels.  ``grid`` (image side) is
    required for ``kind="conv"`` because biases are per-pixel.
    """
    width = 4 * in_channels if width is None else width
    kernels, biases = [], []
    c_in = in_channels
    for _ in range(depth):
        if kind == "dense":
            kernels.append(rng.standard_normal((width, c_in)) / np.sqrt(c_in))
            biases.append(np.zeros(width))
        elif kind == "conv":
            if grid is None:
                raise ValueError("conv potentials need the grid side")
            fan_in = c_in * stencil * stencil
            kernels.append(rng.standard_normal((width, c_in, stencil, stencil)) / np.sqrt(fan_in))
            biases.append(np.zeros((width, grid, grid)))
        else:
            raise ValueError(f"unknown potential kind {kind!r}")
        c_in = width
    if kind == "dense":
        q = rng.standard_normal(width) / np.sqrt(width)
    else:
        q = rng.standard_normal((width, grid, grid)) / np.sqrt(width)
    return PotentialParams(kernels, biases, q, kind)


@dataclass
class PotentialNodes:
    kernels: list[dc.Node]
    biases: list[dc.Node]
    readout: dc.Node
    kind: str = "dense"
    shared: dict = field(default_factory=dict)


def potential_leaves(graph: dc.Graph, prefix: str, depth: int, kind: str, trainable: bool = True) -> PotentialNodes:
    leaf = graph.param if trainable else graph.input
    return PotentialNodes(
        [leaf(f"{prefix}K{i}") for i in range(depth)],
        [leaf(f"{prefix}b{i}") for i in range(depth)],
        leaf(f"{prefix}q"),
        kind,
    )


def potential_node(z: dc.Node, nodes: PotentialNodes, t: float) -> dc.Node:
    """Sum over the batch of phi(z_b); z is (B, K) or (B, C, n, n)."""
    a = z
    for K, b in zip(nodes.kernels, nodes.biases):
        u = a @ K.T if nodes.kind == "dense" else dc.conv(a, K)
        u = u + dc.tile(b * t, u)
        a = dc.logcosh_(u)
    return dc.total(dc.mul(a, dc.tile(nodes.readout, a)))


def potential_grad_node(z: dc.Node, nodes: PotentialNodes, t: float) -> dc.Node:
    """Node for grad_z of the batch potential (per-sample gradients, stacked)."""
    (g,) = z.graph.gradients(potential_node(z, nodes, t), [z])
    if g is None:
        g = dc.scale(z, 0.0)
    return g


def _single(z, params: PotentialParams):
    z = np.asarray(z, dtype=np.float64)
    if z.shape != params.in_shape:
        raise ValueError(f"z has shape {z.shape}, potential expects {params.in_shape}")
    return z[None]


def _graph_for(params: PotentialParams, t: float):
    g = dc.Graph()
    z = g.input("z")
    nodes = potential_leaves(g, "", params.depth, params.kind, trainable=False)
    value = potential_node(z, nodes, t)
    return g, z, value


def phi(z, params: PotentialParams, t: float = 0.0) -> float:
    zb = _single(z, params)
    g, _, value = _graph_for(params, t)
    return dc.forward_scalar(g, {"z": zb, **params.to_dict()}, value)


def grad_phi(z, params: PotentialParams, t: float = 0.0) -> np.ndarray:
    zb = _single(z, params)
    g, znode, value = _graph_for(params, t)
    (gz,) = g.gradients(value, [znode])
    g.bind({"z": zb, **params.to_dict()})
    return g.value(gz)[0].copy()


def scaled_identity_potential(gamma: float, k: int) -> PotentialParams:
    """Single layer with K = gamma I and q = 1: a smooth gamma * |z|_1."""
    return PotentialParams([gamma * np.eye(k)], [np.zeros(k)], np.ones(k), "dense")


def l1_surrogate_gap(gamma: float, z) -> float:
    """|phi(z; K = gamma I, q = 1, t = 0) - gamma |z|_1|, bounded by K log 2."""
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    z = np.asarray(z, dtype=np.float64).reshape(-1)
    value = phi(z, scaled_identity_potential(gamma, z.size), 0.0)
    return abs(value - gamma * np.abs(z).sum())
