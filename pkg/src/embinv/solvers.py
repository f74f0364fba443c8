"""Unrolled solvers (OPTEnet, EUnet, Proximal) and classical baselines.

The unrolled networks are built as :mod:`diffcore` graphs so the same graph
serves inference and training.  Each layer performs

    z <- z - h_j * (E_j^T A^T (A E_j z - b) + grad_z phi(z; theta_j, t_j))

with ``h_j = softplus(raw_j) > 0``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .embedding import (
    StaticEmbedding,
    TimedEmbedding,
    adjoint_node,
    apply_node,
    embedding_leaves,
    embedding_node,
    init_static,
    init_static_conv,
    init_timed,
)
from .operators import LinearOperator
from .potential import PotentialParams, init_potential, phi, potential_grad_node, potential_leaves, potential_node

VARIANTS = ("optenet", "eunet", "proximal", "ista", "mapgd", "langevin")
UNROLLED = ("optenet", "eunet", "proximal")
DIVERGENCE_LIMIT = 1e8
POWER_STEPS = 8


class DivergenceError(FloatingPointError):
    def __init__(self, layer: int, norm: float):
        super().__init__(f"iterate diverged at layer {layer} (|z| = {norm:.3g})")
        self.layer = layer
        self.norm = norm


@dataclass
class SolverSpec:
    variant: str = "eunet"
    layers: int = 16
    step_sizes: Sequence[float] | None = None
    embedding_dim: int = 128
    init_policy: str = "backprojected"
    train_steps: bool = True
    potential_depth: int = 3
    potential_width: int | None = None
    embedding_mode: str = "timed"
    embedding_hidden: int = 16
    tie_potential: bool = False
    phi_time: float = 1.0
    gamma: float = 0.1
    alpha: float = 1e-3
    iters: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown solver variant {self.variant!r}")
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.step_sizes is not None:
            if len(self.step_sizes) != self.layers:
                raise ValueError("one step size per layer is required")
            if any(not h > 0 for h in self.step_sizes):
                raise ValueError("step sizes must be positive")
        if self.init_policy not in ("zeros", "backprojected"):
            raise ValueError(f"unknown init policy {self.init_policy!r}")
        if self.embedding_mode not in ("timed", "independent"):
            raise ValueError(f"unknown embedding mode {self.embedding_mode!r}")


@dataclass(frozen=True)
class Problem:
    """Forward operator plus the per-sample model shape: (N,) or (1, n, n)."""

    op: LinearOperator
    x_shape: tuple[int, ...]

    @property
    def kind(self) -> str:
        return "dense" if len(self.x_shape) == 1 else "conv"

    @property
    def n_model(self) -> int:
        return int(np.prod(self.x_shape))


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def softplus_inv(h):
    h = np.asarray(h, dtype=np.float64)
    return np.where(h > 30, h, np.log(np.expm1(np.minimum(h, 30))))


def soft_threshold(x, tau):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


# ---------------------------------------------------------------------------
# layer layout
# ---------------------------------------------------------------------------


@dataclass
class LayerPlan:
    """Which leaves each layer reads and at what time the potential runs."""

    embedding: object | None  # StaticEmbedding/TimedEmbedding template, or None for identity
    embedding_prefix: list[str | None]
    embedding_time: list[float]
    potential_prefix: list[str]
    potential_time: list[float]
    potential_kind: str
    potential_depth: int


def _times(J):
    return [j / J for j in range(J)]


def layer_plan(spec: SolverSpec, problem: Problem, embedding=None) -> LayerPlan:
    J = spec.layers
    kind = problem.kind
    depth = spec.potential_depth
    if spec.variant == "optenet":
        return LayerPlan(embedding, ["E"] * J, [0.0] * J, ["phi."] * J, [spec.phi_time] * J, kind, depth)
    if spec.variant == "proximal":
        return LayerPlan(None, [None] * J, [0.0] * J, [f"layer{j:02d}.phi." for j in range(J)], [spec.phi_time] * J, kind, depth)
    if spec.variant == "eunet":
        ts = _times(J)
        if spec.embedding_mode == "independent":
            eprefix = [f"E.{j:02d}" for j in range(J)]
        else:
            eprefix = ["E"] * J
        if spec.tie_potential:
            pprefix, ptime = ["phi."] * J, ts
        else:
            pprefix, ptime = [f"layer{j:02d}.phi." for j in range(J)], [spec.phi_time] * J
        return LayerPlan(embedding, eprefix, ts, pprefix, ptime, kind, depth)
    raise ValueError(f"{spec.variant} is not an unrolled network")


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


@dataclass
class UnrolledGraph:
    graph: dc.Graph
    b: dc.Node
    xhat: dc.Node
    zs: list[dc.Node]
    xs: list[dc.Node]
    embeddings: list[dc.Node | None]
    potentials: list
    steps: list[dc.Node]
    plan: LayerPlan
    extra: dict = field(default_factory=dict)


def _embed_fwd(z, E, kind):
    return z if E is None else apply_node(z, E, kind)


def _embed_adj(x, E, kind):
    return x if E is None else adjoint_node(x, E, kind)


def _spectral_sq(E, op: LinearOperator, kind, z_shape, seed=0):
    """Power-method estimate of |A E|_2^2 as a differentiable graph node."""
    g = E.graph
    v0 = np.random.default_rng(seed).standard_normal((1,) + tuple(z_shape))
    v = g.const(v0 / np.linalg.norm(v0))
    for _ in range(POWER_STEPS):
        x = _embed_fwd(v, E, kind)
        w = _embed_adj(dc.reshape_as(dc.linop(x, op.gram), x), E, kind)
        v = dc.smul(dc.recip(dc.norm(w)), w)
    x = _embed_fwd(v, E, kind)
    w = _embed_adj(dc.reshape_as(dc.linop(x, op.gram), x), E, kind)
    return dc.total(dc.mul(v, w))


def build_unrolled(graph: dc.Graph, spec: SolverSpec, problem: Problem, plan: LayerPlan, z_shape, train_steps=None) -> UnrolledGraph:
    """Wire J layers into ``graph``; the input leaf is ``b`` with shape (B, M)."""
    op, kind = problem.op, problem.kind
    train_steps = spec.train_steps if train_steps is None else train_steps
    b = graph.input("b")
    atb = dc.linop(b, op.T)  # (B, N)
    J = spec.layers
    emb_cache: dict = {}
    pot_cache: dict = {}

    def E_at(j):
        prefix = plan.embedding_prefix[j]
        if prefix is None:
            return None
        t = plan.embedding_time[j]
        key = (prefix, t if isinstance(plan.embedding, TimedEmbedding) else 0.0)
        if key not in emb_cache:
            leaves = embedding_leaves(graph, plan.embedding, prefix)
            emb_cache[key] = embedding_node(leaves, plan.embedding, t)
        return emb_cache[key]

    def pot(j):
        prefix = plan.potential_prefix[j]
        if prefix not in pot_cache:
            pot_cache[prefix] = potential_leaves(graph, prefix, plan.potential_depth, plan.potential_kind)
        return pot_cache[prefix]

    E0 = E_at(0)
    if E0 is None:
        bp = dc.reshape(atb, (-1,) + tuple(problem.x_shape))
    else:
        x_like = dc.reshape(atb, (-1,) + tuple(problem.x_shape))
        bp = _embed_adj(x_like, E0, kind)
    if spec.init_policy == "zeros":
        z = dc.scale(bp, 0.0)
    else:
        L = _spectral_sq(E0, op, kind, z_shape) if E0 is not None else graph.const(op.norm_estimate() ** 2)
        z = dc.smul(dc.recip(L), bp)

    zs, xs, embs, pots, steps = [z], [], [], [], []
    step_leaf = graph.param if train_steps else graph.input
    for j in range(J):
        E = E_at(j)
        p = pot(j)
        x = _embed_fwd(z, E, kind)
        resid = dc.reshape_as(dc.linop(x, op.gram) - atb, x)
        data_grad = _embed_adj(resid, E, kind)
        reg_grad = potential_grad_node(z, p, plan.potential_time[j])
        h = dc.softplus(step_leaf(f"h.{j:02d}"))
        z = z - dc.smul(h, data_grad + reg_grad)
        zs.append(z)
        xs.append(x)
        embs.append(E)
        pots.append(p)
        steps.append(h)
    E_last = embs[-1]
    xhat = _embed_fwd(z, E_last, kind)
    xhat = dc.reshape(xhat, (-1,) + tuple(problem.x_shape))
    return UnrolledGraph(graph, b, xhat, zs, xs, embs, pots, steps, plan)


# ---------------------------------------------------------------------------
# networks with parameter storage
# ---------------------------------------------------------------------------


class Network:
    """An unrolled solver together with its named parameter arrays."""

    def __init__(self, spec: SolverSpec, problem: Problem, params: dict[str, np.ndarray], embedding_template=None):
        if spec.variant not in UNROLLED:
            raise ValueError(f"{spec.variant} is not an unrolled network")
        self.spec = spec
        self.problem = problem
        self.params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
        self.embedding_template = embedding_template
        self._built: UnrolledGraph | None = None

    # -- shapes -----------------------------------------------------------

    @property
    def z_shape(self) -> tuple[int, ...]:
        return z_shape_for(self.spec, self.problem)

    @classmethod
    def init(cls, spec: SolverSpec, problem: Problem, seed: int = 0) -> "Network":
        params, template = init_params(spec, problem, np.random.default_rng(seed))
        return cls(spec, problem, params, template)

    # -- graph ------------------------------------------------------------

    def build(self) -> UnrolledGraph:
        if self._built is None:
            g = dc.Graph()
            plan = layer_plan(self.spec, self.problem, self.embedding_template)
            self._built = build_unrolled(g, self.spec, self.problem, plan, self.z_shape)
        return self._built

    def bindings(self, b: np.ndarray) -> dict:
        out = dict(self.params)
        out["b"] = b
        return out

    def predict(self, b: np.ndarray, batch_size: int = 256) -> np.ndarray:
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        ug = self.build()
        outs = []
        for i in range(0, b.shape[0], batch_size):
            ug.graph.bind(self.bindings(b[i : i + batch_size]))
            outs.append(ug.graph.value(ug.xhat).copy())
            check_divergence(ug, range(len(ug.zs)))
        return np.concatenate(outs) if outs else np.zeros((0,) + tuple(self.problem.x_shape))

    def trajectory(self, b: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        ug = self.build()
        ug.graph.bind(self.bindings(b))
        vals = ug.graph.evaluate([ug.xhat] + ug.zs)
        check_divergence(ug, range(len(ug.zs)))
        return vals[0].copy(), [v.copy() for v in vals[1:]]

    def layer_objectives(self, b: np.ndarray) -> np.ndarray:
        """Mean over samples of 1/2|A E_j z_j - b|^2 + phi_j(z_j) for each layer j."""
        b = np.atleast_2d(np.asarray(b, dtype=np.float64))
        ug = self.build()
        g = ug.graph
        key = "layer_objectives"
        if key not in ug.extra:
            nodes = []
            for j, z in enumerate(ug.zs[:-1]):
                x = ug.xs[j]
                r = dc.linop(x, self.problem.op) - ug.b
                nodes.append(dc.scale(dc.sqnorm(r), 0.5) + potential_node(z, ug.potentials[j], ug.plan.potential_time[j]))
            ug.extra[key] = nodes
        g.bind(self.bindings(b))
        vals = g.evaluate(ug.extra[key])
        return np.array([float(v) for v in vals]) / b.shape[0]

    def step_sizes(self) -> np.ndarray:
        return softplus([self.params[f"h.{j:02d}"] for j in range(self.spec.layers)])

    def copy(self) -> "Network":
        net = Network(self.spec, self.problem, {k: v.copy() for k, v in self.params.items()}, self.embedding_template)
        net._built = self._built
        return net


def check_divergence(ug: UnrolledGraph, layers) -> None:
    g = ug.graph
    for j in layers:
        v = g._values[ug.zs[j].id]
        if v is None:
            continue
        nrm = float(np.max(np.sqrt(np.sum(v.reshape(v.shape[0], -1) ** 2, axis=1))))
        if not nrm <= DIVERGENCE_LIMIT:
            raise DivergenceError(j, nrm)


def z_shape_for(spec: SolverSpec, problem: Problem) -> tuple[int, ...]:
    if spec.variant == "proximal":
        return tuple(problem.x_shape)
    if problem.kind == "dense":
        return (spec.embedding_dim,)
    n = problem.x_shape[-1]
    return (spec.embedding_dim, n, n)


def _initial_steps(spec, problem, embedding_matrices) -> np.ndarray:
    """h_j = 1 / |A E_j|^2 for the embedding each layer applies."""
    if spec.step_sizes is not None:
        return np.asarray(spec.step_sizes, dtype=np.float64)
    zsh = z_shape_for(spec, problem)
    cache: dict[int, float] = {}
    hs = []
    for E in embedding_matrices:
        key = id(E)
        if key not in cache:
            cache[key] = 1.0 / max(_numeric_spectral_sq(problem, E, zsh), 1e-12)
        hs.append(cache[key])
    return np.array(hs)


def _numeric_spectral_sq(problem: Problem, E, z_shape, iters: int = 50) -> float:
    op, kind = problem.op, problem.kind
    v = np.random.default_rng(0).standard_normal((1,) + tuple(z_shape))
    s = 0.0
    for _ in range(iters):
        v /= np.linalg.norm(v)
        x = v if E is None else embed_batch(E, v, kind)
        w = op.gram.apply_batch(x.reshape(1, -1)).reshape(x.shape)
        w = w if E is None else embed_adjoint_batch(E, w, kind)
        s = float(np.sum(v * w))
        v = w
    return s


def init_params(spec: SolverSpec, problem: Problem, rng: np.random.Generator):
    """Fresh parameters for an unrolled network plus the embedding template."""
    kind = problem.kind
    params: dict[str, np.ndarray] = {}
    zsh = z_shape_for(spec, problem)
    in_ch = zsh[0]
    grid = problem.x_shape[-1] if kind == "conv" else None
    template = None
    E0 = None
    if spec.variant != "proximal":
        if kind == "dense":
            n, k = problem.n_model, spec.embedding_dim
            shape = (n, k)
        else:
            shape = (1, spec.embedding_dim, 1, 1)
        if spec.variant == "eunet" and spec.embedding_mode == "timed":
            template = init_timed(rng, shape, spec.embedding_hidden)
            params.update(template.to_dict("E"))
            E0 = template.at(0.0)
        else:
            first = init_static(rng, *shape) if kind == "dense" else init_static_conv(rng, spec.embedding_dim)
            template = first
            if spec.variant == "eunet":
                for j in range(spec.layers):
                    params[f"E.{j:02d}"] = first.E.copy()
            else:
                params["E"] = first.E
            E0 = first.E
    plan = layer_plan(spec, problem, template)
    for prefix in dict.fromkeys(plan.potential_prefix):
        pp = init_potential(rng, in_ch, "dense" if kind == "dense" else "conv", spec.potential_depth, spec.potential_width, grid)
        params.update(pp.to_dict(prefix))
    if spec.variant == "eunet" and spec.embedding_mode == "timed":
        per_layer = [template.at(t) for t in plan.embedding_time]
    else:
        per_layer = [E0] * spec.layers
    hs = _initial_steps(spec, problem, per_layer)
    for j, h in enumerate(hs):
        params[f"h.{j:02d}"] = np.asarray(softplus_inv(h))
    return params, template


# ---------------------------------------------------------------------------
# numeric helpers for dense/conv embeddings
# ---------------------------------------------------------------------------


def embed_batch(E, z, kind):
    if kind == "dense":
        return z @ E.T
    return dc.conv2d(z, E)


def embed_adjoint_batch(E, x, kind):
    if kind == "dense":
        return x @ E
    return dc.conv2d(x, dc.flip_transpose(E))


def _kind_of(E):
    return "dense" if np.ndim(E) == 2 else "conv"


# ---------------------------------------------------------------------------
# functional forward passes
# ---------------------------------------------------------------------------


def _as_batch_b(b, op):
    b = np.asarray(b, dtype=np.float64)
    single = b.ndim == 1
    b2 = b.reshape(1, -1) if single else b
    if b2.shape[1] != op.range_dim:
        raise ValueError(f"b has {b2.shape[1]} entries, operator range is {op.range_dim}")
    return b2, single


def _problem_for(A: LinearOperator, E, kind=None) -> Problem:
    kind = kind or _kind_of(E)
    if kind == "dense":
        return Problem(A, (A.domain_dim,))
    n = int(round(math.sqrt(A.domain_dim)))
    return Problem(A, (1, n, n))


def _fixed_step_params(spec: SolverSpec, hs) -> dict:
    return {f"h.{j:02d}": np.asarray(softplus_inv(h)) for j, h in enumerate(hs)}


def _run(net: Network, b2, single):
    xhat, zs = net.trajectory(b2)
    if single:
        return xhat[0], [z[0] for z in zs]
    return xhat, zs


def _steps_or_default(spec, problem, mats):
    return _initial_steps(spec, problem, mats)


def optenet_forward(b, A: LinearOperator, E, params: PotentialParams, spec: SolverSpec):
    """J shared-weight descent steps on 1/2|AEz - b|^2 + phi(z; theta).

    Returns (x_hat, [z_0, ..., z_J]).
    """
    if spec.variant != "optenet":
        raise ValueError("optenet_forward needs an optenet spec")
    E = np.asarray(E, dtype=np.float64)
    problem = _problem_for(A, E)
    b2, single = _as_batch_b(b, A)
    spec = replace(spec, embedding_dim=E.shape[1], potential_depth=params.depth)
    p = {"E": E, **params.to_dict("phi."), **_fixed_step_params(spec, _steps_or_default(spec, problem, [E] * spec.layers))}
    net = Network(spec, problem, p, StaticEmbedding(E))
    return _run(net, b2, single)


def eunet_forward(b, A: LinearOperator, emb_params, potential_params_per_layer, spec: SolverSpec):
    """Unrolled steps with layer-dependent embeddings and potentials.

    ``emb_params`` is a :class:`TimedEmbedding` (E_j = E(j/J)), a single
    :class:`StaticEmbedding`, or a list of J matrices.  The potential is a
    list of J parameter sets, or one set evaluated at t_j = j/J.
    """
    if spec.variant != "eunet":
        raise ValueError("eunet_forward needs an eunet spec")
    b2, single = _as_batch_b(b, A)
    J = spec.layers
    p: dict[str, np.ndarray] = {}
    if isinstance(emb_params, TimedEmbedding):
        template = emb_params
        spec = replace(spec, embedding_mode="timed")
        p.update(emb_params.to_dict("E"))
        E0 = emb_params.at(0.0)
        layer_mats = [emb_params.at(j / J) for j in range(J)]
    else:
        mats = [emb_params.E] * J if isinstance(emb_params, StaticEmbedding) else list(emb_params)
        if len(mats) != J:
            raise ValueError("one embedding matrix per layer is required")
        spec = replace(spec, embedding_mode="independent")
        for j, m in enumerate(mats):
            p[f"E.{j:02d}"] = np.asarray(m, dtype=np.float64)
        template = StaticEmbedding(mats[0])
        E0 = mats[0]
        layer_mats = [np.asarray(m, dtype=np.float64) for m in mats]
    kind = _kind_of(E0)
    emb_dim = E0.shape[1]
    problem = _problem_for(A, E0, kind)
    if isinstance(potential_params_per_layer, PotentialParams):
        spec = replace(spec, tie_potential=True)
        p.update(potential_params_per_layer.to_dict("phi."))
        depth = potential_params_per_layer.depth
    else:
        pots = list(potential_params_per_layer)
        if len(pots) != J:
            raise ValueError("one potential per layer is required")
        spec = replace(spec, tie_potential=False)
        for j, pp in enumerate(pots):
            p.update(pp.to_dict(f"layer{j:02d}.phi."))
        depth = pots[0].depth
    spec = replace(spec, embedding_dim=emb_dim, potential_depth=depth)
    p.update(_fixed_step_params(spec, _steps_or_default(spec, problem, layer_mats)))
    net = Network(spec, problem, p, template)
    return _run(net, b2, single)


def proximal_forward(b, A: LinearOperator, net_params, spec: SolverSpec, image_side: int | None = None):
    """Unrolled steps in the original coordinates with per-layer potentials."""
    if spec.variant != "proximal":
        raise ValueError("proximal_forward needs a proximal spec")
    b2, single = _as_batch_b(b, A)
    pots = [net_params] * spec.layers if isinstance(net_params, PotentialParams) else list(net_params)
    if len(pots) != spec.layers:
        raise ValueError("one potential per layer is required")
    if pots[0].kind == "dense":
        problem = Problem(A, (A.domain_dim,))
    else:
        n = image_side or int(round(math.sqrt(A.domain_dim)))
        problem = Problem(A, (1, n, n))
    p: dict[str, np.ndarray] = {}
    for j, pp in enumerate(pots):
        p.update(pp.to_dict(f"layer{j:02d}.phi."))
    spec = replace(spec, potential_depth=pots[0].depth)
    p.update(_fixed_step_params(spec, _steps_or_default(spec, problem, [None] * spec.layers)))
    net = Network(spec, problem, p)
    return _run(net, b2, single)


def objective_zmape(z, A: LinearOperator, E, b, params: PotentialParams | None, t: float = 0.0) -> float:
    """1/2 |A E z - b|^2 + phi(z; theta, t); ``params=None`` means phi = 0."""
    z = np.asarray(z, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    kind = _kind_of(E)
    x = embed_batch(E, z[None], kind)
    r = A.apply_batch(x.reshape(1, -1))[0] - np.asarray(b, dtype=np.float64).reshape(-1)
    value = 0.5 * float(r @ r)
    if params is not None:
        value += phi(z, params, t)
    return value


def backtracked_steps(b, A: LinearOperator, E, params: PotentialParams, layers: int, t: float = 1.0, h0: float = 1.0, shrink: float = 0.5, c: float = 1e-4, max_halvings: int = 60):
    """Per-layer Armijo step sizes for OPTEnet with fixed weights.

    Returns the accepted step sizes and the objective trace along the path.
    """
    from .potential import grad_phi

    E = np.asarray(E, dtype=np.float64)
    kind = _kind_of(E)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    atb = A.adjoint_batch(b[None])[0]
    z = embed_adjoint_batch(E, atb.reshape((1,) + _x_shape(A, kind)), kind)[0]
    # same power iteration as the network's start so both paths share z_0
    L = _numeric_spectral_sq(_problem_for(A, E), E, z.shape, iters=POWER_STEPS + 1)
    z = z / L
    f = objective_zmape(z, A, E, b, params, t)
    hs, trace = [], [f]
    for _ in range(layers):
        x = embed_batch(E, z[None], kind)
        r = A.gram.apply_batch(x.reshape(1, -1)) - atb[None]
        g = embed_adjoint_batch(E, r.reshape(x.shape), kind)[0] + grad_phi(z, params, t)
        gg = float(np.sum(g * g))
        h = h0
        for _ in range(max_halvings):
            trial = z - h * g
            ft = objective_zmape(trial, A, E, b, params, t)
            if ft <= f - c * h * gg:
                break
            h *= shrink
        else:
            trial, ft, h = z, f, h
        z, f = trial, ft
        hs.append(h)
        trace.append(f)
    return np.array(hs), np.array(trace)


def _x_shape(A, kind):
    if kind == "dense":
        return (A.domain_dim,)
    n = int(round(math.sqrt(A.domain_dim)))
    return (1, n, n)


# ---------------------------------------------------------------------------
# classical baselines
# ---------------------------------------------------------------------------


def ista_l1(b, A: LinearOperator, E, gamma: float, iters: int, power_steps: int = 50):
    """Proximal gradient on 1/2|A E z - b|^2 + gamma |z|_1.

    Returns (E z, z, objective history) where the history has iters + 1 entries.
    """
    if gamma < 0 or iters < 1:
        raise ValueError("need gamma >= 0 and iters >= 1")
    E = np.asarray(E, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    M = A.apply_batch(E.T).T  # (M, K)
    v = np.random.default_rng(0).standard_normal(M.shape[1])
    L = 0.0
    for _ in range(power_steps):
        w = M.T @ (M @ v)
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        L = nw / np.linalg.norm(v)
        v = w / nw
    if not L > 0:
        raise ValueError("Lipschitz estimate is not positive")

    def objective(z):
        r = M @ z - b
        return 0.5 * float(r @ r) + gamma * float(np.abs(z).sum())

    z = np.zeros(M.shape[1])
    hist = [objective(z)]
    for _ in range(iters):
        # the power estimate approaches |M|^2 from below; if a step fails the
        # majorization test, L is raised (Beck-Teboulle backtracking)
        g = M.T @ (M @ z - b)
        f0 = 0.5 * float(np.sum((M @ z - b) ** 2))
        while True:
            nz = soft_threshold(z - g / L, gamma / L)
            d = nz - z
            r = M @ nz - b
            if 0.5 * float(r @ r) <= f0 + float(g @ d) + 0.5 * L * float(d @ d) + 1e-12 * max(1.0, f0):
                break
            L *= 1.1
        z = nz
        hist.append(objective(z))
    return E @ z, z, np.array(hist)


def _data_grad(A: LinearOperator, x, b):
    x2 = x.reshape(-1, A.domain_dim)
    b2 = np.broadcast_to(np.asarray(b, dtype=np.float64).reshape(1, -1), (x2.shape[0], A.range_dim))
    return A.adjoint_batch(A.apply_batch(x2) - b2).reshape(x.shape)


def map_gd(b, A: LinearOperator, R_grad: Callable, alpha: float, iters: int, x0, data_weight: float = 1.0):
    """x_{k+1} = x_k - alpha (w A^T (A x_k - b) + grad R(x_k)), w = 1/sigma^2.

    ``x0`` may carry leading batch axes (independent starts).  Returns the
    trajectory with shape (iters + 1,) + x0.shape.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    x = np.array(x0, dtype=np.float64)
    traj = [x.copy()]
    for k in range(iters):
        x = x - alpha * (data_weight * _data_grad(A, x, b) + R_grad(x))
        nrm = float(np.max(np.abs(x))) if x.size else 0.0
        if not nrm <= DIVERGENCE_LIMIT:
            raise DivergenceError(k + 1, nrm)
        traj.append(x.copy())
    return np.stack(traj)


def langevin_sample(b, A: LinearOperator, R_grad: Callable, alpha: float, iters: int, seed: int, x0, data_weight: float = 1.0, temperature: float = 1.0, burn_in: float = 0.5, thin: int = 10):
    """Unadjusted Langevin: x - alpha (w A^T(Ax - b) + grad R) + sqrt(2 alpha T) n.

    With T = 1 the chain targets exp(-w/2 |Ax - b|^2 - R(x)).  ``x0`` may hold
    several chains along leading axes; they share one counter-based stream.
    Returns every ``thin``-th iterate after the burn-in fraction, shape
    (kept,) + x0.shape.
    """
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    rng = np.random.Generator(np.random.Philox(key=seed))
    x = np.array(x0, dtype=np.float64)
    noise = math.sqrt(2.0 * alpha * temperature)
    start = int(burn_in * iters)
    kept = []
    for k in range(1, iters + 1):
        x = x - alpha * (data_weight * _data_grad(A, x, b) + R_grad(x)) + noise * rng.standard_normal(x.shape)
        if k > start and (k - start) % thin == 0:
            kept.append(x.copy())
    if not kept:
        return np.zeros((0,) + x.shape)
    return np.stack(kept)
