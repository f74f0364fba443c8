"""Minimal reverse-mode differentiation over dense float64 arrays.

A :class:`Graph` is built once from a fixed set of ops and then evaluated
many times with fresh bindings.  Gradients are built *symbolically*: the
vector-Jacobian product of every op is itself written with graph ops, so a
gradient node can be differentiated again.  The unrolled solvers rely on
this, because their forward pass contains the gradient of the potential and
training differentiates through it.

Leading axis conventions: ``tile``, ``sum0``, ``expand`` and ``rowsum`` treat
axis 0 as the batch axis.  There is no implicit broadcasting anywhere.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

LOG2 = math.log(2.0)


class ShapeError(ValueError):
    pass


class UnboundLeafError(KeyError):
    pass


class NonFiniteError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# numeric kernels
# ---------------------------------------------------------------------------


def _real(x):
    x = np.asarray(x)
    return x if x.dtype in (np.float64, np.longdouble) else x.astype(np.float64)


def logcosh(x):
    """log(cosh(x)) evaluated as |x| - log 2 + log1p(exp(-2|x|)).

    The identity is exact and never overflows; it also makes the result an
    even function bit-for-bit and keeps ``logcosh(x) - (|x| - log 2)`` inside
    ``[0, log 2]`` after rounding.
    """
    a = np.abs(_real(x))
    return (a - LOG2) + np.log1p(np.exp(-2.0 * a))


def sech2(x):
    a = np.abs(_real(x))
    e = np.exp(-2.0 * a)
    return 4.0 * e / (1.0 + e) ** 2


def _recip(x):
    out = np.zeros_like(x)
    np.divide(1.0, x, out=out, where=x != 0)
    return out


def _windows(x, k):
    r = k // 2
    if r:
        x = np.pad(x, ((0, 0), (0, 0), (r, r), (r, r)))
    # (B, C, H, W, k, k)
    return np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))


def conv2d(x, w):
    """Same-size 2D cross-correlation with zero padding.

    x: (B, C, H, W); w: (O, C, k, k) with k odd.  Returns (B, O, H, W).
    """
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1] or w.shape[2] != w.shape[3] or w.shape[2] % 2 == 0:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with kernel {w.shape}")
    k = w.shape[2]
    if k == 1:
        y = np.tensordot(w[:, :, 0, 0], x, axes=([1], [1]))  # (O, B, H, W)
        return np.ascontiguousarray(y.transpose(1, 0, 2, 3))
    y = np.tensordot(_windows(x, k), w, axes=([1, 4, 5], [1, 2, 3]))  # (B, H, W, O)
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_weight(x, g, k):
    """Adjoint of ``conv2d`` with respect to the kernel: shape (O, C, k, k)."""
    if x.ndim != 4 or g.ndim != 4 or x.shape[0] != g.shape[0] or x.shape[2:] != g.shape[2:]:
        raise ShapeError(f"conv2d_weight: {x.shape} vs {g.shape}")
    if k == 1:
        return np.tensordot(g, x, axes=([0, 2, 3], [0, 2, 3]))[:, :, None, None]
    out = np.tensordot(g, _windows(x, k), axes=([0, 2, 3], [0, 2, 3]))  # (O, C, k, k)
    return np.ascontiguousarray(out)


def flip_transpose(w):
    return np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))


# ---------------------------------------------------------------------------
# graph
# ---------------------------------------------------------------------------


class Node:
    """Handle to a node of a :class:`Graph`; supports arithmetic sugar."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", id: int):
        self.graph = graph
        self.id = id

    def __repr__(self):
        return f"Node({self.id}, {self.graph.op_of(self.id)})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    @property
    def name(self):
        return self.graph.leaf_name(self.id)


_LEAF_OPS = ("leaf", "const")


class Graph:
    """Topologically ordered op records plus a cache of primal values."""

    def __init__(self):
        self._op: list[str] = []
        self._in: list[tuple[int, ...]] = []
        self._attr: list = []
        self._cse: dict = {}
        self._leaves: dict[str, int] = {}
        self._leaf_name: dict[int, str] = {}
        self.trainable: set[int] = set()
        self._values: list = []
        self._plans: dict = {}
        self._grads: dict = {}
        self._descendants: dict = {}
        self.output: Node | None = None
        self._forward_done = False
        self.check_finite = True
        # float64 normally; the finite-difference oracle may switch to longdouble
        self.dtype = np.float64

    # -- construction -----------------------------------------------------

    def __len__(self):
        return len(self._op)

    def op_of(self, i: int) -> str:
        return self._op[i]

    def inputs_of(self, i: int) -> tuple[int, ...]:
        return self._in[i]

    def leaf_name(self, i: int) -> str | None:
        return self._leaf_name.get(i)

    def _append(self, op, inputs, attr):
        i = len(self._op)
        self._op.append(op)
        self._in.append(tuple(inputs))
        self._attr.append(attr)
        self._values.append(None)
        return Node(self, i)

    def leaf(self, name: str, trainable: bool = False) -> Node:
        if name in self._leaves:
            node = Node(self, self._leaves[name])
        else:
            node = self._append("leaf", (), name)
            self._leaves[name] = node.id
            self._leaf_name[node.id] = name
        if trainable:
            self.trainable.add(node.id)
        return node

    def param(self, name: str) -> Node:
        return self.leaf(name, trainable=True)

    def input(self, name: str) -> Node:
        return self.leaf(name, trainable=False)

    def const(self, value) -> Node:
        node = self._append("const", (), None)
        self._values[node.id] = np.asarray(value, dtype=np.float64)
        return node

    def leaves(self) -> dict[str, Node]:
        return {k: Node(self, v) for k, v in self._leaves.items()}

    def apply(self, op: str, inputs: Sequence[Node], attr=None, key=None) -> Node:
        for n in inputs:
            if n.graph is not self:
                raise ValueError("node belongs to a different graph")
        ids = tuple(n.id for n in inputs)
        ck = (op, ids, attr if key is None else key)
        hit = self._cse.get(ck)
        if hit is not None:
            return Node(self, hit)
        node = self._append(op, ids, attr)
        self._cse[ck] = node.id
        return node

    # -- evaluation -------------------------------------------------------

    def bind(self, bindings: Mapping) -> None:
        """Replace leaf values; every cached non-constant value is dropped."""
        for i, op in enumerate(self._op):
            if op != "const":
                self._values[i] = None
        for key, value in bindings.items():
            i = key.id if isinstance(key, Node) else self._leaves.get(key)
            if i is None:
                continue
            self._values[i] = np.asarray(value, dtype=self.dtype)
        self._forward_done = False

    def set_leaf(self, name: str, value) -> None:
        """Rebind one leaf, dropping only the cached values that depend on it."""
        i = self._leaves[name]
        deps = self._descendants.get(i)
        if deps is None:
            live = {i}
            deps = []
            for k in range(i + 1, len(self._op)):
                if any(j in live for j in self._in[k]):
                    live.add(k)
                    deps.append(k)
            self._descendants[i] = deps
        self._values[i] = np.asarray(value, dtype=self.dtype)
        for k in deps:
            self._values[k] = None
        self._forward_done = False

    def _plan(self, targets: tuple[int, ...]) -> list[tuple]:
        plan = self._plans.get(targets)
        if plan is None:
            seen = set()
            stack = list(targets)
            while stack:
                i = stack.pop()
                if i in seen:
                    continue
                seen.add(i)
                stack.extend(self._in[i])
            plan = [(i, self._op[i], _FWD.get(self._op[i]), self._attr[i], self._in[i]) for i in sorted(seen)]
            self._plans[targets] = plan
        return plan

    def evaluate(self, nodes: Iterable[Node]) -> list[np.ndarray]:
        nodes = list(nodes)
        vals = self._values
        check = self.check_finite
        for i, op, fn, attr, ins in self._plan(tuple(n.id for n in nodes)):
            if vals[i] is not None:
                continue
            if fn is None:
                raise UnboundLeafError(f"leaf {attr!r} is not bound")
            args = [vals[j] for j in ins]
            try:
                out = fn(attr, *args)
            except ShapeError as exc:
                raise ShapeError(f"node {i} ({op}): {exc}") from None
            except ValueError as exc:
                shapes = [a.shape for a in args]
                raise ShapeError(f"node {i} ({op}) with input shapes {shapes}: {exc}") from None
            if check and not math.isfinite(out.sum()):
                raise NonFiniteError(f"node {i} ({op}) produced non-finite values")
            vals[i] = out
        return [vals[n.id] for n in nodes]

    def value(self, node: Node) -> np.ndarray:
        return self.evaluate([node])[0]

    # -- symbolic reverse mode -------------------------------------------

    def gradients(self, output: Node, wrt: Sequence[Node]) -> list[Node | None]:
        """Build nodes holding d(output)/d(w) for every ``w`` in ``wrt``.

        ``output`` must evaluate to a scalar.  Entries are ``None`` when the
        output does not depend on that node.  The result is differentiable.
        """
        key = (output.id, tuple(w.id for w in wrt))
        if key in self._grads:
            return [None if g is None else Node(self, g) for g in self._grads[key]]
        lo = min((w.id for w in wrt), default=output.id)
        # nodes in (lo, output] that depend on some wrt node
        live = set(w.id for w in wrt)
        for i in range(lo, output.id + 1):
            if i not in live and any(j in live for j in self._in[i]):
                live.add(i)
        # restrict to ancestors of output
        anc = set()
        stack = [output.id]
        while stack:
            i = stack.pop()
            if i in anc or i < lo:
                continue
            anc.add(i)
            stack.extend(self._in[i])
        live &= anc
        cot: dict[int, Node] = {}
        if output.id in live:
            cot[output.id] = self.const(1.0)
        for i in range(output.id, lo - 1, -1):
            g = cot.get(i)
            if g is None or self._op[i] in _LEAF_OPS:
                continue
            ins = self._in[i]
            needs = tuple(j in live for j in ins)
            if not any(needs):
                continue
            parts = _VJP[self._op[i]](Node(self, i), g, [Node(self, j) for j in ins], self._attr[i], needs)
            for j, need, part in zip(ins, needs, parts):
                if not need or part is None:
                    continue
                cot[j] = part if j not in cot else add(cot[j], part)
        result = [cot.get(w.id) for w in wrt]
        self._grads[key] = [None if g is None else g.id for g in result]
        return result


# ---------------------------------------------------------------------------
# op builders
# ---------------------------------------------------------------------------


def _g(a: Node) -> Graph:
    return a.graph


def add(a: Node, b: Node) -> Node:
    return _g(a).apply("add", (a, b))


def sub(a: Node, b: Node) -> Node:
    return _g(a).apply("sub", (a, b))


def mul(a: Node, b: Node) -> Node:
    return _g(a).apply("mul", (a, b))


def scale(a: Node, c: float) -> Node:
    return _g(a).apply("scale", (a,), float(c))


def smul(s: Node, a: Node) -> Node:
    """Scalar node times tensor."""
    return _g(a).apply("smul", (s, a))


def matmul(a: Node, b: Node) -> Node:
    return _g(a).apply("matmul", (a, b))


def transpose(a: Node) -> Node:
    return _g(a).apply("transpose", (a,))


def reshape(a: Node, shape: Sequence[int]) -> Node:
    return _g(a).apply("reshape", (a,), tuple(int(s) for s in shape))


def reshape_as(a: Node, ref: Node) -> Node:
    return _g(a).apply("reshape_as", (a, ref))


def tile(v: Node, ref: Node) -> Node:
    """Repeat ``v`` along a new leading axis to ``ref.shape[0]`` rows."""
    return _g(v).apply("tile", (v, ref))


def sum0(a: Node) -> Node:
    return _g(a).apply("sum0", (a,))


def expand(v: Node, ref: Node) -> Node:
    """Broadcast a (B,) vector across the trailing axes of ``ref``."""
    return _g(v).apply("expand", (v, ref))


def rowsum(a: Node) -> Node:
    return _g(a).apply("rowsum", (a,))


def fill(s: Node, ref: Node) -> Node:
    return _g(s).apply("fill", (s, ref))


def total(a: Node) -> Node:
    """Sum of all entries (scalar)."""
    return _g(a).apply("sum", (a,))


def tanh(a: Node) -> Node:
    return _g(a).apply("tanh", (a,))


def sech2_(a: Node) -> Node:
    return _g(a).apply("sech2", (a,))


def logcosh_(a: Node) -> Node:
    return _g(a).apply("logcosh", (a,))


def recip(a: Node) -> Node:
    return _g(a).apply("recip", (a,))


def sqrt(a: Node) -> Node:
    return _g(a).apply("sqrt", (a,))


def conv(x: Node, w: Node) -> Node:
    return _g(x).apply("conv", (x, w))


def convw(x: Node, g: Node, w: Node) -> Node:
    """Kernel-shaped adjoint of ``conv``; ``w`` only supplies the kernel size."""
    return _g(x).apply("convw", (x, g, w))


def flipT(w: Node) -> Node:
    return _g(w).apply("flipT", (w,))


def linop(x: Node, op) -> Node:
    """Apply a linear operator row-wise: (B, ...) -> (B, op.range_dim)."""
    return _g(x).apply("linop", (x,), op, key=id(op))


def sqnorm(a: Node) -> Node:
    return total(mul(a, a))


def norm(a: Node) -> Node:
    return sqrt(sqnorm(a))


def rownorm(a: Node) -> Node:
    return sqrt(rowsum(mul(a, a)))


def add_const(a: Node, c: float) -> Node:
    return add(a, fill(_g(a).const(c), a))


def softplus(a: Node) -> Node:
    """log(1 + e^a) = a/2 + logcosh(a/2) + log 2."""
    half = scale(a, 0.5)
    return add_const(add(half, logcosh_(half)), LOG2)


# ---------------------------------------------------------------------------
# forward rules
# ---------------------------------------------------------------------------


def _same(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def _f_add(_, a, b):
    _same(a, b, "add")
    return a + b


def _f_sub(_, a, b):
    _same(a, b, "sub")
    return a - b


def _f_mul(_, a, b):
    _same(a, b, "mul")
    return a * b


def _f_smul(_, s, a):
    if s.shape != ():
        raise ShapeError(f"smul: scale must be scalar, got {s.shape}")
    return s * a


def _f_matmul(_, a, b):
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} @ {b.shape}")
    return a @ b


def _f_transpose(_, a):
    if a.ndim != 2:
        raise ShapeError(f"transpose needs a matrix, got {a.shape}")
    return a.T


def _f_tile(_, v, ref):
    return np.broadcast_to(v, (ref.shape[0],) + v.shape).copy()


def _f_expand(_, v, ref):
    if v.shape != ref.shape[:1]:
        raise ShapeError(f"expand: {v.shape} vs rows of {ref.shape}")
    return np.broadcast_to(v.reshape(v.shape + (1,) * (ref.ndim - 1)), ref.shape).copy()


def _f_fill(_, s, ref):
    if s.shape != ():
        raise ShapeError(f"fill: scalar expected, got {s.shape}")
    return np.broadcast_to(s, ref.shape).copy()


def _f_rowsum(_, a):
    return a.reshape(a.shape[0], -1).sum(axis=1)


def _f_linop(op, x):
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != op.domain_dim:
        raise ShapeError(f"linop: {flat.shape[1]} != domain {op.domain_dim}")
    return op.apply_batch(flat)


def _f_convw(_, x, g, w):
    return conv2d_weight(x, g, w.shape[-1])


_FWD: dict[str, Callable] = {
    "add": _f_add,
    "sub": _f_sub,
    "mul": _f_mul,
    "scale": lambda c, a: c * a,
    "smul": _f_smul,
    "matmul": _f_matmul,
    "transpose": _f_transpose,
    "reshape": lambda shape, a: a.reshape(shape),
    "reshape_as": lambda _, a, ref: a.reshape(ref.shape),
    "tile": _f_tile,
    "sum0": lambda _, a: a.sum(axis=0),
    "expand": _f_expand,
    "rowsum": _f_rowsum,
    "fill": _f_fill,
    "sum": lambda _, a: np.asarray(a.sum()),
    "tanh": lambda _, a: np.tanh(a),
    "sech2": lambda _, a: sech2(a),
    "logcosh": lambda _, a: logcosh(a),
    "recip": lambda _, a: _recip(a),
    "sqrt": lambda _, a: np.sqrt(a),
    "conv": lambda _, x, w: conv2d(x, w),
    "convw": _f_convw,
    "flipT": lambda _, w: flip_transpose(w),
    "linop": _f_linop,
}


# ---------------------------------------------------------------------------
# vector-Jacobian products, written with graph ops so they stay differentiable
# ---------------------------------------------------------------------------


def _v_add(y, g, ins, attr, needs):
    return g, g


def _v_sub(y, g, ins, attr, needs):
    return g, (scale(g, -1.0) if needs[1] else None)


def _v_mul(y, g, ins, attr, needs):
    a, b = ins
    return (mul(g, b) if needs[0] else None), (mul(g, a) if needs[1] else None)


def _v_scale(y, g, ins, attr, needs):
    return (scale(g, attr),)


def _v_smul(y, g, ins, attr, needs):
    s, a = ins
    return (total(mul(g, a)) if needs[0] else None), (smul(s, g) if needs[1] else None)


def _v_matmul(y, g, ins, attr, needs):
    a, b = ins
    return (matmul(g, transpose(b)) if needs[0] else None), (matmul(transpose(a), g) if needs[1] else None)


def _v_transpose(y, g, ins, attr, needs):
    return (transpose(g),)


def _v_reshape(y, g, ins, attr, needs):
    return (reshape_as(g, ins[0]),)


def _v_reshape_as(y, g, ins, attr, needs):
    return reshape_as(g, ins[0]), None


def _v_tile(y, g, ins, attr, needs):
    return sum0(g), None


def _v_sum0(y, g, ins, attr, needs):
    return (tile(g, ins[0]),)


def _v_expand(y, g, ins, attr, needs):
    return rowsum(g), None


def _v_rowsum(y, g, ins, attr, needs):
    return (expand(g, ins[0]),)


def _v_fill(y, g, ins, attr, needs):
    return total(g), None


def _v_sum(y, g, ins, attr, needs):
    return (fill(g, ins[0]),)


def _v_tanh(y, g, ins, attr, needs):
    return (mul(g, sech2_(ins[0])),)


def _v_sech2(y, g, ins, attr, needs):
    a = ins[0]
    return (mul(g, scale(mul(tanh(a), y), -2.0)),)


def _v_logcosh(y, g, ins, attr, needs):
    return (mul(g, tanh(ins[0])),)


def _v_recip(y, g, ins, attr, needs):
    return (scale(mul(g, mul(y, y)), -1.0),)


def _v_sqrt(y, g, ins, attr, needs):
    return (mul(g, scale(recip(y), 0.5)),)


def _v_conv(y, g, ins, attr, needs):
    x, w = ins
    return (conv(g, flipT(w)) if needs[0] else None), (convw(x, g, w) if needs[1] else None)


def _v_convw(y, G, ins, attr, needs):
    # <convw(x, g), G> == <conv(x, G), g>
    x, g, _ = ins
    return (conv(g, flipT(G)) if needs[0] else None), (conv(x, G) if needs[1] else None), None


def _v_flipT(y, g, ins, attr, needs):
    return (flipT(g),)


def _v_linop(y, g, ins, attr, needs):
    return (reshape_as(linop(g, attr.T), ins[0]),)


_VJP: dict[str, Callable] = {
    "add": _v_add,
    "sub": _v_sub,
    "mul": _v_mul,
    "scale": _v_scale,
    "smul": _v_smul,
    "matmul": _v_matmul,
    "transpose": _v_transpose,
    "reshape": _v_reshape,
    "reshape_as": _v_reshape_as,
    "tile": _v_tile,
    "sum0": _v_sum0,
    "expand": _v_expand,
    "rowsum": _v_rowsum,
    "fill": _v_fill,
    "sum": _v_sum,
    "tanh": _v_tanh,
    "sech2": _v_sech2,
    "logcosh": _v_logcosh,
    "recip": _v_recip,
    "sqrt": _v_sqrt,
    "conv": _v_conv,
    "convw": _v_convw,
    "flipT": _v_flipT,
    "linop": _v_linop,
}


# ---------------------------------------------------------------------------
# scalar-output API
# ---------------------------------------------------------------------------


def forward_scalar(graph: Graph, bindings: Mapping, output: Node | None = None) -> float:
    """Bind leaves, evaluate the scalar output and keep intermediates cached."""
    if output is not None:
        graph.output = output
    if graph.output is None:
        raise ValueError("graph has no output node")
    graph.bind(bindings)
    value = graph.value(graph.output)
    if value.shape != ():
        raise ShapeError(f"output node is not scalar: shape {value.shape}")
    graph._forward_done = True
    return float(value)


def backward(graph: Graph) -> dict[str, np.ndarray]:
    """Gradients of the scalar output w.r.t. every trainable leaf, by name."""
    if not graph._forward_done:
        raise RuntimeError("backward() called before forward_scalar()")
    params = sorted(graph.trainable)
    nodes = [Node(graph, i) for i in params]
    grads = graph.gradients(graph.output, nodes)
    present = [g for g in grads if g is not None]
    values = iter(graph.evaluate(present))
    out = {}
    for i, g in zip(params, grads):
        name = graph.leaf_name(i)
        out[name] = next(values).copy() if g is not None else np.zeros_like(graph._values[i])
    return out


def fd_gradient(f: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-5, extrapolate: bool = False) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array.

    With ``extrapolate`` the central differences at ``step`` and ``step/2``
    are combined by Richardson extrapolation, which cancels the O(step^2)
    truncation term and lets a larger step keep rounding noise small.
    """
    x = np.array(x, dtype=np.result_type(x, np.float64))
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)

    def central(k, h):
        orig = flat[k]
        flat[k] = orig + h
        fp = f(x)
        flat[k] = orig - h
        fm = f(x)
        flat[k] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value near component {k}")
        return (fp - fm) / (2.0 * h)

    for k in range(flat.size):
        if extrapolate:
            gflat[k] = (4.0 * central(k, step / 2) - central(k, step)) / 3.0
        else:
            gflat[k] = central(k, step)
    return g


def relative_error(g_ad: np.ndarray, g_fd: np.ndarray) -> float:
    if g_ad.size == 0:
        return 0.0
    return float(np.max(np.abs(g_ad - g_fd) / (np.abs(g_fd) + 1e-12)))


def fd_check(
    graph: Graph,
    bindings: Mapping,
    step: float = 1e-5,
    output: Node | None = None,
    extrapolate: bool = False,
    oracle_dtype=None,
) -> float:
    """Max componentwise relative error between backward() and central FD.

    Only leaves flagged trainable are checked.  ``oracle_dtype=np.longdouble``
    evaluates the finite differences in extended precision, which resolves
    gradient components far below the float64 rounding floor eps*|f|/step.
    """
    if output is not None:
        graph.output = output
    bindings = {(k.name if isinstance(k, Node) else k): np.array(v, dtype=np.float64) for k, v in bindings.items()}
    forward_scalar(graph, bindings)
    grads = backward(graph)
    out = graph.output
    worst = 0.0
    check = graph.check_finite
    # fd_gradient rejects non-finite values itself, so skip per-op checks
    graph.check_finite = False
    try:
        if oracle_dtype is not None:
            graph.dtype = oracle_dtype
            graph.bind(bindings)
        for name, g_ad in grads.items():
            base = np.asarray(bindings[name], dtype=graph.dtype)

            def f(v, name=name):
                graph.set_leaf(name, v)
                return graph.value(out)

            g_fd = fd_gradient(f, base, step, extrapolate)
            graph.set_leaf(name, base)
            worst = max(worst, relative_error(g_ad, g_fd))
    finally:
        graph.dtype = np.float64
        graph.check_finite = check
        forward_scalar(graph, bindings)
    return worst
