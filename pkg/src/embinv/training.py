"""End-to-end training of unrolled solvers, grid search, metrics and checkpoints."""
from __future__ import annotations

import csv
import io
import itertools
import json
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffcore as dc
from .solvers import DivergenceError, Network, check_divergence

SEARCH_GRID = {
    "learning_rate": [1e-2, 1e-3, 1e-4, 1e-5],
    "weight_decay": [1e-3, 1e-4, 1e-5, 1e-6, 0.0],
    "batch_size": [32, 64, 128, 256, 512],
}

MAGIC = b"EMBINV01"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 300
    seed: int = 0
    optimizer: str = "sgd"
    clip_norm: float | None = None
    frozen: tuple[str, ...] = ()
    grid: dict | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.clip_norm is not None and not self.clip_norm > 0:
            raise ValueError("clip_norm must be positive")
        self.frozen = tuple(self.frozen)
        if self.grid is not None:
            for key, values in self.grid.items():
                if key not in SEARCH_GRID:
                    raise ValueError(f"unknown grid axis {key!r}")
                bad = [v for v in values if v not in SEARCH_GRID[key]]
                if bad:
                    raise ValueError(f"{key} values {bad} are outside the search grid {SEARCH_GRID[key]}")


class TrainingAborted(RuntimeError):
    """Raised on a non-finite loss or diverging iterate; carries the last good state."""

    def __init__(self, epoch: int, reason: str, params: dict, history: list):
        super().__init__(f"training aborted in epoch {epoch}: {reason}")
        self.epoch = epoch
        self.reason = reason
        self.params = params
        self.history = history


@dataclass
class HistoryRow:
    epoch: int
    train_loss: float
    val_mse: float


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def loss(xhat, x) -> float:
    """Mean over the batch of the per-sample 2-norm |xhat - x|."""
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if xhat.shape != x.shape:
        raise ValueError(f"shapes differ: {xhat.shape} vs {x.shape}")
    if xhat.ndim == 1:
        return float(np.linalg.norm(xhat - x))
    d = (xhat - x).reshape(x.shape[0], -1)
    return float(np.mean(np.sqrt(np.sum(d * d, axis=1))))


def loss_node(xhat: dc.Node, x: dc.Node, inv_batch: dc.Node) -> dc.Node:
    return dc.smul(inv_batch, dc.total(dc.rownorm(xhat - x)))


def mse(xhat, x) -> float:
    """Mean over samples of |xhat - x|^2 / N."""
    xhat = np.asarray(xhat, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    d = (xhat - x).reshape(x.shape[0], -1)
    return float(np.mean(np.mean(d * d, axis=1)))


def mse_eval(net: Network, b, x, batch_size: int = 256) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] == 0:
        return float("nan")
    return mse(net.predict(b, batch_size), x)


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


class Optimizer:
    """SGD or Adam, with weight decay applied as a separate shrinkage step."""

    def __init__(self, config: TrainConfig, names: Sequence[str]):
        self.config = config
        self.names = list(names)
        self.t = 0
        self.state: dict[str, np.ndarray] = {}

    def update(self, params: dict, grads: dict) -> None:
        cfg = self.config
        lr, wd = cfg.learning_rate, cfg.weight_decay
        self.t += 1
        scale = 1.0
        if cfg.clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(grads[n] ** 2)) for n in self.names))
            if total > cfg.clip_norm:
                scale = cfg.clip_norm / total
        for n in self.names:
            g = grads[n] * scale if scale != 1.0 else grads[n]
            p = params[n]
            if cfg.optimizer == "adam":
                m = self.state.setdefault(f"m.{n}", np.zeros_like(p))
                v = self.state.setdefault(f"v.{n}", np.zeros_like(p))
                m *= 0.9
                m += 0.1 * g
                v *= 0.999
                v += 0.001 * g * g
                mh = m / (1 - 0.9**self.t)
                vh = v / (1 - 0.999**self.t)
                step = mh / (np.sqrt(vh) + 1e-8)
            else:
                step = g
            if wd:
                p = p * (1.0 - lr * wd)
            params[n] = p - lr * step

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"opt.{k}": v.copy() for k, v in self.state.items()}
        out["opt.t"] = np.asarray(float(self.t))
        return out

    def load_state_dict(self, d: dict) -> None:
        self.t = int(d.get("opt.t", 0))
        self.state = {k[4:]: np.array(v) for k, v in d.items() if k.startswith("opt.") and k != "opt.t"}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


class Trainer:
    """Loss and parameter-gradient nodes wired onto a network's graph."""

    def __init__(self, net: Network, config: TrainConfig):
        self.net = net
        self.config = config
        ug = net.build()
        g = ug.graph
        key = "training"
        if key not in ug.extra:
            xt = g.input("x")
            inv = g.input("inv_batch")
            L = loss_node(ug.xhat, xt, inv)
            names = sorted(g.leaf_name(i) for i in g.trainable)
            nodes = [g.leaves()[n] for n in names]
            grads = g.gradients(L, nodes)
            ug.extra[key] = (L, names, grads)
        self.loss_node, all_names, all_grads = ug.extra[key]
        keep = [i for i, n in enumerate(all_names) if not any(n.startswith(f) for f in config.frozen)]
        self.names = [all_names[i] for i in keep]
        self.grad_nodes = [all_grads[i] for i in keep]
        self.graph = g
        self.ug = ug
        # NaN/Inf propagate to the loss and gradients, which are checked once
        # per step; per-op checks would cost a reduction over every node
        g.check_finite = False

    def loss_and_grads(self, b, x) -> tuple[float, dict[str, np.ndarray]]:
        g = self.graph
        bind = self.net.bindings(b)
        bind["x"] = x
        bind["inv_batch"] = 1.0 / b.shape[0]
        g.bind(bind)
        present = [n for n in self.grad_nodes if n is not None]
        vals = g.evaluate([self.loss_node] + present)
        check_divergence(self.ug, range(len(self.ug.zs)))
        it = iter(vals[1:])
        grads = {}
        for name, node in zip(self.names, self.grad_nodes):
            grads[name] = next(it).copy() if node is not None else np.zeros_like(self.net.params[name])
        return float(vals[0]), grads


def shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def split_indices(n: int, val_fraction: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split."""
    if not 0 <= val_fraction < 1:
        raise ValueError("val_fraction must lie in [0, 1)")
    perm = np.random.default_rng([seed, 0x5EED]).permutation(n)
    n_val = int(round(val_fraction * n))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class TrainState:
    params: dict
    best_params: dict
    best_val: float
    history: list[HistoryRow]
    epoch: int
    optimizer: dict = field(default_factory=dict)


def train(
    net: Network,
    train_data: tuple[np.ndarray, np.ndarray],
    val_data: tuple[np.ndarray, np.ndarray],
    config: TrainConfig,
    state: TrainState | None = None,
    on_epoch: Callable[[TrainState], None] | None = None,
) -> tuple[Network, list[HistoryRow], TrainState]:
    """Minibatch training of ``net`` on (b, x) pairs.

    Returns a network holding the best-validation parameters, the history
    and the final state (from which training can be resumed).
    """
    b_tr, x_tr = (np.asarray(a, dtype=np.float64) for a in train_data)
    b_va, x_va = (np.asarray(a, dtype=np.float64) for a in val_data)
    work = net.copy()
    trainer = Trainer(work, config)
    opt = Optimizer(config, trainer.names)
    if state is None:
        state = TrainState(dict(work.params), dict(work.params), math.inf, [], 0)
    else:
        work.params = {k: v.copy() for k, v in state.params.items()}
        opt.load_state_dict(state.optimizer)
    n = b_tr.shape[0]
    bs = config.batch_size
    for epoch in range(state.epoch + 1, config.epochs + 1):
        order = shuffle_order(config.seed, epoch, n)
        total, count = 0.0, 0
        for start in range(0, n, bs):
            idx = order[start : start + bs]
            try:
                value, grads = trainer.loss_and_grads(b_tr[idx], x_tr[idx])
            except (dc.NonFiniteError, DivergenceError) as exc:
                raise TrainingAborted(epoch, str(exc), state.best_params, state.history) from exc
            if not math.isfinite(value) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingAborted(epoch, "non-finite loss", state.best_params, state.history)
            opt.update(work.params, grads)
            total += value * len(idx)
            count += len(idx)
        try:
            val = mse_eval(work, b_va, x_va) if len(x_va) else total / max(count, 1)
        except (dc.NonFiniteError, DivergenceError) as exc:
            raise TrainingAborted(epoch, str(exc), state.best_params, state.history) from exc
        if not math.isfinite(val):
            raise TrainingAborted(epoch, "non-finite validation error", state.best_params, state.history)
        state.history.append(HistoryRow(epoch, total / max(count, 1), val))
        if val <= state.best_val:
            state.best_val = val
            state.best_params = {k: v.copy() for k, v in work.params.items()}
        state.params = {k: v.copy() for k, v in work.params.items()}
        state.optimizer = opt.state_dict()
        state.epoch = epoch
        if on_epoch is not None:
            on_epoch(state)
    best = net.copy()
    best.params = {k: v.copy() for k, v in state.best_params.items()}
    return best, list(state.history), state


@dataclass
class GridCell:
    learning_rate: float
    weight_decay: float
    batch_size: int
    val_mse: float
    status: str


def grid_search(
    factory: Callable[[], Network],
    train_data,
    val_data,
    base: TrainConfig,
    grid: dict | None = None,
    screen_epochs: int | None = None,
) -> tuple[TrainConfig, list[GridCell]]:
    """Train one model per grid point and select by validation MSE.

    Cells whose training aborts are reported with status "diverged" and
    never selected.
    """
    grid = grid if grid is not None else (base.grid or SEARCH_GRID)
    axes = [grid.get(k, [getattr(base, k)]) for k in ("learning_rate", "weight_decay", "batch_size")]
    if any(len(a) == 0 for a in axes):
        raise ValueError("grid must be non-empty")
    report: list[GridCell] = []
    best_cfg, best_val = None, math.inf
    for lr, wd, bs in itertools.product(*axes):
        cfg = replace(base, learning_rate=lr, weight_decay=wd, batch_size=bs, grid=None)
        if screen_epochs is not None:
            cfg = replace(cfg, epochs=screen_epochs)
        try:
            net, hist, st = train(factory(), train_data, val_data, cfg)
            val, status = st.best_val, "ok"
        except TrainingAborted:
            val, status = math.nan, "diverged"
        report.append(GridCell(lr, wd, bs, val, status))
        if status == "ok" and val < best_val:
            best_cfg, best_val = replace(base, learning_rate=lr, weight_decay=wd, batch_size=bs), val
    if best_cfg is None:
        raise TrainingAborted(0, "every grid cell diverged", {}, [])
    return best_cfg, report


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode()


def fingerprint(obj) -> str:
    import hashlib

    return hashlib.sha256(canonical_json(obj)).hexdigest()


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Magic, length-prefixed JSON header, then (name, shape, float64 LE) entries."""
    Path(path).write_bytes(container_bytes(meta, arrays))


def container_bytes(meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    header = canonical_json(meta)
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        raw = name.encode()
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}Q", *a.shape))
        buf.write(np.ascontiguousarray(a).tobytes())
    return buf.getvalue()


class FormatError(ValueError):
    pass


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    return parse_container(data)


def parse_container(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if data[:8] != MAGIC:
        raise FormatError("bad magic: not an EMBINV01 container")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(data):
            raise FormatError("truncated container")
        out = data[pos : pos + n]
        pos += n
        return out

    (hlen,) = struct.unpack("<I", take(4))
    try:
        meta = json.loads(take(hlen))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable header: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        try:
            name = take(nlen).decode()
        except UnicodeDecodeError:
            raise FormatError("entry name is not valid UTF-8") from None
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(shape)) if ndim else 1
        arrays[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise FormatError("trailing bytes after last entry")
    return meta, arrays


def save_checkpoint(path, state: TrainState, config_fingerprint: str, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v for k, v in state.params.items()}
    arrays.update({f"best/{k}": v for k, v in state.best_params.items()})
    arrays.update({f"optim/{k}": v for k, v in state.optimizer.items()})
    meta = {
        "section": "CKPT",
        "version": 1,
        "epoch": state.epoch,
        "fingerprint": config_fingerprint,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "history": [[r.epoch, r.train_loss, r.val_mse] for r in state.history],
        "extra": extra or {},
    }
    write_container(path, meta, arrays)


def load_checkpoint(path) -> tuple[TrainState, dict]:
    meta, arrays = read_container(path)
    if meta.get("section") != "CKPT":
        raise FormatError("container does not hold a checkpoint")

    def group(prefix):
        return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}

    best_val = meta.get("best_val")
    state = TrainState(
        params=group("param/"),
        best_params=group("best/"),
        best_val=math.inf if best_val is None else best_val,
        history=[HistoryRow(int(e), float(t), float(v)) for e, t, v in meta["history"]],
        epoch=int(meta["epoch"]),
        optimizer=group("optim/"),
    )
    return state, meta


def history_csv(history: Sequence[HistoryRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "train_loss", "val_mse"])
    for r in history:
        w.writerow([r.epoch, repr(float(r.train_loss)), repr(float(r.val_mse))])
    return buf.getvalue()


def write_history(path, history: Sequence[HistoryRow]) -> None:
    Path(path).write_text(history_csv(history))


def config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["frozen"] = list(d["frozen"])
    return d
