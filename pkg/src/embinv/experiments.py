"""Experiment configuration, dataset construction and training runs.

The CLI is a thin layer over this module; the acceptance tests call it
directly.
"""
from __future__ import annotations

import copy
import json
import math
import statistics
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import jsonschema
import numpy as np

from . import datagen, operators
from .datagen import Dataset
from .solvers import Network, Problem, SolverSpec
from .training import TrainConfig, TrainState, fingerprint, mse_eval, train

EXPERIMENTS = ("duathlon", "doublewell", "deblur", "magnetics")
SOLVERS = ("proximal", "optenet", "eunet")

_SOLVER_FIELDS = {
    "layers": {"type": "integer", "minimum": 1},
    "embedding_dim": {"type": "integer", "minimum": 1},
    "init_policy": {"enum": ["zeros", "backprojected"]},
    "train_steps": {"type": "boolean"},
    "potential_depth": {"type": "integer", "minimum": 1},
    "potential_width": {"type": ["integer", "null"], "minimum": 1},
    "proximal_width": {"type": ["integer", "null"], "minimum": 1},
    "embedding_mode": {"enum": ["timed", "independent"]},
    "embedding_hidden": {"type": "integer", "minimum": 1},
    "tie_potential": {"type": "boolean"},
    "phi_time": {"type": "number"},
}

_TRAIN_FIELDS = {
    "learning_rate": {"type": "number", "exclusiveMinimum": 0},
    "weight_decay": {"type": "number", "minimum": 0},
    "batch_size": {"type": "integer", "minimum": 1},
    "epochs": {"type": "integer", "minimum": 0},
    "optimizer": {"enum": ["sgd", "adam"]},
    "clip_norm": {"type": ["number", "null"], "exclusiveMinimum": 0},
    "val_fraction": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
    "grid": {
        "type": ["object", "null"],
        "additionalProperties": False,
        "properties": {
            "learning_rate": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "weight_decay": {"type": "array", "items": {"type": "number"}, "minItems": 1},
            "batch_size": {"type": "array", "items": {"type": "integer"}, "minItems": 1},
        },
    },
    "screen_epochs": {"type": ["integer", "null"], "minimum": 1},
}

_vec3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}

_DATA_FIELDS = {
    "duathlon": {
        "n": {"type": "integer", "minimum": 1},
        "means": {"type": "array", "items": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}, "minItems": 3, "maxItems": 3},
        "cov_scale": {"type": "number", "exclusiveMinimum": 0},
        "noise": {"type": "number", "minimum": 0},
        "demo_b": {"type": "array", "items": {"type": "number"}, "minItems": 1},
        "langevin_alpha": {"type": "number", "exclusiveMinimum": 0},
        "langevin_sigma": {"type": "number", "exclusiveMinimum": 0},
        "langevin_steps": {"type": "integer", "minimum": 1},
        "langevin_chains": {"type": "integer", "minimum": 1},
    },
    "doublewell": {
        "mu": {"type": "number", "exclusiveMinimum": 0},
        "gamma": {"type": "number", "exclusiveMinimum": 0},
        "sigma": {"type": "number", "exclusiveMinimum": 0},
        "b": {"type": "number"},
        "trials": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "exclusiveMinimum": 0},
        "iters": {"type": "integer", "minimum": 1},
        "grid_points": {"type": "integer", "minimum": 2},
    },
    "deblur": {
        "side": {"type": "integer", "minimum": 8},
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "s_values": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}, "minItems": 1},
        "noise": {"type": "number", "minimum": 0},
    },
    "magnetics": {
        "source": {"enum": ["auto", "mnist", "shapes"]},
        "mnist_images": {"type": ["string", "null"]},
        "side": {"type": "integer", "minimum": 2},
        "n_train": {"type": "integer", "minimum": 1},
        "n_test": {"type": "integer", "minimum": 1},
        "h_c": {"type": "number", "exclusiveMinimum": 0},
        "h_r": {"type": "number", "exclusiveMinimum": 0},
        "n_I": _vec3,
        "n_J": _vec3,
        "noise": {"type": "number", "minimum": 0},
    },
}


def _obj(props):
    return {"type": "object", "additionalProperties": False, "properties": props}


SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "experiment configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["experiment"],
    "properties": {
        "experiment": {"enum": list(EXPERIMENTS)},
        "seed": {"type": "integer"},
        "out": {"type": "string"},
        "solvers": {"type": "array", "items": {"enum": list(SOLVERS)}, "minItems": 1, "uniqueItems": True},
        "solver": _obj(_SOLVER_FIELDS),
        "train": _obj(_TRAIN_FIELDS),
        "data": {"type": "object"},
    },
    "allOf": [
        {
            "if": {"properties": {"experiment": {"const": name}}},
            "then": {"properties": {"data": _obj(props)}},
        }
        for name, props in _DATA_FIELDS.items()
    ],
}


# ---------------------------------------------------------------------------
# defaults
# ---------------------------------------------------------------------------

DATA_DEFAULTS = {
    "duathlon": {
        "n": 10_000,
        "means": [list(m) for m in datagen.DUATHLON_MEANS],
        "cov_scale": datagen.DUATHLON_COV_SCALE,
        "noise": 0.01,
        "demo_b": [11.5, 6.0],
        "langevin_alpha": 1e-3,
        "langevin_sigma": 0.1,
        "langevin_steps": 100_000,
        "langevin_chains": 16,
    },
    "doublewell": {
        "mu": 1.0,
        "gamma": 0.1,
        "sigma": 0.5,
        "b": 0.9,
        "trials": 200,
        "alpha": 1e-3,
        "iters": 2000,
        "grid_points": 81,
    },
    "deblur": {"side": 32, "n_train": 2000, "n_test": 200, "s_values": [1, 3, 5, 9], "noise": 0.01},
    "magnetics": {
        "source": "auto",
        "mnist_images": None,
        "side": 16,
        "n_train": 2000,
        "n_test": 200,
        "h_c": 1.0,
        "h_r": 1.0,
        "n_I": [0.0, 0.0, 1.0],
        "n_J": [0.0, 0.0, 1.0],
        "noise": 0.01,
    },
}

SOLVER_DEFAULTS = {
    "duathlon": {"layers": 16, "embedding_dim": 128, "potential_depth": 3, "potential_width": 16, "proximal_width": 16},
    "doublewell": {},
    "deblur": {"layers": 4, "embedding_dim": 4, "potential_depth": 1, "potential_width": 8, "proximal_width": 8},
    "magnetics": {"layers": 4, "embedding_dim": 4, "potential_depth": 1, "potential_width": 8, "proximal_width": 8},
}

TRAIN_DEFAULTS = {
    "duathlon": {"learning_rate": 1e-3, "batch_size": 512, "epochs": 100, "optimizer": "adam"},
    "doublewell": {},
    "deblur": {"learning_rate": 1e-3, "batch_size": 32, "epochs": 10, "optimizer": "adam"},
    "magnetics": {"learning_rate": 1e-3, "batch_size": 32, "epochs": 10, "optimizer": "adam"},
}


class ConfigError(ValueError):
    pass


@dataclass
class SolverSettings:
    layers: int = 16
    embedding_dim: int = 128
    init_policy: str = "backprojected"
    train_steps: bool = True
    potential_depth: int = 3
    potential_width: int | None = None
    proximal_width: int | None = None
    embedding_mode: str = "timed"
    embedding_hidden: int = 16
    tie_potential: bool = False
    phi_time: float = 1.0

    def spec(self, variant: str) -> SolverSpec:
        width = self.proximal_width if variant == "proximal" else self.potential_width
        return SolverSpec(
            variant=variant,
            layers=self.layers,
            embedding_dim=self.embedding_dim,
            init_policy=self.init_policy,
            train_steps=self.train_steps,
            potential_depth=self.potential_depth,
            potential_width=width,
            embedding_mode=self.embedding_mode,
            embedding_hidden=self.embedding_hidden,
            tie_potential=self.tie_potential,
            phi_time=self.phi_time,
        )


@dataclass
class TrainSettings:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 64
    epochs: int = 100
    optimizer: str = "sgd"
    clip_norm: float | None = None
    val_fraction: float = 0.1
    grid: dict | None = None
    screen_epochs: int | None = None

    def config(self, seed: int) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=seed,
            optimizer=self.optimizer,
            clip_norm=self.clip_norm,
            grid=self.grid,
        )


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int = 0
    out: str | None = None
    solvers: list[str] = field(default_factory=lambda: list(SOLVERS))
    solver: SolverSettings = field(default_factory=SolverSettings)
    train: TrainSettings = field(default_factory=TrainSettings)
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("out")
        return d

    def fingerprint(self) -> str:
        """Content hash of the run-defining fields.  Epochs are excluded so a
        checkpoint can be resumed with a larger epoch budget, and the solver
        list because each checkpoint holds a single solver."""
        d = self.to_dict()
        d.pop("solvers")
        d["train"] = {k: v for k, v in d["train"].items() if k != "epochs"}
        return fingerprint(d)


def _format_error(err: jsonschema.ValidationError) -> str:
    where = "/".join(str(p) for p in err.absolute_path) or "<root>"
    return f"{where}: {err.message}"


def validate(raw: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        raise ConfigError("; ".join(_format_error(e) for e in errors))


def load_config(source, overrides: dict | None = None) -> ExperimentConfig:
    """Validate a JSON config (path, text or dict) and fill in defaults."""
    if isinstance(source, dict):
        raw = copy.deepcopy(source)
    else:
        path = Path(source)
        try:
            text = path.read_text()
        except OSError:
            raise
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("<root>: configuration must be a JSON object")
    validate(raw)
    exp = raw["experiment"]
    overrides = overrides or {}
    data = {**DATA_DEFAULTS[exp], **raw.get("data", {})}
    solver = SolverSettings(**{**SOLVER_DEFAULTS[exp], **raw.get("solver", {})})
    train_raw = {**TRAIN_DEFAULTS[exp], **raw.get("train", {})}
    if overrides.get("epochs") is not None:
        train_raw["epochs"] = overrides["epochs"]
    try:
        tset = TrainSettings(**train_raw)
        tset.config(0)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None
    cfg = ExperimentConfig(
        experiment=exp,
        seed=int(overrides["seed"]) if overrides.get("seed") is not None else int(raw.get("seed", 0)),
        out=overrides.get("out") or raw.get("out"),
        solvers=list(overrides.get("solvers") or raw.get("solvers", SOLVERS)),
        solver=solver,
        train=tset,
        data=data,
    )
    bad = [s for s in cfg.solvers if s not in SOLVERS]
    if bad:
        raise ConfigError(f"solvers: unknown solver(s) {bad}")
    return cfg


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def _image_split(cfg: ExperimentConfig) -> float:
    d = cfg.data
    return d["n_test"] / (d["n_train"] + d["n_test"])


def deblur_images(cfg: ExperimentConfig) -> np.ndarray:
    d = cfg.data
    imgs = datagen.gen_shapes(d["n_train"] + d["n_test"], d["side"], cfg.seed)
    return np.stack(imgs)[:, None]


def magnetics_images(cfg: ExperimentConfig) -> tuple[np.ndarray, str]:
    d = cfg.data
    total = d["n_train"] + d["n_test"]
    source = d["source"]
    path = d.get("mnist_images")
    if source in ("auto", "mnist") and path and Path(path).exists():
        imgs, _ = datagen.load_mnist(path)
        rng = np.random.default_rng([cfg.seed, 7])
        pick = rng.choice(len(imgs), size=min(total, len(imgs)), replace=False)
        imgs = imgs[np.sort(pick)]
        if d["side"] != imgs.shape[1]:
            imgs = datagen.resize_images(imgs, d["side"])
        return imgs[:, None], "mnist"
    if source == "mnist":
        raise FileNotFoundError(f"MNIST image file not found: {path}")
    return np.stack(datagen.gen_shapes(total, d["side"], cfg.seed))[:, None], "shapes"


def make_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    d = cfg.data
    if cfg.experiment == "duathlon":
        ds = datagen.gen_duathlon(d["n"], d["means"], d["cov_scale"], d["noise"], cfg.seed, cfg.train.val_fraction)
        return {"duathlon": ds}
    if cfg.experiment == "deblur":
        imgs = deblur_images(cfg)
        out = {}
        for s in d["s_values"]:
            op = operators.make_blur(d["side"], float(s))
            out[f"s{_tag(s)}"] = datagen.build_dataset(imgs, op, d["noise"], cfg.seed, _image_split(cfg), {"experiment": "deblur", "s": float(s)})
        return out
    if cfg.experiment == "magnetics":
        imgs, source = magnetics_images(cfg)
        op = operators.make_magnetics(d["side"], d["h_c"], d["h_r"], d["n_I"], d["n_J"])
        return {"magnetics": datagen.build_dataset(imgs, op, d["noise"], cfg.seed, _image_split(cfg), {"experiment": "magnetics", "source": source})}
    raise ConfigError(f"experiment {cfg.experiment!r} has no datasets")


def _tag(s) -> str:
    s = float(s)
    return str(int(s)) if s.is_integer() else repr(s).replace(".", "p")


def problem_for(ds: Dataset) -> Problem:
    return Problem(operators.from_descriptor(ds.operator), ds.x_shape)


# ---------------------------------------------------------------------------
# training runs
# ---------------------------------------------------------------------------


def make_network(cfg: ExperimentConfig, solver: str, problem: Problem, seed: int | None = None) -> Network:
    seed = cfg.seed if seed is None else seed
    return Network.init(cfg.solver.spec(solver), problem, seed=_net_seed(seed, solver))


def _net_seed(seed: int, solver: str) -> int:
    return int(seed) * 1000 + SOLVERS.index(solver)


@dataclass
class RunResult:
    solver: str
    dataset: str
    net: Network
    history: list
    state: TrainState
    val_mse: float


def train_solver(cfg: ExperimentConfig, ds: Dataset, solver: str, tag: str = "", state: TrainState | None = None, on_epoch=None) -> RunResult:
    problem = problem_for(ds)
    net = make_network(cfg, solver, problem)
    tcfg = cfg.train.config(cfg.seed)
    train_data = ds.train()
    val_data = ds.val()
    if cfg.train.grid:
        from .training import grid_search

        tcfg, _ = grid_search(lambda: make_network(cfg, solver, problem), train_data, val_data, tcfg, cfg.train.grid, cfg.train.screen_epochs)
    if state is not None:
        net.params = {k: v.copy() for k, v in state.params.items()}
    best, hist, st = train(net, train_data, val_data, tcfg, state=state, on_epoch=on_epoch)
    return RunResult(solver, tag, best, hist, st, mse_eval(best, *val_data) if len(val_data[1]) else math.nan)


def evaluate_mse(net: Network, ds: Dataset) -> float:
    b, x = ds.val()
    return mse_eval(net, b, x)


def epochs_to_band(history, band: float = 0.1, key: str = "val_mse") -> int:
    """First epoch after which the metric stays within +-band of its final value."""
    vals = [getattr(r, key) for r in history]
    if not vals:
        return 0
    final = vals[-1]
    lo, hi = final * (1 - band), final * (1 + band)
    first = len(vals)
    for i in range(len(vals) - 1, -1, -1):
        if lo <= vals[i] <= hi:
            first = i
        else:
            break
    return history[first].epoch


def compare_solvers(source, seeds, epochs: int | None = None, on_run=None) -> dict:
    """Train every configured solver for each seed.

    Returns {dataset: {solver: [{"seed", "val_mse", "band", "history"}, ...]}}.
    """
    results: dict = {}
    for seed in seeds:
        cfg = load_config(source, {"seed": seed, "epochs": epochs})
        for tag, ds in make_datasets(cfg).items():
            for solver in cfg.solvers:
                res = train_solver(cfg, ds, solver, tag)
                row = {"seed": seed, "val_mse": res.val_mse, "band": epochs_to_band(res.history), "history": [r.val_mse for r in res.history]}
                results.setdefault(tag, {}).setdefault(solver, []).append(row)
                if on_run is not None:
                    on_run(tag, solver, row)
    return results


def median_table(results: dict, key: str = "val_mse") -> dict:
    return {tag: {s: statistics.median(r[key] for r in rows) for s, rows in by.items()} for tag, by in results.items()}
