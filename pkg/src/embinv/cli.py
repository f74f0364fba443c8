"""Command line entry point: gen, train, eval, demo-doublewell, demo-duathlon.

Exit codes: 0 success, 2 configuration error, 3 numerical abort, 4 IO error.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import demos, diffcore
from .datagen import Dataset
from .experiments import ConfigError, ExperimentConfig, epochs_to_band, load_config, make_datasets, make_network, problem_for
from .solvers import DivergenceError
from .training import (
    FormatError,
    TrainingAborted,
    history_csv,
    load_checkpoint,
    mse_eval,
    save_checkpoint,
    train,
)

log = logging.getLogger("embinv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
LOCK_NAME = ".embinv.lock"


class FingerprintMismatch(ConfigError):
    def __init__(self, path, expected: str, found: str):
        super().__init__(f"{path}: checkpoint fingerprint {found} does not match config fingerprint {expected}")
        self.expected = expected
        self.found = found


class LockHeld(OSError):
    pass


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def write_text(path: Path, text: str) -> None:
    write_bytes(path, text.encode())


def write_bytes(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def write_csv(path: Path, header, rows) -> None:
    write_text(path, csv_text(header, rows))


def write_json(path: Path, obj) -> None:
    write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@contextmanager
def output_lock(out: Path):
    out.mkdir(parents=True, exist_ok=True)
    lock = out / LOCK_NAME
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise LockHeld(f"{out} is in use by another run (remove {lock} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def out_dir(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out or f"runs/{cfg.experiment}")


def checkpoint_path(out: Path, tag: str, solver: str) -> Path:
    return out / "checkpoints" / f"{tag}-{solver}.ckpt"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig) -> dict[str, Dataset]:
    out = out_dir(cfg)
    datasets = make_datasets(cfg)
    entries = {}
    for tag, ds in datasets.items():
        path = out / "data" / f"{tag}.bin"
        path.parent.mkdir(parents=True, exist_ok=True)
        ds.save(path)
        entries[tag] = {"file": f"data/{tag}.bin", "sha256": sha256_file(path), "samples": len(ds), "train": int(len(ds.train_idx)), "val": int(len(ds.val_idx))}
    write_json(out / "manifest.json", {"experiment": cfg.experiment, "fingerprint": cfg.fingerprint(), "config": cfg.to_dict(), "datasets": entries})
    return datasets


def _load_or_make_datasets(cfg: ExperimentConfig) -> dict[str, Dataset]:
    out = out_dir(cfg)
    manifest = out / "manifest.json"
    if manifest.exists():
        m = json.loads(manifest.read_text())
        if m.get("fingerprint") == cfg.fingerprint():
            return {tag: Dataset.load(out / e["file"]) for tag, e in m["datasets"].items()}
    return cmd_gen(cfg)


def _resume_state(path: Path, expected: str):
    if not path.exists():
        return None
    state, meta = load_checkpoint(path)
    if meta["fingerprint"] != expected:
        raise FingerprintMismatch(path, expected, meta["fingerprint"])
    return state


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = out_dir(cfg)
    fp = cfg.fingerprint()
    datasets = _load_or_make_datasets(cfg)
    timing = {}
    for tag, ds in datasets.items():
        for solver in cfg.solvers:
            ckpt = checkpoint_path(out, tag, solver)
            state = _resume_state(ckpt, fp)
            net = make_network(cfg, solver, problem_for(ds))
            tcfg = cfg.train.config(cfg.seed)
            if state is not None:
                net.params = {k: v.copy() for k, v in state.params.items()}
            extra = {"dataset": tag, "solver": solver}

            def on_epoch(st, ckpt=ckpt, extra=extra):
                save_checkpoint(ckpt, st, fp, extra)

            ckpt.parent.mkdir(parents=True, exist_ok=True)
            t0 = time.perf_counter()
            try:
                _, hist, st = train(net, ds.train(), ds.val(), tcfg, state=state, on_epoch=on_epoch)
            except TrainingAborted as exc:
                write_text(out / "history" / f"{tag}-{solver}.csv", history_csv(exc.history))
                raise
            timing[f"{tag}-{solver}"] = time.perf_counter() - t0
            if state is None and not hist:
                save_checkpoint(ckpt, st, fp, extra)
            write_text(out / "history" / f"{tag}-{solver}.csv", history_csv(hist))
            log.info("%s %s: %d epochs, best val mse %.6g", tag, solver, st.epoch, st.best_val)
    # wall-clock numbers are the one output that is not reproducible
    write_json(out / "timing.json", {"seconds": timing})
    return cmd_eval(cfg, datasets)


def load_trained(cfg: ExperimentConfig, ds: Dataset, tag: str, solver: str):
    out = out_dir(cfg)
    path = checkpoint_path(out, tag, solver)
    state = _resume_state(path, cfg.fingerprint())
    if state is None:
        raise FileNotFoundError(f"no checkpoint at {path}")
    net = make_network(cfg, solver, problem_for(ds))
    net.params = {k: v.copy() for k, v in state.best_params.items()}
    return net, state


def cmd_eval(cfg: ExperimentConfig, datasets: dict[str, Dataset] | None = None) -> dict:
    out = out_dir(cfg)
    if datasets is None:
        datasets = _load_or_make_datasets(cfg)
    rows, report_rows = [], []
    for tag, ds in datasets.items():
        b_va, x_va = ds.val()
        epochs_cols, layer_cols = {}, {}
        for solver in cfg.solvers:
            net, state = load_trained(cfg, ds, tag, solver)
            val = mse_eval(net, b_va, x_va)
            hist = state.history
            best_epoch = min((r for r in hist), key=lambda r: r.val_mse).epoch if hist else 0
            band = epochs_to_band(hist) if hist else 0
            rows.append((tag, solver, state.epoch, best_epoch, band, val))
            report_rows.append({"dataset": tag, "solver": solver, "epochs": state.epoch, "best_epoch": best_epoch, "epochs_to_band": band, "val_mse": val})
            epochs_cols[solver] = {r.epoch: r.val_mse for r in hist}
            layer_cols[solver] = net.layer_objectives(b_va).tolist() if len(b_va) else []
        epochs = sorted({e for col in epochs_cols.values() for e in col})
        write_csv(out / f"convergence_{tag}.csv", ["epoch"] + cfg.solvers, [[e] + [epochs_cols[s].get(e, "") for s in cfg.solvers] for e in epochs])
        depth = max((len(v) for v in layer_cols.values()), default=0)
        write_csv(
            out / f"layers_{tag}.csv",
            ["layer"] + cfg.solvers,
            [[j] + [layer_cols[s][j] if j < len(layer_cols[s]) else "" for s in cfg.solvers] for j in range(depth)],
        )
    write_csv(out / "mse.csv", ["dataset", "solver", "epochs", "best_epoch", "epochs_to_band", "val_mse"], rows)
    report = {"experiment": cfg.experiment, "fingerprint": cfg.fingerprint(), "seed": cfg.seed, "results": report_rows}
    write_json(out / "report.json", report)
    return report


def cmd_demo_doublewell(cfg: ExperimentConfig) -> dict:
    out = out_dir(cfg)
    d = cfg.data
    rep = demos.doublewell_demo(d["mu"], d["gamma"], d["sigma"], d["b"], d["trials"], cfg.seed, d["alpha"], d["iters"], d["grid_points"])
    write_csv(
        out / "doublewell_trials.csv",
        ["trial", "x0", "y0", "x_final_1d", "z1_final_2d", "z2_final_2d"],
        [(i, s[0], s[1], x, z[0], z[1]) for i, (s, x, z) in enumerate(zip(rep.starts, rep.final_1d, rep.final_2d))],
    )
    write_csv(out / "doublewell_1d.csv", ["x", "prior", "objective"], rep.grid_1d)
    write_csv(out / "doublewell_2d.csv", ["z1", "z2", "prior", "objective"], rep.grid_2d)
    summary = {"experiment": "doublewell", "seed": cfg.seed, **rep.summary()}
    write_json(out / "doublewell_report.json", summary)
    return summary


def cmd_demo_duathlon(cfg: ExperimentConfig) -> dict:
    out = out_dir(cfg)
    d = cfg.data
    means = np.asarray(d["means"], dtype=np.float64)
    s = d["cov_scale"]
    ds = make_datasets(cfg)["duathlon"]
    labels = ds.meta.get("labels", [0] * len(ds))
    n_show = min(len(ds), 2000)
    write_csv(out / "duathlon_prior.csv", ["x1", "x2", "component"], [(ds.x[i, 0], ds.x[i, 1], labels[i]) for i in range(n_show)])
    lo, hi = float(means.min() - 3 * s), float(means.max() + 3 * s)
    rows_line, rows_samples, summary_b = [], [], []
    for b in d["demo_b"]:
        rows_line += [(b, t, y) for t, y in demos.data_line(b, lo, hi)]
        samples = demos.duathlon_posterior(b, means, s, d["langevin_sigma"], d["langevin_alpha"], d["langevin_steps"], d["langevin_chains"], cfg.seed)
        kept, chains, _ = samples.shape
        rows_samples += [(b, c, k, samples[k, c, 0], samples[k, c, 1]) for c in range(chains) for k in range(kept)]
        summary_b.append({"b": b, "clusters": demos.count_clusters(samples, s), "consistent_components": demos.consistent_components(b, means, s)})
    write_csv(out / "duathlon_line.csv", ["b", "x1", "x2"], rows_line)
    write_csv(out / "duathlon_langevin.csv", ["b", "chain", "sample", "x1", "x2"], rows_samples)

    preds = []
    for solver in cfg.solvers:
        try:
            net, _ = load_trained(cfg, ds, "duathlon", solver)
        except FileNotFoundError:
            continue
        xs = net.predict(np.asarray(d["demo_b"], dtype=np.float64)[:, None])
        for b, x in zip(d["demo_b"], xs):
            comps = demos.consistent_components(b, means, s) or list(range(len(means)))
            dist = min(float(np.linalg.norm(x - means[k])) for k in comps)
            preds.append({"b": b, "solver": solver, "x1": float(x[0]), "x2": float(x[1]), "distance_to_consistent_mean": dist})
    if preds:
        write_csv(out / "duathlon_predictions.csv", ["b", "solver", "x1", "x2", "distance_to_consistent_mean"], [tuple(p.values()) for p in preds])
    summary = {"experiment": "duathlon", "seed": cfg.seed, "langevin": summary_b, "predictions": preds}
    write_json(out / "duathlon_demo.json", summary)
    return summary


COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "demo-doublewell": cmd_demo_doublewell,
    "demo-duathlon": cmd_demo_duathlon,
}
DEMO_EXPERIMENT = {"demo-doublewell": "doublewell", "demo-duathlon": "duathlon"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="embinv", description="Unrolled embedded solvers for inverse problems.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON experiment configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        p.add_argument("--solvers", help="comma separated subset of proximal,optenet,eunet")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _config_from_args(args) -> ExperimentConfig:
    solvers = [s.strip() for s in args.solvers.split(",") if s.strip()] if args.solvers else None
    overrides = {"epochs": args.epochs, "seed": args.seed, "out": args.out, "solvers": solvers}
    if args.config:
        cfg = load_config(args.config, overrides)
    elif args.command in DEMO_EXPERIMENT:
        cfg = load_config({"experiment": DEMO_EXPERIMENT[args.command]}, overrides)
    else:
        raise ConfigError(f"{args.command} requires --config")
    if args.command in DEMO_EXPERIMENT and cfg.experiment != DEMO_EXPERIMENT[args.command]:
        raise ConfigError(f"{args.command} needs a {DEMO_EXPERIMENT[args.command]} config, got {cfg.experiment}")
    if args.command in ("gen", "train", "eval") and cfg.experiment == "doublewell":
        raise ConfigError("the doublewell experiment has no datasets; use demo-doublewell")
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config_from_args(args)
        with output_lock(out_dir(cfg)):
            COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingAborted, DivergenceError, diffcore.NonFiniteError, FloatingPointError) as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
