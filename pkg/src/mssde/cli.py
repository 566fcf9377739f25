"""Batch entry points: generate / train / predict / evaluate / baseline.

Every command reads a flat key=value config, writes its reports (CSV + JSON
summary + PNG figures) into --out, and drops a run manifest recording the
resolved config, input hashes, seed, and timings. Reruns with identical
config and seed produce byte-identical CSV outputs.
"""

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

from .config import ConfigError, load_config

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out, command, cfg, seed, inputs, outputs, elapsed):
    from . import report

    manifest = {
        "command": command,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(cfg.items())},
        "seed": seed,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": sorted(str(p) for p in outputs),
        "elapsed_s": round(elapsed, 3),
    }
    report.write_json(out / "manifest.json", manifest)


def _resolve(args):
    cfg = load_config(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    cfg["seed"] = seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return cfg, seed, out


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config key {key!r} is required for this command")
    return cfg[key]


# -- commands ------------------------------------------------------------------


def cmd_generate(args):
    from . import datagen, report
    from .rng import Rng

    cfg, seed, out = _resolve(args)
    problem = _require(cfg, "problem")
    if problem not in datagen.PRESETS:
        raise ConfigError(f"unknown problem {problem!r}; choose from {sorted(datagen.PRESETS)}")
    merged = {**datagen.PRESETS[problem], **cfg}

    t0 = time.perf_counter()
    ds = datagen.generate(merged, Rng(seed))
    path = out / "dataset.mst1"
    datagen.write_dataset(path, ds)
    report.write_json(out / "summary.json", {
        "problem": problem,
        "n_trajectories": len(ds.trajectories),
        "splits": {s: ds.splits.count(s) for s in ("train", "val", "test")},
        "n_t": len(ds.trajectories[0].times),
        "n_y": ds.grid.n_y,
        "sigma": ds.sigma,
    })
    outputs = [path, path.with_suffix(".mst1.json"), out / "summary.json"]
    _write_manifest(out, "generate", merged, seed, [], outputs, time.perf_counter() - t0)
    return 0


def _training_rows(meta):
    rows, offset = [], 0
    for stage in meta["stages"]:
        last = offset
        for h in stage["history"]:
            rows.append({"stage": stage["n_eta"], "step": offset + h["step"],
                         "train_elbo": h["train_elbo"], "loglik": h["loglik"],
                         "kl": h["kl"], "val_elbo": h["val_elbo"], "lr": h["lr"]})
            last = offset + h["step"]
        offset = last
    return rows


def cmd_train(args):
    from . import datagen, inference, report

    cfg, seed, out = _resolve(args)
    ds = datagen.read_dataset(_require(cfg, "dataset"))
    inputs = [cfg["dataset"]]

    train_cfg = {k: v for k, v in cfg.items() if k in inference.TRAIN_DEFAULTS or k == "t_scale"}
    if "resume" in cfg:
        params, meta0 = inference.load_checkpoint(cfg["resume"])
        train_cfg.setdefault("n_eta", meta0["n_eta"])
        train_cfg["start_eta"] = meta0["n_eta"]
        train_cfg["warm_start"] = params
        inputs.append(cfg["resume"])

    t0 = time.perf_counter()
    params, meta = inference.train(ds, train_cfg, log=lambda msg: print(msg, file=sys.stderr))
    ckpt = out / "checkpoint.npz"
    inference.save_checkpoint(ckpt, params, meta)

    rows = _training_rows(meta)
    columns = ["stage", "step", "train_elbo", "loglik", "kl", "val_elbo", "lr"]
    report.write_csv(out / "training_log.csv", columns, rows)
    if rows:
        report.render_training_figure(out / "training.png", rows)
    report.write_json(out / "summary.json", {
        "n_eta": meta["n_eta"],
        "best_val_elbo": {str(s["n_eta"]): s["best_val_elbo"] for s in meta["stages"]},
    })
    outputs = [ckpt, out / "training_log.csv", out / "training.png", out / "summary.json"]
    _write_manifest(out, "train", cfg, seed, inputs, outputs, time.perf_counter() - t0)
    return 0


def _eval_rows(ds, model, poe, cfg, seed):
    from . import predict
    from .rng import Rng

    split = cfg.get("split", "test")
    horizon = cfg.get("test_horizon", ds.meta.get("test_horizon"))
    n_paths = cfg.get("n_paths", 64)
    dt = cfg.get("predict_dt", ds.meta.get("dt", 1e-3))
    rng = Rng(seed)

    rows = []
    ids = [i for i, s in enumerate(ds.splits) if s == split]
    if not ids:
        raise ConfigError(f"dataset has no {split!r} trajectories")
    for tid in ids:
        traj = ds.trajectories[tid]
        t_rel = traj.times - traj.times[0]
        mask = t_rel <= horizon + 1e-12 if horizon else slice(None)
        times = traj.times[mask]
        states = traj.states[mask]
        mixes = predict.posterior_predict(model, poe, states[0], times,
                                          n_paths=n_paths, dt=dt, rng=rng.substream(tid))
        for t, y, mix in zip(times, states, mixes):
            rows.append({"trajectory_id": tid, "t": float(t),
                         "epsilon": predict.error_metric(y, mix)})
    return rows


def _run_eval(args, command):
    from . import datagen, inference, report

    cfg, seed, out = _resolve(args)
    ds = datagen.read_dataset(_require(cfg, "dataset"))
    params, meta = inference.load_checkpoint(_require(cfg, "checkpoint"))
    model, poe, _ = inference.restore(ds.grid, params, meta)

    t0 = time.perf_counter()
    rows = _eval_rows(ds, model, poe, cfg, seed)
    report.write_csv(out / "errors.csv", report.ERROR_COLUMNS, rows)
    summary = report.error_summary(rows)
    summary["split"] = cfg.get("split", "test")
    summary["n_eta"] = meta["n_eta"]
    report.write_json(out / "summary.json", summary)
    report.render_error_figure(out / "errors.png", rows, f"{command}: per-trajectory error")
    outputs = [out / "errors.csv", out / "summary.json", out / "errors.png"]
    _write_manifest(out, command, cfg, seed, [cfg["dataset"], cfg["checkpoint"]],
                    outputs, time.perf_counter() - t0)
    return 0


def cmd_predict(args):
    return _run_eval(args, "predict")


def cmd_evaluate(args):
    return _run_eval(args, "evaluate")


def cmd_baseline(args):
    import numpy as np

    from . import baselines, datagen, inference, report

    cfg, seed, out = _resolve(args)
    ds = datagen.read_dataset(_require(cfg, "dataset"))
    defaults = inference.TRAIN_DEFAULTS
    n_z = cfg.get("n_zeta", defaults["n_zeta"]) + cfg.get("n_eta", defaults["n_eta"])
    split = cfg.get("split", "test")
    horizon = cfg.get("test_horizon", ds.meta.get("test_horizon"))

    train_traj = ds.split("train")
    if not train_traj:
        raise datagen.DataError("dataset has no training trajectories")
    snapshots = np.concatenate([t.states for t in train_traj]).T      # [n_y, n_t_total]
    dt_save = train_traj[0].times[1] - train_traj[0].times[0]

    t0 = time.perf_counter()
    dmd = baselines.dmd_fit(snapshots, r=n_z, lam=cfg.get("dmd_lambda", 0.01))
    sindy = baselines.sindy_fit(snapshots, r=n_z, order=cfg.get("sindy_order", 2),
                                threshold=cfg.get("sindy_threshold", 0.1), dt=dt_save)

    problem = ds.meta.get("problem")
    params = {k: ds.meta[k] for k in ("c", "nu") if k in ds.meta}
    n_coarse = cfg.get("n_coarse", cfg.get("n_zeta", defaults["n_zeta"]))

    rows = []
    ids = [i for i, s in enumerate(ds.splits) if s == split]
    for tid in ids:
        traj = ds.trajectories[tid]
        t_rel = traj.times - traj.times[0]
        mask = t_rel <= horizon + 1e-12 if horizon else slice(None)
        times = traj.times[mask]
        states = traj.states[mask]

        preds = {}
        if ds.grid.dim == 1 and problem is not None:
            preds["coarse_dns"] = baselines.coarse_dns(
                problem, ds.grid, n_coarse, states[0], times, params).states
        preds["dmd"] = baselines.dmd_predict(dmd, states[0], len(times) - 1).states
        preds["pod_sindy"] = baselines.sindy_predict(sindy, states[0], times).states

        for method, pred in preds.items():
            for k in range(len(pred)):          # sindy rollout may be truncated
                denom = np.linalg.norm(states[k])
                eps = float(np.linalg.norm(states[k] - pred[k]) / denom)
                rows.append({"method": method, "trajectory_id": tid,
                             "t": float(times[k]), "epsilon": eps})

    report.write_csv(out / "baseline_errors.csv", report.BASELINE_COLUMNS, rows)
    summary = {"dmd_rank": dmd.rank, "requested_rank": n_z,
               "sindy_converged": sindy.converged, "sindy_truncated": sindy.truncated,
               "split": split, "methods": {}}
    for method in sorted({r["method"] for r in rows}):
        summary["methods"][method] = report.error_summary(
            [r for r in rows if r["method"] == method])
    report.write_json(out / "summary.json", summary)
    report.render_comparison_figure(out / "baselines.png", rows, "baseline comparison")
    outputs = [out / "baseline_errors.csv", out / "summary.json", out / "baselines.png"]
    _write_manifest(out, "baseline", cfg, seed, [cfg["dataset"]], outputs,
                    time.perf_counter() - t0)
    return 0


# -- driver ---------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="mssde",
                                     description="Stochastic multiscale surrogate toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "generate": (cmd_generate, "simulate a dataset and write MST1 + sidecar"),
        "train": (cmd_train, "fit the latent SDE model, write checkpoint + log"),
        "predict": (cmd_predict, "posterior-predictive errors on a dataset split"),
        "evaluate": (cmd_evaluate, "error report + summary + figure for a checkpoint"),
        "baseline": (cmd_baseline, "coarse-DNS / DMD / POD-SINDy comparison report"),
    }
    for name, (func, help_) in commands.items():
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--threads", type=int, default=None,
                       help="cap BLAS worker threads (fallback: MSSDE_THREADS)")
        p.add_argument("--out", default=".", help="output directory")
        p.set_defaults(func=func)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    threads = args.threads
    if threads is None and os.environ.get("MSSDE_THREADS"):
        try:
            threads = int(os.environ["MSSDE_THREADS"])
        except ValueError:
            print("mssde: MSSDE_THREADS must be an integer", file=sys.stderr)
            return EXIT_USAGE
    if threads is not None:
        if threads < 1:
            print("mssde: --threads must be >= 1", file=sys.stderr)
            return EXIT_USAGE
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(threads)

    from .datagen import DataError
    from .dynamics import IntegrationError
    from .inference import InferenceError
    from .optim import NanGradientError

    try:
        return args.func(args)
    except ConfigError as e:
        print(f"mssde: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as e:
        print(f"mssde: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (InferenceError, IntegrationError, NanGradientError, FloatingPointError) as e:
        print(f"mssde: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        print(f"mssde: data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
