"""Command-line entry point: ``deepprior {gen,train,eval,analyze,sample-posterior,inspect}``.

Configuration is a flat JSON object with dotted keys (``trainer.learning_rate``).
Defaults are overridden by ``--config FILE``, then by dedicated flags, then by
``--set key=value``. The effective configuration is written to the output
directory before any work starts; rerunning a command with
``--config <outdir>/config.json`` reproduces it.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import struct
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigurationError, ContractError, DeepPriorError, FormatError

log = logging.getLogger("deepprior")

DEFAULTS = {
    "seed": 0,
    "data.kind": "harmonics",
    "data.split": "meta-train",
    "data.n_tasks": None,  # kind default: 5000 harmonics, 2000 hetero
    "data.samples_min": 4,
    "data.samples_max": 50,
    "data.noise_std": None,  # kind default: 0.05 harmonics, 0.1 sine
    "data.n_eval": 0,
    "data.x": [1.5, 3.0],
    "data.n_way": 4,
    "data.n_shot": 4,
    "data.n_query": 4,
    "data.n_rotations": 8,
    "data.d_symbol": 6,
    "data.center_scale": 1.0,
    "data.radius": 2.5,
    "data.hetero_noise": 0.35,
    "data.include_meta": True,
    "io.data": None,
    "io.eval_data": None,
    "io.checkpoint": None,
    "io.resume": None,
    "io.out": None,
    "eval.train_sizes": [2, 8, 16, 64],
    "eval.n_samples": 20,
    "eval.n_tasks": None,
    "eval.adapt_steps": None,
    "eval.ci_level": 0.9,
    "analysis.use_data": True,
    "analysis.grid_lo": -3.0,
    "analysis.grid_hi": 3.0,
    "analysis.grid_n": 200,
    "analysis.min_rel_height": 0.1,
    "analysis.basin_radius": 3.0,
    "analysis.restarts": 0,
    "analysis.steps": 2000,
    "analysis.lr": 3e-3,
    "analysis.batch": 64,
    "analysis.n_eval": 1000,
    "analysis.flow_layers": 12,
    "analysis.flow_hidden": 64,
    "sample.task_index": 0,
    "sample.train_size": None,
    "sample.n_samples": 10,
    "sample.x_min": None,
    "sample.x_max": None,
    "sample.n_x": 200,
}


def _model_keys():
    from .classifier import ClassifierConfig
    from .trainer import ModelConfig, TrainConfig

    keys = {}
    for cls, prefix in ((ModelConfig, "model"), (ClassifierConfig, "classifier"), (TrainConfig, "trainer")):
        inst = cls()
        for f in fields(cls):
            keys[f"{prefix}.{f.name}"] = getattr(inst, f.name)
    keys["model.d_c"] = None
    keys["classifier.d_c"] = None
    keys["classifier.hidden"] = list(keys["classifier.hidden"])
    keys["classifier.d_x"] = None
    keys["model.d_x"] = None
    keys["trainer.kl_weight"] = None  # 1.0 regression, 0.1 classification
    return keys


def default_config() -> dict:
    cfg = dict(DEFAULTS)
    cfg.update(_model_keys())
    return cfg


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def build_config(file_path=None, flags: dict | None = None, sets=()) -> dict:
    cfg = default_config()
    layers = []
    if file_path:
        doc = json.loads(Path(file_path).read_text())
        if not isinstance(doc, dict):
            raise ConfigurationError("config file must hold a JSON object")
        doc.pop("command", None)
        doc.pop("version", None)
        layers.append(doc)
    layers.append({k: v for k, v in (flags or {}).items() if v is not None})
    overrides = {}
    for item in sets:
        if "=" not in item:
            raise ConfigurationError(f"--set expects key=value, got '{item}'")
        key, value = item.split("=", 1)
        overrides[key.strip()] = parse_value(value)
    layers.append(overrides)
    for layer in layers:
        unknown = sorted(set(layer) - set(cfg))
        if unknown:
            raise ConfigurationError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(layer)
    return cfg


def section(cfg: dict, prefix: str) -> dict:
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()


def output_dir(cfg: dict) -> Path:
    out = cfg["io.out"] or os.environ.get("DP_OUTPUT_DIR") or "dp_output"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_effective_config(cfg: dict, command: str, out: Path) -> Path:
    doc = dict(cfg)
    doc["command"] = command
    doc["version"] = __version__
    path = out / "config.json"
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def validate_csv(path: Path, header) -> int:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != list(header):
        raise FormatError(f"{path}: unexpected CSV header")
    return len(rows) - 1


def _require(cfg, key):
    if not cfg.get(key):
        raise ConfigurationError(f"missing required setting '{key}'")
    path = Path(cfg[key])
    if not path.exists():
        raise FileNotFoundError(f"{key}: no such file: {path}")
    return path


# ---------------------------------------------------------------- subcommands


def cmd_gen(cfg: dict, out: Path) -> list[Path]:
    from .datasets import gen_harmonics, gen_hetero_classification, gen_single_sine, load_dataset, save_dataset
    from .datasets import MetaDataset

    d = section(cfg, "data")
    kind, seed = d["kind"], cfg["seed"]
    if kind == "harmonics":
        ds = gen_harmonics(d["n_tasks"] or 5000, (d["samples_min"], d["samples_max"]), seed, d["split"],
                           noise_std=0.05 if d["noise_std"] is None else d["noise_std"], n_eval=d["n_eval"])
    elif kind == "sine":
        task, (omega, b) = gen_single_sine(seed, tuple(d["x"]), 0.1 if d["noise_std"] is None else d["noise_std"])
        ds = MetaDataset([task], d["split"], seed, "regression",
                         {"generator": "sine", "x": list(d["x"]), "omega": omega, "b": b})
    elif kind == "hetero":
        ds = gen_hetero_classification(d["n_tasks"] or 2000, seed, d["split"], d["n_way"], d["n_shot"], d["n_query"],
                                       d["n_rotations"], d["d_symbol"], d["center_scale"], d["radius"],
                                       d["hetero_noise"])
    else:
        raise ConfigurationError(f"unknown dataset kind '{kind}'")
    path = out / f"{kind}-{d['split']}.dpmd"
    save_dataset(ds, path, include_meta=d["include_meta"])
    back = load_dataset(path)
    if len(back) != len(ds):
        raise FormatError("dataset validation failed after write")
    meta = {"kind": ds.kind, "split": ds.split, "seed": ds.seed, "n_tasks": len(ds), "config": ds.config,
            "file": path.name, "sha256": hashlib.sha256(path.read_bytes()).hexdigest()}
    meta_path = out / f"{kind}-{d['split']}.meta.json"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return [path, meta_path]


def _train_configs(cfg, ds):
    from .classifier import ClassifierConfig
    from .trainer import ModelConfig, TrainConfig

    t = section(cfg, "trainer")
    if t["kl_weight"] is None:
        t["kl_weight"] = 0.1 if ds.kind == "classification" else 1.0
    tcfg = TrainConfig(**t)
    if ds.kind == "classification":
        m = section(cfg, "classifier")
        m["d_x"] = m["d_x"] or ds.d_x
        return ClassifierConfig(**m), tcfg
    m = section(cfg, "model")
    m["d_x"] = m["d_x"] or ds.d_x
    return ModelConfig(**m), tcfg


def cmd_train(cfg: dict, out: Path) -> list[Path]:
    from .classifier import train_classifier
    from .datasets import load_dataset
    from .trainer import load_checkpoint, save_checkpoint, train

    ds = load_dataset(_require(cfg, "io.data"))
    mcfg, tcfg = _train_configs(cfg, ds)
    kind = "classification" if ds.kind == "classification" else "regression"
    resume = None
    if cfg["io.resume"]:
        resume = load_checkpoint(_require(cfg, "io.resume"))
        if resume.kind != kind:
            raise ContractError(f"checkpoint kind '{resume.kind}' does not match dataset kind '{kind}'")
        rows = resume.params["task.mu"].shape[0] if "task.mu" in resume.params else None
        if rows is not None and rows != len(ds):
            raise ContractError(f"checkpoint holds {rows} task posteriors but the dataset has {len(ds)} tasks")
    metrics = out / "metrics.csv"
    fit = train_classifier if kind == "classification" else train
    if resume is not None:
        result = fit(ds, resume=resume, cfg=tcfg, metrics_path=metrics)
    else:
        result = fit(ds, mcfg, tcfg, metrics_path=metrics)
    path = save_checkpoint(result.checkpoint, out / "checkpoint.dpck")
    load_checkpoint(path)
    validate_csv(metrics, ("step", "loss", "nll", "kl", "wall_ms"))
    return [path, metrics]


def cmd_eval(cfg: dict, out: Path) -> list[Path]:
    from .classifier import accuracy_report, episode_accuracies
    from .datasets import load_dataset
    from .trainer import eval_mse, load_checkpoint

    ckpt = load_checkpoint(_require(cfg, "io.checkpoint"))
    ds = load_dataset(_require(cfg, "io.eval_data") if cfg["io.eval_data"] else _require(cfg, "io.data"))
    e = section(cfg, "eval")
    tasks = ds.tasks[:e["n_tasks"]] if e["n_tasks"] else ds.tasks
    doc = {"config_hash": config_hash(cfg), "checkpoint": str(cfg["io.checkpoint"]), "kind": ckpt.kind,
           "step": ckpt.step}
    if ckpt.kind == "classification":
        from .datasets import MetaDataset

        accs = episode_accuracies(ckpt, MetaDataset(tasks, ds.split, ds.seed, ds.kind, ds.config),
                                  steps=e["adapt_steps"])
        report = accuracy_report(accs, e["ci_level"], seed=cfg["seed"])
        doc["accuracy"] = report
        header = ("accuracy", "ci_low", "ci_high", "level", "n_episodes")
        rows = [[report[h] for h in header]]
    else:
        too_small = [s for s in e["train_sizes"] if any(t.n < s for t in tasks)]
        if too_small:
            raise ContractError(f"eval tasks hold fewer training points than train sizes {too_small}")
        table = eval_mse(ckpt, tasks, tuple(e["train_sizes"]), e["n_samples"], steps=e["adapt_steps"])
        doc["mse"] = table
        header = ("train_size", "mse_mean", "mse_stderr", "n_tasks")
        rows = [[r[h] for h in header] for r in table]
    csv_path = write_csv(out / "results.csv", header, rows)
    validate_csv(csv_path, header)
    json_path = out / "results.json"
    json_path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return [json_path, csv_path]


def cmd_analyze(cfg: dict, out: Path) -> list[Path]:
    from .analysis import (FlowSpec, GridSpec, SineLikelihood, analysis_summary, export_grid_csv,
                           export_summary_json, fit_iaf_to_likelihood, grid_posterior, log_density, mode_coverage,
                           prior_samples)
    from .datasets import gen_single_sine, load_dataset

    a = section(cfg, "analysis")
    task = None
    if a["use_data"]:
        if cfg["io.data"]:
            task = load_dataset(_require(cfg, "io.data")).tasks[0]
        else:
            task, _ = gen_single_sine(cfg["seed"], tuple(cfg["data.x"]),
                                      0.1 if cfg["data.noise_std"] is None else cfg["data.noise_std"])
    spec = GridSpec(a["grid_lo"], a["grid_hi"], a["grid_n"])
    grid = grid_posterior(task, spec, min_rel_height=a["min_rel_height"])
    paths = [export_grid_csv(grid, out / "grid.csv")]
    extra = {"config_hash": config_hash(cfg), "use_data": a["use_data"]}
    coverage = None
    if a["restarts"] and task is not None:
        lik = SineLikelihood.from_task(task)
        prior_ld = float(log_density(grid, prior_samples(a["n_eval"], cfg["seed"]), lik).mean())
        runs = []
        for r in range(a["restarts"]):
            fit = fit_iaf_to_likelihood(task, FlowSpec("iaf", a["flow_layers"], a["flow_hidden"]), a["steps"],
                                        cfg["seed"] + r, a["lr"], a["batch"], a["n_eval"], lik, grid)
            cov = mode_coverage(fit.samples, grid, a["basin_radius"])
            runs.append({"restart": r, "mean_log_density": fit.mean_log_density, "captured_modes": cov.covered,
                         "coverage": cov.coverage, "bridge_mass": cov.bridge_mass})
            coverage = cov
        extra.update(prior_mean_log_density=prior_ld, restarts=runs)
    paths.append(export_summary_json(analysis_summary(grid, coverage, extra), out / "modes.json"))
    if validate_csv(paths[0], ("omega", "b", "density")) != spec.n ** 2:
        raise FormatError("grid CSV row count mismatch")
    return paths


def cmd_sample_posterior(cfg: dict, out: Path) -> list[Path]:
    from .datasets import load_dataset
    from .rng import make_rng
    from .trainer import adapt_new_task, load_checkpoint, predict_marginal

    ckpt = load_checkpoint(_require(cfg, "io.checkpoint"))
    if ckpt.kind != "regression":
        raise ContractError("sample-posterior needs a regression checkpoint")
    ds = load_dataset(_require(cfg, "io.data"))
    s = section(cfg, "sample")
    if not 0 <= s["task_index"] < len(ds):
        raise ContractError(f"task index {s['task_index']} outside dataset of {len(ds)} tasks")
    task = ds.tasks[s["task_index"]]
    if s["train_size"]:
        task = task.subset(s["train_size"])
    post = adapt_new_task(ckpt, task, steps=cfg["eval.adapt_steps"])
    lo = s["x_min"] if s["x_min"] is not None else float(task.x.min()) - 2.0
    hi = s["x_max"] if s["x_max"] is not None else float(task.x.max()) + 2.0
    xs = np.linspace(lo, hi, s["n_x"])
    pred = predict_marginal(ckpt, post, xs, s["n_samples"], make_rng(cfg["seed"], "sample-posterior"))
    d_z = pred.z.shape[1]
    header = ["sample"] + [f"z{i}" for i in range(d_z)] + ["log_q", "x", "mean", "lower", "upper"]
    rows = []
    for k in range(s["n_samples"]):
        head = [k] + list(pred.z[k]) + [pred.log_q[k]]
        for x, m, sd in zip(xs, pred.sample_mu[k], pred.sample_sigma[k]):
            rows.append(head + [x, m, m - 2 * sd, m + 2 * sd])
    path = write_csv(out / "samples.csv", header, rows)
    if validate_csv(path, header) != s["n_samples"] * s["n_x"]:
        raise FormatError("samples CSV row count mismatch")
    obs = write_csv(out / "observations.csv", ["x", "y"], zip(task.x[:, 0], task.y))
    return [path, obs]


def inspect_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    buf = path.read_bytes()
    if len(buf) < 10:
        raise FormatError("file too short")
    magic = buf[:4]
    version, hlen = struct.unpack("<HI", buf[4:10])
    if magic not in (b"DPMD", b"DPCK"):
        raise FormatError(f"unknown magic {magic!r}")
    header = json.loads(buf[10:10 + hlen])
    header.pop("rng_state", None)
    return {"format": magic.decode(), "version": version, "bytes": len(buf), "header": header}


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "sample-posterior": cmd_sample_posterior}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepprior", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file with dotted keys")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory (default: $DP_OUTPUT_DIR or ./dp_output)")
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    g = common(sub.add_parser("gen", help="generate a dataset file"))
    g.add_argument("kind", choices=["harmonics", "sine", "hetero"])
    g.add_argument("--n-tasks", type=int)
    g.add_argument("--split", choices=["meta-train", "meta-valid", "meta-test"])
    g.add_argument("--samples-range", type=int, nargs=2, metavar=("MIN", "MAX"))
    g.add_argument("--n-eval", type=int)
    g.add_argument("--noise-std", type=float)

    t = common(sub.add_parser("train", help="train on a dataset file"))
    t.add_argument("--data")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--steps", type=int, help="total step budget")
    t.add_argument("--baseline", choices=["no-kl"], help="no-kl: deterministic posterior without KL")

    e = common(sub.add_parser("eval", help="evaluate a checkpoint on held-out tasks"))
    e.add_argument("--checkpoint")
    e.add_argument("--data", help="held-out tasks")
    e.add_argument("--n-tasks", type=int)

    a = common(sub.add_parser("analyze", help="grid posterior and IAF study for the sine task"))
    a.add_argument("--data", help="sine dataset file (default: generate from the seed)")
    a.add_argument("--no-data", action="store_true", help="tabulate the prior only")
    a.add_argument("--restarts", type=int, help="number of IAF fits to score against the grid")

    s = common(sub.add_parser("sample-posterior", help="posterior draws and predictive curves"))
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--task-index", type=int)
    s.add_argument("--train-size", type=int)
    s.add_argument("--n-samples", type=int)
    s.add_argument("--x-min", type=float)
    s.add_argument("--x-max", type=float)

    i = sub.add_parser("inspect", help="print a dataset or checkpoint header")
    i.add_argument("path")
    return parser


def flags_from_args(args) -> dict:
    flags = {"seed": getattr(args, "seed", None), "io.out": getattr(args, "out", None)}
    cmd = args.command
    if cmd == "gen":
        flags.update({"data.kind": args.kind, "data.n_tasks": args.n_tasks, "data.split": args.split,
                      "data.n_eval": args.n_eval, "data.noise_std": args.noise_std})
        if args.samples_range:
            flags["data.samples_min"], flags["data.samples_max"] = args.samples_range
    elif cmd == "train":
        flags.update({"io.data": args.data, "io.resume": args.resume, "trainer.max_steps": args.steps})
        if args.baseline == "no-kl":
            flags["trainer.baseline_mode"] = "no_kl_deterministic"
    elif cmd == "eval":
        flags.update({"io.checkpoint": args.checkpoint, "io.eval_data": args.data, "eval.n_tasks": args.n_tasks})
    elif cmd == "analyze":
        flags.update({"io.data": args.data, "analysis.restarts": args.restarts})
        if args.no_data:
            flags["analysis.use_data"] = False
    elif cmd == "sample-posterior":
        flags.update({"io.checkpoint": args.checkpoint, "io.data": args.data, "sample.task_index": args.task_index,
                      "sample.train_size": args.train_size, "sample.n_samples": args.n_samples,
                      "sample.x_min": args.x_min, "sample.x_max": args.x_max})
    return flags


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "inspect":
            print(json.dumps(inspect_file(args.path), indent=2, sort_keys=True))
            return 0
        cfg = build_config(args.config, flags_from_args(args), args.set)
        out = output_dir(cfg)
        write_effective_config(cfg, args.command, out)
        for path in COMMANDS[args.command](cfg, out):
            print(path)
        return 0
    except (DeepPriorError, OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
