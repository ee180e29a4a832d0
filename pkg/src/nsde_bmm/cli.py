"""Command-line interface: ``nsde-bmm {generate,train,predict,benchmark,ablate}``.

Every command reads one YAML (or JSON) configuration file.  Keys not present
in :data:`DEFAULTS` are rejected before anything is written.  Each output
directory receives ``resolved_config.json`` and ``version.txt``.
Relative ``--out`` paths are placed under ``$NSDE_BMM_OUTPUT_ROOT`` when
that variable is set.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from . import __version__
from .data import CsvSchema, Dataset, generate_double_well, generate_lotka_volterra, load_csv, standardize, write_dataset_csv, write_manifest
from .evaluation import (
    ablate_vmm_vs_cubature,
    benchmark_calibration,
    forecast,
    forecast_tasks,
    summarize_benchmark,
    write_curve,
    write_rows_csv,
)
from .exceptions import ConfigError, NumericalError
from .inference import TimeSeries, TrainConfig, TrainResult, load_checkpoint, save_checkpoint, train
from .network import mlp
from .layers import GaussianState
from .solver import NsdeModel, write_rollout_csv

log = logging.getLogger("nsde_bmm")

OUTPUT_ROOT_ENV = "NSDE_BMM_OUTPUT_ROOT"

DEFAULTS: dict[str, Any] = {
    "seed": 0,
    "timing": False,
    "data": {
        "source": "lotka_volterra",
        "standardize": True,
        "lotka_volterra": {
            "paths": 32,
            "fine_dt": 1e-4,
            "coarse_points": 100,
            "t_end": 10.0,
            "train_fraction": 0.5,
            "init_low": 1.0,
            "init_high": 4.0,
        },
        "double_well": {
            "paths": 16,
            "dt": 0.01,
            "steps": 1000,
            "init": 0.0,
            "label_modes": False,
            "train_fraction": 0.5,
        },
        "csv": {"path": None, "time": "t", "channels": [], "controls": [], "series_id": None, "split": None},
        "dataset": {"path": None},
    },
    "model": {
        "drift": {"hidden": [50, 50], "keep_prob": 0.8, "activation": "relu"},
        "diffusion": {"enabled": True, "hidden": [50], "keep_prob": 0.8, "final_bias": None},
    },
    "train": {k: v for k, v in TrainConfig().to_dict().items()},
    "predict": {"checkpoint": None, "method": "bmm", "horizon": None, "particles": 128, "seed": 0, "write_ensemble": False},
    "benchmark": {
        "checkpoint": None,
        "particle_grid": [1, 2, 4, 8, 16, 32, 64, 128],
        "repetitions": 10,
        "include_bmm": True,
        "include_cubature": True,
        "cubature_lambda": 1.0,
    },
    "ablate": {"dims": [2, 4, 8, 16], "widths": [16, 64, 256], "repetitions": 10, "mc_samples": 1_000_000, "hidden_layers": 3},
}

# ----------------------------------------------------------------------
# configuration


def _merge(defaults: Mapping, user: Mapping, path: tuple = ()) -> dict:
    out = copy.deepcopy(dict(defaults))
    for key, value in user.items():
        where = ".".join(path + (str(key),))
        if key not in defaults:
            raise ConfigError(f"unknown configuration key '{where}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, Mapping):
                raise ConfigError(f"configuration key '{where}' must be a mapping")
            out[key] = _merge(defaults[key], value, path + (key,))
        else:
            out[key] = value
    return out


def load_config(path: str | Path | None) -> dict:
    """Resolved configuration: defaults overlaid with the file's values."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    try:
        user = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from None
    if not isinstance(user, Mapping):
        raise ConfigError("configuration must be a mapping at the top level")
    cfg = _merge(DEFAULTS, user)
    TrainConfig.from_dict(cfg["train"])  # validates values early
    return cfg


def resolve_out(out: str | None, command: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if out is None:
        base = Path(root) if root else Path("runs")
        return base / command
    p = Path(out)
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def _prepare_out(out: Path, cfg: Mapping, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "config": cfg}
    (out / "resolved_config.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    (out / "version.txt").write_text(f"nsde_bmm {__version__}\n")


# ----------------------------------------------------------------------
# data and model construction


def build_dataset(cfg: Mapping) -> Dataset:
    d = cfg["data"]
    src = d["source"]
    seed = int(cfg["seed"])
    if src == "lotka_volterra":
        return generate_lotka_volterra(seed=seed, **d["lotka_volterra"])
    if src == "double_well":
        return generate_double_well(seed=seed, **d["double_well"])
    if src == "csv":
        c = dict(d["csv"])
        if not c.get("path"):
            raise ConfigError("data.csv.path is required for source 'csv'")
        path = c.pop("path")
        return load_csv(path, CsvSchema.from_dict(c))
    if src == "dataset":
        root = d["dataset"]["path"]
        if not root:
            raise ConfigError("data.dataset.path is required for source 'dataset'")
        root = Path(root)
        ds = load_csv(root / "dataset.csv", CsvSchema(time="t", series_id="series_id", split="split"))
        try:
            manifest = json.loads((root / "manifest.json").read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest in {root}: {exc}") from None
        for key in ("forecast_pairs", "generator", "seed", "modes"):
            if key in manifest:
                ds.info[key] = manifest[key]
        return ds
    raise ConfigError(f"unknown data.source {src!r}")


def _prepared_dataset(cfg: Mapping) -> Dataset:
    ds = build_dataset(cfg)
    if not ds.split("train"):
        raise ConfigError("dataset has no training series")
    return standardize(ds) if cfg["data"]["standardize"] else ds


def build_model(cfg: Mapping, dim: int, control_dim: int = 0) -> NsdeModel:
    rng = np.random.default_rng([int(cfg["seed"]), 1])
    m = cfg["model"]
    dr = m["drift"]
    drift = mlp(dim + control_dim, dr["hidden"], dim, rng, activation=dr["activation"], keep_prob=dr["keep_prob"])
    diffusion = None
    df = m["diffusion"]
    if df["enabled"]:
        diffusion = mlp(
            dim + control_dim, df["hidden"], dim, rng,
            keep_prob=df["keep_prob"], final_activation="relu", final_bias=df["final_bias"],
        )
    return NsdeModel(drift, diffusion, dim, control_dim)


def _checkpoint_path(cfg: Mapping, section: str, override: str | None) -> Path:
    path = override or cfg[section]["checkpoint"]
    if not path:
        raise ConfigError(f"a checkpoint is required (--checkpoint or {section}.checkpoint)")
    return Path(path)


def _normalization_extra(ds: Dataset) -> dict:
    if ds.normalization is None:
        return {"normalization": None}
    return {"normalization": {"mean": ds.normalization[0].tolist(), "std": ds.normalization[1].tolist()}}


# ----------------------------------------------------------------------
# commands


def cmd_generate(cfg: Mapping, out: Path) -> None:
    ds = build_dataset(cfg)
    _prepare_out(out, cfg, "generate")
    write_dataset_csv(out / "dataset.csv", ds)
    extra = {"version": __version__}
    for key in ("forecast_pairs", "modes"):
        if key in ds.info:
            extra[key] = ds.info[key]
    write_manifest(out / "manifest.json", ds, extra)
    modes = ds.info.get("modes")
    if modes is not None:
        # double-well series are laid out per path: train, then test if any
        per_path = len(ds.series) // len(modes)
        for label, name in ((-1, "mode_neg"), (1, "mode_pos")):
            keep = [i for i in range(len(ds.series)) if modes[i // per_path] == label]
            sub = Dataset([ds.series[i] for i in keep], [ds.splits[i] for i in keep], None, {})
            if keep:
                write_dataset_csv(out / f"dataset_{name}.csv", sub)


def cmd_train(cfg: Mapping, out: Path) -> None:
    ds = _prepared_dataset(cfg)
    series = ds.split("train")
    control_dim = 0 if series[0].controls is None else series[0].controls.shape[1]
    model = build_model(cfg, ds.channels, control_dim)
    tcfg = TrainConfig.from_dict(cfg["train"])
    _prepare_out(out, cfg, "train")
    result = train(
        model, series, tcfg,
        callback=lambda e: log.info("epoch %d elbo %.6g", e["epoch"], e["elbo"]),
        validation=ds.split("val") or None,
    )
    save_checkpoint(out / "checkpoint.json", result, _normalization_extra(ds))
    write_rows_csv(out / "history.csv", result.history)
    write_curve(out / "elbo_curve.dat", [h["epoch"] for h in result.history], [h["elbo"] for h in result.history], "epoch elbo")


def _load_for_eval(cfg: Mapping, section: str, checkpoint: str | None) -> tuple[TrainResult, Dataset]:
    result, extra = load_checkpoint(_checkpoint_path(cfg, section, checkpoint))
    ds = build_dataset(cfg)
    norm = extra.get("normalization")
    if cfg["data"]["standardize"]:
        if norm is None:
            ds = standardize(ds)
        else:
            mean, std = np.array(norm["mean"]), np.array(norm["std"])
            ds = Dataset(
                [TimeSeries(s.times, (s.observations - mean) / std, s.controls) for s in ds.series],
                ds.splits,
                (mean, std),
                ds.info,
            )
    if ds.channels != result.model.latent_dim:
        raise ConfigError(f"dataset has {ds.channels} channels, checkpoint expects {result.model.latent_dim}")
    return result, ds


def cmd_predict(cfg: Mapping, out: Path, checkpoint: str | None = None) -> None:
    result, ds = _load_for_eval(cfg, "predict", checkpoint)
    p = cfg["predict"]
    tasks = forecast_tasks(ds)
    if not tasks:
        raise ConfigError("dataset has no test series to forecast")
    if p["horizon"] is not None:
        h = int(p["horizon"])
        if h < 1:
            raise ConfigError("predict.horizon must be at least 1")
        tasks = [replace(t, targets=t.targets[:h], controls=None if t.controls is None else t.controls[:h]) for t in tasks]
    _prepare_out(out, cfg, "predict")
    means, covs, _ = forecast(
        result.model, tasks, result.recognition.variance, result.c, p["method"],
        particles=int(p["particles"]), seed=int(p["seed"]),
        cubature_lambda=result.config.cubature_lambda, substeps=result.config.substeps,
    )
    for i, t in enumerate(tasks):
        times = [t.t0 + t.dt * (k + 1) for k in range(t.targets.shape[0])]
        states = [
            GaussianState(ds.inverse_transform(means[i, k]), ds.inverse_transform_cov(covs[i, k]))
            for k in range(t.targets.shape[0])
        ]
        write_rollout_csv(out / f"forecast_{i:03d}.csv", times, states)


def cmd_benchmark(cfg: Mapping, out: Path, checkpoint: str | None = None) -> None:
    result, ds = _load_for_eval(cfg, "benchmark", checkpoint)
    b = cfg["benchmark"]
    tasks = forecast_tasks(ds)
    if not tasks:
        raise ConfigError("dataset has no test series")
    _prepare_out(out, cfg, "benchmark")
    rows = benchmark_calibration(
        result.model, tasks, result.recognition.variance, result.c,
        particle_grid=b["particle_grid"], repetitions=int(b["repetitions"]), seed=int(cfg["seed"]),
        include_bmm=b["include_bmm"], include_cubature=b["include_cubature"],
        cubature_lambda=b["cubature_lambda"], substeps=result.config.substeps, timing=bool(cfg["timing"]),
    )
    summary = summarize_benchmark(rows)
    write_rows_csv(out / "benchmark.csv", rows)
    (out / "summary.json").write_text(json.dumps(summary, indent=1))
    mc = [s for s in summary if s["method"] == "mc"]
    write_curve(out / "mc_ecpe_vs_particles.dat", [s["budget"] for s in mc], [s["ecpe_mean"] for s in mc], "particles ecpe_mean")
    write_curve(out / "mc_ecpe_vs_cost.dat", [s["particle_equivalent"] for s in mc], [s["ecpe_mean"] for s in mc], "particle_equivalent ecpe_mean")
    for s in summary:
        if s["method"] != "mc":
            write_curve(out / f"{s['method']}_ecpe.dat", [s["particle_equivalent"]], [s["ecpe_mean"]], "particle_equivalent ecpe_mean")


def cmd_ablate(cfg: Mapping, out: Path) -> None:
    a = cfg["ablate"]
    _prepare_out(out, cfg, "ablate")
    rows = ablate_vmm_vs_cubature(
        dims=a["dims"], widths=a["widths"], repetitions=int(a["repetitions"]),
        mc_samples=int(a["mc_samples"]), seed=int(cfg["seed"]), hidden_layers=int(a["hidden_layers"]),
        timing=bool(cfg["timing"]),
    )
    write_rows_csv(out / "ablation.csv", rows)
    relu = [r for r in rows if r["kind"] == "relu"]
    for method in ("vmm", "cubature"):
        for D in sorted({r["dim"] for r in relu}):
            sel = [r for r in relu if r["dim"] == D and r["method"] == method]
            write_curve(out / f"{method}_error_dim{D}.dat", [r["width"] for r in sel], [r["rel_error"] for r in sel], "width rel_error")
            if cfg["timing"]:
                write_curve(out / f"{method}_seconds_dim{D}.dat", [r["width"] for r in sel], [r["seconds"] for r in sel], "width seconds")


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nsde-bmm", description="Neural SDE training and forecasting with moment matching.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML or JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--threads", type=int, default=None, help="BLAS/OpenMP thread limit")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("predict", "benchmark"):
            p.add_argument("--checkpoint", help="checkpoint JSON written by 'train'")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        out = resolve_out(args.out, args.command)
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be positive")
        kwargs = {"checkpoint": args.checkpoint} if args.command in ("predict", "benchmark") else {}
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](cfg, out, **kwargs)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
