"""Command-line experiment runner.

Subcommands: ``gen-data``, ``train``, ``eval``, ``reinfer``, ``bench`` and
``compare-bounds``. Each reads an optional JSON config, writes its outputs
and a ``manifest.json`` under ``--out``, and prints a one-line JSON summary.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import NumericalError, TrainingError

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

GP_KINDS = ("srnlgpfa", "sgpvae", "vae")
TREE_KINDS = ("tree_srvae",)
POINT_KINDS = ("srvae_gmm", "gauss_vae")


class ConfigError(Exception):
    pass


def from_dict(cls, data, where="config"):
    """Build dataclass ``cls`` from ``data``, rejecting unknown keys."""
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where} must be a JSON object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid {where}: {err}") from err


@dataclass
class GenDataConfig:
    dataset: str = "gpfa"
    params: dict = field(default_factory=dict)
    seed: int = 0


@dataclass
class TrainRunConfig:
    data: str = ""
    model: dict = field(default_factory=lambda: {"kind": "srnlgpfa"})
    train: dict = field(default_factory=dict)


@dataclass
class EvalRunConfig:
    checkpoint: str = ""
    data: str = ""
    n_samples: int = 32
    window: int = 128
    seed: int = 0


@dataclass
class ReinferRunConfig:
    checkpoint: str = ""
    data: str = ""
    n_inducing: int = 1000
    optimize_Z: bool = False
    steps: int = 100
    lr: float = 1e-2
    n_samples: int = 32
    seed: int = 0


@dataclass
class BenchRunConfig:
    K: list = field(default_factory=lambda: [2, 4])
    M: list = field(default_factory=lambda: [64, 128])
    T: int = 32
    repeats: int = 3


@dataclass
class CompareConfig:
    dataset: str = "bar"
    omega: float = 4.0
    D: int = 8
    side_dependent: bool = False
    n_images: int = 4096
    seeds: int = 5
    variants: list = field(default_factory=lambda: ["tree", "svae"])
    epochs: int = 50
    lr: float = 5e-4
    batch_size: int = 256
    eval_samples: int = 8


def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}-{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def read_config(path):
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {p} is not valid JSON: {err}") from err


def write_manifest(out: Path, command, config, seed, started):
    manifest = {"command": command, "config": config, "seed": seed,
                "version": version_string(), "wall_time_s": time.perf_counter() - started}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=str))


def _require_file(path, what):
    if not path:
        raise ConfigError(f"{what} path is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {p}")
    return p


# gen-data -------------------------------------------------------------------

def cmd_gen_data(args, raw):
    from . import datasets as ds

    cfg = from_dict(GenDataConfig, raw)
    seed = args.seed if args.seed is not None else cfg.seed
    params = dict(cfg.params)
    out = args.out
    if cfg.dataset == "gpfa":
        if args.latents is not None:
            params["K"] = args.latents
        c = from_dict(ds.GPFASynthConfig, {**params, "seed": seed}, "params")
        data = ds.gen_gpfa(c)
        ds.save_series(out / "data.csv", data.x, data.y, ds.gpfa_meta(data))
        shape = list(data.y.shape)
    elif cfg.dataset == "bar":
        if args.omega is not None:
            params["omega"] = args.omega
        c = from_dict(ds.BarConfig, {**params, "seed": seed}, "params")
        y, z = ds.gen_bar(c)
        ds.save_series(out / "data.csv", np.arange(len(y)), y,
                       {"kind": "bar", "config": asdict(c), "latents": z.tolist()})
        shape = list(y.shape)
    elif cfg.dataset == "pinwheel":
        c = from_dict(ds.PinwheelConfig, {**params, "seed": seed}, "params")
        pts, labels = ds.gen_pinwheel(c)
        ds.save_series(out / "data.csv", np.arange(len(pts)), pts,
                       {"kind": "pinwheel", "config": asdict(c), "labels": labels.tolist()})
        shape = list(pts.shape)
    else:
        raise ConfigError(f"unknown dataset {cfg.dataset!r}")
    return {"dataset": cfg.dataset, "path": str(out / "data.csv"), "shape": shape}, asdict(cfg), seed


# train ----------------------------------------------------------------------

def build_model(spec: dict, obs_dim: int):
    from . import gmm, gpfa, tree_vae  # noqa: F401  (registers model kinds)
    from .training import MODEL_REGISTRY

    spec = dict(spec)
    kind = spec.pop("kind", None)
    if kind not in MODEL_REGISTRY:
        raise ConfigError(f"unknown model kind {kind!r}; choose from {sorted(MODEL_REGISTRY)}")
    spec.setdefault("obs_dim", obs_dim)
    try:
        return MODEL_REGISTRY[kind](**spec)
    except TypeError as err:
        raise ConfigError(f"invalid model config: {err}") from err


def cmd_train(args, raw):
    from .datasets import load_series
    from .gmm import train_points
    from .gpfa import train
    from .training import TrainConfig
    from .tree_vae import train_tree

    cfg = from_dict(TrainRunConfig, raw)
    data_path = _require_file(cfg.data, "data")
    x, y, meta = load_series(data_path)
    spec = dict(cfg.model)
    tcfg = dict(cfg.train)
    if args.seed is not None:
        tcfg["seed"] = args.seed
        spec["seed"] = args.seed
    if args.epochs is not None:
        tcfg["epochs"] = args.epochs
    if args.latents is not None:
        spec["n_latent"] = args.latents
    if args.inducing is not None:
        spec["n_inducing"] = args.inducing
        tcfg["n_inducing"] = args.inducing
    if "n_inducing" in tcfg and spec.get("kind") in ("srnlgpfa", "sgpvae"):
        spec.setdefault("n_inducing", tcfg["n_inducing"])
    train_cfg = from_dict(TrainConfig, tcfg, "train")
    model = build_model(spec, y.shape[1])
    ckpt_path = args.out / "checkpoint.json"
    if model.kind in GP_KINDS:
        _, trace = train(model, x, y, train_cfg, checkpoint_path=ckpt_path)
    elif model.kind in TREE_KINDS:
        _, trace = train_tree(model, y, train_cfg, checkpoint_path=ckpt_path)
    else:
        _, trace = train_points(model, y, train_cfg, checkpoint_path=ckpt_path)
    trace.to_csv(args.out / "trace.csv")
    summary = {"model": model.kind, "epochs": len(trace),
               "final_free_energy": trace.free_energy[-1] if len(trace) else None,
               "checkpoint": str(ckpt_path)}
    if not len(trace):
        from .training import make_checkpoint, save_checkpoint
        save_checkpoint(make_checkpoint(model, config=asdict(train_cfg)), ckpt_path)
    return summary, {**asdict(cfg), "model": spec, "train": asdict(train_cfg)}, train_cfg.seed


# eval -----------------------------------------------------------------------

def cmd_eval(args, raw):
    from .datasets import load_series
    from .metrics import EvalReport
    from .training import model_from_checkpoint

    cfg = from_dict(EvalRunConfig, raw)
    if args.seed is not None:
        cfg.seed = args.seed
    ckpt = _require_file(cfg.checkpoint, "checkpoint")
    x, y, meta = load_series(_require_file(cfg.data, "data"))
    try:
        model = model_from_checkpoint(ckpt)
    except (KeyError, ValueError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot load checkpoint {ckpt}: {err}") from err
    report = EvalReport(config=asdict(cfg))
    report.add(cfg.seed, **evaluate_model(model, x, y, meta, cfg))
    report.to_json(args.out / "report.json")
    report.to_csv(args.out / "report.csv")
    summary = {k: v["mean"] for k, v in report.summary().items()}
    return {"model": model.kind, **summary}, asdict(cfg), cfg.seed


def evaluate_model(model, x, y, meta, cfg) -> dict:
    from . import metrics
    from .tensor import make_generator

    if model.kind in GP_KINDS:
        from .gpfa import predict

        pred = predict(model, x, y, window=cfg.window, n_samples=cfg.n_samples, seed=cfg.seed)
        target = np.asarray(meta["mean"]) if "mean" in meta else y
        return {"smse": metrics.smse(pred.mean.numpy(), target),
                "nll": metrics.predictive_nll(pred.log_pred),
                "free_energy": pred.free_energy}
    if model.kind in TREE_KINDS:
        from .tree_vae import evaluate_free_energy

        out = {"free_energy": evaluate_free_energy(model, y, n_samples=cfg.n_samples, seed=cfg.seed)}
        D = int(round(np.sqrt(model.obs_dim)))
        if D * D == model.obs_dim and model.n_latent == 2 * D and 2 * D <= 16:
            out["cross_distance"] = metrics.cross_distance(lambda z: torch.sigmoid(model.decoder(z)), D)
        return out
    from .gmm import mean_free_energy

    out = {"free_energy": mean_free_energy(model, y, n_samples=cfg.n_samples, seed=cfg.seed)}
    sigma = meta.get("config", {}).get("tangential_std")
    if sigma:
        gen = model.generate(y.shape[0], make_generator(cfg.seed))
        out["coverage"] = metrics.nearest_arm_coverage(gen.numpy(), y, sigma)
    return out


# reinfer --------------------------------------------------------------------

def cmd_reinfer(args, raw):
    from .datasets import load_series
    from .gpfa import reinfer
    from .sparse_gp import uniform_grid
    from .training import model_from_checkpoint

    cfg = from_dict(ReinferRunConfig, raw)
    if args.inducing is not None:
        cfg.n_inducing = args.inducing
    if args.seed is not None:
        cfg.seed = args.seed
    model = model_from_checkpoint(_require_file(cfg.checkpoint, "checkpoint"))
    if model.kind not in ("srnlgpfa", "sgpvae"):
        raise ConfigError(f"reinfer needs a GP model, got {model.kind!r}")
    x, y, _ = load_series(_require_file(cfg.data, "data"))
    Z = uniform_grid(x, model.n_latent, cfg.n_inducing)
    res = reinfer(model, x, y, Z, optimize_Z=cfg.optimize_Z, steps=cfg.steps, lr=cfg.lr,
                  n_samples=cfg.n_samples, seed=cfg.seed)
    lat = res.latent_mean.numpy()
    header = "t," + ",".join(f"f_{k + 1}" for k in range(lat.shape[1]))
    np.savetxt(args.out / "latents.csv", np.column_stack([x, lat]), delimiter=",",
               header=header, comments="", fmt="%.17g")
    return {"free_energy": res.free_energy, "n_inducing": cfg.n_inducing,
            "latents": str(args.out / "latents.csv")}, asdict(cfg), cfg.seed


# bench ----------------------------------------------------------------------

def cmd_bench(args, raw):
    from .metrics import complexity_benchmark

    cfg = from_dict(BenchRunConfig, raw)
    if args.latents is not None:
        cfg.K = [args.latents]
    if args.inducing is not None:
        cfg.M = [args.inducing]
    rows = complexity_benchmark(cfg.K, cfg.M, T=cfg.T, repeats=cfg.repeats,
                                path=args.out / "bench.csv")
    return {"rows": len(rows), "csv": str(args.out / "bench.csv")}, asdict(cfg), None


# compare-bounds -------------------------------------------------------------

def cmd_compare_bounds(args, raw):
    from .experiments import BarStudy, bar_free_energies

    cfg = from_dict(CompareConfig, raw)
    if args.dataset is not None:
        cfg.dataset = args.dataset
    if args.omega is not None:
        cfg.omega = args.omega
    if args.seeds is not None:
        cfg.seeds = args.seeds
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if cfg.dataset != "bar":
        raise ConfigError("compare-bounds supports the 'bar' dataset")
    base_seed = args.seed if args.seed is not None else 0
    study = BarStudy(D=cfg.D, omega=cfg.omega, side_dependent=cfg.side_dependent,
                     n_images=cfg.n_images, epochs=cfg.epochs, lr=cfg.lr, batch_size=cfg.batch_size,
                     eval_samples=cfg.eval_samples, variants=tuple(cfg.variants))
    results = bar_free_energies(study, range(base_seed, base_seed + cfg.seeds))
    medians = {v: float(np.median(r)) for v, r in results.items()}
    verdict = None
    if "tree" in medians and "svae" in medians:
        verdict = "tree>=svae" if medians["tree"] >= medians["svae"] else "tree<svae"
    (args.out / "bounds.json").write_text(json.dumps({"free_energy": results, "median": medians,
                                                      "verdict": verdict}, indent=2))
    return {"median_free_energy": medians, "verdict": verdict}, asdict(cfg), base_seed


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "reinfer": cmd_reinfer,
    "bench": cmd_bench,
    "compare-bounds": cmd_compare_bounds,
}


def make_parser():
    parser = argparse.ArgumentParser(prog="srvae", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default="runs/" + name, help="output directory")
        p.add_argument("--omega", type=float)
        p.add_argument("--latents", type=int)
        p.add_argument("--inducing", type=int)
        p.add_argument("--epochs", type=int)
        if name == "compare-bounds":
            p.add_argument("--dataset")
            p.add_argument("--seeds", type=int)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    for attr in ("dataset", "seeds"):
        if not hasattr(args, attr):
            setattr(args, attr, None)
    torch.set_num_threads(1)
    started = time.perf_counter()
    try:
        raw = read_config(args.config)
        args.out = Path(args.out)
        args.out.mkdir(parents=True, exist_ok=True)
        summary, config, seed = COMMANDS[args.command](args, raw)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingError as err:
        print(f"numerical failure in {err.operation or 'training'}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except NumericalError as err:
        print(f"numerical failure in {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    write_manifest(args.out, args.command, config, seed, started)
    print(json.dumps({"command": args.command, **summary}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
