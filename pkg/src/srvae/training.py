"""Training loop, metric traces and JSON checkpoints shared by all models."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Iterable, NamedTuple

import torch
from torch import Tensor, nn

from .errors import NumericalError, TrainingError
from .tensor import Adam, as_tensor, backward, make_generator

FORMAT_VERSION = 1

MODEL_REGISTRY: dict[str, type] = {}


def register_model(cls):
    MODEL_REGISTRY[cls.kind] = cls
    return cls


class Terms(NamedTuple):
    """Free energy split into its reconstruction and KL parts."""

    free_energy: Tensor
    recon: Tensor
    kl: Tensor


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_length: int = 128
    n_samples: int = 1
    epochs: int = 100
    seed: int = 0
    n_inducing: int = 64

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.batch_length < 1:
            raise ValueError("batch_length must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")


@dataclass
class MetricTrace:
    epoch: list = field(default_factory=list)
    free_energy: list = field(default_factory=list)
    recon: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    HEADER = ("epoch", "free_energy", "recon", "kl", "seconds")

    def append(self, epoch, free_energy, recon, kl, seconds):
        self.epoch.append(int(epoch))
        self.free_energy.append(float(free_energy))
        self.recon.append(float(recon))
        self.kl.append(float(kl))
        self.seconds.append(float(seconds))

    def __len__(self):
        return len(self.epoch)

    def deterministic_rows(self):
        """Rows without the wall-clock column."""
        return list(zip(self.epoch, self.free_energy, self.recon, self.kl))

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.HEADER)
            for row in zip(self.epoch, self.free_energy, self.recon, self.kl, self.seconds):
                w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])

    @classmethod
    def from_csv(cls, path) -> "MetricTrace":
        trace = cls()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for row in reader:
                trace.append(row["epoch"], row["free_energy"], row["recon"], row["kl"], row["seconds"])
        return trace


def model_state(model: nn.Module) -> dict:
    return {name: t.detach().tolist() for name, t in model.state_dict().items()}


def model_shapes(model: nn.Module) -> dict:
    return {name: list(t.shape) for name, t in model.state_dict().items()}


def make_checkpoint(model, optimizer: Adam | None = None, generator=None, config=None) -> dict:
    rng_state = generator.get_state().tolist() if generator is not None else None
    return {
        "format_version": FORMAT_VERSION,
        "model_kind": model.kind,
        "model_config": model.config(),
        "shapes": model_shapes(model),
        "parameters": model_state(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "rng_state": rng_state,
        "config": config,
    }


def save_checkpoint(checkpoint: dict, path):
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(checkpoint))
    tmp.replace(path)


def load_state(model: nn.Module, parameters: dict):
    state = {name: as_tensor(v).reshape(model.state_dict()[name].shape)
             for name, v in parameters.items()}
    model.load_state_dict(state)


def model_from_checkpoint(checkpoint) -> nn.Module:
    """Rebuild a model from a checkpoint dict or a path to a checkpoint file."""
    if not isinstance(checkpoint, dict):
        checkpoint = json.loads(Path(checkpoint).read_text())
    if checkpoint.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {checkpoint.get('format_version')!r}")
    from . import gmm, gpfa, tree_vae  # noqa: F401  (registers model kinds)

    cls = MODEL_REGISTRY[checkpoint["model_kind"]]
    model = cls(**checkpoint["model_config"])
    load_state(model, checkpoint["parameters"])
    return model


def fit(model: nn.Module,
        batches: Callable[[int, torch.Generator], Iterable],
        objective: Callable,
        config: TrainConfig,
        params=None,
        checkpoint_path=None,
        callback=None):
    """Maximise ``objective(model, batch, generator)`` with Adam.

    ``batches(epoch, generator)`` yields the minibatches of one epoch and
    ``objective`` returns :class:`Terms` (larger free energy is better). A
    checkpoint is taken after every epoch; a numerical failure raises
    :class:`TrainingError` carrying the last good checkpoint.

    Returns
    -------
    (checkpoint, MetricTrace)
    """
    generator = make_generator(config.seed)
    params = list(model.parameters()) if params is None else list(params)
    opt = Adam(params, lr=config.lr)
    trace = MetricTrace()
    cfg = asdict(config)
    checkpoint = make_checkpoint(model, opt, generator, cfg)
    start = time.perf_counter()
    for epoch in range(1, config.epochs + 1):
        totals = [0.0, 0.0, 0.0]
        count = 0
        for batch in batches(epoch, generator):
            try:
                terms = objective(model, batch, generator)
                loss = -terms.free_energy
                if not torch.isfinite(loss):
                    raise NumericalError("non-finite free energy")
                opt.zero_grad()
                backward(loss, params)
                if not all(torch.isfinite(p.grad).all() for p in params):
                    raise NumericalError("non-finite gradient")
                opt.step()
            except NumericalError as err:
                raise TrainingError(f"epoch {epoch}: {err}", checkpoint,
                                    operation=type(err).__name__) from err
            totals[0] += float(terms.free_energy.detach())
            totals[1] += float(terms.recon.detach())
            totals[2] += float(terms.kl.detach())
            count += 1
        count = max(count, 1)
        trace.append(epoch, totals[0] / count, totals[1] / count, totals[2] / count,
                     time.perf_counter() - start)
        checkpoint = make_checkpoint(model, opt, generator, cfg)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint, checkpoint_path)
        if callback is not None:
            callback(epoch, trace)
    opt.zero_grad()
    return checkpoint, trace


def median(values):
    v = sorted(values)
    n = len(v)
    if n == 0:
        return math.nan
    return v[n // 2] if n % 2 else 0.5 * (v[n // 2 - 1] + v[n // 2])
