"""Desk-scale comparative experiments shared by the CLI, demos and acceptance tests.

Each function trains the competing models on freshly generated data for a
list of seeds and returns plain per-seed numbers; no pass/fail judgement
happens here.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .tensor import make_generator
from .training import TrainConfig


@dataclass
class BarStudy:
    """Settings for training the binary tree models on bar images."""

    D: int = 8
    omega: float = 4.0
    side_dependent: bool = False
    n_images: int = 4096
    epochs: int = 30
    lr: float = 5e-3
    batch_size: int = 256
    hidden: tuple = (50, 50)
    eval_samples: int = 8
    variants: tuple = ("tree", "svae")


def bar_models(cfg: BarStudy, seed: int):
    """Train every variant on one seed's bar data; returns ``(images, {variant: model})``."""
    from .datasets import BarConfig, gen_bar
    from .tree_vae import TreeSRVAE, train_tree

    y, _ = gen_bar(BarConfig(D=cfg.D, omega=cfg.omega, side_dependent=cfg.side_dependent,
                             n_samples=cfg.n_images, seed=seed))
    models = {}
    for v in cfg.variants:
        model = TreeSRVAE(cfg.D * cfg.D, 2 * cfg.D, hidden=cfg.hidden, variant=v, seed=seed)
        tc = TrainConfig(lr=cfg.lr, batch_length=cfg.batch_size, epochs=cfg.epochs, seed=seed)
        train_tree(model, y, tc)
        models[v] = model
    return y, models


def bar_free_energies(cfg: BarStudy, seeds) -> dict:
    """Final per-image free energy of each variant, ``{variant: [per seed]}``.

    All variants of a seed are evaluated on the same images with the same
    evaluation noise seed.
    """
    from .tree_vae import evaluate_free_energy

    out = {v: [] for v in cfg.variants}
    for seed in seeds:
        y, models = bar_models(cfg, seed)
        for v, m in models.items():
            out[v].append(evaluate_free_energy(m, y, n_samples=cfg.eval_samples, seed=10_000 + seed))
    return out


def bar_cross_distances(cfg: BarStudy, seeds) -> dict:
    """Cross distance of each trained variant's decoder, ``{variant: [per seed]}``."""
    from .metrics import cross_distance

    out = {v: [] for v in cfg.variants}
    for seed in seeds:
        _, models = bar_models(cfg, seed)
        for v, m in models.items():
            out[v].append(cross_distance(lambda z: torch.sigmoid(m.decoder(z)), cfg.D))
    return out


@dataclass
class GPFAStudy:
    """Settings for the synthetic GPFA comparison."""

    K: int = 2
    N: int = 10
    T: int = 512
    D: int = 10
    hidden: tuple = (50, 50)
    epochs: int = 1000
    lr: float = 3e-3
    window: int = 128
    n_inducing: int = 32
    eval_samples: int = 32
    models: tuple = ("srnlgpfa", "sgpvae", "vae")
    data: dict = field(default_factory=dict)


def _gpfa_model(kind, cfg: GPFAStudy, obs_dim, seed):
    from .gpfa import SGPVAE, SRnlGPFA, VanillaVAE

    if kind == "srnlgpfa":
        return SRnlGPFA(obs_dim, cfg.K, embed_dim=cfg.N, hidden=cfg.hidden,
                        n_inducing=cfg.n_inducing, seed=seed)
    if kind == "sgpvae":
        return SGPVAE(obs_dim, cfg.K, hidden=cfg.hidden, n_inducing=cfg.n_inducing, seed=seed)
    return VanillaVAE(obs_dim, cfg.K, hidden=cfg.hidden, seed=seed)


def gpfa_data(cfg: GPFAStudy, seed):
    from .datasets import GPFASynthConfig, gen_gpfa

    return gen_gpfa(GPFASynthConfig(K=cfg.K, N=cfg.N, T=cfg.T, D=cfg.D, seed=seed, **cfg.data))


def gpfa_train(kind, cfg: GPFAStudy, data, seed):
    from .gpfa import train

    model = _gpfa_model(kind, cfg, data.y.shape[1], seed)
    tc = TrainConfig(lr=cfg.lr, batch_length=cfg.window, epochs=cfg.epochs, seed=seed,
                     n_inducing=cfg.n_inducing)
    train(model, data.x, data.y, tc)
    return model


def gpfa_comparison(cfg: GPFAStudy, seeds, keep=None) -> dict:
    """SMSE (against the noiseless mean) and per-point NLL, ``{model: {metric: [per seed]}}``.

    When ``keep`` is a dict, trained models and data are stored in it under
    ``(kind, seed)`` and ``("data", seed)``.
    """
    from .gpfa import predict
    from .metrics import predictive_nll, smse

    out = {k: {"smse": [], "nll": [], "seconds": []} for k in cfg.models}
    for seed in seeds:
        data = gpfa_data(cfg, seed)
        if keep is not None:
            keep[("data", seed)] = data
        for kind in cfg.models:
            t0 = time.perf_counter()
            model = gpfa_train(kind, cfg, data, seed)
            if keep is not None:
                keep[(kind, seed)] = model
            pred = predict(model, data.x, data.y, window=cfg.window, n_samples=cfg.eval_samples,
                           seed=seed)
            out[kind]["smse"].append(smse(pred.mean.numpy(), data.mean))
            out[kind]["nll"].append(predictive_nll(pred.log_pred))
            out[kind]["seconds"].append(time.perf_counter() - t0)
    return out


@dataclass
class PinwheelStudy:
    lr: float = 3e-3
    epochs: int = 400
    batch_size: int = 100
    n_generate: int = 2000
    eval_samples: int = 16
    models: tuple = ("srvae_gmm", "gauss_vae")


def pinwheel_comparison(cfg: PinwheelStudy, seeds) -> dict:
    """Final per-point free energy and nearest-arm coverage, ``{model: {metric: [per seed]}}``."""
    from .datasets import PinwheelConfig, gen_pinwheel
    from .gmm import GaussianVAE, SRVAEGMM, mean_free_energy, train_points
    from .metrics import nearest_arm_coverage

    classes = {"srvae_gmm": SRVAEGMM, "gauss_vae": GaussianVAE}
    out = {k: {"free_energy": [], "coverage": []} for k in cfg.models}
    for seed in seeds:
        pc = PinwheelConfig(seed=seed)
        pts, _ = gen_pinwheel(pc)
        for kind in cfg.models:
            model = classes[kind](seed=seed)
            train_points(model, pts, TrainConfig(lr=cfg.lr, batch_length=cfg.batch_size,
                                                 epochs=cfg.epochs, seed=seed))
            gen = model.generate(cfg.n_generate, make_generator(100 + seed)).numpy()
            out[kind]["free_energy"].append(mean_free_energy(model, pts, cfg.eval_samples, seed))
            out[kind]["coverage"].append(nearest_arm_coverage(gen, pts, pc.tangential_std))
    return out


def inducing_sweep(model, x, y, counts, n_samples=32, seed=0) -> list[float]:
    """Re-inferred free energy over the whole sequence for each inducing count."""
    from .gpfa import reinfer
    from .sparse_gp import uniform_grid

    return [reinfer(model, x, y, uniform_grid(x, model.n_latent, m), n_samples=n_samples,
                    seed=seed).free_energy for m in counts]


def median(values) -> float:
    return float(np.median(np.asarray(values, dtype=float)))
