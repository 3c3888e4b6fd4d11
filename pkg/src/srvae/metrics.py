"""Evaluation metrics, reports and the inference-cost benchmark."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from scipy.spatial import cKDTree

from .errors import ShapeMismatch, TooLarge, ZeroVariance
from .datasets import cross_patterns
from .tensor import DTYPE, as_tensor, make_generator

MAX_CROSS_STATES = 2 ** 16


def smse(pred, target) -> float:
    """Mean squared error standardised by the target variance of each output, then averaged."""
    pred, target = np.asarray(pred, dtype=float), np.asarray(target, dtype=float)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"shapes differ: {pred.shape} vs {target.shape}")
    if target.ndim == 1:
        pred, target = pred[:, None], target[:, None]
    var = target.var(axis=0)
    if np.any(var <= 0):
        raise ZeroVariance("a target dimension has zero variance")
    return float(np.mean(((pred - target) ** 2).mean(axis=0) / var))


def nll(y, out, kind: str, log_noise=None) -> float:
    """Negative log-likelihood per data point (time step), summed over outputs."""
    from .gpfa import log_likelihood

    return float(-log_likelihood(as_tensor(y), as_tensor(out), kind, log_noise).sum(-1).mean())


def predictive_nll(log_pred) -> float:
    """Per-point negative log predictive density from per-point log densities."""
    return float(-as_tensor(log_pred).mean())


def off_diagonal_ratio(S) -> float:
    """``sum_{i != j} |S_ij| / sum_{ij} |S_ij|``."""
    S = np.abs(np.asarray(S, dtype=float))
    if S.ndim != 2 or S.shape[0] != S.shape[1]:
        raise ShapeMismatch("off_diagonal_ratio needs a square matrix")
    total = S.sum()
    if total == 0:
        return 0.0
    return float((total - np.trace(S)) / total)


def inter_block_norm(S, K: int) -> float:
    """Frobenius norm of the off-diagonal blocks of a K x K block matrix."""
    S = np.asarray(S, dtype=float)
    M = S.shape[0] // K
    mask = np.kron(1 - np.eye(K), np.ones((M, M))).astype(bool)
    return float(np.linalg.norm(S[mask]))


def cross_distance(decode, D: int, chunk: int = 8192) -> float:
    """Average over all 2**(2D) latent states of the squared distance from the
    decoded image to its nearest one-horizontal-one-vertical cross.

    ``decode`` maps a (S, 2D) float tensor of binary states to (S, D*D) pixel
    probabilities.
    """
    from .tree_vae import all_states

    n = 2 * D
    if 2 ** n > MAX_CROSS_STATES:
        raise TooLarge(f"2**{n} latent states exceeds the bound {MAX_CROSS_STATES}")
    states = all_states(n)
    crosses = as_tensor(cross_patterns(D))
    total = 0.0
    with torch.no_grad():
        for s in range(0, states.shape[0], chunk):
            y_hat = as_tensor(decode(states[s:s + chunk]))
            d2 = torch.cdist(y_hat, crosses) ** 2
            total += float(d2.min(-1).values.sum())
    return total / states.shape[0]


def nearest_arm_coverage(generated, training, sigma: float, k: float = 3.0) -> float:
    """Fraction of generated points within ``k * sigma`` of some training point.

    A proxy for whether samples fall on the data manifold (here: pinwheel arms).
    """
    dist, _ = cKDTree(np.asarray(training)).query(np.asarray(generated))
    return float(np.mean(dist <= k * sigma))


@dataclass
class EvalReport:
    """Per-seed metric values and their mean/std summaries."""

    seeds: list = field(default_factory=list)
    values: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def add(self, seed, **metrics):
        if seed not in self.seeds:
            self.seeds.append(seed)
        for k, v in metrics.items():
            self.values.setdefault(k, []).append(float(v))

    def summary(self) -> dict:
        out = {}
        for k, v in self.values.items():
            std = statistics.pstdev(v) if len(v) > 1 else 0.0
            out[k] = {"mean": statistics.fmean(v), "std": std, "values": list(v)}
        return out

    def to_json(self, path=None) -> dict:
        doc = {"seeds": self.seeds, "metrics": self.summary(), "config": self.config}
        if path is not None:
            Path(path).write_text(json.dumps(doc, indent=2))
        return doc

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["metric", "mean", "std"] + [f"seed_{s}" for s in self.seeds])
            for k, s in self.summary().items():
                w.writerow([k, repr(s["mean"]), repr(s["std"])] + [repr(v) for v in s["values"]])


def _bench_inputs(K, M, T, N, seed=0):
    from . import sparse_gp as sgp

    gen = make_generator(seed)
    x = torch.linspace(0.0, 10.0, T, dtype=DTYPE)
    Z = sgp.uniform_grid(x, K, M)
    kernel = sgp.KernelParams.from_values(torch.ones(K), torch.full((K,), 2.0))
    C = torch.randn(N, K, generator=gen, dtype=DTYPE)
    model = sgp.InducingModel(Z, kernel, C, torch.zeros(N, dtype=DTYPE))
    mu = torch.randn(T, N, generator=gen, dtype=DTYPE)
    psi = torch.rand(T, N, generator=gen, dtype=DTYPE) + 0.5
    mu_f = torch.randn(T, K, generator=gen, dtype=DTYPE)
    psi_f = torch.rand(T, K, generator=gen, dtype=DTYPE) + 0.5
    return x, model, mu, psi, mu_f, psi_f


def _best_time(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def complexity_benchmark(K_list, M_list, T=32, N=None, repeats=3, path=None) -> list[dict]:
    """Wall-clock time of the structured and factored q(U) computations.

    Each (K, M) pair is timed without autodiff, single-threaded, keeping the
    fastest of ``repeats`` calls. Returns rows ``{K, M, structured_s, factored_s}``
    and optionally writes them as CSV.
    """
    from . import sparse_gp as sgp

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    rows = []
    try:
        with torch.no_grad():
            for K in K_list:
                for M in M_list:
                    x, model, mu, psi, mu_f, psi_f = _bench_inputs(K, M, T, N or max(K, 4))
                    _ = model.prior_chol  # kernel factorisation is shared by both
                    s = _best_time(lambda: sgp.structured_qU(x, mu, psi, model), repeats)
                    f = _best_time(lambda: sgp.factored_qU(x, mu_f, psi_f, model), repeats)
                    rows.append({"K": K, "M": M, "structured_s": s, "factored_s": f})
    finally:
        torch.set_num_threads(threads)
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["K", "M", "structured_s", "factored_s"])
            w.writeheader()
            w.writerows(rows)
    return rows
