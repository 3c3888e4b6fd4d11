"""Seeded synthetic data: bar images, pinwheel points and latent GP time series.

Every generator is a pure function of its configuration and seed and returns
the ground-truth latents along with the observations.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .tensor import DTYPE, KERNEL_JITTER, MLP, as_tensor, cholesky, make_generator


@dataclass
class BarConfig:
    D: int = 8
    omega: float = 4.0
    side_dependent: bool = False
    n_samples: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.D < 2:
            raise ValueError("bar grid side D must be at least 2")
        if self.omega <= 0:
            raise ValueError("omega must be positive")


def bar_weights(D: int, omega: float):
    """Bar decoder: ``W`` (D*D, 2D) with 2*omega on each bar's pixels, ``b = -omega``.

    Latent ``i < D`` is horizontal bar (row) ``i``; latent ``D + j`` is vertical bar (column) ``j``.
    """
    W = np.zeros((D * D, 2 * D))
    for r in range(D):
        for c in range(D):
            W[r * D + c, r] = 2.0 * omega
            W[r * D + c, D + c] = 2.0 * omega
    return W, np.full(D * D, -float(omega))


def cross_patterns(D: int) -> np.ndarray:
    """All D*D one-horizontal-one-vertical binary images, shape (D*D, D*D)."""
    out = np.zeros((D * D, D * D))
    for r in range(D):
        for c in range(D):
            img = np.zeros((D, D))
            img[r, :] = 1.0
            img[:, c] = 1.0
            out[r * D + c] = img.ravel()
    return out


def gen_bar(config: BarConfig):
    """Binary bar images ``y`` (n, D*D) and latent bar activations ``z`` (n, 2D)."""
    rng = np.random.default_rng(config.seed)
    D, n = config.D, config.n_samples
    if config.side_dependent:
        z = np.zeros((n, 2 * D))
        z[np.arange(n), rng.integers(0, D, n)] = 1.0
        z[np.arange(n), D + rng.integers(0, D, n)] = 1.0
    else:
        z = (rng.random((n, 2 * D)) < 0.5).astype(float)
    W, b = bar_weights(D, config.omega)
    rate = 1.0 / (1.0 + np.exp(-(z @ W.T + b)))
    y = (rng.random(rate.shape) < rate).astype(float)
    return y, z


@dataclass
class PinwheelConfig:
    arms: int = 5
    points_per_arm: int = 500
    radial_std: float = 0.3
    tangential_std: float = 0.05
    rate: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if self.arms < 2:
            raise ValueError("pinwheel needs at least 2 arms")


def gen_pinwheel(config: PinwheelConfig):
    """Spiral-arm clusters: returns points (arms*points_per_arm, 2) and arm labels."""
    rng = np.random.default_rng(config.seed)
    n = config.arms * config.points_per_arm
    feats = rng.standard_normal((n, 2)) * np.array([config.radial_std, config.tangential_std])
    feats[:, 0] += 1.0
    labels = np.repeat(np.arange(config.arms), config.points_per_arm)
    angles = 2 * np.pi * labels / config.arms + config.rate * np.exp(feats[:, 0])
    c, s = np.cos(angles), np.sin(angles)
    pts = np.stack([c * feats[:, 0] - s * feats[:, 1], s * feats[:, 0] + c * feats[:, 1]], 1)
    perm = rng.permutation(n)
    return pts[perm], labels[perm]


@dataclass
class GPFASynthConfig:
    K: int = 2
    N: int = 10
    T: int = 512
    D: int = 10
    dt: float = 0.1
    variance: list = field(default_factory=lambda: [1.0, 1.0])
    lengthscale: list = field(default_factory=lambda: [1.0, 2.0])
    hidden: int = 20
    noise_std: float = 0.1
    likelihood: str = "gaussian"
    decoder: str = "mlp"
    rate_scale: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.K > self.N:
            raise ValueError("need K <= N")
        if self.T < 2:
            raise ValueError("need T >= 2")
        if self.likelihood not in ("gaussian", "poisson"):
            raise ValueError("likelihood must be 'gaussian' or 'poisson'")
        if self.decoder not in ("mlp", "identity"):
            raise ValueError("decoder must be 'mlp' or 'identity'")
        if self.decoder == "identity" and self.D != self.N:
            raise ValueError("identity decoder needs D == N")
        self.variance = _per_latent(self.variance, self.K)
        self.lengthscale = _per_latent(self.lengthscale, self.K)


def _per_latent(v, K):
    v = [float(a) for a in np.atleast_1d(v)]
    if len(v) == 1:
        v = v * K
    if len(v) != K:
        raise ValueError(f"need one kernel parameter per latent ({K})")
    return v


@dataclass
class GPFAData:
    x: np.ndarray  # (T,)
    y: np.ndarray  # (T, D)
    f: np.ndarray  # (T, K)
    h: np.ndarray  # (T, N)
    mean: np.ndarray  # (T, D) noiseless observation mean / rate
    C: np.ndarray
    d: np.ndarray
    config: GPFASynthConfig


def gen_gpfa(config: GPFASynthConfig) -> GPFAData:
    """GP latents -> affine embedding -> fixed random MLP -> Gaussian or Poisson data."""
    from .sparse_gp import eq_kernel

    gen = make_generator(config.seed)
    T, K = config.T, config.K
    x = np.arange(T) * config.dt
    xt = as_tensor(x)[:, None]
    f = np.zeros((T, K))
    for k in range(K):
        Kxx = eq_kernel(xt, xt, config.variance[k], config.lengthscale[k])
        L = cholesky(Kxx, jitter=KERNEL_JITTER)
        f[:, k] = (L @ torch.randn(T, generator=gen, dtype=DTYPE)).numpy()
    C = (torch.randn(config.N, K, generator=gen, dtype=DTYPE) / np.sqrt(K)).numpy()
    d = np.zeros(config.N)
    h = f @ C.T + d
    if config.decoder == "identity":
        pre = h
    else:
        net = MLP([config.N, config.hidden, config.D], generator=gen)
        with torch.no_grad():
            scale = 3.0  # widen the random network's output range
            pre = scale * net(as_tensor(h)).numpy()
    if config.likelihood == "gaussian":
        mean = 1.0 / (1.0 + np.exp(-pre))
        y = mean + config.noise_std * torch.randn(mean.shape, generator=gen, dtype=DTYPE).numpy()
    else:
        mean = config.rate_scale * np.log1p(np.exp(pre))
        y = torch.poisson(as_tensor(mean), generator=gen).numpy()
    return GPFAData(x, y, f, h, mean, C, d, config)


def save_series(path, x, y, meta: dict):
    """Write ``t,y_1..y_N`` CSV plus a ``.json`` sidecar next to it."""
    path = Path(path)
    header = "t," + ",".join(f"y_{i + 1}" for i in range(y.shape[1]))
    np.savetxt(path, np.column_stack([x, y]), delimiter=",", header=header, comments="",
               fmt="%.17g")
    path.with_suffix(".json").write_text(json.dumps(meta))


def load_series(path):
    path = Path(path)
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    side = path.with_suffix(".json")
    meta = json.loads(side.read_text()) if side.exists() else {}
    return arr[:, 0], arr[:, 1:], meta


def gpfa_meta(data: GPFAData) -> dict:
    return {"kind": "gpfa", "config": asdict(data.config), "latents": data.f.tolist(),
            "embeddings": data.h.tolist(), "mean": data.mean.tolist(), "C": data.C.tolist()}
