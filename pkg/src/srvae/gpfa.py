"""Nonlinear GPFA with amortised structured recognition, plus its baselines.

Three models share the same recognition/generative network shapes:

``SRnlGPFA``
    Recognition emits diagonal Gaussian potentials on the N-dimensional
    embeddings ``h_t = C f_t + d``; the posterior over all inducing values is
    the full-covariance Gaussian from :func:`srvae.sparse_gp.structured_qU`.
``SGPVAE``
    Recognition emits potentials directly on each latent process (``C = I``,
    ``d = 0``), giving a posterior factored over processes.
``VanillaVAE``
    Per-time-point diagonal Gaussian posterior with a standard normal prior.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import Tensor, nn

from . import sparse_gp as sgp
from .errors import NegativeCount, ShapeMismatch
from .tensor import DTYPE, MLP, Adam, as_tensor, backward, make_generator, uniform_init
from .training import Terms, TrainConfig, fit, register_model

RATE_FLOOR = 1e-6
VAR_FLOOR = 1e-6
# Starting Gaussian noise variance; a large value lets the decoder explain the
# data as noise before the latents are used.
INIT_NOISE_VAR = 0.01
INIT_POTENTIAL_VAR = 0.01
LIKELIHOODS = ("gaussian", "poisson")


def gaussian_log_prob(y, mean, log_var) -> Tensor:
    """Elementwise log N(y; mean, exp(log_var))."""
    y, mean, log_var = as_tensor(y), as_tensor(mean), as_tensor(log_var)
    return -0.5 * (math.log(2 * math.pi) + log_var + (y - mean) ** 2 / torch.exp(log_var))


def poisson_log_prob(y, rate) -> Tensor:
    """Elementwise log Poisson(y; rate)."""
    y, rate = as_tensor(y), as_tensor(rate)
    if (y < 0).any():
        raise NegativeCount("Poisson observations must be non-negative counts")
    return y * torch.log(rate) - rate - torch.lgamma(y + 1.0)


def link(out: Tensor, kind: str) -> Tensor:
    """Map decoder output to the observation mean (Gaussian) or rate (Poisson)."""
    if kind == "poisson":
        return nnf.softplus(out) + RATE_FLOOR
    return out


def log_likelihood(y, out, kind: str, log_noise=None) -> Tensor:
    """Elementwise log p(y | g(h)) where ``out = g(h)`` is the decoder output."""
    if kind == "gaussian":
        return gaussian_log_prob(y, out, log_noise)
    if kind == "poisson":
        return poisson_log_prob(y, link(out, kind))
    raise ValueError(f"unknown likelihood {kind!r}")


def _potentials(raw: Tensor, dim: int):
    mean, raw_var = raw[..., :dim], raw[..., dim:]
    return mean, nnf.softplus(raw_var) + VAR_FLOOR


class _LatentModel(nn.Module):
    """Shared networks and likelihood for the time-series models."""

    kind = "abstract"

    def __init__(self, obs_dim, n_latent, rec_out, dec_in, hidden=(50, 50),
                 likelihood="gaussian", out_activation="identity", seed=0,
                 init_potential_var=INIT_POTENTIAL_VAR):
        super().__init__()
        if likelihood not in LIKELIHOODS:
            raise ValueError(f"likelihood must be one of {LIKELIHOODS}")
        gen = make_generator(seed)
        self.obs_dim = int(obs_dim)
        self.n_latent = int(n_latent)
        self.hidden = [int(h) for h in hidden]
        self.likelihood = likelihood
        self.out_activation = out_activation
        self.seed = int(seed)
        self.recognition = MLP([self.obs_dim, *self.hidden, rec_out], generator=gen)
        with torch.no_grad():
            self.recognition.biases[-1][rec_out // 2:] = math.log(math.expm1(init_potential_var))
        self.decoder = MLP([dec_in, *self.hidden, self.obs_dim], out_activation, generator=gen)
        self.log_noise = nn.Parameter(torch.zeros((), dtype=DTYPE) + math.log(INIT_NOISE_VAR))
        self._gen = gen

    def rate(self, h: Tensor) -> Tensor:
        return link(self.decoder(h), self.likelihood)

    def loglik(self, y: Tensor, h: Tensor) -> Tensor:
        """log p(y_t | h_t) summed over observation dimensions."""
        return log_likelihood(y, self.decoder(h), self.likelihood, self.log_noise).sum(-1)

    def check_obs(self, y):
        y = as_tensor(y)
        if y.ndim != 2 or y.shape[1] != self.obs_dim:
            raise ShapeMismatch(f"observations must be (T, {self.obs_dim}), got {tuple(y.shape)}")
        return y

    def _eps(self, n_samples, shape, generator, eps):
        if eps is not None:
            return eps
        return torch.randn((n_samples, *shape), generator=generator, dtype=DTYPE)


class _GPModel(_LatentModel):
    def __init__(self, obs_dim, n_latent, rec_out, dec_in, n_inducing=64, variance=1.0,
                 lengthscale=1.0, **kw):
        super().__init__(obs_dim, n_latent, rec_out, dec_in, **kw)
        self.n_inducing = int(n_inducing)
        self.log_variance = nn.Parameter(torch.full((n_latent,), math.log(variance), dtype=DTYPE))
        self.log_lengthscale = nn.Parameter(torch.full((n_latent,), math.log(lengthscale), dtype=DTYPE))

    def affine(self):
        raise NotImplementedError

    def inducing_model(self, Z) -> sgp.InducingModel:
        C, d = self.affine()
        kernel = sgp.KernelParams(self.log_variance, self.log_lengthscale)
        return sgp.InducingModel(Z, kernel, C, d)

    def grid(self, x, n_inducing=None) -> Tensor:
        return sgp.uniform_grid(x, self.n_latent, n_inducing or self.n_inducing)

    def recognize(self, y):
        raise NotImplementedError

    def posterior(self, x, y, Z=None):
        """Return (q(U), q(h) marginals at x, KL[q(U) || p(U)])."""
        raise NotImplementedError

    def free_energy(self, x, y, n_samples=1, generator=None, eps=None, Z=None) -> Terms:
        """Reparameterised Monte Carlo free energy of one window.

        ``sum_t (1/S) sum_s log p(y_t | m_t + L_t eps_s) - KL[q(U) || p(U)]``.
        ``eps`` (S, T, K) may be supplied to fix the noise.
        """
        y = self.check_obs(y)
        x = sgp.as_points(x)
        _, marg, kl = self.posterior(x, y, Z)
        eps = self._eps(n_samples, (x.shape[0], self.n_latent), generator, eps)
        h = marg.sample(eps)
        recon = self.loglik(y, h).mean(0).sum()
        return Terms(recon - kl, recon, kl)

    def latent_means(self, x, y, Z=None) -> Tensor:
        _, marg, _ = self.posterior(sgp.as_points(x), self.check_obs(y), Z)
        return marg.mean_f

    def config(self) -> dict:
        raise NotImplementedError


@register_model
class SRnlGPFA(_GPModel):
    """GPFA with a neural decoder and structured (full-covariance) amortised recognition.

    Parameters
    ----------
    obs_dim : int
        Observation dimension D.
    n_latent : int
        Number of latent GP processes K.
    embed_dim : int
        Embedding dimension N of ``h = C f + d``.
    hidden : sequence of int
        Hidden widths of both networks.
    likelihood : {"gaussian", "poisson"}
    n_inducing : int
        Inducing points per latent and per window.
    train_d : bool
        Whether the offset ``d`` is trainable.
    """

    kind = "srnlgpfa"

    def __init__(self, obs_dim, n_latent=2, embed_dim=10, hidden=(50, 50), likelihood="gaussian",
                 out_activation="identity", n_inducing=64, variance=1.0, lengthscale=1.0,
                 train_d=True, seed=0):
        super().__init__(obs_dim, n_latent, 2 * embed_dim, embed_dim, n_inducing=n_inducing,
                         variance=variance, lengthscale=lengthscale, hidden=hidden,
                         likelihood=likelihood, out_activation=out_activation, seed=seed)
        self.embed_dim = int(embed_dim)
        bound_init = uniform_init((embed_dim, n_latent), n_latent, self._gen)
        self.C = nn.Parameter(bound_init)
        d = torch.zeros(embed_dim, dtype=DTYPE)
        self.train_d = bool(train_d)
        if train_d:
            self.d = nn.Parameter(d)
        else:
            self.register_buffer("d", d)

    def affine(self):
        return self.C, self.d

    def recognize(self, y) -> sgp.DiagonalGaussianPotential:
        """Diagonal Gaussian potentials on h_t, one per row of ``y``."""
        y = self.check_obs(y)
        mean, var = _potentials(self.recognition(y), self.embed_dim)
        return sgp.DiagonalGaussianPotential(mean, var)

    def posterior(self, x, y, Z=None):
        x = sgp.as_points(x)
        Z = self.grid(x) if Z is None else Z
        model = self.inducing_model(Z)
        pot = self.recognize(y)
        qU = sgp.structured_qU(x, pot.mean, pot.var, model)
        marg = sgp.posterior_h_marginal(x, qU, model)
        return qU, marg, qU.prior_kl

    def config(self):
        return dict(obs_dim=self.obs_dim, n_latent=self.n_latent, embed_dim=self.embed_dim,
                    hidden=self.hidden, likelihood=self.likelihood,
                    out_activation=self.out_activation, n_inducing=self.n_inducing,
                    train_d=self.train_d, seed=self.seed)


@register_model
class SGPVAE(_GPModel):
    """Sparse GP-VAE baseline: potentials on each latent process, factored posterior."""

    kind = "sgpvae"

    def __init__(self, obs_dim, n_latent=2, hidden=(50, 50), likelihood="gaussian",
                 out_activation="identity", n_inducing=64, variance=1.0, lengthscale=1.0, seed=0):
        super().__init__(obs_dim, n_latent, 2 * n_latent, n_latent, n_inducing=n_inducing,
                         variance=variance, lengthscale=lengthscale, hidden=hidden,
                         likelihood=likelihood, out_activation=out_activation, seed=seed)
        self.register_buffer("C", torch.eye(n_latent, dtype=DTYPE))
        self.register_buffer("d", torch.zeros(n_latent, dtype=DTYPE))

    def affine(self):
        return self.C, self.d

    def recognize(self, y) -> sgp.DiagonalGaussianPotential:
        mean, var = _potentials(self.recognition(self.check_obs(y)), self.n_latent)
        return sgp.DiagonalGaussianPotential(mean, var)

    def posterior(self, x, y, Z=None):
        x = sgp.as_points(x)
        Z = self.grid(x) if Z is None else Z
        model = self.inducing_model(Z)
        pot = self.recognize(y)
        qs = sgp.factored_qU(x, pot.mean, pot.var, model)
        marg = sgp.factored_posterior_marginal(x, qs, model)
        kl = torch.stack([q.prior_kl for q in qs]).sum()
        return sgp.joint_from_factors(qs), marg, kl

    def config(self):
        return dict(obs_dim=self.obs_dim, n_latent=self.n_latent, hidden=self.hidden,
                    likelihood=self.likelihood, out_activation=self.out_activation,
                    n_inducing=self.n_inducing, seed=self.seed)


@register_model
class VanillaVAE(_LatentModel):
    """Per-time-point diagonal Gaussian posterior, standard normal prior."""

    kind = "vae"

    def __init__(self, obs_dim, n_latent=2, hidden=(50, 50), likelihood="gaussian",
                 out_activation="identity", seed=0):
        super().__init__(obs_dim, n_latent, 2 * n_latent, n_latent, hidden=hidden,
                         likelihood=likelihood, out_activation=out_activation, seed=seed)

    def recognize(self, y) -> sgp.DiagonalGaussianPotential:
        mean, var = _potentials(self.recognition(self.check_obs(y)), self.n_latent)
        return sgp.DiagonalGaussianPotential(mean, var)

    @staticmethod
    def kl_terms(q: sgp.DiagonalGaussianPotential) -> Tensor:
        """Per-point KL[N(mean, diag var) || N(0, I)], shape (T,)."""
        return 0.5 * (q.var + q.mean ** 2 - 1.0 - torch.log(q.var)).sum(-1)

    def free_energy(self, x, y, n_samples=1, generator=None, eps=None, Z=None) -> Terms:
        y = self.check_obs(y)
        q = self.recognize(y)
        eps = self._eps(n_samples, tuple(q.mean.shape), generator, eps)
        f = q.mean + q.var.sqrt() * eps
        recon = self.loglik(y, f).mean(0).sum()
        kl = self.kl_terms(q).sum()
        return Terms(recon - kl, recon, kl)

    def latent_means(self, x, y, Z=None) -> Tensor:
        return self.recognize(y).mean

    def config(self):
        return dict(obs_dim=self.obs_dim, n_latent=self.n_latent, hidden=self.hidden,
                    likelihood=self.likelihood, out_activation=self.out_activation,
                    seed=self.seed)


def windows(T: int, length: int) -> list[tuple[int, int]]:
    """Contiguous [start, stop) blocks covering 0..T; the last block may be shorter."""
    return [(s, min(s + length, T)) for s in range(0, T, length)]


def train(model, x, y, config: TrainConfig, checkpoint_path=None, callback=None):
    """Adam ascent on the MC free energy over shuffled contiguous windows.

    Returns ``(checkpoint, MetricTrace)``.
    """
    x = sgp.as_points(x)
    y = model.check_obs(y)
    blocks = windows(x.shape[0], config.batch_length)

    def batches(epoch, gen):
        for i in torch.randperm(len(blocks), generator=gen).tolist():
            s, e = blocks[i]
            yield x[s:e], y[s:e]

    def objective(m, batch, gen):
        return m.free_energy(batch[0], batch[1], n_samples=config.n_samples, generator=gen)

    return fit(model, batches, objective, config, checkpoint_path=checkpoint_path,
               callback=callback)


@dataclass
class Prediction:
    mean: Tensor  # (T, D) posterior-predictive mean of y
    log_pred: Tensor  # (T,) log predictive density per time point
    latent_mean: Tensor  # (T, K)
    free_energy: float


@torch.no_grad()
def predict(model, x, y, window=128, n_samples=32, seed=0, n_inducing=None) -> Prediction:
    """Posterior-predictive summaries window by window (as in training)."""
    x = sgp.as_points(x)
    y = model.check_obs(y)
    gen = make_generator(seed)
    means, logs, lat = [], [], []
    fe = 0.0
    for s, e in windows(x.shape[0], window):
        xb, yb = x[s:e], y[s:e]
        if isinstance(model, VanillaVAE):
            q = model.recognize(yb)
            eps = torch.randn((n_samples, *q.mean.shape), generator=gen, dtype=DTYPE)
            h = q.mean + q.var.sqrt() * eps
            lat.append(q.mean)
            kl = VanillaVAE.kl_terms(q).sum()
        else:
            Z = model.grid(xb, n_inducing)
            _, marg, kl = model.posterior(xb, yb, Z)
            eps = torch.randn((n_samples, e - s, model.n_latent), generator=gen, dtype=DTYPE)
            h = marg.sample(eps)
            lat.append(marg.mean_f)
        ll = model.loglik(yb, h)  # (S, T)
        means.append(model.rate(h).mean(0))
        logs.append(torch.logsumexp(ll, 0) - math.log(n_samples))
        fe += float(ll.mean(0).sum() - kl)
    return Prediction(torch.cat(means), torch.cat(logs), torch.cat(lat), fe)


@dataclass
class ReinferResult:
    qU: sgp.InducingPosterior
    latent_mean: Tensor  # (T, K) posterior means of the latent processes at x
    free_energy: float
    Z: Tensor


def reinfer(model, x, y, Z, optimize_Z=False, steps=100, lr=1e-2, n_samples=32, seed=0):
    """Recompute q(U) over a whole sequence with new inducing locations ``Z``.

    All recognition potentials are recomputed on the full sequence; only the
    inducing locations move when ``optimize_Z`` is set (every other parameter
    stays frozen). The reported free energy uses fixed noise drawn from
    ``seed`` so that different ``Z`` are compared with common random numbers.
    """
    x = sgp.as_points(x)
    y = model.check_obs(y)
    Z = as_tensor(Z)
    if Z.ndim == 2:
        Z = Z[..., None]
    Z = Z.detach().clone()
    eps = torch.randn((n_samples, x.shape[0], model.n_latent), generator=make_generator(seed),
                      dtype=DTYPE)
    frozen = [p.requires_grad for p in model.parameters()]
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        if optimize_Z:
            Zp = nn.Parameter(Z)
            opt = Adam([Zp], lr=lr)
            for _ in range(steps):
                terms = model.free_energy(x, y, eps=eps, Z=Zp)
                opt.zero_grad()
                backward(-terms.free_energy, [Zp])
                opt.step()
            Z = Zp.detach()
        with torch.no_grad():
            sgp.InducingModel(Z, sgp.KernelParams(model.log_variance, model.log_lengthscale),
                              *model.affine()).check_distinct()
            qU, marg, _ = model.posterior(x, y, Z)
            terms = model.free_energy(x, y, eps=eps, Z=Z)
    finally:
        for p, flag in zip(model.parameters(), frozen):
            p.requires_grad_(flag)
    return ReinferResult(qU, marg.mean_f, float(terms.free_energy), Z)


def relevance_score(model, k: int, n: int, latents) -> float:
    """Mean squared sensitivity of output ``n``'s rate to latent process ``k``.

    ``latents`` (S, K) are latent values (typically posterior means) at which
    the gradient of ``rate_n(f)`` is evaluated by reverse-mode differentiation.
    """
    f = as_tensor(latents).detach().clone().requires_grad_(True)
    if hasattr(model, "affine"):
        C, d = model.affine()
        h = f @ C.T + d
    else:
        h = f
    rate = model.rate(h)[..., n]
    (grad,) = torch.autograd.grad(rate.sum(), f)
    return float((grad[..., k] ** 2).mean())
