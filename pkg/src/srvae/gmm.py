"""Gaussian-mixture latent VAE with a full-covariance recognition potential.

Each observation ``y`` yields a Gaussian potential ``N(h; m_r, S_r)`` on its
latent ``h``. Multiplying it into the mixture prior gives the exact posterior
``q(z, h)``: responsibilities from the Gaussian convolution evidence and one
Gaussian product per component.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as nnf
from torch import Tensor, nn

from .errors import ShapeMismatch
from .tensor import DTYPE, MLP, as_tensor, make_generator, small_cholesky, small_solve_lower
from .training import Terms, TrainConfig, fit, register_model

VAR_FLOOR = 1e-6
_SOFTPLUS_ONE = math.log(math.e - 1.0)


def lower_from_vector(raw: Tensor, dim: int) -> Tensor:
    """Lower-triangular factor with softplus diagonal from ``dim(dim+1)/2`` entries."""
    rows, cols = torch.tril_indices(dim, dim)
    L = raw.new_zeros(*raw.shape[:-1], dim, dim)
    L[..., rows, cols] = raw
    diag = nnf.softplus(torch.diagonal(L, dim1=-2, dim2=-1)) + math.sqrt(VAR_FLOOR)
    return L.tril(-1) + torch.diag_embed(diag)


def gaussian_log_density(x: Tensor, mean: Tensor, chol: Tensor) -> Tensor:
    """log N(x; mean, L L^T) with broadcasting over leading dimensions."""
    d = x.shape[-1]
    diff = small_solve_lower(chol, (x - mean)[..., None])[..., 0]
    logdet = 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)
    return -0.5 * (d * math.log(2 * math.pi) + logdet + (diff ** 2).sum(-1))


def gaussian_kl_chol(m_q, L_q, m_p, L_p) -> Tensor:
    """KL(N(m_q, L_q L_q^T) || N(m_p, L_p L_p^T)), batched."""
    d = m_q.shape[-1]
    A = small_solve_lower(L_p, L_q)
    diff = small_solve_lower(L_p, (m_p - m_q)[..., None])[..., 0]
    ld_p = 2.0 * torch.log(torch.diagonal(L_p, dim1=-2, dim2=-1)).sum(-1)
    ld_q = 2.0 * torch.log(torch.diagonal(L_q, dim1=-2, dim2=-1)).sum(-1)
    return 0.5 * ((A ** 2).sum((-1, -2)) + (diff ** 2).sum(-1) - d + ld_p - ld_q)


@dataclass
class GMMPrior:
    logits: Tensor  # (J,)
    means: Tensor  # (J, d)
    chols: Tensor  # (J, d, d)

    @property
    def weights(self) -> Tensor:
        return torch.softmax(self.logits, -1)

    @property
    def covs(self) -> Tensor:
        return self.chols @ self.chols.mT

    @property
    def J(self) -> int:
        return self.logits.shape[-1]


@dataclass
class MixturePosterior:
    log_resp: Tensor  # (..., J)
    means: Tensor  # (..., J, d)
    covs: Tensor  # (..., J, d, d)

    @property
    def resp(self) -> Tensor:
        return torch.exp(self.log_resp)

    @property
    def chols(self) -> Tensor:
        return small_cholesky(0.5 * (self.covs + self.covs.mT))


def combine_gmm(prior: GMMPrior, mean_r, cov_r) -> MixturePosterior:
    """Exact posterior from a mixture prior and a Gaussian potential ``N(h; mean_r, cov_r)``.

    ``q(z=j) ∝ pi_j N(mean_r; mu_j, Sigma_j + cov_r)`` and
    ``q(h | z=j) ∝ N(h; mu_j, Sigma_j) N(h; mean_r, cov_r)``.
    """
    mean_r, cov_r = as_tensor(mean_r), as_tensor(cov_r)
    d = prior.means.shape[-1]
    if mean_r.shape[-1] != d or cov_r.shape[-2:] != (d, d):
        raise ShapeMismatch(f"potential must live in dimension {d}")
    Sig = prior.covs  # (J, d, d)
    m = mean_r[..., None, :]  # (..., 1, d)
    R = cov_r[..., None, :, :]  # (..., 1, d, d)
    P = Sig + R
    L = small_cholesky(0.5 * (P + P.mT))
    log_ev = gaussian_log_density(m, prior.means, L)
    log_resp = torch.log_softmax(torch.log_softmax(prior.logits, -1) + log_ev, -1)
    A = small_solve_lower(L, Sig.expand_as(L))  # L^{-1} Sigma_j
    Bm = small_solve_lower(L, R.expand_as(L))  # L^{-1} cov_r
    cov = A.mT @ Bm
    cov = 0.5 * (cov + cov.mT)
    shift = small_solve_lower(L, (m - prior.means)[..., None])
    mean = prior.means + (A.mT @ shift)[..., 0]
    return MixturePosterior(log_resp, mean, cov)


def combine_gmm_natural(prior: GMMPrior, eta, prec) -> MixturePosterior:
    """:func:`combine_gmm` for a potential ``exp(eta^T h - h^T prec h / 2)`` in information form.

    ``prec`` may be singular (zero precision is an uninformative potential).
    """
    eta, prec = as_tensor(eta), as_tensor(prec)
    d = prior.means.shape[-1]
    eye = torch.eye(d, dtype=DTYPE)
    Lj_inv = small_solve_lower(prior.chols, eye.expand_as(prior.chols))  # (J, d, d)
    Lam = Lj_inv.mT @ Lj_inv
    h_j = (Lam @ prior.means[..., None])[..., 0]
    P = Lam + prec[..., None, :, :]
    L = small_cholesky(0.5 * (P + P.mT))
    rhs = h_j + eta[..., None, :]
    w = small_solve_lower(L, rhs[..., None])  # L^{-1} (h_j + eta)
    Linv = small_solve_lower(L, eye.expand_as(L))
    cov = Linv.mT @ Linv
    mean = (cov @ rhs[..., None])[..., 0]
    logdet_P = 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
    logdet_S = 2.0 * torch.log(torch.diagonal(prior.chols, dim1=-2, dim2=-1)).sum(-1)
    quad_prior = ((Lj_inv @ prior.means[..., None])[..., 0] ** 2).sum(-1)
    log_w = (torch.log_softmax(prior.logits, -1) + 0.5 * (w[..., 0] ** 2).sum(-1)
             - 0.5 * quad_prior - 0.5 * logdet_S - 0.5 * logdet_P)
    return MixturePosterior(torch.log_softmax(log_w, -1), mean, 0.5 * (cov + cov.mT))


def mixture_kl_terms(q: MixturePosterior, prior: GMMPrior, q_chols=None):
    """Categorical KL and per-component Gaussian KLs of ``q(z, h)`` from the prior.

    Returns ``(cat_kl (...,), gauss_kl (..., J))``; the total KL is
    ``cat_kl + sum_j q(z=j) gauss_kl_j``.
    """
    log_pi = torch.log_softmax(prior.logits, -1)
    r = q.resp
    cat = (r * (q.log_resp - log_pi)).sum(-1)
    Lq = q.chols if q_chols is None else q_chols
    gauss = gaussian_kl_chol(q.means, Lq, prior.means, prior.chols)
    return cat, gauss


class _GaussianDecoderModel(nn.Module):
    def __init__(self, obs_dim, latent_dim, rec_out, hidden, seed, init_var=0.01):
        super().__init__()
        gen = make_generator(seed)
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.hidden = [int(h) for h in hidden]
        self.seed = int(seed)
        self.recognition = MLP([self.obs_dim, *self.hidden, rec_out], generator=gen)
        self.decoder = MLP([self.latent_dim, *self.hidden, 2 * self.obs_dim], generator=gen)
        # A small starting output variance keeps the decoder from explaining
        # the data as noise before the latent is used.
        with torch.no_grad():
            self.decoder.biases[-1][self.obs_dim:] = math.log(math.expm1(init_var))
        self._gen = gen

    def decode(self, h: Tensor):
        """Observation mean and variance at latent ``h``."""
        out = self.decoder(h)
        return out[..., :self.obs_dim], nnf.softplus(out[..., self.obs_dim:]) + VAR_FLOOR

    def log_likelihood(self, y, h) -> Tensor:
        mean, var = self.decode(h)
        return (-0.5 * (math.log(2 * math.pi) + torch.log(var) + (y - mean) ** 2 / var)).sum(-1)

    def _check(self, y):
        y = as_tensor(y)
        if y.ndim != 2 or y.shape[1] != self.obs_dim:
            raise ShapeMismatch(f"observations must be (B, {self.obs_dim})")
        return y


@register_model
class SRVAEGMM(_GaussianDecoderModel):
    """Mixture-of-Gaussians latent prior with a full-covariance recognition potential."""

    kind = "srvae_gmm"

    def __init__(self, obs_dim=2, latent_dim=2, n_components=10, hidden=(50, 50), seed=0):
        d = int(latent_dim)
        super().__init__(obs_dim, d, d + d * (d + 1) // 2, hidden, seed)
        self.n_components = int(n_components)
        self.prior_logits = nn.Parameter(torch.zeros(n_components, dtype=DTYPE))
        self.prior_means = nn.Parameter(torch.randn(n_components, d, generator=self._gen, dtype=DTYPE))
        rows, cols = torch.tril_indices(d, d)
        raw = torch.zeros(n_components, len(rows), dtype=DTYPE)
        raw[:, rows == cols] = _SOFTPLUS_ONE
        self.prior_chol_raw = nn.Parameter(raw)

    def prior(self) -> GMMPrior:
        return GMMPrior(self.prior_logits, self.prior_means,
                        lower_from_vector(self.prior_chol_raw, self.latent_dim))

    def recognize(self, y):
        """Potential in information form: linear term (B, d) and precision (B, d, d).

        The precision is ``L L^T`` with ``L`` lower triangular and a softplus
        diagonal, so every potential is a full-covariance Gaussian factor.
        """
        out = self.recognition(self._check(y))
        d = self.latent_dim
        L = lower_from_vector(out[..., d:], d)
        return out[..., :d], L @ L.mT

    def posterior(self, y) -> MixturePosterior:
        return combine_gmm_natural(self.prior(), *self.recognize(y))

    def free_energy(self, y, n_samples=1, generator=None, eps=None) -> Terms:
        """Sum over the batch of ``sum_j q(j) E_{q(h|j)} log p(y|h) - KL[q(z,h) || p(z,h)]``.

        ``eps`` (S, B, J, d) fixes the reparameterisation noise.
        """
        y = self._check(y)
        q = self.posterior(y)
        prior = self.prior()
        Lq = q.chols
        if eps is None:
            eps = torch.randn((n_samples, *q.means.shape), generator=generator, dtype=DTYPE)
        h = q.means + (Lq @ eps[..., None])[..., 0]  # (S, B, J, d)
        ll = self.log_likelihood(y[:, None, :], h).mean(0)  # (B, J)
        r = q.resp
        recon = (r * ll).sum()
        cat, gauss = mixture_kl_terms(q, prior, Lq)
        kl = (cat + (r * gauss).sum(-1)).sum()
        return Terms(recon - kl, recon, kl)

    @torch.no_grad()
    def generate(self, n, generator=None, noise=True) -> Tensor:
        """Ancestral samples ``z ~ pi, h ~ N(mu_z, Sigma_z), y ~ p(y | h)``."""
        prior = self.prior()
        z = torch.multinomial(prior.weights, n, replacement=True, generator=generator)
        e = torch.randn(n, self.latent_dim, generator=generator, dtype=DTYPE)
        h = prior.means[z] + (prior.chols[z] @ e[..., None])[..., 0]
        mean, var = self.decode(h)
        if not noise:
            return mean
        return mean + var.sqrt() * torch.randn(mean.shape, generator=generator, dtype=DTYPE)

    def config(self):
        return dict(obs_dim=self.obs_dim, latent_dim=self.latent_dim,
                    n_components=self.n_components, hidden=self.hidden, seed=self.seed)


@register_model
class GaussianVAE(_GaussianDecoderModel):
    """Baseline: diagonal Gaussian posterior, standard normal prior, same decoder."""

    kind = "gauss_vae"

    def __init__(self, obs_dim=2, latent_dim=2, hidden=(50, 50), seed=0):
        super().__init__(obs_dim, latent_dim, 2 * int(latent_dim), hidden, seed)

    def recognize(self, y):
        out = self.recognition(self._check(y))
        d = self.latent_dim
        return out[..., :d], nnf.softplus(out[..., d:]) + VAR_FLOOR

    def free_energy(self, y, n_samples=1, generator=None, eps=None) -> Terms:
        y = self._check(y)
        mean, var = self.recognize(y)
        if eps is None:
            eps = torch.randn((n_samples, *mean.shape), generator=generator, dtype=DTYPE)
        h = mean + var.sqrt() * eps
        recon = self.log_likelihood(y, h).mean(0).sum()
        kl = 0.5 * (var + mean ** 2 - 1.0 - torch.log(var)).sum()
        return Terms(recon - kl, recon, kl)

    @torch.no_grad()
    def generate(self, n, generator=None, noise=True) -> Tensor:
        h = torch.randn(n, self.latent_dim, generator=generator, dtype=DTYPE)
        mean, var = self.decode(h)
        if not noise:
            return mean
        return mean + var.sqrt() * torch.randn(mean.shape, generator=generator, dtype=DTYPE)

    def config(self):
        return dict(obs_dim=self.obs_dim, latent_dim=self.latent_dim, hidden=self.hidden,
                    seed=self.seed)


def train_points(model, points, config: TrainConfig, checkpoint_path=None, callback=None):
    """Adam ascent on the per-point free energy over shuffled minibatches."""
    points = as_tensor(points)
    B = config.batch_length

    def batches(epoch, gen):
        perm = torch.randperm(points.shape[0], generator=gen)
        for s in range(0, points.shape[0], B):
            yield points[perm[s:s + B]]

    def objective(m, batch, gen):
        t = m.free_energy(batch, n_samples=config.n_samples, generator=gen)
        k = 1.0 / batch.shape[0]
        return Terms(t.free_energy * k, t.recon * k, t.kl * k)

    return fit(model, batches, objective, config, checkpoint_path=checkpoint_path, callback=callback)


@torch.no_grad()
def mean_free_energy(model, points, n_samples=16, seed=0) -> float:
    points = as_tensor(points)
    t = model.free_energy(points, n_samples=n_samples, generator=make_generator(seed))
    return float(t.free_energy) / points.shape[0]
