"""Exponentiated-quadratic kernels and inducing-point Gaussian algebra.

Conventions
-----------
Inputs ``x`` have shape (T, P) (a 1-D array of T timestamps is promoted to
(T, 1)). Inducing locations ``Z`` have shape (K, M, P). The inducing vector
``U`` is the concatenation ``[u_1, ..., u_K]`` of length K*M, latent-major.

The structured posterior is computed in coordinates whitened by the prior
Cholesky factor ``L_U`` (``U = L_U v``). With ``W_t = C F(x_t) L_U`` the
posterior precision of ``v`` is ``B = I + sum_t W_t^T Psi_t^{-1} W_t``, which
is bounded below by the identity and therefore well conditioned; ``K_U^{-1}``
is never formed.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import torch
from torch import Tensor

from .errors import ShapeMismatch
from .tensor import (DTYPE, FALLBACK_JITTER, KERNEL_JITTER, as_tensor, block_diag,
                     cho_solve, cholesky, solve_triangular)


def as_points(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0:
        return x.reshape(1, 1)
    if x.ndim == 1:
        return x[:, None]
    return x


@dataclass
class KernelParams:
    """Per-latent marginal variance and lengthscale, stored as logs."""

    log_variance: Tensor  # (K,)
    log_lengthscale: Tensor  # (K,)

    @classmethod
    def from_values(cls, variance, lengthscale):
        return cls(torch.log(as_tensor(variance)), torch.log(as_tensor(lengthscale)))

    @property
    def variance(self) -> Tensor:
        return torch.exp(self.log_variance)

    @property
    def lengthscale(self) -> Tensor:
        return torch.exp(self.log_lengthscale)


@dataclass
class InducingModel:
    """Inducing locations, kernels and the affine map ``h = C f + d``."""

    Z: Tensor  # (K, M, P)
    kernel: KernelParams
    C: Tensor  # (N, K)
    d: Tensor  # (N,)

    def __post_init__(self):
        Z = as_tensor(self.Z) if not isinstance(self.Z, Tensor) else self.Z
        if Z.ndim == 2:
            Z = Z[..., None]
        self.Z = Z
        if self.C.ndim != 2 or self.C.shape[1] != Z.shape[0]:
            raise ShapeMismatch(f"C must be N x K with K={Z.shape[0]}, got {tuple(self.C.shape)}")
        if self.d.shape != (self.C.shape[0],):
            raise ShapeMismatch("d must have length N")

    @property
    def K(self) -> int:
        return self.Z.shape[0]

    @property
    def M(self) -> int:
        return self.Z.shape[1]

    @property
    def N(self) -> int:
        return self.C.shape[0]

    def check_distinct(self, tol: float = 1e-9):
        with torch.no_grad():
            D = torch.cdist(self.Z, self.Z)
            D = D + torch.eye(self.M, dtype=DTYPE) * (tol + 1.0)
            if (D <= tol).any():
                raise ValueError("inducing locations must be distinct within each latent")

    @cached_property
    def prior_chol(self) -> Tensor:
        """Cholesky factors of the (jittered) prior covariances K_{z_k z_k}, shape (K, M, M)."""
        Kzz = eq_kernel(self.Z, self.Z, self.kernel.variance, self.kernel.lengthscale)
        return cholesky(0.5 * (Kzz + Kzz.mT), jitter=KERNEL_JITTER)

    @property
    def prior_blocks(self) -> Tensor:
        L = self.prior_chol
        return L @ L.mT

    def prior(self) -> "GaussianDense":
        KM = self.K * self.M
        return GaussianDense(torch.zeros(KM, dtype=DTYPE), block_diag(self.prior_blocks))


def eq_kernel(x1, x2, variance, lengthscale) -> Tensor:
    """``variance * exp(-|x1 - x2|^2 / lengthscale^2)`` for all pairs.

    ``x1`` (..., A, P) and ``x2`` (..., B, P) give (..., A, B); ``variance``
    and ``lengthscale`` broadcast against the leading batch dimensions. Plain
    vectors/scalars are treated as single points.
    """
    x1, x2 = as_tensor(x1), as_tensor(x2)
    single = x1.ndim <= 1 and x2.ndim <= 1
    if single:
        x1, x2 = x1.reshape(1, -1), x2.reshape(1, -1)
    variance, lengthscale = as_tensor(variance), as_tensor(lengthscale)
    diff = x1[..., :, None, :] - x2[..., None, :, :]
    sq = (diff ** 2).sum(-1)
    out = variance[..., None, None] * torch.exp(-sq / lengthscale[..., None, None] ** 2)
    return out[..., 0, 0] if single else out


def cross_kernel(x, model: InducingModel) -> Tensor:
    """kappa_k(x_t, z_k) for every latent, shape (K, T, M)."""
    x = as_points(x)
    return eq_kernel(x[None].expand(model.K, -1, -1), model.Z,
                     model.kernel.variance, model.kernel.lengthscale)


def projector(x, model: InducingModel, k: int | None = None) -> Tensor:
    """Rows ``F_k(x) = kappa_k(x, z_k) K_{z_k z_k}^{-1}``.

    Returns shape (T, K, M), or (T, M) when a single latent ``k`` is requested.
    """
    kxz = cross_kernel(x, model)  # (K, T, M)
    F = cho_solve(model.prior_chol, kxz.mT).permute(2, 0, 1)  # (T, K, M)
    return F if k is None else F[:, k, :]


def projector_matrix(x, model: InducingModel) -> Tensor:
    """Block-diagonal operator F(x) mapping U to f(x), shape (T, K, K*M)."""
    F = projector(x, model)
    T, K, M = F.shape
    out = F.new_zeros(T, K, K, M)
    idx = torch.arange(K)
    out[:, idx, idx, :] = F
    return out.reshape(T, K, K * M)


def _residual_variance(x, model: InducingModel, F: Tensor | None = None) -> Tensor:
    """kappa_k(x,x) - F_k(x) K_{z_k z_k} F_k(x)^T, shape (T, K)."""
    kxz = cross_kernel(x, model).permute(1, 0, 2)  # (T, K, M)
    if F is None:
        F = projector(x, model)
    r = model.kernel.variance - (F * kxz).sum(-1)
    return r.clamp_min(0.0)


@dataclass
class GaussianDense:
    """Multivariate Gaussian with dense covariance."""

    mean: Tensor
    cov: Tensor

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @cached_property
    def chol(self) -> Tensor:
        return cholesky(0.5 * (self.cov + self.cov.mT), jitter=FALLBACK_JITTER)


@dataclass
class InducingPosterior(GaussianDense):
    """q(U) together with its KL divergence from the GP prior p(U)."""

    prior_kl: Tensor = None


@dataclass
class DiagonalGaussianPotential:
    mean: Tensor  # (..., N)
    var: Tensor  # (..., N)

    def __post_init__(self):
        if (self.var <= 0).any():
            raise ValueError("potential variances must be positive")


@dataclass
class PosteriorMarginal:
    """Gaussian marginals q(h(x_t)) at a set of inputs.

    ``scale`` (T, N, K) satisfies ``scale @ scale^T = cov``; when N > K the
    covariance is rank-deficient and this thin factor replaces a square
    Cholesky factor. ``mean_f``/``cov_f``/``chol_f`` are the latent-process
    marginals that generate ``h = C f + d``.
    """

    mean: Tensor  # (T, N)
    cov: Tensor  # (T, N, N)
    scale: Tensor  # (T, N, K)
    mean_f: Tensor  # (T, K)
    cov_f: Tensor  # (T, K, K)
    chol_f: Tensor  # (T, K, K)

    @property
    def chol(self) -> Tensor:
        """Square lower Cholesky factor of ``cov`` (jitter applied if singular)."""
        return cholesky(0.5 * (self.cov + self.cov.mT), jitter=FALLBACK_JITTER)

    def sample(self, eps: Tensor) -> Tensor:
        """Reparameterised draws ``mean + scale @ eps`` for ``eps`` of shape (S, T, K)."""
        return self.mean + torch.einsum("tnk,stk->stn", self.scale, eps)

    def sample_f(self, eps: Tensor) -> Tensor:
        return self.mean_f + torch.einsum("tkl,stl->stk", self.chol_f, eps)


def conditional_h(x, U, model: InducingModel) -> GaussianDense:
    """p(h(x) | U) = N(C F(x) U + d, C (K_x - F(x) K_U F(x)^T) C^T) at a single input."""
    U = as_tensor(U)
    if U.shape != (model.K * model.M,):
        raise ShapeMismatch(f"U must have length K*M={model.K * model.M}, got {tuple(U.shape)}")
    x = as_points(x)
    if x.shape[0] != 1:
        raise ShapeMismatch("conditional_h takes a single input point")
    F = projector(x, model)[0]  # (K, M)
    f_mean = (F * U.reshape(model.K, model.M)).sum(-1)
    r = _residual_variance(x, model, F[None])[0]
    mean = model.C @ f_mean + model.d
    cov = model.C @ torch.diag(r) @ model.C.T
    return GaussianDense(mean, cov)


def _whitened_projection(x, model: InducingModel) -> Tensor:
    """L_k^{-1} kappa_k(z_k, x_t), laid out as (T, K, M)."""
    kxz = cross_kernel(x, model)  # (K, T, M)
    return solve_triangular(model.prior_chol, kxz.mT).permute(2, 0, 1)


def structured_qU(x, mu, psi, model: InducingModel) -> InducingPosterior:
    """Full-covariance q(U) from diagonal Gaussian potentials on the embeddings.

    Combines the prior p(U) with ``prod_t N(mu_t; C F(x_t) U + d, diag(psi_t))``.

    Parameters
    ----------
    x : (T,) or (T, P) inputs
    mu, psi : (T, N) potential means and variances on h(x_t)
    model : InducingModel

    Returns
    -------
    InducingPosterior
        Mean (K*M,), dense covariance (K*M, K*M) and ``prior_kl``.
    """
    x = as_points(x)
    mu, psi = as_tensor(mu), as_tensor(psi)
    T = x.shape[0]
    K, M, N = model.K, model.M, model.N
    if mu.shape != (T, N) or psi.shape != (T, N):
        raise ShapeMismatch(f"potentials must be ({T}, {N}), got {tuple(mu.shape)}, {tuple(psi.shape)}")
    W = _whitened_projection(x, model)  # (T, K, M)
    prec = 1.0 / psi
    G = torch.einsum("nk,tn,nl->tkl", model.C, prec, model.C)
    B = torch.einsum("tkm,tkl,tlj->kmlj", W, G, W).reshape(K * M, K * M)
    B = torch.eye(K * M, dtype=DTYPE) + 0.5 * (B + B.T)
    rhs = torch.einsum("tkm,nk,tn->km", W, model.C, prec * (mu - model.d)).reshape(K * M)
    return _posterior_from_whitened(B, rhs, model.prior_chol)


def _posterior_from_whitened(B: Tensor, rhs: Tensor, prior_chol: Tensor) -> InducingPosterior:
    n = B.shape[-1]
    LB = cholesky(B)
    a = cho_solve(LB, rhs[:, None])[:, 0]
    Lu = block_diag(prior_chol)
    mean = Lu @ a
    R = solve_triangular(LB, Lu.T)  # LB^{-1} Lu^T
    cov = R.T @ R
    LB_inv = solve_triangular(LB, torch.eye(n, dtype=DTYPE))
    kl = 0.5 * ((LB_inv ** 2).sum() + (a ** 2).sum() - n
                + 2.0 * torch.log(torch.diagonal(LB)).sum())
    return InducingPosterior(mean, 0.5 * (cov + cov.T), kl)


def factored_qU(x, mu, psi, model: InducingModel) -> list[InducingPosterior]:
    """Per-latent q(u_k) from potentials on each latent process separately.

    ``mu`` and ``psi`` have shape (T, K): the k-th column is a Gaussian
    potential on f^k(x_t). The affine map of ``model`` is not used. Each latent
    is solved independently, so the cost is linear in K.
    """
    x = as_points(x)
    mu, psi = as_tensor(mu), as_tensor(psi)
    T, K, M = x.shape[0], model.K, model.M
    if mu.shape != (T, K) or psi.shape != (T, K):
        raise ShapeMismatch(f"factored potentials must be ({T}, {K})")
    W = _whitened_projection(x, model)  # (T, K, M)
    prec = 1.0 / psi
    B = torch.einsum("tkm,tk,tkj->kmj", W, prec, W)
    B = torch.eye(M, dtype=DTYPE) + 0.5 * (B + B.mT)
    rhs = torch.einsum("tkm,tk->km", W, prec * mu)
    LB = cholesky(B)  # (K, M, M)
    a = cho_solve(LB, rhs[..., None])[..., 0]  # (K, M)
    L = model.prior_chol
    mean = (L @ a[..., None])[..., 0]
    R = solve_triangular(LB, L.mT)
    cov = R.mT @ R
    LB_inv = solve_triangular(LB, torch.eye(M, dtype=DTYPE).expand(K, M, M))
    kl = 0.5 * ((LB_inv ** 2).sum((-1, -2)) + (a ** 2).sum(-1) - M
                + 2.0 * torch.log(torch.diagonal(LB, dim1=-2, dim2=-1)).sum(-1))
    cov = 0.5 * (cov + cov.mT)
    return [InducingPosterior(mean[k], cov[k], kl[k]) for k in range(K)]


def joint_from_factors(qs) -> GaussianDense:
    """Block-diagonal joint Gaussian over U from per-latent factors."""
    return GaussianDense(torch.cat([q.mean for q in qs]),
                         block_diag(torch.stack([q.cov for q in qs])))


def _marginal_from_f(mean_f: Tensor, cov_f: Tensor, model: InducingModel) -> PosteriorMarginal:
    cov_f = 0.5 * (cov_f + cov_f.mT)
    chol_f = cholesky(cov_f, jitter=FALLBACK_JITTER)
    C = model.C
    mean = mean_f @ C.T + model.d
    cov = C @ cov_f @ C.T
    scale = C @ chol_f
    return PosteriorMarginal(mean, 0.5 * (cov + cov.mT), scale, mean_f, cov_f, chol_f)


def posterior_h_marginal(x, qU, model: InducingModel) -> PosteriorMarginal:
    """q(h(x)) = N(C F(x) m_U + d, C (K_x + F(x)(S_U - K_U) F(x)^T) C^T) at each input."""
    x = as_points(x)
    K, M = model.K, model.M
    if qU.mean.shape != (K * M,):
        raise ShapeMismatch(f"q(U) must have dimension K*M={K * M}")
    F = projector(x, model)  # (T, K, M)
    mean_f = torch.einsum("tkm,km->tk", F, qU.mean.reshape(K, M))
    S4 = qU.cov.reshape(K, M, K, M)
    cov_f = torch.einsum("tkm,kmlj,tlj->tkl", F, S4, F)
    cov_f = cov_f + torch.diag_embed(_residual_variance(x, model, F))
    return _marginal_from_f(mean_f, cov_f, model)


def factored_marginal_f(x, qs, model: InducingModel) -> tuple[Tensor, Tensor]:
    """Latent-process marginal means and variances under a factored q, each (T, K)."""
    x = as_points(x)
    F = projector(x, model)
    means = torch.stack([q.mean for q in qs])  # (K, M)
    covs = torch.stack([q.cov for q in qs])  # (K, M, M)
    mean_f = torch.einsum("tkm,km->tk", F, means)
    var_f = torch.einsum("tkm,kmj,tkj->tk", F, covs, F) + _residual_variance(x, model, F)
    return mean_f, var_f


def factored_posterior_marginal(x, qs, model: InducingModel) -> PosteriorMarginal:
    mean_f, var_f = factored_marginal_f(x, qs, model)
    return _marginal_from_f(mean_f, torch.diag_embed(var_f), model)


def factored_posterior_h(x, qs, model: InducingModel) -> tuple[Tensor, Tensor]:
    """Per-output marginal means and variances of h under a factored q(U).

    m_n(t) = sum_k c_nk F_k(t) m_k + d_n,
    v_n(t) = sum_k c_nk^2 (kappa_k(t,t) + F_k(t)(S_k - K_{z_k z_k}) F_k(t)^T).
    """
    if len(qs) != model.K:
        raise ShapeMismatch(f"expected {model.K} per-latent posteriors, got {len(qs)}")
    mean_f, var_f = factored_marginal_f(x, qs, model)
    return mean_f @ model.C.T + model.d, var_f @ (model.C ** 2).T


def gaussian_kl(q, p) -> Tensor:
    """KL(q || p) between two multivariate Gaussians (anything with ``mean``/``cov``)."""
    if q.mean.shape != p.mean.shape or q.cov.shape != p.cov.shape:
        raise ShapeMismatch("gaussian_kl needs matching dimensions")
    n = q.mean.shape[-1]
    Lq = q.chol if hasattr(q, "chol") else cholesky(q.cov, jitter=FALLBACK_JITTER)
    Lp = p.chol if hasattr(p, "chol") else cholesky(p.cov, jitter=FALLBACK_JITTER)
    A = solve_triangular(Lp, Lq)
    diff = solve_triangular(Lp, (p.mean - q.mean)[..., None])[..., 0]
    logdet_p = 2.0 * torch.log(torch.diagonal(Lp, dim1=-2, dim2=-1)).sum(-1)
    logdet_q = 2.0 * torch.log(torch.diagonal(Lq, dim1=-2, dim2=-1)).sum(-1)
    return 0.5 * ((A ** 2).sum((-1, -2)) + (diff ** 2).sum(-1) - n + logdet_p - logdet_q)


def uniform_grid(x, K: int, M: int) -> Tensor:
    """M evenly spaced inducing locations spanning the range of 1-D inputs, shared by K latents."""
    x = as_points(x)
    lo, hi = x[:, 0].min(), x[:, 0].max()
    if M == 1:
        grid = ((lo + hi) / 2).reshape(1)
    else:
        grid = torch.linspace(float(lo), float(hi), M, dtype=DTYPE)
    return grid[None, :, None].expand(K, M, 1).clone()
