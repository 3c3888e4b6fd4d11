"""Binary tree-structured latent VAEs with structured recognition.

The prior is a directed tree over binary latents: a root Bernoulli and one
conditional Bernoulli per edge. Recognition emits Ising-style log-potentials,
``log xi_i = [0, a_i]`` and ``log xi_ij = [[0, 0], [0, w_ij]]``; together
these span every positive distribution on the tree once combined with the
prior. Three variants share the decoder:

``tree``  tree prior, singleton and pairwise recognition potentials
``svae``  tree prior, singleton recognition potentials only
``vae``   factorised Bernoulli prior, singleton recognition potentials
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as nnf
from scipy.optimize import minimize
from torch import Tensor, nn

from .errors import ShapeMismatch, StructureMismatch, TooLarge
from .tensor import DTYPE, MLP, as_tensor, make_generator
from .training import Terms, TrainConfig, fit, register_model
from .tree import (Beliefs, TreeFactorGraph, ancestral_sample, degrees, root_tree, sum_product,
                   tree_kl)

VARIANTS = ("tree", "svae", "vae")
MAX_ENUM_LATENTS = 20


def chain_edges(n: int) -> list[tuple[int, int]]:
    return [(i, i + 1) for i in range(n - 1)]


def combine(prior: TreeFactorGraph, potentials: TreeFactorGraph) -> TreeFactorGraph:
    """Add recognition log-potentials to the prior's, factor by factor."""
    if not prior.same_structure(potentials):
        raise StructureMismatch("prior and recognition potentials live on different trees")
    return TreeFactorGraph(prior.cards, prior.edges,
                           [a + b for a, b in zip(prior.log_psi, potentials.log_psi)],
                           [a + b for a, b in zip(prior.log_psi_pair, potentials.log_psi_pair)])


def ising_graph(edges, singleton: Tensor, pairwise: Tensor | None) -> TreeFactorGraph:
    """Binary tree with ``log xi_i = [0, a_i]`` and ``log xi_ij = [[0, 0], [0, w_ij]]``.

    ``singleton`` (..., n) and ``pairwise`` (..., n-1) or ``None`` for zeros.
    """
    n = singleton.shape[-1]
    zero = torch.zeros_like(singleton[..., 0])
    log_psi = [torch.stack([zero, singleton[..., i]], -1) for i in range(n)]
    log_pair = []
    for e in range(len(edges)):
        w = pairwise[..., e] if pairwise is not None else zero
        row0 = torch.stack([zero, zero], -1)
        row1 = torch.stack([zero, w], -1)
        log_pair.append(torch.stack([row0, row1], -2))
    return TreeFactorGraph([2] * n, edges, log_psi, log_pair)


def all_states(n: int) -> Tensor:
    """Every binary configuration of ``n`` latents, shape (2**n, n), latent 0 most significant."""
    if n > MAX_ENUM_LATENTS:
        raise TooLarge(f"2**{n} states exceeds the enumeration bound 2**{MAX_ENUM_LATENTS}")
    idx = torch.arange(2 ** n)
    bits = (idx[:, None] >> torch.arange(n - 1, -1, -1)) & 1
    return bits.to(DTYPE)


def graph_log_joint(graph: TreeFactorGraph, states: Tensor) -> Tensor:
    """Unnormalised log-potential of each binary state, shape (S, *batch)."""
    s = states.long()
    total = 0.0
    for i, t in enumerate(graph.log_psi):
        total = total + t[..., s[:, i]].movedim(-1, 0)
    for e, (i, j) in enumerate(graph.edges):
        t = graph.log_psi_pair[e]
        total = total + t[..., s[:, i], s[:, j]].movedim(-1, 0)
    return total


def beliefs_log_joint(b: Beliefs, states: Tensor) -> Tensor:
    """log q(z) of a tree distribution from its beliefs, shape (S, *batch)."""
    s = states.long()
    deg = b.degrees
    total = 0.0
    for e, (i, j) in enumerate(b.edges):
        total = total + b.log_pair[e][..., s[:, i], s[:, j]].movedim(-1, 0)
    for i, t in enumerate(b.log_single):
        if deg[i] != 1:
            total = total - (deg[i] - 1) * t[..., s[:, i]].movedim(-1, 0)
    return total


@register_model
class TreeSRVAE(nn.Module):
    """Tree-structured binary latent VAE with a Bernoulli decoder.

    Parameters
    ----------
    obs_dim : int
        Number of binary pixels.
    n_latent : int
    edges : list of (int, int), optional
        Tree over the latents; defaults to a chain.
    variant : {"tree", "svae", "vae"}
    decoder : {"mlp", "affine"}
    temperature : float
        Gumbel-Softmax temperature.
    hard : bool
        Apply the straight-through hard transformation to samples.
    """

    kind = "tree_srvae"

    def __init__(self, obs_dim, n_latent=16, edges=None, hidden=(50, 50), variant="tree",
                 decoder="mlp", temperature=0.5, hard=True, seed=0):
        super().__init__()
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}")
        if decoder not in ("mlp", "affine"):
            raise ValueError("decoder must be 'mlp' or 'affine'")
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        self.obs_dim = int(obs_dim)
        self.n_latent = int(n_latent)
        self.edges = [tuple(map(int, e)) for e in (edges if edges is not None else chain_edges(n_latent))]
        self.rooting = root_tree(self.n_latent, self.edges)
        self.hidden = [int(h) for h in hidden]
        self.variant = variant
        self.decoder_kind = decoder
        self.temperature = float(temperature)
        self.hard = bool(hard)
        self.seed = int(seed)
        n = self.n_latent
        gen = make_generator(seed)
        self.trunk = MLP([self.obs_dim, *self.hidden], out_activation="relu", generator=gen)
        self.singleton_head = MLP([self.hidden[-1], n], generator=gen)
        dec_sizes = [n, self.obs_dim] if decoder == "affine" else [n, *self.hidden, self.obs_dim]
        self.decoder = MLP(dec_sizes, generator=gen)
        if variant == "vae":
            self.prior_logits = nn.Parameter(torch.zeros(n, dtype=DTYPE))
        else:
            self.prior_root = nn.Parameter(torch.zeros((), dtype=DTYPE))
            self.prior_cond = nn.Parameter(torch.zeros(n - 1, 2, dtype=DTYPE))
        if variant == "tree":
            self.pairwise_head = MLP([self.hidden[-1], max(n - 1, 0)], generator=gen)
            # couplings start at zero, so the tree variant starts where the svae one does
            with torch.no_grad():
                self.pairwise_head.weights[-1].zero_()
                self.pairwise_head.biases[-1].zero_()

    @property
    def structured(self) -> bool:
        return self.variant == "tree"

    def prior_graph(self) -> TreeFactorGraph:
        n = self.n_latent
        zero = torch.zeros((), dtype=DTYPE)
        if self.variant == "vae":
            single = [torch.stack([nnf.logsigmoid(-a), nnf.logsigmoid(a)]) for a in self.prior_logits]
            pair = [torch.zeros(2, 2, dtype=DTYPE) for _ in self.edges]
            return TreeFactorGraph([2] * n, self.edges, single, pair)
        r = self.rooting
        single = [torch.zeros(2, dtype=DTYPE) + zero for _ in range(n)]
        a0 = self.prior_root
        single[r.order[0]] = torch.stack([nnf.logsigmoid(-a0), nnf.logsigmoid(a0)])
        pair = [None] * len(self.edges)
        for e, (i, j) in enumerate(self.edges):
            logit = self.prior_cond[e]  # indexed by parent state
            table = torch.stack([nnf.logsigmoid(-logit), nnf.logsigmoid(logit)], -1)  # (parent, child)
            pair[e] = table if r.parent[j] == i else table.T
        return TreeFactorGraph([2] * n, self.edges, single, pair)

    def recognize(self, y) -> TreeFactorGraph:
        """Recognition potentials for a batch of images ``y`` (B, obs_dim)."""
        y = as_tensor(y)
        if y.shape[-1] != self.obs_dim:
            raise ShapeMismatch(f"images must have {self.obs_dim} pixels, got {y.shape[-1]}")
        h = self.trunk(y)
        single = self.singleton_head(h)
        pair = self.pairwise_head(h) if self.structured else None
        return ising_graph(self.edges, single, pair)

    def posterior(self, y) -> Beliefs:
        return sum_product(combine(self.prior_graph(), self.recognize(y)))

    def log_likelihood(self, y, z) -> Tensor:
        """log p(y | z) summed over pixels; ``z`` (..., n) broadcasts against ``y``."""
        logits, y = torch.broadcast_tensors(self.decoder(z), as_tensor(y))
        return -nnf.binary_cross_entropy_with_logits(logits, y, reduction="none").sum(-1)

    def free_energy(self, y, n_samples=1, generator=None, noise=None, exact=False) -> Terms:
        """Free energy summed over the batch.

        Reconstruction uses Gumbel-Softmax ancestral samples (``n_samples``
        per image, optional fixed ``noise``) or, with ``exact``, the exact
        expectation by enumerating all latent states.
        """
        y = as_tensor(y)
        q = self.posterior(y)
        p = sum_product(self.prior_graph())
        kl = tree_kl(q, p).sum()
        if exact:
            states = all_states(self.n_latent)
            log_q = beliefs_log_joint(q, states)  # (S, B)
            ll = self.log_likelihood(y, states[:, None, :])  # (S, B)
            recon = (torch.exp(log_q) * ll).sum()
        else:
            samples = ancestral_sample(q, self.temperature, generator, hard=self.hard,
                                       sample_shape=(n_samples,), noise=noise)
            z = torch.stack([s[..., 1] for s in samples], -1)  # (S, B, n)
            recon = self.log_likelihood(y, z).mean(0).sum()
        return Terms(recon - kl, recon, kl)

    @torch.no_grad()
    def generate(self, n, generator=None) -> Tensor:
        """Ancestral samples of pixel probabilities from the prior, shape (n, obs_dim)."""
        p = sum_product(self.prior_graph())
        samples = ancestral_sample(p, self.temperature, generator, hard=True, sample_shape=(n,))
        z = torch.stack([s[..., 1] for s in samples], -1)
        return torch.sigmoid(self.decoder(z))

    def config(self):
        return dict(obs_dim=self.obs_dim, n_latent=self.n_latent, edges=[list(e) for e in self.edges],
                    hidden=self.hidden, variant=self.variant, decoder=self.decoder_kind,
                    temperature=self.temperature, hard=self.hard, seed=self.seed)


def train_tree(model: TreeSRVAE, images, config: TrainConfig, checkpoint_path=None, callback=None):
    """Adam ascent on the per-image free energy over shuffled minibatches of
    ``config.batch_length`` images."""
    images = as_tensor(images)
    B = config.batch_length

    def batches(epoch, gen):
        perm = torch.randperm(images.shape[0], generator=gen)
        for s in range(0, images.shape[0], B):
            yield images[perm[s:s + B]]

    def objective(m, batch, gen):
        t = m.free_energy(batch, n_samples=config.n_samples, generator=gen)
        scale = 1.0 / batch.shape[0]
        return Terms(t.free_energy * scale, t.recon * scale, t.kl * scale)

    return fit(model, batches, objective, config, checkpoint_path=checkpoint_path, callback=callback)


@torch.no_grad()
def evaluate_free_energy(model: TreeSRVAE, images, n_samples=8, seed=0, batch=1024) -> float:
    """Mean per-image MC free energy with fixed noise."""
    images = as_tensor(images)
    gen = make_generator(seed)
    total = 0.0
    for s in range(0, images.shape[0], batch):
        total += float(model.free_energy(images[s:s + batch], n_samples=n_samples,
                                         generator=gen).free_energy)
    return total / images.shape[0]


@dataclass
class ExactPosterior:
    states: Tensor  # (S, n)
    log_prob: Tensor  # (S,) normalised log p(z | y)
    marginals: Tensor  # (n,) p(z_i = 1 | y)
    tree_gap: float  # KL from the posterior to its best tree approximation on the model's edges
    log_evidence: float

    @property
    def prob(self) -> Tensor:
        return torch.exp(self.log_prob)

    def pair_marginal(self, i: int, j: int) -> Tensor:
        P = self.prob
        s = self.states.long()
        out = torch.zeros(2, 2, dtype=DTYPE)
        out.index_put_((s[:, i], s[:, j]), P, accumulate=True)
        return out

    def mutual_information(self, i: int, j: int) -> float:
        return mutual_information(self.pair_marginal(i, j))


def mutual_information(pair: Tensor) -> float:
    """I(z_i; z_j) in nats from a joint table."""
    pair = as_tensor(pair)
    pi, pj = pair.sum(1, keepdim=True), pair.sum(0, keepdim=True)
    mask = pair > 0
    return float((pair[mask] * (torch.log(pair[mask]) - torch.log((pi * pj)[mask]))).sum())


def tree_projection_gap(states: Tensor, log_prob: Tensor, edges) -> float:
    """KL(P || P_T) where P_T keeps P's pairwise marginals on ``edges``."""
    n = states.shape[1]
    s = states.long()
    P = torch.exp(log_prob)
    deg = degrees(n, edges)
    log_T = torch.zeros_like(log_prob)
    for i, j in edges:
        pij = torch.zeros(2, 2, dtype=DTYPE).index_put_((s[:, i], s[:, j]), P, accumulate=True)
        log_T = log_T + torch.log(pij.clamp_min(1e-300))[s[:, i], s[:, j]]
    for i in range(n):
        if deg[i] != 1:
            pi = torch.zeros(2, dtype=DTYPE).index_put_((s[:, i],), P, accumulate=True)
            log_T = log_T - (deg[i] - 1) * torch.log(pi.clamp_min(1e-300))[s[:, i]]
    mask = P > 0
    return float((P[mask] * (log_prob[mask] - log_T[mask])).sum())


@torch.no_grad()
def exact_posterior(model: TreeSRVAE, y, chunk=4096) -> ExactPosterior:
    """p(z | y) for a single image by enumerating every latent state."""
    y = as_tensor(y).reshape(-1)
    states = all_states(model.n_latent)
    prior = model.prior_graph()
    log_prior = graph_log_joint(prior, states) - sum_product(prior).log_Z
    ll = torch.cat([model.log_likelihood(y, states[s:s + chunk])
                    for s in range(0, states.shape[0], chunk)])
    log_joint = log_prior + ll
    log_evidence = torch.logsumexp(log_joint, 0)
    log_prob = log_joint - log_evidence
    marginals = torch.exp(log_prob) @ states
    gap = tree_projection_gap(states, log_prob, model.edges)
    return ExactPosterior(states, log_prob, marginals, gap, float(log_evidence))


def affine_posterior_factors(W, b, y):
    """Split log p(y | z) of a Bernoulli decoder with logits ``W z + b``.

    Returns ``(singleton, joint)`` where ``singleton[i] = sum_j W_ji y_j`` is
    the tree-compatible evidence on ``z_i = 1`` and ``joint(states)`` is the
    normaliser term ``sum_j log sigmoid(-(W z + b)_j)`` coupling all latents.
    The remaining constant is ``sum_j y_j b_j``.
    """
    W, b, y = as_tensor(W), as_tensor(b), as_tensor(y)
    singleton = W.T @ y

    def joint(states):
        return nnf.logsigmoid(-(as_tensor(states) @ W.T + b)).sum(-1)

    return singleton, joint, float(y @ b)


def optimal_bounds(prior: TreeFactorGraph, log_lik: Tensor, restarts=3, seed=0) -> dict:
    """Best free energies reachable by singleton-only and by tree recognition.

    ``log_lik`` (2**n,) holds log p(y | z) for every state. Recognition
    potentials are optimised directly (no amortisation) with L-BFGS on the
    exact objective. The first tree restart is warm-started at the singleton
    optimum with zero couplings.

    Returns ``{"svae": F_singleton, "tree": F_tree, "exact": log p(y)}``.
    """
    n = prior.n
    edges = prior.edges
    states = all_states(n)
    log_lik = as_tensor(log_lik)
    log_p = graph_log_joint(prior, states) - sum_product(prior).log_Z

    def objective(theta):
        t = torch.as_tensor(theta, dtype=DTYPE).requires_grad_(True)
        pair = t[n:] if t.numel() > n else None
        q = sum_product(combine(prior, ising_graph(edges, t[:n], pair)))
        log_q = beliefs_log_joint(q, states)
        F = (torch.exp(log_q) * (log_p + log_lik - log_q)).sum()
        (g,) = torch.autograd.grad(-F, t)
        return float(-F.detach()), g.numpy()

    rng = np.random.default_rng(seed)
    best_s, best_x = -math.inf, None
    for r in range(restarts):
        x0 = np.zeros(n) if r == 0 else rng.normal(size=n)
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-10})
        if -res.fun > best_s:
            best_s, best_x = -res.fun, res.x
    best_t = -math.inf
    for r in range(restarts):
        x0 = np.concatenate([best_x, np.zeros(len(edges))]) if r == 0 else rng.normal(size=n + len(edges))
        res = minimize(objective, x0, jac=True, method="L-BFGS-B", options={"maxiter": 1000, "gtol": 1e-10})
        best_t = max(best_t, -res.fun)
    exact = float(torch.logsumexp(log_p + log_lik, 0))
    return {"svae": float(best_s), "tree": float(best_t), "exact": exact}
