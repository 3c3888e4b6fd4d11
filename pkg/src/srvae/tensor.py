"""Numerical substrate: float64 tensors, Cholesky algebra, gradients, Adam and MLPs.

Tensors are ``torch.Tensor`` in float64. The autograd graph that torch records
during a forward pass serves as the reverse-mode tape; it is rebuilt on every
call (define-by-run), so a model evaluation is just a Python function of its
parameters.
"""
from __future__ import annotations

import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as nnf
from torch import Tensor, nn

from .errors import NonScalarRoot, NotPositiveDefinite, ShapeMismatch

DTYPE = torch.float64

# relative jitter levels (times mean diagonal) for kernel-derived matrices
KERNEL_JITTER = (1e-8, 1e-6)
# plain attempt first, then the kernel levels; used for posterior covariances
FALLBACK_JITTER = (0.0, 1e-8, 1e-6)

SYMMETRY_TOL = 1e-10

ACTIVATIONS = {
    "identity": lambda x: x,
    "relu": torch.relu,
    "sigmoid": torch.sigmoid,
    "softplus": nnf.softplus,
    "tanh": torch.tanh,
}


def as_tensor(x) -> Tensor:
    return torch.as_tensor(x, dtype=DTYPE)


def make_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def cholesky(A, jitter: Sequence[float] | None = None) -> Tensor:
    """Lower Cholesky factor of a (batch of) symmetric positive-definite matrices.

    Parameters
    ----------
    A : array_like, shape (..., n, n)
    jitter : sequence of float, optional
        Relative jitter levels tried in order; level ``j`` adds
        ``j * mean(diag(A))`` to the diagonal. ``None`` means a single attempt
        without jitter. Use :data:`KERNEL_JITTER` for kernel matrices.

    Raises
    ------
    NotPositiveDefinite
        If every attempt hits a non-positive pivot.
    """
    A = as_tensor(A)
    if A.ndim < 2 or A.shape[-1] != A.shape[-2]:
        raise ShapeMismatch(f"cholesky needs square matrices, got shape {tuple(A.shape)}")
    if A.numel() == 0:
        return A.clone()
    if not torch.isfinite(A).all():
        raise NotPositiveDefinite("matrix has non-finite entries")
    with torch.no_grad():
        scale = A.abs().amax().clamp_min(1.0)
        if (A - A.mT).abs().amax() > SYMMETRY_TOL * scale:
            raise ValueError("cholesky input is not symmetric")
        diag_mean = torch.diagonal(A, dim1=-2, dim2=-1).mean(-1).abs()
    levels = (0.0,) if jitter is None else tuple(jitter)
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    for level in levels:
        B = A if level == 0.0 else A + (level * diag_mean)[..., None, None] * eye
        L, info = torch.linalg.cholesky_ex(B)
        if not bool(info.any()):
            return L
    raise NotPositiveDefinite(
        f"Cholesky failed for {A.shape[-1]}x{A.shape[-1]} matrix (jitter levels {levels})"
    )


def solve_triangular(L: Tensor, B: Tensor, upper: bool = False, left: bool = True) -> Tensor:
    return torch.linalg.solve_triangular(L, B, upper=upper, left=left)


def cho_solve(L: Tensor, B: Tensor) -> Tensor:
    """Solve ``(L L^T) X = B`` given the lower Cholesky factor ``L``."""
    return torch.cholesky_solve(B, L)


def logdet(A=None, chol: Tensor | None = None) -> Tensor:
    """Log-determinant of an SPD matrix via its Cholesky factor."""
    if chol is None:
        chol = cholesky(A)
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def block_diag(blocks: Tensor) -> Tensor:
    """Dense block-diagonal matrix from a stack of blocks of shape (K, m, m)."""
    return torch.block_diag(*blocks.unbind(0)) if blocks.shape[0] else blocks.new_zeros(0, 0)


def backward(root: Tensor, params: Iterable[Tensor] | None = None):
    """Reverse sweep from a scalar node; gradients accumulate into ``.grad``.

    Returns the gradient tensors of ``params`` (zeros for leaves the root does
    not depend on) when ``params`` is given.
    """
    if root.numel() != 1:
        raise NonScalarRoot(f"backward needs a single-element root, got shape {tuple(root.shape)}")
    if root.requires_grad:
        root.backward()
    if params is None:
        return None
    grads = []
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
        grads.append(p.grad)
    return grads


class Adam:
    """Adaptive-moment optimiser with bias correction.

    Gradients are read from ``param.grad`` and left untouched; call
    :meth:`zero_grad` between steps.
    """

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params]
        self.lr = float(lr)
        self.betas = (float(betas[0]), float(betas[1]))
        self.eps = float(eps)
        self.step_count = 0
        self.m = [torch.zeros_like(p) for p in self.params]
        self.v = [torch.zeros_like(p) for p in self.params]

    @torch.no_grad()
    def step(self):
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m.mul_(b1).add_(g, alpha=1.0 - b1)
            v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
            p.sub_(self.lr * (m / c1) / ((v / c2).sqrt() + self.eps))

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "lr": self.lr,
            "betas": list(self.betas),
            "eps": self.eps,
            "step": self.step_count,
            "m": [t.tolist() for t in self.m],
            "v": [t.tolist() for t in self.v],
        }

    def load_state_dict(self, state: dict):
        self.lr = float(state["lr"])
        self.betas = tuple(state["betas"])
        self.eps = float(state["eps"])
        self.step_count = int(state["step"])
        self.m = [as_tensor(x).reshape(p.shape) for x, p in zip(state["m"], self.params)]
        self.v = [as_tensor(x).reshape(p.shape) for x, p in zip(state["v"], self.params)]


def adam_step(optimizer: Adam) -> None:
    optimizer.step()


def uniform_init(shape, fan_in: int, generator: torch.Generator | None) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in) if fan_in > 0 else 0.0
    u = torch.rand(shape, generator=generator, dtype=DTYPE)
    return (2.0 * u - 1.0) * bound


def mlp_forward(layers, activation: str, x: Tensor) -> Tensor:
    """Affine + ReLU hidden layers, ``activation`` on the output layer.

    ``layers`` is a sequence of ``(W, b)`` with ``W`` of shape (out, in).
    """
    out_fn = ACTIVATIONS[activation]
    h = x
    for i, (W, b) in enumerate(layers):
        if h.shape[-1] != W.shape[1]:
            raise ShapeMismatch(
                f"layer {i} expects input width {W.shape[1]}, got {h.shape[-1]}"
            )
        h = h @ W.T + b
        if i < len(layers) - 1:
            h = torch.relu(h)
    return out_fn(h)


class MLP(nn.Module):
    """Fully connected network with ReLU hidden layers.

    Weights and biases start uniform in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``.
    """

    def __init__(self, sizes: Sequence[int], out_activation: str = "identity",
                 generator: torch.Generator | None = None):
        super().__init__()
        if len(sizes) < 2:
            raise ShapeMismatch("an MLP needs at least input and output sizes")
        if out_activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {out_activation!r}")
        self.sizes = [int(s) for s in sizes]
        self.out_activation = out_activation
        self.weights = nn.ParameterList()
        self.biases = nn.ParameterList()
        for fan_in, fan_out in zip(self.sizes[:-1], self.sizes[1:]):
            self.weights.append(nn.Parameter(uniform_init((fan_out, fan_in), fan_in, generator)))
            self.biases.append(nn.Parameter(uniform_init((fan_out,), fan_in, generator)))

    @property
    def layers(self):
        return list(zip(self.weights, self.biases))

    def forward(self, x: Tensor) -> Tensor:
        return mlp_forward(self.layers, self.out_activation, x)


def small_cholesky(A: Tensor) -> Tensor:
    """Cholesky of a large batch of small SPD matrices, vectorised over the batch.

    Loops over the matrix dimension instead of the batch, which is much
    faster than a per-matrix LAPACK call (and its backward) for d <= ~8.
    """
    d = A.shape[-1]
    cols = []
    for j in range(d):
        s = A[..., j:, j]
        for k, c in enumerate(cols):
            s = s - c[..., j:] * c[..., j:j + 1]
        piv = s[..., :1]
        if bool((piv <= 0).any()) or not bool(torch.isfinite(piv).all()):
            raise NotPositiveDefinite(f"non-positive pivot in column {j} of a {d}x{d} matrix")
        root = torch.sqrt(piv)
        col = torch.cat([A.new_zeros(*A.shape[:-2], j), s / root], -1)
        cols.append(col)
    return torch.stack(cols, -1) if cols else A.clone()


def small_solve_lower(L: Tensor, B: Tensor) -> Tensor:
    """Forward substitution ``L X = B`` for a batch of small lower-triangular ``L``."""
    d = L.shape[-1]
    rows = []
    for i in range(d):
        r = B[..., i, :]
        for k in range(i):
            r = r - L[..., i, k:k + 1] * rows[k]
        rows.append(r / L[..., i, i:i + 1])
    return torch.stack(rows, -2)
