"""Exact inference on tree-structured graphical models.

Discrete trees carry singleton and pairwise log-potentials; every table may
have leading batch dimensions, so one call processes a whole minibatch of
graphs that share a topology. Messages are computed in log space and cavity
terms are formed by explicit sums over the other incoming messages, never by
subtracting one message from a total, so ``-inf`` potentials are safe.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import torch
from torch import Tensor

from .errors import InfiniteKL, MalformedTree, NotPositiveDefinite, ShapeMismatch, StructureMismatch
from .tensor import DTYPE, as_tensor


@dataclass(frozen=True)
class Rooting:
    order: tuple  # BFS order starting at the root
    parent: tuple  # parent node, -1 for the root
    parent_edge: tuple  # index of the edge to the parent, -1 for the root
    children: tuple  # tuple of child tuples per node


def root_tree(n: int, edges, root: int = 0, forest: bool = False) -> Rooting:
    """Orient an undirected edge list away from ``root``.

    With ``forest`` every connected component is rooted at its smallest node
    instead of raising on a disconnected graph.

    Raises
    ------
    MalformedTree
        On self loops, out-of-range nodes, cycles, or a disconnected graph.
    """
    if n < 1:
        raise MalformedTree("a tree needs at least one node")
    adj = [[] for _ in range(n)]
    for e, (i, j) in enumerate(edges):
        if not (0 <= i < n and 0 <= j < n):
            raise MalformedTree(f"edge {e} ({i}, {j}) references a missing node")
        if i == j:
            raise MalformedTree(f"edge {e} is a self loop on node {i}")
        adj[i].append((j, e))
        adj[j].append((i, e))
    parent = [-2] * n
    parent_edge = [-1] * n
    order = []
    roots = [root] + ([i for i in range(n) if i != root] if forest else [])
    for start in roots:
        if parent[start] != -2:
            continue
        parent[start] = -1
        queue = deque([start])
        while queue:
            i = queue.popleft()
            order.append(i)
            for j, e in adj[i]:
                if e == parent_edge[i]:
                    continue
                if parent[j] != -2:
                    raise MalformedTree("edge list contains a cycle")
                parent[j] = i
                parent_edge[j] = e
                queue.append(j)
    if len(order) != n:
        raise MalformedTree("edge list leaves the graph disconnected")
    if len(edges) != n - sum(1 for p in parent if p == -1):
        raise MalformedTree("edge list contains a cycle")
    children = [[] for _ in range(n)]
    for i in order:
        if parent[i] >= 0:
            children[parent[i]].append(i)
    return Rooting(tuple(order), tuple(parent), tuple(parent_edge),
                   tuple(tuple(c) for c in children))


def degrees(n: int, edges) -> list[int]:
    d = [0] * n
    for i, j in edges:
        d[i] += 1
        d[j] += 1
    return d


@dataclass
class TreeFactorGraph:
    """Discrete tree with log-potentials ``log_psi[i]`` (..., c_i) and
    ``log_psi_pair[e]`` (..., c_i, c_j) for edge ``e = (i, j)``."""

    cards: list
    edges: list
    log_psi: list
    log_psi_pair: list

    def __post_init__(self):
        self.cards = [int(c) for c in self.cards]
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        self.log_psi = [as_tensor(t) for t in self.log_psi]
        self.log_psi_pair = [as_tensor(t) for t in self.log_psi_pair]
        n = len(self.cards)
        if len(self.log_psi) != n or len(self.log_psi_pair) != len(self.edges):
            raise ShapeMismatch("one singleton table per node and one pairwise table per edge")
        self.rooting  # validates topology
        for i, t in enumerate(self.log_psi):
            if t.shape[-1] != self.cards[i]:
                raise ShapeMismatch(f"singleton table {i} has {t.shape[-1]} states, expected {self.cards[i]}")
        for e, (i, j) in enumerate(self.edges):
            if tuple(self.log_psi_pair[e].shape[-2:]) != (self.cards[i], self.cards[j]):
                raise ShapeMismatch(f"pairwise table {e} must end in ({self.cards[i]}, {self.cards[j]})")

    @property
    def n(self) -> int:
        return len(self.cards)

    @cached_property
    def rooting(self) -> Rooting:
        return root_tree(self.n, self.edges)

    @property
    def degrees(self) -> list[int]:
        return degrees(self.n, self.edges)

    @property
    def batch_shape(self) -> torch.Size:
        tables = self.log_psi + self.log_psi_pair
        shapes = [t.shape[:-1] for t in self.log_psi] + [t.shape[:-2] for t in self.log_psi_pair]
        return torch.broadcast_shapes(*shapes) if tables else torch.Size()

    def same_structure(self, other) -> bool:
        return self.cards == list(other.cards) and self.edges == list(other.edges)

    def to_json(self, path=None) -> dict:
        doc = {"cardinalities": self.cards, "edges": [list(e) for e in self.edges],
               "log_psi_singleton": [t.tolist() for t in self.log_psi],
               "log_psi_pairwise": [t.tolist() for t in self.log_psi_pair]}
        if path is not None:
            Path(path).write_text(json.dumps(doc))
        return doc

    @classmethod
    def from_json(cls, doc) -> "TreeFactorGraph":
        if not isinstance(doc, dict):
            doc = json.loads(Path(doc).read_text())
        cards = doc["cardinalities"]
        edges = doc["edges"]
        single = doc.get("log_psi_singleton") or [[0.0] * c for c in cards]
        pair = doc.get("log_psi_pairwise") or [[[0.0] * cards[j] for _ in range(cards[i])]
                                               for i, j in edges]
        return cls(cards, edges, single, pair)


def _oriented(table: Tensor, edge, parent: int) -> Tensor:
    """Pairwise table indexed as (parent state, child state)."""
    return table if edge[0] == parent else table.mT


@dataclass
class Beliefs:
    """Exact marginals of a tree. ``log_pair[e]`` is indexed as in ``edges[e]``."""

    cards: list
    edges: list
    log_single: list
    log_pair: list
    log_Z: Tensor

    @property
    def single(self) -> list:
        return [torch.exp(t) for t in self.log_single]

    @property
    def pair(self) -> list:
        return [torch.exp(t) for t in self.log_pair]

    @property
    def degrees(self) -> list[int]:
        return degrees(len(self.cards), self.edges)

    @cached_property
    def rooting(self) -> Rooting:
        return root_tree(len(self.cards), self.edges)


def _normalise(log_t: Tensor, dims) -> Tensor:
    return log_t - torch.logsumexp(log_t, dim=dims, keepdim=True)


def sum_product(graph: TreeFactorGraph) -> Beliefs:
    """Exact singleton/pairwise marginals and log-partition via two message sweeps."""
    r = graph.rooting
    n = graph.n
    psi, pair = graph.log_psi, graph.log_psi_pair
    up = [None] * n  # up[c]: message child c -> parent, over parent states
    down = [None] * n  # down[c]: message parent -> child c, over child states

    def incoming(i, exclude=None):
        """log psi_i plus every message into i except the one from ``exclude``."""
        total = psi[i]
        for c in r.children[i]:
            if c != exclude:
                total = total + up[c]
        if r.parent[i] >= 0 and r.parent[i] != exclude:
            total = total + down[i]
        return total

    for i in reversed(r.order[1:]):
        p, e = r.parent[i], r.parent_edge[i]
        table = _oriented(pair[e], graph.edges[e], p)  # (..., c_p, c_i)
        up[i] = torch.logsumexp(table + incoming(i, exclude=p)[..., None, :], dim=-1)
    for p in r.order:
        for c in r.children[p]:
            e = r.parent_edge[c]
            table = _oriented(pair[e], graph.edges[e], p)
            down[c] = torch.logsumexp(table + incoming(p, exclude=c)[..., :, None], dim=-2)

    root = r.order[0]
    log_Z = torch.logsumexp(incoming(root), dim=-1)
    log_single = [_normalise(incoming(i), -1) for i in range(n)]
    log_pair = []
    for e, (i, j) in enumerate(graph.edges):
        joint = pair[e] + incoming(i, exclude=j)[..., :, None] + incoming(j, exclude=i)[..., None, :]
        log_pair.append(_normalise(joint, (-2, -1)))
    return Beliefs(graph.cards, graph.edges, log_single, log_pair, log_Z)


def _categorical_kl(log_q: Tensor, log_p: Tensor, dims) -> Tensor:
    q = torch.exp(log_q)
    support = q > 0
    if bool((support & torch.isneginf(log_p)).any()):
        raise InfiniteKL("q has support where p is zero")
    lq = torch.where(support, log_q, torch.zeros_like(log_q))
    lp = torch.where(support, log_p, torch.zeros_like(log_p))
    return (q * (lq - lp)).sum(dim=dims)


def tree_kl(q: Beliefs, p: Beliefs) -> Tensor:
    """KL(q || p) for two distributions on the same tree.

    ``sum_edges KL(q_ij || p_ij) - sum_i (d_i - 1) KL(q_i || p_i)``.
    """
    if list(q.cards) != list(p.cards) or list(q.edges) != list(p.edges):
        raise StructureMismatch("tree_kl needs identical trees and cardinalities")
    deg = q.degrees
    total = 0.0
    for e in range(len(q.edges)):
        total = total + _categorical_kl(q.log_pair[e], p.log_pair[e], (-2, -1))
    for i in range(len(q.cards)):
        if deg[i] != 1:
            total = total - (deg[i] - 1) * _categorical_kl(q.log_single[i], p.log_single[i], -1)
    return as_tensor(total) if not isinstance(total, Tensor) else total


def hard_sample(z: Tensor) -> Tensor:
    """``0.5 (sign(z - 0.5) + 1)`` forward, identity gradient (straight-through)."""
    z = as_tensor(z)
    hard = 0.5 * (torch.sign(z - 0.5) + 1.0)
    return z + (hard - z).detach()


def _hard_one_hot(y: Tensor) -> Tensor:
    if y.shape[-1] == 2:
        on = hard_sample(y[..., 1])
        return torch.stack([1.0 - on, on], dim=-1)
    idx = y.argmax(-1)
    hard = torch.nn.functional.one_hot(idx, y.shape[-1]).to(y.dtype)
    return y + (hard - y).detach()


def gumbel_noise(shape, generator=None) -> Tensor:
    u = torch.rand(shape, generator=generator, dtype=DTYPE)
    tiny = torch.finfo(DTYPE).tiny
    return -torch.log(-torch.log(u.clamp(tiny, 1.0 - 1e-16)))


def gumbel_softmax(log_probs: Tensor, temperature: float, noise: Tensor) -> Tensor:
    return torch.softmax((log_probs + noise) / temperature, dim=-1)


def ancestral_sample(beliefs: Beliefs, temperature: float, generator=None, hard=False,
                     sample_shape=(), noise=None) -> list:
    """Relaxed one-hot samples from a tree distribution, root first.

    Each child is drawn from the conditional ``b_ij / b_i`` mixed over the
    parent's relaxed (or hard, when ``hard``) sample. ``noise`` is an optional
    list of Gumbel tensors, one per node, to fix the randomness.

    Returns a list of (*sample_shape, *batch, c_i) tensors.
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    r = beliefs.rooting
    n = len(beliefs.cards)
    out = [None] * n
    sample_shape = tuple(sample_shape)
    for i in r.order:
        if r.parent[i] < 0:
            log_p = beliefs.log_single[i].expand(*sample_shape, *beliefs.log_single[i].shape)
        else:
            p, e = r.parent[i], r.parent_edge[i]
            lpair = _oriented(beliefs.log_pair[e], beliefs.edges[e], p)
            lpar = beliefs.log_single[p][..., :, None]
            valid = ~torch.isneginf(lpar)
            cond = torch.exp(torch.where(valid, lpair - torch.where(valid, lpar, 0.0),
                                         torch.full_like(lpair, -torch.inf)))
            probs = torch.einsum("...a,...ab->...b", out[p], cond)
            log_p = torch.log(probs.clamp_min(1e-300))
        g = noise[i] if noise is not None else gumbel_noise(log_p.shape, generator)
        y = gumbel_softmax(log_p, temperature, g)
        out[i] = _hard_one_hot(y) if hard else y
    return out


@dataclass
class GaussianTreeModel:
    """Gaussian ``p(x) ∝ exp(-x^T A x / 2 + b^T x)`` with tree-sparse precision ``A``.

    Stored sparsely: ``diag`` holds A_ii, ``weights[e]`` holds A_ij for edge
    ``edges[e] = (i, j)``.
    """

    diag: np.ndarray
    edges: list
    weights: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.diag = np.asarray(self.diag, dtype=float)
        self.weights = np.asarray(self.weights, dtype=float).reshape(len(self.edges))
        self.b = np.asarray(self.b, dtype=float)
        self.edges = [(int(i), int(j)) for i, j in self.edges]
        if self.b.shape != self.diag.shape:
            raise ShapeMismatch("b and diag must have the same length")
        self.rooting = root_tree(len(self.diag), self.edges, forest=True)

    @classmethod
    def from_dense(cls, A, b, tol=0.0) -> "GaussianTreeModel":
        A = np.asarray(A, dtype=float)
        if not np.allclose(A, A.T, rtol=0, atol=1e-12):
            raise ValueError("precision matrix must be symmetric")
        iu, ju = np.nonzero(np.triu(np.abs(A) > tol, 1))
        edges = list(zip(iu.tolist(), ju.tolist()))
        return cls(np.diag(A).copy(), edges, A[iu, ju], b)

    @property
    def n(self) -> int:
        return len(self.diag)

    def dense(self) -> np.ndarray:
        A = np.diag(self.diag)
        for (i, j), w in zip(self.edges, self.weights):
            A[i, j] = A[j, i] = w
        return A


@dataclass
class GaussianTreeMarginals:
    mean: np.ndarray  # (n,)
    var: np.ndarray  # (n,)
    pair_mean: np.ndarray  # (E, 2)
    pair_cov: np.ndarray  # (E, 2, 2), ordered as edges[e]


def gaussian_tree_vmp(model: GaussianTreeModel) -> GaussianTreeMarginals:
    """Exact Gaussian marginals by passing precision/potential messages on the tree.

    A message from i to j is ``J = -A_ij^2 / J_cav``, ``h = -A_ij h_cav / J_cav``
    where ``(J_cav, h_cav)`` collect A_ii, b_i and all messages into i except
    the one from j. Cost is linear in the number of nodes.
    """
    r = model.rooting
    n = model.n
    A_ii, b = model.diag, model.b
    w = model.weights
    upJ = np.zeros(n)
    uph = np.zeros(n)
    downJ = np.zeros(n)
    downh = np.zeros(n)
    cavJ_up = np.zeros(n)  # cavity of child i excluding its parent
    cavh_up = np.zeros(n)

    for i in reversed(r.order):
        J = A_ii[i]
        h = b[i]
        for c in r.children[i]:
            J += upJ[c]
            h += uph[c]
        cavJ_up[i], cavh_up[i] = J, h
        if r.parent[i] >= 0:
            if J <= 0:
                raise NotPositiveDefinite(f"non-positive cavity precision at node {i}")
            a = w[r.parent_edge[i]]
            upJ[i] = -a * a / J
            uph[i] = -a * h / J

    totJ = np.zeros(n)
    toth = np.zeros(n)
    for p in r.order:
        totJ[p] = cavJ_up[p] + downJ[p]
        toth[p] = cavh_up[p] + downh[p]
        if totJ[p] <= 0:
            raise NotPositiveDefinite(f"non-positive marginal precision at node {p}")
        for c in r.children[p]:
            J = totJ[p] - upJ[c]
            h = toth[p] - uph[c]
            if J <= 0:
                raise NotPositiveDefinite(f"non-positive cavity precision at node {p}")
            a = w[r.parent_edge[c]]
            downJ[c] = -a * a / J
            downh[c] = -a * h / J

    var = 1.0 / totJ
    mean = toth * var
    E = len(model.edges)
    pair_mean = np.zeros((E, 2))
    pair_cov = np.zeros((E, 2, 2))
    for e, (i, j) in enumerate(model.edges):
        if r.parent[j] == i:
            Ji, hi = totJ[i] - upJ[j], toth[i] - uph[j]
            Jj, hj = cavJ_up[j], cavh_up[j]
        else:
            Ji, hi = cavJ_up[i], cavh_up[i]
            Jj, hj = totJ[j] - upJ[i], toth[j] - uph[i]
        a = w[e]
        det = Ji * Jj - a * a
        if det <= 0:
            raise NotPositiveDefinite(f"pairwise precision on edge {e} is not positive definite")
        cov = np.array([[Jj, -a], [-a, Ji]]) / det
        pair_cov[e] = cov
        pair_mean[e] = cov @ np.array([hi, hj])
    return GaussianTreeMarginals(mean, var, pair_mean, pair_cov)
