"""Acceptance criteria, each checked at its stated tolerance and time budget.

A PASS/FAIL line per criterion is printed at the end of the session by the
hook in ``conftest.py``. Run just these with ``pytest tests/test_acceptance.py``.
"""
import time

import numpy as np
import pytest
import torch

from oracles import (central_fd, dense_structured_posterior, enumerate_kl, enumerate_marginals,
                     random_tree)
from srvae import experiments as ex
from srvae import sparse_gp as sgp
from srvae.gmm import SRVAEGMM
from srvae.gpfa import SRnlGPFA, reinfer
from srvae.metrics import complexity_benchmark, off_diagonal_ratio
from srvae.tensor import as_tensor, make_generator
from srvae.tree import (GaussianTreeModel, TreeFactorGraph, gaussian_tree_vmp, gumbel_noise,
                        sum_product, tree_kl)
from srvae.tree_vae import TreeSRVAE, all_states, exact_posterior, optimal_bounds

from test_sparse_gp import model_of, random_instance

SEEDS = range(5)


def timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


# 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "structured q(U) matches dense conditioning")
def test_structured_posterior_oracle(note):
    def run():
        worst = 0.0
        for seed in range(100):
            inst = random_instance(seed)
            q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"]),
                                  model_of(inst))
            mean, cov, _ = dense_structured_posterior(inst["x"], inst["mu"], inst["psi"], inst["Z"],
                                                      inst["variance"], inst["lengthscale"],
                                                      inst["C"], inst["d"])
            worst = max(worst, np.abs(q.mean.numpy() - mean).max(), np.abs(q.cov.numpy() - cov).max())
        return worst

    worst, secs = timed(run)
    note(f"max abs err {worst:.1e}, {secs:.1f}s")
    assert worst < 1e-8
    assert secs < 10


# 2 ---------------------------------------------------------------------------

def random_graph(rng):
    n = int(rng.integers(1, 9))
    cards = [int(c) for c in rng.integers(1, 5, n)]
    edges = random_tree(rng, n)
    single = [rng.normal(size=c) * 2 for c in cards]
    pair = [rng.normal(size=(cards[i], cards[j])) * 2 for i, j in edges]
    return cards, edges, single, pair


@pytest.mark.criterion(2, "tree inference matches enumeration and dense inversion")
def test_tree_oracles(note):
    def run():
        err_bp = err_kl = err_g = 0.0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            cards, edges, single, pair = random_graph(rng)
            b = sum_product(TreeFactorGraph(cards, edges, single, pair))
            s_ref, p_ref, logZ = enumerate_marginals(cards, edges, single, pair)
            err_bp = max(err_bp, abs(float(b.log_Z) - logZ),
                         *[np.abs(x.numpy() - y).max() for x, y in zip(b.single + b.pair, s_ref + p_ref)])
            s2 = [rng.normal(size=c) * 2 for c in cards]
            p2 = [rng.normal(size=(cards[i], cards[j])) * 2 for i, j in edges]
            b2 = sum_product(TreeFactorGraph(cards, edges, s2, p2))
            err_kl = max(err_kl, abs(float(tree_kl(b, b2)) - enumerate_kl(cards, edges, (single, pair),
                                                                          (s2, p2))))
            n = len(cards)
            A = np.diag(rng.uniform(2.0, 3.0, n))
            for i, j in edges:
                A[i, j] = A[j, i] = rng.uniform(-1.0, 1.0)
            h = rng.normal(size=n)
            r = gaussian_tree_vmp(GaussianTreeModel(np.diag(A), edges, [A[i, j] for i, j in edges], h))
            S = np.linalg.inv(A)
            err_g = max(err_g, np.abs(r.var - np.diag(S)).max(), np.abs(r.mean - S @ h).max(),
                        *[np.abs(r.pair_cov[e] - S[np.ix_([i, j], [i, j])]).max()
                          for e, (i, j) in enumerate(edges)])
        return err_bp, err_kl, err_g

    (err_bp, err_kl, err_g), secs = timed(run)
    note(f"BP {err_bp:.1e}, KL {err_kl:.1e}, Gaussian {err_g:.1e}, {secs:.1f}s")
    assert err_bp < 1e-10
    assert err_kl < 1e-9
    assert err_g < 1e-8
    assert secs < 30


# 3 ---------------------------------------------------------------------------

def max_rel_fd_error(model, objective, h=1e-6):
    """Worst relative error over parameter groups between autodiff and central differences."""
    model.zero_grad()
    objective().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        base = p.detach().clone()

        def f(v):
            with torch.no_grad():
                p.copy_(as_tensor(v))
                out = float(objective())
                p.copy_(base)
            return out

        fd = central_fd(f, base.numpy(), h=h)
        scale = np.max(np.abs(fd))
        if scale < 1e-8:
            continue
        worst = max(worst, np.max(np.abs(p.grad.numpy() - fd)) / scale)
    return worst


@pytest.mark.criterion(3, "objective gradients match finite differences")
def test_gradient_suite(note):
    def run():
        errs = {}
        x = torch.linspace(0, 2, 6)
        y = torch.randn(6, 3, generator=make_generator(0))
        gp = SRnlGPFA(3, n_latent=2, embed_dim=3, hidden=(4,), n_inducing=4, seed=0)
        eps = torch.randn(2, 6, 2, generator=make_generator(1))
        errs["gpfa"] = max_rel_fd_error(gp, lambda: gp.free_energy(x, y, eps=eps).free_energy)
        imgs = (torch.rand(3, 6, generator=make_generator(2)) > 0.5).double()
        noise = [gumbel_noise((2, 3, 2), make_generator(3 + i)) for i in range(3)]
        for v in ("tree", "svae", "vae"):
            tm = TreeSRVAE(6, n_latent=3, hidden=(4,), variant=v, hard=False, seed=1)
            errs[v] = max_rel_fd_error(tm, lambda: tm.free_energy(imgs, noise=noise).free_energy)
        gm = SRVAEGMM(hidden=(4,), n_components=3, seed=2)
        pts = torch.randn(5, 2, generator=make_generator(4))
        e = torch.randn(2, 5, 3, 2, generator=make_generator(5))
        errs["gmm"] = max_rel_fd_error(gm, lambda: gm.free_energy(pts, eps=e).free_energy)
        return errs

    errs, secs = timed(run)
    note(", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f", {secs:.1f}s")
    assert max(errs.values()) < 1e-3
    assert secs < 60


# 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "tree recognition bound dominates singleton recognition")
def test_bound_ordering_three_node_tree(note):
    gaps = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        edges = [(0, 1), (1, 2)]
        prior = TreeFactorGraph([2] * 3, edges, [rng.normal(size=2) for _ in range(3)],
                                [rng.normal(size=(2, 2)) for _ in edges])
        W, b = rng.normal(size=(6, 3)) * 3, rng.normal(size=6)
        y = (rng.random(6) > 0.5).astype(float)
        logits = all_states(3).numpy() @ W.T + b
        ll = as_tensor((y * logits - np.logaddexp(0, logits)).sum(-1))
        r = optimal_bounds(prior, ll, seed=seed)
        gaps.append(r["tree"] - r["svae"])
    note(f"min tree-svae gap {min(gaps):.2e} over 20 instances")
    assert min(gaps) >= -1e-6


# Fails at desk-scale training budgets; assertions keep the stated tolerances
# and the summary still reports FAIL.
KNOWN_SHORTFALL = pytest.mark.xfail(reason="not reached at desk-scale training, analysis in the decisions ledger",
                                    strict=False)

BAR = ex.BarStudy()


@pytest.mark.criterion(4, "tree recognition bound dominates singleton recognition")
def test_bound_ordering_bar_training(note):
    def run():
        return {omega: ex.bar_free_energies(ex.BarStudy(**{**BAR.__dict__, "omega": omega}), SEEDS)
                for omega in (4.0, 10.0)}

    res, secs = timed(run)
    meds = {w: {v: ex.median(r[v]) for v in r} for w, r in res.items()}
    note(", ".join(f"w={w:g}: tree {m['tree']:.2f} svae {m['svae']:.2f}" for w, m in meds.items())
         + f", {secs:.0f}s")
    for m in meds.values():
        assert m["tree"] >= m["svae"]
    assert secs < 15 * 60


# 5 ---------------------------------------------------------------------------

SIDE = ex.BarStudy(side_dependent=True, epochs=100, variants=("tree", "svae", "vae"))


@pytest.mark.criterion(5, "cross distance ordering tree < svae < vae")
@KNOWN_SHORTFALL
def test_cross_distance_ordering(note):
    d, secs = timed(lambda: ex.bar_cross_distances(SIDE, SEEDS))
    ordered = [t < s < v for t, s, v in zip(d["tree"], d["svae"], d["vae"])]
    note(", ".join(f"{k} {ex.median(v):.3f}" for k, v in d.items())
         + f", ordered in {sum(ordered)}/5, {secs:.0f}s")
    assert sum(ordered) >= 3
    assert secs < 20 * 60


# 6, 8, 9 (trained GPFA models are shared) -------------------------------------

GPFA = ex.GPFAStudy()


@pytest.fixture(scope="module")
def gpfa_runs():
    keep = {}
    res, secs = timed(lambda: ex.gpfa_comparison(GPFA, SEEDS, keep=keep))
    return res, secs, keep


@pytest.mark.criterion(6, "SR-nlGPFA beats the factored and vanilla baselines")
@KNOWN_SHORTFALL
def test_gpfa_comparison(gpfa_runs, note):
    res, secs, _ = gpfa_runs
    sr, fa, va = res["srnlgpfa"], res["sgpvae"], res["vae"]
    wins = sum(sr["smse"][i] < fa["smse"][i] and sr["nll"][i] < fa["nll"][i] for i in SEEDS)
    beat_vae = sum(all(m[k][i] < va[k][i] for m in (sr, fa) for k in ("smse", "nll")) for i in SEEDS)
    note(", ".join(f"{k} SMSE {ex.median(v['smse']):.3f} NLL {ex.median(v['nll']):.3f}"
                   for k, v in res.items()) + f", SR wins {wins}/5, VAE beaten {beat_vae}/5, {secs:.0f}s")
    assert wins >= 4
    assert beat_vae == 5
    assert secs < 30 * 60


@pytest.mark.criterion(8, "explaining away appears in exact and learned posteriors")
def test_explaining_away_exact_posterior(note):
    model = TreeSRVAE(1, n_latent=2, decoder="affine", variant="vae", seed=0)
    with torch.no_grad():
        model.decoder.weights[0].copy_(torch.tensor([[8.0, 8.0]]))
        model.decoder.biases[0].fill_(-4.0)
    post = exact_posterior(model, torch.tensor([1.0]))
    prior_mi = 0.0  # factorised prior
    mi = post.mutual_information(0, 1)
    note(f"posterior MI {mi:.3f} nats")
    assert mi - prior_mi > 0.01


@pytest.mark.criterion(8, "explaining away appears in exact and learned posteriors")
def test_explaining_away_trained_gpfa(gpfa_runs, note):
    _, _, keep = gpfa_runs
    ratios = []
    for seed in SEEDS:
        model, data = keep[("srnlgpfa", seed)], keep[("data", seed)]
        with torch.no_grad():
            qU, _, _ = model.posterior(data.x[:GPFA.window], data.y[:GPFA.window])
        ratios.append(off_diagonal_ratio(qU.cov.numpy()))
    note("off-diagonal ratios " + ", ".join(f"{r:.3f}" for r in ratios))
    assert ex.median(ratios) > 0.05


@pytest.mark.criterion(9, "re-inference with changed inducing locations")
def test_reinfer_identity(gpfa_runs, note):
    _, _, keep = gpfa_runs
    model, data = keep[("srnlgpfa", 0)], keep[("data", 0)]
    x, y = data.x[:GPFA.window], data.y[:GPFA.window]
    Z = model.grid(as_tensor(x))
    with torch.no_grad():
        qU, _, _ = model.posterior(x, y, Z)
    res = reinfer(model, x, y, Z)
    err = max(float((res.qU.mean - qU.mean).abs().max()), float((res.qU.cov - qU.cov).abs().max()))
    note(f"max abs diff {err:.1e}")
    assert err < 1e-10


@pytest.mark.criterion(9, "re-inference with changed inducing locations")
def test_reinfer_more_inducing_points(gpfa_runs, note):
    _, _, keep = gpfa_runs
    counts = (16, 32, 64)
    fe = np.array([ex.inducing_sweep(keep[("srnlgpfa", s)], keep[("data", s)].x, keep[("data", s)].y,
                                     counts, seed=s) for s in SEEDS])
    med = np.median(fe, axis=0)
    note("median free energy " + ", ".join(f"M'={m}: {v:.1f}" for m, v in zip(counts, med)))
    assert np.all(np.diff(med) >= 0)


# 7 ---------------------------------------------------------------------------

@pytest.mark.criterion(7, "structured and factored inference scale as expected")
def test_complexity_scaling(note):
    rows, secs = timed(lambda: complexity_benchmark([4, 8], [160, 320], T=32, repeats=7))
    t = {(r["K"], r["M"]): r for r in rows}
    ks = t[(8, 320)]["structured_s"] / t[(4, 320)]["structured_s"]
    kf = t[(8, 320)]["factored_s"] / t[(4, 320)]["factored_s"]
    ms = t[(8, 320)]["structured_s"] / t[(8, 160)]["structured_s"]
    mf = t[(8, 320)]["factored_s"] / t[(8, 160)]["factored_s"]
    note(f"K doubling: structured x{ks:.1f}, factored x{kf:.1f}; "
         f"M doubling: structured x{ms:.1f}, factored x{mf:.1f}; {secs:.0f}s")
    assert 4 <= ks <= 16
    assert 1.5 <= kf <= 3
    assert 4 <= ms <= 16
    assert 4 <= mf <= 16
    assert secs < 5 * 60


# 10 --------------------------------------------------------------------------

PINWHEEL = ex.PinwheelStudy()


@pytest.mark.criterion(10, "SRVAE-GMM covers the pinwheel arms and beats the VAE")
def test_pinwheel(note):
    res, secs = timed(lambda: ex.pinwheel_comparison(PINWHEEL, SEEDS))
    g, v = res["srvae_gmm"], res["gauss_vae"]
    covered = sum(c >= 0.9 for c in g["coverage"])
    better = sum(a > b for a, b in zip(g["free_energy"], v["free_energy"]))
    note("coverage " + ", ".join(f"{c:.3f}" for c in g["coverage"])
         + f"; free energy {ex.median(g['free_energy']):.3f} vs VAE {ex.median(v['free_energy']):.3f}"
         + f" (better in {better}/5), {secs:.0f}s")
    assert covered >= 4
    assert ex.median(g["free_energy"]) > ex.median(v["free_energy"])
    assert secs < 15 * 60
