import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from oracles import dense_structured_posterior, eq, gaussian_kl as kl_oracle, prior_blocks
from srvae import ShapeMismatch
from srvae import sparse_gp as sgp
from srvae.tensor import as_tensor, make_generator


def random_instance(seed, K=None, M=None, T=None, N=None):
    rng = np.random.default_rng(seed)
    K = K or int(rng.integers(1, 4))
    M = M or int(rng.integers(1, 5))
    T = T or int(rng.integers(1, 9))
    N = N or int(rng.integers(K, 6))
    inst = dict(
        x=np.sort(rng.uniform(0, 5, T)),
        Z=np.sort(rng.uniform(-0.5, 5.5, (K, M)), axis=1),
        variance=rng.uniform(0.5, 2.0, K),
        lengthscale=rng.uniform(0.5, 2.0, K),
        C=rng.standard_normal((N, K)),
        d=rng.standard_normal(N),
        mu=rng.standard_normal((T, N)),
        psi=rng.uniform(0.1, 1.0, (T, N)),
    )
    return inst


def model_of(inst):
    kernel = sgp.KernelParams.from_values(inst["variance"], inst["lengthscale"])
    return sgp.InducingModel(as_tensor(inst["Z"]), kernel, as_tensor(inst["C"]), as_tensor(inst["d"]))


def test_eq_kernel_values():
    assert float(sgp.eq_kernel(0.7, 0.7, 1.3, 0.4)) == pytest.approx(1.3, abs=1e-15)
    assert float(sgp.eq_kernel(0.0, 1.0, 1.0, 1.0)) == pytest.approx(math.exp(-1), abs=1e-15)
    assert float(sgp.eq_kernel(0.0, 60.0, 1.0, 1.0)) == 0.0


@settings(max_examples=30, deadline=None)
@given(a=st.floats(-5, 5), b=st.floats(-5, 5), c=st.floats(-5, 5))
def test_eq_kernel_symmetric_and_monotone(a, b, c):
    k = lambda u, v: float(sgp.eq_kernel(u, v, 1.0, 1.5))
    assert k(a, b) == k(b, a)
    if abs(a - b) <= abs(a - c):
        assert k(a, b) >= k(a, c)


def test_projector_interpolates_at_inducing_points():
    inst = random_instance(0, K=2, M=4, T=3, N=3)
    model = model_of(inst)
    for k in range(2):
        F = sgp.projector(as_tensor(inst["Z"][k]), model, k)
        np.testing.assert_allclose(F.numpy(), np.eye(4), atol=1e-6)


def test_projector_single_inducing_point():
    kernel = sgp.KernelParams.from_values([1.0], [0.8])
    model = sgp.InducingModel(as_tensor([[0.3]]), kernel, torch.ones(1, 1), torch.zeros(1))
    F = sgp.projector(as_tensor([1.1]), model, 0)
    # jitter on a 1x1 kernel only rescales by (1 + 1e-8)
    assert float(F) == pytest.approx(math.exp(-0.8 ** 2 / 0.64) / (1 + 1e-8), rel=1e-12)


def test_projector_decays_far_from_inducing_points():
    model = model_of(random_instance(1, K=1, M=3))
    assert float(sgp.projector(as_tensor([200.0]), model).abs().max()) < 1e-6


def test_conditional_h_hand_instance():
    # K=1, M=2: scalar GP conditional computed directly
    Z = np.array([[0.0, 1.0]])
    kernel = sgp.KernelParams.from_values([1.5], [0.9])
    model = sgp.InducingModel(as_tensor(Z), kernel, as_tensor([[2.0]]), as_tensor([0.5]))
    U = np.array([0.3, -0.4])
    x = 0.4
    Kzz = prior_blocks(Z, [1.5], [0.9])[0]
    kxz = eq([x], Z[0], 1.5, 0.9)[0]
    f_mean = kxz @ np.linalg.solve(Kzz, U)
    f_var = 1.5 - kxz @ np.linalg.solve(Kzz, kxz)
    out = sgp.conditional_h(as_tensor([x]), as_tensor(U), model)
    assert float(out.mean) == pytest.approx(2 * f_mean + 0.5, abs=1e-10)
    assert float(out.cov) == pytest.approx(4 * f_var, abs=1e-10)


def test_conditional_h_zero_residual_at_inducing_points_and_zero_map():
    inst = random_instance(2, K=2, M=3, N=3)
    inst["Z"][1] = inst["Z"][0]
    model = model_of(inst)
    out = sgp.conditional_h(as_tensor(inst["Z"][0][1:2]), torch.zeros(6), model)
    assert float(out.cov.abs().max()) < 1e-7
    inst["C"] = np.zeros_like(inst["C"])
    model = model_of(inst)
    U = torch.randn(6, generator=make_generator(0))
    out = sgp.conditional_h(as_tensor([2.2]), U, model)
    np.testing.assert_array_equal(out.mean.numpy(), inst["d"])
    assert float(out.cov.abs().max()) == 0.0


def test_conditional_h_shape_check():
    model = model_of(random_instance(3, K=2, M=2))
    with pytest.raises(ShapeMismatch):
        sgp.conditional_h(as_tensor([0.0]), torch.zeros(3), model)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_structured_qU_matches_dense_conditioning(seed):
    inst = random_instance(seed)
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"]),
                          model_of(inst))
    mean, cov, _ = dense_structured_posterior(inst["x"], inst["mu"], inst["psi"], inst["Z"],
                                              inst["variance"], inst["lengthscale"],
                                              inst["C"], inst["d"])
    assert np.abs(q.mean.numpy() - mean).max() < 1e-8
    assert np.abs(q.cov.numpy() - cov).max() < 1e-8


def test_structured_qU_full_covariance_has_inter_latent_blocks():
    inst = random_instance(4, K=2, M=3, T=6, N=4)
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"]),
                          model_of(inst))
    assert np.linalg.norm(q.cov.numpy()[:3, 3:]) > 1e-3


def test_structured_qU_empty_and_uninformative_give_prior():
    inst = random_instance(5, K=2, M=3, T=4, N=3)
    model = model_of(inst)
    prior = model.prior()
    q = sgp.structured_qU(torch.zeros(0), torch.zeros(0, 3), torch.zeros(0, 3), model)
    assert float(q.mean.abs().max()) == 0.0
    np.testing.assert_allclose(q.cov.numpy(), prior.cov.numpy(), atol=1e-12)
    assert abs(float(q.prior_kl)) < 1e-12
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]),
                          torch.full((4, 3), 1e8), model)
    assert float((q.cov - prior.cov).abs().max()) < 1e-6
    assert float(q.mean.abs().max()) < 1e-6


def test_structured_qU_prior_kl_matches_dense_kl():
    inst = random_instance(6, K=2, M=3, T=5, N=4)
    model = model_of(inst)
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"]), model)
    mean, cov, KU = dense_structured_posterior(inst["x"], inst["mu"], inst["psi"], inst["Z"],
                                               inst["variance"], inst["lengthscale"],
                                               inst["C"], inst["d"])
    assert float(q.prior_kl) == pytest.approx(kl_oracle(mean, cov, np.zeros(len(mean)), KU), abs=1e-8)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_extra_potential_never_increases_posterior_variance(seed):
    inst = random_instance(seed, T=5)
    model = model_of(inst)
    x, mu, psi = as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"])
    fewer = sgp.structured_qU(x[:-1], mu[:-1], psi[:-1], model)
    more = sgp.structured_qU(x, mu, psi, model)
    assert torch.all(torch.diagonal(more.cov) <= torch.diagonal(fewer.cov) + 1e-10)


def test_structured_qU_shape_check():
    inst = random_instance(7, K=2, M=2, T=3, N=3)
    with pytest.raises(ShapeMismatch):
        sgp.structured_qU(as_tensor(inst["x"]), torch.zeros(3, 2), torch.ones(3, 2), model_of(inst))


def test_factored_qU_empty_potentials_return_prior_and_joint_is_block_diagonal():
    inst = random_instance(8, K=3, M=3, T=4, N=3)
    model = model_of(inst)
    qs = sgp.factored_qU(torch.zeros(0), torch.zeros(0, 3), torch.ones(0, 3), model)
    for q, block in zip(qs, model.prior_blocks):
        np.testing.assert_allclose(q.cov.numpy(), block.numpy(), atol=1e-12)
    rng = np.random.default_rng(0)
    qs = sgp.factored_qU(as_tensor(inst["x"]), as_tensor(rng.standard_normal((4, 3))),
                         as_tensor(rng.uniform(0.1, 1, (4, 3))), model)
    S = sgp.joint_from_factors(qs).cov.numpy()
    mask = np.kron(1 - np.eye(3), np.ones((3, 3))).astype(bool)
    assert np.all(S[mask] == 0.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_factored_equals_structured_without_mixing(seed):
    # C = I and per-latent potentials: no explaining away is possible
    inst = random_instance(seed)
    K = len(inst["Z"])
    inst["C"], inst["d"] = np.eye(K), np.zeros(K)
    inst["mu"], inst["psi"] = inst["mu"][:, :K], inst["psi"][:, :K]
    model = model_of(inst)
    x, mu, psi = as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"])
    joint = sgp.joint_from_factors(sgp.factored_qU(x, mu, psi, model))
    q = sgp.structured_qU(x, mu, psi, model)
    assert float((joint.mean - q.mean).abs().max()) < 1e-8
    assert float((joint.cov - q.cov).abs().max()) < 1e-8


def test_posterior_h_marginal_at_prior():
    inst = random_instance(9, K=2, M=3, T=5, N=4)
    model = model_of(inst)
    marg = sgp.posterior_h_marginal(as_tensor(inst["x"]), model.prior(), model)
    C = inst["C"]
    expected = C @ np.diag(inst["variance"]) @ C.T
    for t in range(5):
        np.testing.assert_allclose(marg.mean[t].numpy(), inst["d"], atol=1e-12)
        np.testing.assert_allclose(marg.cov[t].numpy(), expected, atol=1e-8)
    np.testing.assert_allclose((marg.chol @ marg.chol.mT).numpy(), marg.cov.numpy(), atol=1e-10)


def test_posterior_h_marginal_interpolates_mean():
    inst = random_instance(10, K=2, M=3, N=2)
    inst["Z"][1] = inst["Z"][0]
    inst["C"], inst["d"] = np.eye(2), np.zeros(2)
    model = model_of(inst)
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"][:, :2]),
                          as_tensor(inst["psi"][:, :2]), model)
    marg = sgp.posterior_h_marginal(as_tensor(inst["Z"][0]), q, model)
    m = q.mean.reshape(2, 3).T.numpy()
    np.testing.assert_allclose(marg.mean.numpy(), m, atol=1e-7)


def test_posterior_h_marginal_matches_dense_joint():
    inst = random_instance(11, K=2, M=3, T=4, N=3)
    model = model_of(inst)
    q = sgp.structured_qU(as_tensor(inst["x"]), as_tensor(inst["mu"]), as_tensor(inst["psi"]), model)
    KU = model.prior().cov.numpy()
    x_new = np.array([0.7, 3.3])
    marg = sgp.posterior_h_marginal(as_tensor(x_new), q, model)
    m_U, S_U = q.mean.numpy(), q.cov.numpy()
    for t, xt in enumerate(x_new):
        # joint over (U, f(x)): f | U ~ N(A U, D), so Cov(f) = A S_U A^T + D
        A = np.zeros((2, 6))
        D = np.zeros(2)
        for k in range(2):
            kxz = eq([xt], inst["Z"][k], inst["variance"][k], inst["lengthscale"][k])[0]
            Kk = KU[3 * k:3 * k + 3, 3 * k:3 * k + 3]
            A[k, 3 * k:3 * k + 3] = np.linalg.solve(Kk, kxz)
            D[k] = inst["variance"][k] - kxz @ np.linalg.solve(Kk, kxz)
        cov_f = A @ S_U @ A.T + np.diag(D)
        np.testing.assert_allclose(marg.mean[t].numpy(), inst["C"] @ A @ m_U + inst["d"], atol=1e-8)
        np.testing.assert_allclose(marg.cov[t].numpy(), inst["C"] @ cov_f @ inst["C"].T, atol=1e-8)


def test_posterior_h_marginal_agrees_with_block_diagonal_factors():
    inst = random_instance(12, K=3, M=3, T=5, N=4)
    model = model_of(inst)
    rng = np.random.default_rng(1)
    qs = sgp.factored_qU(as_tensor(inst["x"]), as_tensor(rng.standard_normal((5, 3))),
                         as_tensor(rng.uniform(0.1, 1, (5, 3))), model)
    x_new = as_tensor([0.2, 1.9, 4.4])
    marg = sgp.posterior_h_marginal(x_new, sgp.joint_from_factors(qs), model)
    mean, var = sgp.factored_posterior_h(x_new, qs, model)
    np.testing.assert_allclose(marg.mean.numpy(), mean.numpy(), atol=1e-10)
    np.testing.assert_allclose(torch.diagonal(marg.cov, dim1=-2, dim2=-1).numpy(), var.numpy(), atol=1e-10)


def test_factored_posterior_h_at_prior_and_zero_map():
    inst = random_instance(13, K=2, M=3, T=4, N=3)
    model = model_of(inst)
    qs = [sgp.InducingPosterior(torch.zeros(3), b) for b in model.prior_blocks]
    _, var = sgp.factored_posterior_h(as_tensor(inst["x"]), qs, model)
    expected = (inst["C"] ** 2) @ inst["variance"]
    np.testing.assert_allclose(var.numpy(), np.tile(expected, (4, 1)), atol=1e-8)
    inst["C"] = np.zeros_like(inst["C"])
    model = model_of(inst)
    mean, var = sgp.factored_posterior_h(as_tensor(inst["x"]), qs, model)
    np.testing.assert_array_equal(mean.numpy(), np.tile(inst["d"], (4, 1)))
    assert float(var.abs().max()) == 0.0


def test_gaussian_kl_examples():
    p = sgp.GaussianDense(torch.zeros(1), torch.eye(1))
    q = sgp.GaussianDense(torch.ones(1), torch.eye(1))
    assert float(sgp.gaussian_kl(q, p)) == pytest.approx(0.5, abs=1e-15)
    assert abs(float(sgp.gaussian_kl(p, p))) < 1e-10


def test_gaussian_kl_matches_monte_carlo():
    rng = np.random.default_rng(3)
    n = 6
    A, B = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    Sq, Sp = A @ A.T + np.eye(n), B @ B.T + np.eye(n)
    mq, mp = rng.standard_normal(n), rng.standard_normal(n)
    kl = float(sgp.gaussian_kl(sgp.GaussianDense(as_tensor(mq), as_tensor(Sq)),
                               sgp.GaussianDense(as_tensor(mp), as_tensor(Sp))))
    from scipy.stats import multivariate_normal as mvn
    h = mvn(mq, Sq).rvs(size=10 ** 6, random_state=rng)
    terms = mvn(mq, Sq).logpdf(h) - mvn(mp, Sp).logpdf(h)
    se = terms.std() / math.sqrt(len(terms))
    assert abs(kl - terms.mean()) < 3 * se


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 100_000), n=st.integers(1, 5))
def test_gaussian_kl_nonnegative(seed, n):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((n, n)), rng.standard_normal((n, n))
    q = sgp.GaussianDense(as_tensor(rng.standard_normal(n)), as_tensor(A @ A.T + 0.1 * np.eye(n)))
    p = sgp.GaussianDense(as_tensor(rng.standard_normal(n)), as_tensor(B @ B.T + 0.1 * np.eye(n)))
    assert float(sgp.gaussian_kl(q, p)) >= -1e-10


def test_gaussian_kl_shape_check():
    with pytest.raises(ShapeMismatch):
        sgp.gaussian_kl(sgp.GaussianDense(torch.zeros(2), torch.eye(2)),
                        sgp.GaussianDense(torch.zeros(3), torch.eye(3)))


def test_uniform_grid():
    Z = sgp.uniform_grid(as_tensor([2.0, 0.0, 4.0]), 2, 5)
    assert Z.shape == (2, 5, 1)
    np.testing.assert_allclose(Z[1, :, 0].numpy(), [0, 1, 2, 3, 4])
