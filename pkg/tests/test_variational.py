import math

import numpy as np
import pytest
import torch

from gplvm_svi import variational as var
from gplvm_svi.kernel import KernelParams, cross_cov


def t(x):
    return torch.tensor(x, dtype=torch.float64)


def test_point_samples_are_the_point(rng):
    x = torch.from_numpy(rng.standard_normal((5, 3)))
    batch = var.sample_latents(var.PointLatents(x), [0, 3], J=7, rng=rng)
    assert batch.samples.shape == (7, 2, 3)
    assert torch.equal(batch.samples, x[[0, 3]].expand(7, 2, 3))


def test_degenerate_scale(rng):
    mu = torch.from_numpy(rng.standard_normal((4, 2)))
    state = var.DiagGaussianLatents(mu, torch.full((4, 2), math.log(1e-12), dtype=torch.float64))
    s = var.sample_latents(state, range(4), J=50, rng=rng).samples
    assert float((s - mu).abs().max()) < 1e-10


def test_standard_normal_moments(rng):
    state = var.DiagGaussianLatents(torch.zeros(1, 2, dtype=torch.float64), torch.zeros(1, 2, dtype=torch.float64))
    s = var.sample_latents(state, [0], J=100_000, rng=rng).samples[:, 0]
    assert float(s.mean(0).abs().max()) < 0.02
    assert float((s.var(0) - 1).abs().max()) < 0.03


def test_point_normals_do_not_depend_on_batch_mates():
    a = var.point_normals(3, 5, [1, 4, 7], (2, 2))
    b = var.point_normals(3, 5, [7, 2], (2, 2))
    assert torch.equal(a[2], b[0])


def test_kl_diag_values():
    assert float(var.kl_x_diag(t([0.0]), t([0.0]))) == 0.0
    assert float(var.kl_x_diag(t([1.0]), t([0.0]))) == pytest.approx(0.5, abs=1e-15)
    assert float(var.kl_x_diag(t([0.0]), t([math.log(2.0)]))) == pytest.approx(0.5 * (4 - 1 - math.log(4)), abs=1e-14)
    assert float(var.kl_x_diag(t([0.0]), t([math.log(2.0)]))) == pytest.approx(0.80685, abs=1e-5)


def test_kl_diag_matches_numerical_integral():
    # KL(N(0, 4) || N(0, 1)) by quadrature of q log(q / p)
    x = np.linspace(-30, 30, 200001)
    q = np.exp(-x**2 / 8) / math.sqrt(8 * math.pi)
    integrand = q * (np.log(q) - (-0.5 * x**2 - 0.5 * math.log(2 * math.pi)))
    ref = np.trapezoid(integrand, x) if hasattr(np, "trapezoid") else np.trapz(integrand, x)
    assert float(var.kl_x_diag(t([0.0]), t([math.log(2.0)]))) == pytest.approx(ref, abs=1e-8)


def test_kl_dense_identity_is_zero():
    assert float(var.kl_x_dense(torch.zeros(3, dtype=torch.float64), torch.eye(3, dtype=torch.float64), floor=0.0)) == 0.0
    # the default floor perturbs the covariance by 1e-6 I
    assert abs(float(var.kl_x_dense(torch.zeros(3, dtype=torch.float64), torch.eye(3, dtype=torch.float64)))) < 1e-11


def test_kl_dense_monte_carlo():
    mu = np.array([1.0, 0.0])
    H = np.array([[1.0, 0.0], [0.5, 1.0]])
    cov = H @ H.T + var.DENSE_COV_FLOOR * np.eye(2)
    rng = np.random.default_rng(0)
    x = rng.multivariate_normal(mu, cov, size=1_000_000)
    prec = np.linalg.inv(cov)
    d = x - mu
    logq = -0.5 * np.einsum("ni,ij,nj->n", d, prec, d) - 0.5 * np.linalg.slogdet(2 * np.pi * cov)[1]
    logp = -0.5 * (x**2).sum(1) - math.log(2 * math.pi)
    assert float(var.kl_x_dense(t(mu), t(H))) == pytest.approx((logq - logp).mean(), abs=0.01)


def test_kl_dense_diagonal_reduction(rng):
    for _ in range(20):
        mu = rng.standard_normal(3)
        s = np.exp(rng.standard_normal(3))
        exact = float(var.kl_x_dense(t(mu), torch.diag(t(s)), floor=0.0))
        assert exact == pytest.approx(float(var.kl_x_diag(t(mu), t(np.log(s)))), abs=1e-12)
        # with the floor the diagonal entries become s^2 + floor
        floored = float(var.kl_x_dense(t(mu), torch.diag(t(s))))
        ref = float(var.kl_x_diag(t(mu), t(0.5 * np.log(s**2 + var.DENSE_COV_FLOOR))))
        assert floored == pytest.approx(ref, abs=1e-12)


def test_kl_dense_batched(rng):
    mu = torch.from_numpy(rng.standard_normal((4, 2)))
    H = torch.from_numpy(rng.standard_normal((4, 2, 2)))
    batched = var.kl_x_dense(mu, H)
    for i in range(4):
        assert float(batched[i]) == pytest.approx(float(var.kl_x_dense(mu[i], H[i])), abs=1e-13)


def _kmm(Z, k):
    return torch.linalg.cholesky(cross_cov(k, Z, Z) + 1e-8 * torch.eye(Z.shape[0], dtype=torch.float64))


def test_kl_u_identical_is_zero(rng):
    k = KernelParams.create([0.9, 1.4], 1.3)
    Z = torch.from_numpy(rng.standard_normal((4, 2)))
    L = _kmm(Z, k)
    ind = var.InducingState.from_factors(Z, torch.zeros(2, 4, dtype=torch.float64), L.expand(2, 4, 4))
    assert torch.allclose(var.kl_u_all(ind, L), torch.zeros(2, dtype=torch.float64), atol=1e-12)


def test_kl_u_unit_mean():
    Z = torch.zeros(3, 1, dtype=torch.float64)
    m = torch.zeros(1, 3, dtype=torch.float64)
    m[0, 0] = 1.0
    ind = var.InducingState.from_factors(Z, m, torch.eye(3, dtype=torch.float64).expand(1, 3, 3))
    assert float(var.kl_u(ind, torch.eye(3, dtype=torch.float64), 0)) == pytest.approx(0.5, abs=1e-15)


def test_kl_u_dense_oracle(rng):
    from conftest import random_inducing

    k = KernelParams.create([0.9, 1.4], 1.3)
    ind = random_inducing(rng, 3, 2, 2)
    K = cross_cov(k, ind.Z, ind.Z).numpy() + 1e-6 * np.eye(3)
    L = torch.linalg.cholesky(torch.from_numpy(K))
    Kinv = np.linalg.inv(K)
    for d in range(2):
        S = ind.S[d].detach().numpy()
        m = ind.m[d].detach().numpy()
        ref = 0.5 * (np.trace(Kinv @ S) + m @ Kinv @ m - 3 + np.linalg.slogdet(K)[1] - np.linalg.slogdet(S)[1])
        assert float(var.kl_u(ind, L, d)) == pytest.approx(ref, abs=1e-10)


def test_inducing_factor_round_trip(rng):
    from conftest import random_inducing

    ind = random_inducing(rng, 4, 3, 2)
    L = ind.L_S
    again = var.InducingState.from_factors(ind.Z, ind.m, L)
    assert torch.allclose(again.L_S, L, atol=1e-15)
    assert torch.allclose(ind.S, L @ L.transpose(-1, -2))
    assert bool((torch.diagonal(L, dim1=-2, dim2=-1) > 0).all())


def test_log_prior():
    assert float(var.log_prior_x(torch.zeros(2, dtype=torch.float64))) == pytest.approx(-math.log(2 * math.pi))


def test_latents_csv_round_trip(tmp_path, rng):
    mu, s = rng.standard_normal((5, 2)), np.exp(rng.standard_normal((5, 2)))
    var.write_latents_csv(tmp_path / "l.csv", mu, s)
    mu2, s2 = var.read_latents_csv(tmp_path / "l.csv")
    assert np.array_equal(mu, mu2) and np.array_equal(s, s2)


def test_row_index_checked():
    with pytest.raises(IndexError):
        var.latent_moments(var.PointLatents(torch.zeros(3, 2, dtype=torch.float64)), [3])
