"""The doubly stochastic evidence lower bound.

Per-entry expected log-likelihoods use Monte Carlo estimates of the kernel
expectations under q(x_n) (psi statistics).  For a Gaussian likelihood the
inner integrals over q(u_d) and p(f_d | u_d) are analytic; other likelihoods
go through the marginal q(f_d | x_n) and reparameterized draws of f.

Missing entries are dropped from the data sum; they never enter any
arithmetic, so NaN placeholders are safe.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from . import variational as var
from .kernel import KernelParams, NoiseParams, cross_cov
from .likelihoods import LOG_2PI, Gaussian, LikelihoodSpec, log_prob
from .linalg import as_tensor, chol_solve, cholesky_with_jitter, tri_solve
from .model import GPLVM, ModelVariant

DEFAULT_F_SAMPLES = 4
VARIANCE_TINY = 1e-300


@dataclass
class PsiStats:
    psi0: torch.Tensor  # (...,)
    psi1: torch.Tensor  # (..., M)
    psi2: torch.Tensor  # (..., M, M)


@dataclass
class PredictiveMarginal:
    mean: torch.Tensor
    variance: torch.Tensor


@dataclass
class ElboBreakdown:
    data_term: torch.Tensor
    kl_x: torch.Tensor
    kl_u: torch.Tensor
    total: torch.Tensor
    scale_applied: float
    skipped_rows: int = 0

    def as_floats(self) -> dict:
        return {
            "elbo": float(self.total),
            "data_term": float(self.data_term),
            "kl_x": float(self.kl_x),
            "kl_u": float(self.kl_u),
        }


def kmm_cholesky(kernel: KernelParams, Z: torch.Tensor):
    Kmm = cross_cov(kernel, Z, Z)
    L, _ = cholesky_with_jitter(Kmm)
    return L


def psi_stats_mc(kparams: KernelParams, samples, Z) -> PsiStats:
    """Monte Carlo psi statistics from J latent draws.

    ``samples`` has shape (J, Q) for one point or (J, B, Q) for a batch; the
    same draws feed all three statistics.
    """
    samples, Z = as_tensor(samples), as_tensor(Z)
    Kxz = cross_cov(kparams, samples, Z)  # (J, [B,] M)
    J = samples.shape[0]
    psi1 = Kxz.mean(0)
    psi2 = torch.einsum("j...m,j...k->...mk", Kxz, Kxz) / J
    psi0 = kparams.signal_variance.expand(psi1.shape[:-1])
    return PsiStats(psi0, psi1, psi2)


def expected_ll_gaussian(y_nd, psi: PsiStats, inducing: var.InducingState, d: int,
                         K_mm_chol, noise: NoiseParams) -> torch.Tensor:
    """E_{q(x_n) q(u_d) p(f_d|u_d,x_n)}[log N(y_nd | f_d(x_n), sigma_y^2)].

    With a = K_mm^{-1} m_d this is

        log N(y | psi1 a, s2) - (psi0 - tr(K^{-1} Psi2)) / (2 s2)
            - tr(S_d K^{-1} Psi2 K^{-1}) / (2 s2)
            - (a^T Psi2 a - (psi1 a)^2) / (2 s2)

    The last term is the spread of the conditional mean k(x)^T a under q(x);
    it vanishes for a single draw or a deterministic latent.
    """
    y = as_tensor(y_nd)
    s2 = noise.variance
    a = chol_solve(K_mm_chol, inducing.m[d])
    mean = psi.psi1 @ a
    Kinv_psi2 = chol_solve(K_mm_chol, psi.psi2)
    nystrom = psi.psi0 - torch.trace(Kinv_psi2)
    S = inducing.S[d]
    Kinv_S = chol_solve(K_mm_chol, S)
    trace_S = torch.trace(Kinv_S @ Kinv_psi2)
    spread = a @ psi.psi2 @ a - mean * mean
    log_norm = -0.5 * (LOG_2PI + torch.log(s2)) - (y - mean) ** 2 / (2.0 * s2)
    return log_norm - (nystrom + trace_S + spread) / (2.0 * s2)


def marginal_qf_batch(kparams: KernelParams, inducing: var.InducingState, X, K_mm_chol):
    """Means and variances of q(f_d | x) for all d; X is (..., Q), output (..., D)."""
    X = as_tensor(X)
    Kxz = cross_cov(kparams, X, inducing.Z)  # (..., M)
    A = chol_solve(K_mm_chol, torch.eye(inducing.M, dtype=torch.float64))
    Kinv_k = Kxz @ A  # (..., M)
    mean = Kinv_k @ inducing.m.transpose(0, 1)
    proj = torch.einsum("...m,dmr->...dr", Kinv_k, inducing.L_S)
    var_ = (kparams.signal_variance - (Kxz * Kinv_k).sum(-1)).unsqueeze(-1) + (proj * proj).sum(-1)
    return mean, torch.clamp(var_, min=0.0)


def marginal_qf(kparams: KernelParams, inducing: var.InducingState, d: int, x, K_mm_chol) -> PredictiveMarginal:
    """q(f_d | x) = N(k^T K^{-1} m_d, k_xx + k^T K^{-1} (S_d - K) K^{-1} k)."""
    x = as_tensor(x)
    k = cross_cov(kparams, x.reshape(1, -1), inducing.Z)[0]
    Kinv_k = chol_solve(K_mm_chol, k)
    mean = Kinv_k @ inducing.m[d]
    v = kparams.signal_variance - k @ Kinv_k + Kinv_k @ inducing.S[d] @ Kinv_k
    return PredictiveMarginal(mean, torch.clamp(v, min=0.0))


def _sample_f(mean, variance, eps):
    return mean + torch.sqrt(torch.clamp(variance, min=VARIANCE_TINY)) * eps


def expected_ll_generic(spec: LikelihoodSpec, y_nd, marginals, rng: np.random.Generator | None = None,
                        n_f_samples: int = DEFAULT_F_SAMPLES, eps=None) -> torch.Tensor:
    """Average log-likelihood over J marginals q(f | x_j).

    Gaussian likelihoods use the closed form log N(y | mean, s2) - var / (2 s2);
    anything else draws ``n_f_samples`` reparameterized f per marginal.
    """
    y = as_tensor(y_nd)
    means = torch.stack([as_tensor(m.mean) for m in marginals])
    variances = torch.stack([as_tensor(m.variance) for m in marginals])
    if isinstance(spec, Gaussian):
        s2 = spec.variance
        return (log_prob(spec, y, means) - variances / (2.0 * s2)).mean()
    if eps is None:
        if rng is None:
            raise ValueError("a seeded generator is required to sample f")
        eps = torch.from_numpy(rng.standard_normal((len(marginals), n_f_samples)))
    f = _sample_f(means.unsqueeze(-1), variances.unsqueeze(-1), as_tensor(eps))
    return log_prob(spec, y, f).mean()


def _gaussian_entries(model: GPLVM, X: torch.Tensor, y: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
    """Expected log-likelihood for every (row, output) pair; X is (J, B, Q)."""
    ind = model.inducing
    s2 = model.likelihood.variance
    psi = psi_stats_mc(model.kernel, X, ind.Z)
    Kinv = chol_solve(L, torch.eye(ind.M, dtype=torch.float64))
    a = Kinv @ ind.m.transpose(0, 1)  # (M, D)
    mean = psi.psi1 @ a  # (B, D)
    nystrom = psi.psi0 - (Kinv * psi.psi2).sum((-1, -2))  # (B,)
    C = Kinv @ ind.S @ Kinv  # (D, M, M)
    trace_S = torch.einsum("dmk,bmk->bd", C, psi.psi2)
    spread = torch.einsum("md,bmk,kd->bd", a, psi.psi2, a) - mean * mean
    log_norm = -0.5 * (LOG_2PI + torch.log(s2)) - (y - mean) ** 2 / (2.0 * s2)
    return log_norm - (nystrom.unsqueeze(-1) + trace_S + spread) / (2.0 * s2)


def _generic_entries(model: GPLVM, X: torch.Tensor, y: torch.Tensor, L: torch.Tensor,
                     f_eps: torch.Tensor) -> torch.Tensor:
    """Sampled expected log-likelihood; f_eps is (B, J, K, D)."""
    mean, variance = marginal_qf_batch(model.kernel, model.inducing, X, L)  # (J, B, D)
    mean = mean.transpose(0, 1).unsqueeze(2)  # (B, J, 1, D)
    variance = variance.transpose(0, 1).unsqueeze(2)
    f = _sample_f(mean, variance, f_eps)
    return log_prob(model.likelihood, y[:, None, None, :], f).mean((1, 2))


def entry_terms(model: GPLVM, Y_rows: torch.Tensor, mask_rows: torch.Tensor, rows, J: int, seed: int,
                step: int, n_f_samples: int = DEFAULT_F_SAMPLES, L=None):
    """Per-entry expected log-likelihoods (B, D) and the latent moments of the rows.

    Masked entries are returned as exact zeros.
    """
    if L is None:
        L = kmm_cholesky(model.kernel, model.inducing.Z)
    y = torch.where(mask_rows, Y_rows, torch.zeros((), dtype=torch.float64))
    mean, scale = var.latent_moments(model.latents, rows, y, mask_rows.numpy())
    eps = var.point_normals(seed, step, rows, (J, model.Q)).transpose(0, 1)
    X = var.reparameterize(mean, scale, eps)
    if isinstance(model.likelihood, Gaussian):
        ell = _gaussian_entries(model, X, y, L)
    else:
        f_eps = var.point_normals(seed, step, rows, (J, n_f_samples, model.D), stream=1)
        ell = _generic_entries(model, X, y, L, f_eps)
    return torch.where(mask_rows, ell, torch.zeros((), dtype=torch.float64)), mean, scale


def latent_penalty(variant: ModelVariant, mean, scale) -> torch.Tensor:
    """Per-row KL(q(x_n) || p(x_n)) for Bayesian variants, -log p(x_n) for MAP, 0 for POINT."""
    if variant is ModelVariant.POINT:
        return torch.zeros(mean.shape[0], dtype=torch.float64)
    if variant is ModelVariant.MAP:
        return -var.log_prior_x(mean)
    if variant is ModelVariant.BSVI:
        return var.kl_x_diag(mean, torch.log(scale))
    return var.kl_x_dense(mean, scale)


def elbo_minibatch(model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0,
                   beta: float = 1.0, n_f_samples: int = DEFAULT_F_SAMPLES) -> ElboBreakdown:
    """Minibatch estimate of the ELBO (or the POINT/MAP objective).

    Data and latent terms of the batch rows are scaled by N/B; the inducing
    KL is global and unscaled.  The latent draws for row n depend only on
    (seed, step, n), so the estimate is unbiased over uniformly drawn batches
    with shared per-point noise.  ``beta`` weights the latent KL of the
    Bayesian variants.
    """
    Y = as_tensor(Y)
    N = Y.shape[0]
    mask_t = torch.ones(Y.shape, dtype=torch.bool) if mask is None else torch.as_tensor(np.asarray(mask, dtype=bool))
    batch = np.asarray(batch, dtype=np.int64).reshape(-1)
    if batch.size == 0:
        raise ValueError("empty minibatch")
    if batch.min() < 0 or batch.max() >= N:
        raise IndexError("minibatch index out of range")
    B = batch.size
    scale = N / B
    keep = mask_t[torch.as_tensor(batch)].any(1).numpy()
    skipped = int((~keep).sum())
    if skipped:
        warnings.warn(f"skipping {skipped} minibatch rows with no observed entries", stacklevel=2)
    rows = batch[keep]
    L = kmm_cholesky(model.kernel, model.inducing.Z)
    kl_u = var.kl_u_all(model.inducing, L).sum()
    if rows.size:
        idx = torch.as_tensor(rows)
        ell, mean, latent_scale = entry_terms(model, Y[idx], mask_t[idx], rows, J, seed, step, n_f_samples, L)
        data_term = scale * ell.sum()
        kl_x = scale * latent_penalty(model.variant, mean, latent_scale).sum()
    else:
        data_term = torch.zeros((), dtype=torch.float64)
        kl_x = torch.zeros((), dtype=torch.float64)
    weight = beta if model.variant in (ModelVariant.BSVI, ModelVariant.AEBSVI) else 1.0
    total = data_term - weight * kl_x - kl_u
    return ElboBreakdown(data_term, kl_x, kl_u, total, scale, skipped)


def log_marginal_likelihood_exact(kernel: KernelParams, noise: NoiseParams, X, Y) -> torch.Tensor:
    """sum_d log N(y_d; 0, K_nn + s2 I) for fully observed Y at fixed inputs X."""
    X, Y = as_tensor(X), as_tensor(Y)
    N = X.shape[0]
    K = cross_cov(kernel, X, X) + noise.variance * torch.eye(N, dtype=torch.float64)
    L, _ = cholesky_with_jitter(K)
    alpha = tri_solve(L, Y)
    D = Y.shape[1]
    logdet = 2.0 * torch.log(torch.diagonal(L)).sum()
    return -0.5 * (alpha * alpha).sum() - 0.5 * D * logdet - 0.5 * N * D * math.log(2.0 * math.pi)
