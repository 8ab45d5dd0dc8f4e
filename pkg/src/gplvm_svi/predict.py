"""Test-time latent inference, reconstruction and held-out metrics."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np
import torch

from . import variational as var
from .elbo import DEFAULT_F_SAMPLES, entry_terms, kmm_cholesky, latent_penalty, marginal_qf_batch
from .likelihoods import LOG_2PI, Gaussian, check_counts, log_prob
from .model import GPLVM, ModelVariant
from .train import AdamState, adam_step

PREDICTION_STREAM = 2
INIT_STRATEGIES = ("nearest", "prior")


@dataclass
class TestInferenceConfig:
    inner_iters: int = 500
    inner_lr: float = 0.01
    J: int = 8
    seed: int = 0
    beta: float = 1.0
    init: str = "nearest"  # or "prior"

    def validate(self) -> None:
        if self.inner_iters < 0 or not self.inner_lr > 0 or self.J < 1:
            raise ValueError("inner_iters >= 0, inner_lr > 0 and J >= 1 are required")
        if self.init not in INIT_STRATEGIES:
            raise ValueError(f"init must be one of {INIT_STRATEGIES}, got {self.init!r}")


@dataclass
class LatentPosterior:
    """q(x*) for a set of rows: scale is None (point), (T, Q) std devs, or (T, Q, Q) factors."""

    mean: torch.Tensor
    scale: torch.Tensor | None = None

    @property
    def T(self) -> int:
        return self.mean.shape[0]

    def take(self, rows) -> "LatentPosterior":
        rows = torch.as_tensor(np.asarray(rows, dtype=np.int64))
        return LatentPosterior(self.mean[rows], None if self.scale is None else self.scale[rows])


@dataclass
class Prediction:
    mean: np.ndarray  # (T, D')
    variance: np.ndarray  # (T, D')
    dims: np.ndarray
    log_rate_samples: np.ndarray | None = None  # (S, T, D') for count likelihoods


@dataclass
class Metrics:
    rmse: float
    nlpd_sum: float
    nlpd_mean: float
    n_scored: int

    def to_dict(self) -> dict:
        return {"rmse": self.rmse, "nlpd_sum": self.nlpd_sum, "nlpd_mean": self.nlpd_mean,
                "n_scored": self.n_scored}


def _as_rows(Y_star, mask_star):
    Y = torch.as_tensor(np.atleast_2d(np.asarray(Y_star, dtype=float)))
    if mask_star is None:
        mask = torch.ones(Y.shape, dtype=torch.bool)
    else:
        mask = torch.as_tensor(np.atleast_2d(np.asarray(mask_star, dtype=bool)))
    if mask.shape != Y.shape:
        raise ValueError("test data and mask shapes differ")
    return Y, mask


def _test_latents(model: GPLVM, T: int, init: LatentPosterior | None):
    Q = model.Q
    if model.variant in (ModelVariant.POINT, ModelVariant.MAP):
        x = torch.zeros(T, Q) if init is None else init.mean.detach().clone()
        return var.PointLatents(x)
    if model.variant is ModelVariant.BSVI:
        if init is None:
            return var.DiagGaussianLatents(torch.zeros(T, Q), torch.full((T, Q), math.log(var.INIT_LATENT_SCALE)))
        return var.DiagGaussianLatents(init.mean.detach().clone(), torch.log(init.scale.detach()).clone())
    raise ValueError("re-optimisation applies to point, map and bsvi models; use infer_latent_amortized")


def nearest_training_init(model: GPLVM, Y, mask) -> LatentPosterior:
    """Start each test row at the training latent whose decoded mean best fits its observed entries.

    The decoder is multimodal in x, so a cold start at the prior mean can
    stall far from the best fit; scoring every stored training latent is a
    cheap global search.
    """
    post = posterior_of(model.latents)
    Y = torch.as_tensor(np.asarray(Y, dtype=float))
    mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    with torch.no_grad():
        L = kmm_cholesky(model.kernel, model.inducing.Z)
        fm, _ = marginal_qf_batch(model.kernel, model.inducing, post.mean, L)  # (N, D)
        y = torch.where(mask, Y, torch.zeros((), dtype=torch.float64))
        best = []
        step = max(1, 2**22 // max(1, fm.numel()))
        for start in range(0, y.shape[0], step):
            yb, mb = y[start:start + step], mask[start:start + step]
            lp = log_prob(model.likelihood, yb[:, None, :], fm[None, :, :])  # (T, N, D)
            score = torch.where(mb[:, None, :], lp, torch.zeros((), dtype=torch.float64)).sum(-1)
            best.append(torch.argmax(score, dim=1))
    return post.take(torch.cat(best).numpy())


def _test_model(model: GPLVM, latents) -> GPLVM:
    return GPLVM(model.variant, model.kernel, model.likelihood, model.inducing, latents)


def heldout_objective(model: GPLVM, Y, mask, J: int = 8, seed: int = 0, step: int = 0, beta: float = 1.0,
                   n_f_samples: int = DEFAULT_F_SAMPLES, L=None) -> torch.Tensor:
    """Sum over test rows of their observed-entry terms minus the latent penalty.

    ``model`` carries the test latents; the inducing KL is constant here and
    left out.
    """
    rows = np.arange(Y.shape[0])
    ell, mean, scale = entry_terms(model, Y, mask, rows, J, seed, step, n_f_samples, L)
    weight = beta if model.variant is ModelVariant.BSVI else 1.0
    return ell.sum() - weight * latent_penalty(model.variant, mean, scale).sum()


def infer_latent_reoptimize(model: GPLVM, Y_star, mask_star=None, cfg: TestInferenceConfig | None = None,
                            init: LatentPosterior | None = None, return_trace: bool = False):
    """Fit q(x*) for each test row by Adam on its own terms, globals frozen.

    Without ``init`` the rows start at their best-fitting training latent
    (``cfg.init == "nearest"``) or at the prior mean with scale 0.1.
    Rows are optimized jointly; their objectives are independent so this is
    the same as optimizing them one at a time.  Returns a LatentPosterior
    (and the per-iteration objective values when ``return_trace``).
    """
    cfg = cfg or TestInferenceConfig()
    cfg.validate()
    Y, mask = _as_rows(Y_star, mask_star)
    if Y.shape[1] != model.D:
        raise ValueError(f"test rows have D={Y.shape[1]}, model expects D={model.D}")
    if not bool(mask.any(1).all()):
        raise ValueError("every test row needs at least one observed entry")
    if init is None and cfg.init == "nearest":
        init = nearest_training_init(model, Y, mask)
    tm = _test_model(model, _test_latents(model, Y.shape[0], init))
    with torch.no_grad():
        L = kmm_cholesky(model.kernel, model.inducing.Z)
    state = AdamState()
    trace = []
    for it in range(cfg.inner_iters):
        params = tm.local_parameters()
        for p in params.values():
            p.requires_grad_(True)
        obj = heldout_objective(tm, Y, mask, cfg.J, cfg.seed, it, cfg.beta, L=L)
        grads = torch.autograd.grad(obj, list(params.values()))
        new, state = adam_step(state, {k: p.detach() for k, p in params.items()},
                               dict(zip(params, grads)), cfg.inner_lr)
        tm.set_parameters(new)
        trace.append(float(obj.detach()))
    post = posterior_of(tm.latents)
    return (post, trace) if return_trace else post


def posterior_of(latents) -> LatentPosterior:
    if isinstance(latents, var.PointLatents):
        return LatentPosterior(latents.x_hat.detach())
    if isinstance(latents, var.DiagGaussianLatents):
        return LatentPosterior(latents.mu.detach(), torch.exp(latents.log_s.detach()))
    raise TypeError("amortised latents have no stored posterior; encode the data instead")


def training_posterior(model: GPLVM, Y=None, mask=None) -> LatentPosterior:
    """q(x_n) of the training rows (data needed for amortised models)."""
    if isinstance(model.latents, var.AmortisedLatents):
        return infer_latent_amortized(model, Y, mask)
    return posterior_of(model.latents)


def infer_latent_amortized(model: GPLVM, Y_star, mask_star=None, policy: str | None = None) -> LatentPosterior:
    """One encoder pass per row: constant cost in the training set size."""
    if model.encoder is None:
        raise ValueError("amortised inference needs an aebsvi model")
    Y, mask = _as_rows(Y_star, mask_star)
    with torch.no_grad():
        mu, H = var.latent_moments(var.AmortisedLatents(model.encoder, policy or model.latents.policy),
                                   np.arange(Y.shape[0]), Y, mask.numpy())
    return LatentPosterior(mu, H)


def reconstruct(model: GPLVM, q: LatentPosterior, dims=None, J: int = 100, seed: int = 0,
                decode_mean: bool = False, n_f_samples: int = 32) -> Prediction:
    """Predictive moments of y for the requested output dimensions.

    Means average the q(f_d | x) means over J latent draws; variances add the
    average q(f) variance, the spread of the means across draws and, for a
    Gaussian likelihood, the noise variance.  ``decode_mean`` evaluates at the
    latent mean only.  Count likelihoods report moments of y under the
    Poisson-lognormal mixture and keep log-rate draws for density scoring.
    """
    dims = np.arange(model.D) if dims is None else np.asarray(dims, dtype=np.int64)
    T = q.T
    with torch.no_grad():
        L = kmm_cholesky(model.kernel, model.inducing.Z)
        if decode_mean or q.scale is None:
            X = q.mean.unsqueeze(0)
        else:
            eps = var.point_normals(seed, 0, range(T), (J, model.Q), stream=PREDICTION_STREAM).transpose(0, 1)
            X = var.reparameterize(q.mean, q.scale, eps)
        fm, fv = marginal_qf_batch(model.kernel, model.inducing, X, L)
        idx = torch.as_tensor(dims)
        fm, fv = fm[..., idx], fv[..., idx]
        if isinstance(model.likelihood, Gaussian):
            mean = fm.mean(0)
            variance = fv.mean(0) + fm.var(0, unbiased=False) + model.likelihood.variance
            return Prediction(mean.numpy(), variance.numpy(), dims)
        rate = torch.exp(fm + 0.5 * fv)
        second = torch.exp(2.0 * fm + 2.0 * fv)
        mean = rate.mean(0)
        variance = mean + second.mean(0) - mean * mean
        gen = torch.from_numpy(np.random.default_rng([seed, PREDICTION_STREAM, 1]).standard_normal(
            (X.shape[0], n_f_samples) + tuple(fm.shape[1:])))
        logf = fm.unsqueeze(1) + torch.sqrt(fv).unsqueeze(1) * gen
        logf = logf.reshape(-1, *fm.shape[1:])
        return Prediction(mean.numpy(), variance.numpy(), dims, logf.numpy())


def metrics(Y_true, score_mask, pred: Prediction, likelihood="gaussian") -> Metrics:
    """RMSE of predictive means and summed negative log predictive density.

    Only entries flagged in ``score_mask`` count.  Gaussian densities use the
    predictive mean and variance; Poisson densities average the pmf over the
    log-rate draws.
    """
    Y = np.asarray(Y_true, dtype=float)
    score = np.asarray(score_mask, dtype=bool)
    if Y.shape != pred.mean.shape or score.shape != Y.shape:
        raise ValueError("targets, score mask and predictions must share a shape")
    n = int(score.sum())
    if n == 0:
        raise ValueError("no entries to score")
    y = Y[score]
    mu = pred.mean[score]
    rmse = float(np.sqrt(np.mean((y - mu) ** 2)))
    name = likelihood if isinstance(likelihood, str) else likelihood.name
    if name == "gaussian":
        v = pred.variance[score]
        lp = -0.5 * (LOG_2PI + np.log(v)) - (y - mu) ** 2 / (2.0 * v)
    else:
        if pred.log_rate_samples is None:
            raise ValueError("Poisson scoring needs log-rate samples")
        check_counts(y)
        from scipy.special import gammaln, logsumexp

        f = pred.log_rate_samples[:, score]  # (S, n)
        logpmf = y * f - np.exp(f) - gammaln(y + 1.0)
        lp = logsumexp(logpmf, axis=0) - math.log(f.shape[0])
    nlpd = float(-lp.sum())
    return Metrics(rmse, nlpd, nlpd / n, n)


def write_predictions_csv(path, pred: Prediction, observed: np.ndarray, row_ids=None) -> None:
    T = pred.mean.shape[0]
    row_ids = np.arange(T) if row_ids is None else np.asarray(row_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["row", "dim", "mean", "variance", "observed"])
        for t in range(T):
            for j, d in enumerate(pred.dims):
                w.writerow([int(row_ids[t]), int(d), repr(float(pred.mean[t, j])),
                            repr(float(pred.variance[t, j])), int(bool(observed[t, d]))])
