import math

import numpy as np
import pytest
import torch

from conftest import small_model
from gplvm_svi import variational as var
from gplvm_svi.data_io import synthetic_ppca
from gplvm_svi.elbo import kmm_cholesky, marginal_qf
from gplvm_svi.encoder import encode_batch
from gplvm_svi.model import init_model
from gplvm_svi.predict import LatentPosterior, Prediction, infer_latent_amortized, \
    infer_latent_reoptimize, metrics, reconstruct, training_posterior
from gplvm_svi.predict import TestInferenceConfig as InferCfg
from gplvm_svi.train import TrainConfig, train


@pytest.fixture(scope="module")
def trained_point():
    data, _, _ = synthetic_ppca(60, 5, 2, 0.05, 0)
    model = init_model("point", data.values, data.mask, 2, 10, seed=0)
    model, _, _ = train(model, data.values, data.mask, TrainConfig(learning_rate=0.02, batch_size=30, max_iters=400))
    return model, data


def test_warm_start_does_not_decrease(trained_point):
    model, data = trained_point
    init = LatentPosterior(model.latents.x_hat[3:4].clone())
    _, trace = infer_latent_reoptimize(model, data.values[3:4], None, InferCfg(inner_iters=50, inner_lr=0.005),
                                       init=init, return_trace=True)
    assert trace[-1] >= trace[0] - 1e-9


def test_uninformative_decoder_returns_prior():
    model, Y, mask = small_model("bsvi", seed=0)
    model.kernel.log_signal_variance = torch.tensor(math.log(1e-10), dtype=torch.float64)
    # q(u) = p(u): the predictive is N(0, sigma_f^2) wherever x is
    L = kmm_cholesky(model.kernel, model.inducing.Z)
    model.inducing = var.InducingState.from_factors(model.inducing.Z, torch.zeros_like(model.inducing.m),
                                                    L.expand(3, 4, 4))
    q = infer_latent_reoptimize(model, np.nan_to_num(Y[:2]), None,
                                InferCfg(inner_iters=1500, inner_lr=0.05, J=4))
    assert float(q.mean.abs().max()) < 1e-2
    assert float((q.scale - 1).abs().max()) < 0.05


def test_globals_untouched(trained_point):
    model, data = trained_point
    before = {k: v.clone() for k, v in model.global_parameters().items()}
    infer_latent_reoptimize(model, data.values[:2], None, InferCfg(inner_iters=5))
    assert all(torch.equal(before[k], v) for k, v in model.global_parameters().items())


def test_dimension_mismatch(trained_point):
    model, _ = trained_point
    with pytest.raises(ValueError, match="D="):
        infer_latent_reoptimize(model, np.zeros((1, 4)), None, InferCfg(inner_iters=1))


def test_amortized_matches_encoder_and_repeats():
    model, Y, mask = small_model("aebsvi", seed=1)
    Yf = np.nan_to_num(Y)
    a = infer_latent_amortized(model, Yf)
    b = infer_latent_amortized(model, Yf)
    mu, H = encode_batch(model.encoder, torch.as_tensor(Yf))
    assert torch.equal(a.mean, b.mean) and torch.equal(a.scale, b.scale)
    assert torch.equal(a.mean, mu) and torch.equal(a.scale, H)


def test_reconstruct_point_equals_marginal(trained_point):
    model, _ = trained_point
    x = torch.tensor([[0.3, -0.2]], dtype=torch.float64)
    pred = reconstruct(model, LatentPosterior(x, torch.zeros(1, 2, dtype=torch.float64)), J=5)
    L = kmm_cholesky(model.kernel, model.inducing.Z)
    for d in range(model.D):
        q = marginal_qf(model.kernel, model.inducing, d, x[0], L)
        assert pred.mean[0, d] == pytest.approx(float(q.mean), abs=1e-12)
        assert pred.variance[0, d] == pytest.approx(float(q.variance + model.likelihood.variance), abs=1e-12)


def test_reconstruct_prior_predictive_far_away():
    model, _, _ = small_model("bsvi", seed=2)
    L = kmm_cholesky(model.kernel, model.inducing.Z)
    model.inducing = var.InducingState.from_factors(model.inducing.Z, torch.zeros(3, 4, dtype=torch.float64),
                                                    L.expand(3, 4, 4))
    q = LatentPosterior(torch.tensor([[1e4, 1e4]], dtype=torch.float64), torch.full((1, 2), 1e-3, dtype=torch.float64))
    pred = reconstruct(model, q, J=10)
    ref = float(model.kernel.signal_variance + model.likelihood.variance)
    assert np.allclose(pred.variance, ref, rtol=1e-12)
    assert np.allclose(pred.mean, 0.0)


def test_reconstruct_moments_match_decoder_sampling(trained_point):
    model, _ = trained_point
    q = LatentPosterior(torch.tensor([[0.4, -0.3]], dtype=torch.float64), torch.tensor([[0.5, 0.3]], dtype=torch.float64))
    pred = reconstruct(model, q, J=100_000, seed=1)
    rng = np.random.default_rng(5)
    x = 0.4 + 0.5 * rng.standard_normal(1_000_000), -0.3 + 0.3 * rng.standard_normal(1_000_000)
    X = torch.from_numpy(np.stack(x, 1))
    L = kmm_cholesky(model.kernel, model.inducing.Z)
    from gplvm_svi.elbo import marginal_qf_batch

    with torch.no_grad():
        fm, fv = marginal_qf_batch(model.kernel, model.inducing, X, L)
    s2 = float(model.likelihood.variance)
    y = fm.numpy() + np.sqrt(fv.numpy() + s2) * rng.standard_normal(fm.shape)
    assert np.allclose(pred.mean[0], y.mean(0), rtol=1e-2, atol=1e-2 * np.abs(y.mean(0)).max())
    assert np.allclose(pred.variance[0], y.var(0), rtol=1e-2)


def test_metrics_perfect_prediction():
    Y = np.array([[1.0, 2.0], [3.0, 4.0]])
    pred = Prediction(Y.copy(), np.full(Y.shape, 0.5), np.arange(2))
    m = metrics(Y, np.ones(Y.shape, bool), pred)
    assert m.rmse == 0.0
    assert m.nlpd_mean == pytest.approx(0.5 * math.log(2 * math.pi * 0.5), abs=1e-14)
    assert m.nlpd_sum == pytest.approx(4 * m.nlpd_mean, abs=1e-13)


def test_metrics_constant_predictor(rng):
    Y = rng.standard_normal((6, 3))
    score = rng.random((6, 3)) < 0.7
    pred = Prediction(np.full(Y.shape, Y[score].mean()), np.ones(Y.shape), np.arange(3))
    assert metrics(Y, score, pred).rmse == pytest.approx(Y[score].std(), abs=1e-14)


def test_metrics_by_hand():
    y = np.array([[1.0, -0.5, 2.0, 0.0, 3.5]])
    mu = np.array([[0.5, -0.5, 2.5, 1.0, 3.0]])
    v = np.array([[1.0, 0.25, 2.0, 0.5, 4.0]])
    m = metrics(y, np.ones(y.shape, bool), Prediction(mu, v, np.arange(5)))
    # squared errors 0.25, 0, 0.25, 1, 0.25 -> mse 0.35
    assert m.rmse == pytest.approx(math.sqrt(0.35), abs=1e-15)
    nlpd = sum(0.5 * math.log(2 * math.pi * vi) + (yi - mi) ** 2 / (2 * vi) for yi, mi, vi in zip(y[0], mu[0], v[0]))
    assert m.nlpd_sum == pytest.approx(nlpd, abs=1e-13)
    assert m.n_scored == 5


def test_poisson_reconstruction_and_scoring():
    model, Y, mask = small_model("bsvi", "poisson", seed=3)
    q = training_posterior(model)
    pred = reconstruct(model, q, J=20, n_f_samples=8)
    assert pred.log_rate_samples.shape == (20 * 8, 8, 3)
    assert np.all(pred.variance >= pred.mean)
    m = metrics(np.nan_to_num(Y), mask, pred, "poisson")
    assert np.isfinite(m.nlpd_sum) and m.n_scored == int(mask.sum())


def test_noiseless_round_trip():
    data, _, _ = synthetic_ppca(100, 6, 2, 0.0, 1)
    model = init_model("bsvi", data.values, data.mask, 2, 15, seed=1)
    model, _, _ = train(model, data.values, data.mask, TrainConfig(learning_rate=0.02, batch_size=50, max_iters=1500, seed=1))
    y = data.values[:5]
    q = infer_latent_reoptimize(model, y, None, InferCfg(inner_iters=500, inner_lr=0.05, seed=2))
    pred = reconstruct(model, q, decode_mean=True)
    rmse = float(np.sqrt(np.mean((pred.mean - y) ** 2)))
    assert rmse < 3 * math.sqrt(float(model.likelihood.variance))
