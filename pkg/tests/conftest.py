import numpy as np
import pytest
import torch

from gplvm_svi import variational as var
from gplvm_svi.kernel import KernelParams
from gplvm_svi.likelihoods import Gaussian
from gplvm_svi.model import init_model


def random_inducing(rng, M, D, Q, scale=0.5):
    Z = torch.from_numpy(rng.standard_normal((M, Q)))
    m = torch.from_numpy(rng.standard_normal((D, M)))
    L = torch.from_numpy(np.tril(scale * rng.standard_normal((D, M, M))))
    idx = np.arange(M)
    L[:, idx, idx] = torch.from_numpy(np.abs(rng.standard_normal((D, M))) * scale + 0.1)
    return var.InducingState.from_factors(Z, m, L)


def random_kernel(rng, Q):
    return KernelParams.create(np.exp(0.3 * rng.standard_normal(Q)) * 1.2, float(np.exp(0.3 * rng.standard_normal())))


def small_model(variant, likelihood="gaussian", N=8, D=3, Q=2, M=4, seed=0, missing=0.0):
    """Randomly initialized model with perturbed globals on random data."""
    rng = np.random.default_rng(seed)
    if likelihood == "poisson":
        Y = rng.poisson(3.0, size=(N, D)).astype(float)
    else:
        Y = rng.standard_normal((N, D))
    mask = rng.random((N, D)) >= missing
    mask[np.arange(N), rng.integers(0, D, N)] = True
    model = init_model(variant, Y, mask, Q, M, likelihood, seed, policy="zero-fill")
    model.kernel = random_kernel(rng, Q)
    model.inducing = random_inducing(rng, M, D, Q)
    if likelihood == "gaussian":
        model.likelihood = Gaussian.create(0.3)
    return model, np.where(mask, Y, np.nan), mask


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
