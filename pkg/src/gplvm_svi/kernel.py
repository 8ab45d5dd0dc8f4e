"""Squared-exponential kernel with one lengthscale per latent dimension."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .linalg import as_tensor


@dataclass
class KernelParams:
    """SE-ARD hyperparameters, stored in the log domain.

    A single instance is shared by all D output GPs.
    """

    log_lengthscales: torch.Tensor
    log_signal_variance: torch.Tensor

    @classmethod
    def create(cls, lengthscales, signal_variance=1.0) -> "KernelParams":
        ls = as_tensor(lengthscales).reshape(-1)
        if torch.any(ls <= 0) or signal_variance <= 0:
            raise ValueError("lengthscales and signal variance must be positive")
        return cls(torch.log(ls).clone(), torch.log(as_tensor(signal_variance)).reshape(()).clone())

    @property
    def Q(self) -> int:
        return self.log_lengthscales.shape[0]

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def signal_variance(self) -> torch.Tensor:
        return torch.exp(self.log_signal_variance)


@dataclass
class NoiseParams:
    """Gaussian observation noise shared across all N and D."""

    log_noise_variance: torch.Tensor

    @classmethod
    def create(cls, noise_variance=1.0) -> "NoiseParams":
        if noise_variance <= 0:
            raise ValueError("noise variance must be positive")
        return cls(torch.log(as_tensor(noise_variance)).reshape(()).clone())

    @property
    def variance(self) -> torch.Tensor:
        return torch.exp(self.log_noise_variance)


def _check_dims(params: KernelParams, *arrays: torch.Tensor) -> None:
    for a in arrays:
        if a.shape[-1] != params.Q:
            raise ValueError(
                f"dimension mismatch: kernel has Q={params.Q}, input has {a.shape[-1]} columns"
            )


def kernel_eval(params: KernelParams, x, x2) -> torch.Tensor:
    x, x2 = as_tensor(x), as_tensor(x2)
    _check_dims(params, x, x2)
    r = (x - x2) / params.lengthscales
    return params.signal_variance * torch.exp(-0.5 * (r * r).sum(-1))


def cross_cov(params: KernelParams, A, B) -> torch.Tensor:
    """Kernel matrix between the rows of ``A`` (..., N, Q) and ``B`` (..., M, Q).

    Distances are formed from explicit differences rather than the expanded
    quadratic so ``cross_cov(A, A)`` has an exact diagonal.
    """
    A, B = as_tensor(A), as_tensor(B)
    _check_dims(params, A, B)
    ls = params.lengthscales
    diff = (A.unsqueeze(-2) - B.unsqueeze(-3)) / ls
    return params.signal_variance * torch.exp(-0.5 * (diff * diff).sum(-1))


def kernel_diag(params: KernelParams, A) -> torch.Tensor:
    A = as_tensor(A)
    _check_dims(params, A)
    return params.signal_variance.expand(A.shape[:-1])


def inverse_lengthscales(params: KernelParams) -> torch.Tensor:
    return torch.exp(-params.log_lengthscales)
