"""Per-entry observation models."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .kernel import NoiseParams
from .linalg import as_tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class Gaussian:
    noise: NoiseParams

    name = "gaussian"

    @classmethod
    def create(cls, noise_variance: float = 1.0) -> "Gaussian":
        return cls(NoiseParams.create(noise_variance))

    @property
    def variance(self) -> torch.Tensor:
        return self.noise.variance


@dataclass
class Poisson:
    """Counts with rate exp(f)."""

    name = "poisson"


LikelihoodSpec = Gaussian | Poisson


def make_likelihood(name: str, noise_variance: float = 1.0) -> LikelihoodSpec:
    key = name.lower()
    if key == "gaussian":
        return Gaussian.create(noise_variance)
    if key == "poisson":
        return Poisson()
    raise ValueError(f"unknown likelihood {name!r} (expected 'gaussian' or 'poisson')")


def check_counts(y) -> None:
    y = as_tensor(y)
    if torch.any(y < 0) or torch.any(y != torch.round(y)):
        raise ValueError("Poisson observations must be nonnegative integers")


def log_prob(spec: LikelihoodSpec, y, f) -> torch.Tensor:
    y, f = as_tensor(y), as_tensor(f)
    if isinstance(spec, Gaussian):
        var = spec.variance
        return -0.5 * (LOG_2PI + torch.log(var)) - (y - f) ** 2 / (2.0 * var)
    if isinstance(spec, Poisson):
        check_counts(y)
        return y * f - torch.exp(f) - torch.lgamma(y + 1.0)
    raise TypeError(f"unknown likelihood {type(spec).__name__}")
