"""Model state shared by the objective, the trainer and prediction."""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import torch

from . import variational as var
from .encoder import EncoderParams, init_encoder
from .kernel import KernelParams
from .likelihoods import Gaussian, LikelihoodSpec, Poisson, make_likelihood


class ModelVariant(str, enum.Enum):
    POINT = "point"
    MAP = "map"
    BSVI = "bsvi"
    AEBSVI = "aebsvi"

    @classmethod
    def parse(cls, value) -> "ModelVariant":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "")
        for v in cls:
            if v.value == key:
                return v
        raise ValueError(f"unknown model variant {value!r} (expected point, map, bsvi or aebsvi)")


_LATENT_TYPES = {
    ModelVariant.POINT: var.PointLatents,
    ModelVariant.MAP: var.PointLatents,
    ModelVariant.BSVI: var.DiagGaussianLatents,
    ModelVariant.AEBSVI: var.AmortisedLatents,
}


@dataclass
class GPLVM:
    variant: ModelVariant
    kernel: KernelParams
    likelihood: LikelihoodSpec
    inducing: var.InducingState
    latents: var.LatentState

    def __post_init__(self):
        self.variant = ModelVariant.parse(self.variant)
        self.check()

    def check(self) -> None:
        expected = _LATENT_TYPES[self.variant]
        if not isinstance(self.latents, expected):
            raise TypeError(
                f"variant {self.variant.value} needs {expected.__name__} latents, "
                f"got {type(self.latents).__name__}"
            )
        Q = self.kernel.Q
        if self.latents.Q != Q or self.inducing.Z.shape[1] != Q:
            raise ValueError("latent dimensionality mismatch between kernel, latents and inducing inputs")

    @property
    def Q(self) -> int:
        return self.kernel.Q

    @property
    def D(self) -> int:
        return self.inducing.D

    @property
    def M(self) -> int:
        return self.inducing.M

    @property
    def encoder(self) -> EncoderParams | None:
        return self.latents.encoder if isinstance(self.latents, var.AmortisedLatents) else None

    def global_parameters(self) -> dict[str, torch.Tensor]:
        params = {
            "kernel.log_lengthscales": self.kernel.log_lengthscales,
            "kernel.log_signal_variance": self.kernel.log_signal_variance,
        }
        if isinstance(self.likelihood, Gaussian):
            params["likelihood.log_noise_variance"] = self.likelihood.noise.log_noise_variance
        params["inducing.Z"] = self.inducing.Z
        params["inducing.m"] = self.inducing.m
        params["inducing.L_raw"] = self.inducing.L_raw
        if self.encoder is not None:
            params.update(dict(self.encoder.tensors()))
        return params

    def local_parameters(self) -> dict[str, torch.Tensor]:
        if isinstance(self.latents, var.PointLatents):
            return {"latents.x_hat": self.latents.x_hat}
        if isinstance(self.latents, var.DiagGaussianLatents):
            return {"latents.mu": self.latents.mu, "latents.log_s": self.latents.log_s}
        return {}

    def parameters(self) -> dict[str, torch.Tensor]:
        """Every trainable tensor, in a fixed order."""
        return {**self.global_parameters(), **self.local_parameters()}

    def set_parameters(self, values: dict[str, torch.Tensor]) -> None:
        """Replace tensors by name (used by the optimizer and checkpoint loader)."""
        for name, value in values.items():
            self._set(name, value)

    def _set(self, name: str, value: torch.Tensor) -> None:
        head, _, rest = name.partition(".")
        if head == "kernel":
            setattr(self.kernel, rest, value)
        elif head == "likelihood":
            self.likelihood.noise.log_noise_variance = value
        elif head == "inducing":
            setattr(self.inducing, rest, value)
        elif head == "latents":
            setattr(self.latents, rest, value)
        elif head == "encoder":
            net, idx, kind = rest.split(".")
            layers = self.encoder.mean_layers if net == "mean" else self.encoder.cov_layers
            W, b = layers[int(idx)]
            layers[int(idx)] = (value, b) if kind == "W" else (W, value)
        else:
            raise KeyError(name)

    def copy(self) -> "GPLVM":
        """Deep copy with detached tensors."""
        clone = _clone_structure(self)
        clone.set_parameters({k: v.detach().clone() for k, v in self.parameters().items()})
        return clone


def _clone_structure(model: GPLVM) -> GPLVM:
    kernel = KernelParams(model.kernel.log_lengthscales, model.kernel.log_signal_variance)
    if isinstance(model.likelihood, Gaussian):
        from .kernel import NoiseParams

        lik = Gaussian(NoiseParams(model.likelihood.noise.log_noise_variance))
    else:
        lik = Poisson()
    ind = var.InducingState(model.inducing.Z, model.inducing.m, model.inducing.L_raw)
    lat = model.latents
    if isinstance(lat, var.PointLatents):
        lat = var.PointLatents(lat.x_hat)
    elif isinstance(lat, var.DiagGaussianLatents):
        lat = var.DiagGaussianLatents(lat.mu, lat.log_s)
    else:
        enc = lat.encoder
        fill = None if enc.fill_values is None else enc.fill_values.clone()
        lat = var.AmortisedLatents(
            EncoderParams(list(enc.mean_layers), list(enc.cov_layers), enc.activation, fill), lat.policy
        )
    return GPLVM(model.variant, kernel, lik, ind, lat)


def _observed_variance(Y: np.ndarray, mask: np.ndarray) -> float:
    vals = Y[mask]
    return float(np.var(vals)) if vals.size > 1 else 1.0


def init_model(variant, Y, mask, Q: int, M: int, likelihood="gaussian", seed: int = 0,
               noise_variance: float | None = None, policy: str = "zero-fill",
               mean_hidden=None, cov_hidden=None) -> GPLVM:
    """Random initialization of every parameter block for a data matrix ``Y``.

    Latent means are i.i.d. N(0, 1) and Z is a random subset of them; for the
    amortised variant Z is a subset of fresh N(0, 1) draws.
    """
    variant = ModelVariant.parse(variant)
    Y = np.asarray(Y, dtype=float)
    N, D = Y.shape
    mask = np.ones((N, D), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    rng = np.random.default_rng(seed)
    if isinstance(likelihood, str):
        if likelihood.lower() == "gaussian" and noise_variance is None:
            noise_variance = max(0.1 * _observed_variance(Y, mask), 1e-4)
        lik = make_likelihood(likelihood, noise_variance if noise_variance is not None else 1.0)
    else:
        lik = likelihood
    kernel = KernelParams(torch.zeros(Q, dtype=torch.float64), torch.zeros((), dtype=torch.float64))
    if variant in (ModelVariant.POINT, ModelVariant.MAP):
        latents = var.init_point_latents(N, Q, rng)
        means = latents.x_hat
    elif variant is ModelVariant.BSVI:
        latents = var.init_diag_latents(N, Q, rng)
        means = latents.mu
    else:
        enc = init_encoder(D, Q, rng, mean_hidden, cov_hidden)
        if policy == "mean-fill":
            col = np.array([Y[mask[:, d], d].mean() if mask[:, d].any() else 0.0 for d in range(D)])
            enc.fill_values = torch.from_numpy(col)
        latents = var.AmortisedLatents(enc, policy)
        # untrained encoder means collapse to a tight cluster; use prior draws instead
        means = torch.from_numpy(rng.standard_normal((N, Q)))
    inducing = var.init_inducing(means, M, D, rng)
    return GPLVM(variant, kernel, lik, inducing, latents)
