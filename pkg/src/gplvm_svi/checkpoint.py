"""Single-file JSON checkpoints.

JSON keeps float64 values exact (shortest round-trip repr) and makes the
file byte-for-byte reproducible for a fixed run.
"""
from __future__ import annotations

import json

import torch

from . import variational as var
from .encoder import encoder_from_dict, encoder_to_dict
from .kernel import KernelParams, NoiseParams
from .likelihoods import Gaussian, Poisson
from .model import GPLVM, ModelVariant
from .train import AdamState

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _t(x) -> torch.Tensor:
    return torch.tensor(x, dtype=torch.float64)


def model_to_dict(model: GPLVM) -> dict:
    lat = model.latents
    if isinstance(lat, var.PointLatents):
        latents = {"type": "point", "x_hat": lat.x_hat.detach().tolist()}
    elif isinstance(lat, var.DiagGaussianLatents):
        latents = {"type": "diag_gaussian", "mu": lat.mu.detach().tolist(), "log_s": lat.log_s.detach().tolist()}
    else:
        latents = {"type": "amortised", "policy": lat.policy, "encoder": encoder_to_dict(lat.encoder)}
    out = {
        "variant": model.variant.value,
        "Q": model.Q,
        "M": model.M,
        "D": model.D,
        "kernel": {
            "log_lengthscales": model.kernel.log_lengthscales.detach().tolist(),
            "log_signal_variance": float(model.kernel.log_signal_variance),
        },
        "likelihood": {"name": model.likelihood.name},
        "inducing": {
            "Z": model.inducing.Z.detach().tolist(),
            "m": model.inducing.m.detach().tolist(),
            "L_raw": model.inducing.L_raw.detach().tolist(),
        },
        "latents": latents,
    }
    if isinstance(model.likelihood, Gaussian):
        out["likelihood"]["log_noise_variance"] = float(model.likelihood.noise.log_noise_variance)
    return out


def model_from_dict(d: dict) -> GPLVM:
    try:
        kernel = KernelParams(_t(d["kernel"]["log_lengthscales"]), _t(d["kernel"]["log_signal_variance"]))
        lik_d = d["likelihood"]
        if lik_d["name"] == "gaussian":
            lik = Gaussian(NoiseParams(_t(lik_d["log_noise_variance"])))
        elif lik_d["name"] == "poisson":
            lik = Poisson()
        else:
            raise CheckpointError(f"unknown likelihood {lik_d['name']!r}")
        Q, M, D = d["Q"], d["M"], d["D"]
        ind = d["inducing"]
        inducing = var.InducingState(_t(ind["Z"]).reshape(M, Q), _t(ind["m"]).reshape(D, M),
                                     _t(ind["L_raw"]).reshape(D, M, M))
        lat = d["latents"]
        if lat["type"] == "point":
            latents = var.PointLatents(_t(lat["x_hat"]).reshape(-1, Q))
        elif lat["type"] == "diag_gaussian":
            latents = var.DiagGaussianLatents(_t(lat["mu"]).reshape(-1, Q), _t(lat["log_s"]).reshape(-1, Q))
        else:
            latents = var.AmortisedLatents(encoder_from_dict(lat["encoder"]), lat["policy"])
        return GPLVM(ModelVariant.parse(d["variant"]), kernel, lik, inducing, latents)
    except (KeyError, TypeError, RuntimeError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc


def adam_to_dict(state: AdamState) -> dict:
    return {
        "step": state.step,
        "m": {k: v.tolist() for k, v in state.m.items()},
        "v": {k: v.tolist() for k, v in state.v.items()},
    }


def adam_from_dict(d: dict, model: GPLVM) -> AdamState:
    shapes = {k: p.shape for k, p in model.parameters().items()}
    return AdamState(
        {k: _t(v).reshape(shapes[k]) for k, v in d["m"].items()},
        {k: _t(v).reshape(shapes[k]) for k, v in d["v"].items()},
        int(d["step"]),
    )


def save_checkpoint(path, model: GPLVM, adam: AdamState | None = None, config: dict | None = None,
                    extra: dict | None = None) -> None:
    payload = {
        "format_version": FORMAT_VERSION,
        "model": model_to_dict(model),
        "adam": adam_to_dict(adam or AdamState()),
        "config": config or {},
        "extra": extra or {},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, adam_state, config, extra)."""
    with open(path) as fh:
        try:
            payload = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: not a checkpoint ({exc})") from exc
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint format version {version!r}")
    model = model_from_dict(payload["model"])
    adam = adam_from_dict(payload["adam"], model)
    return model, adam, payload.get("config", {}), payload.get("extra", {})
