"""Amortised back-constraint: two tanh MLPs mapping a data row to q(x_n).

The mean network outputs ``mu_n`` (Q values); the covariance network outputs
Q*Q values reshaped into a factor ``H_n`` so that Cov[x_n] = H_n H_n^T.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .linalg import as_tensor

IMPUTATION_POLICIES = ("zero-fill", "mean-fill", "reject")
ACTIVATIONS = {"tanh": torch.tanh}


@dataclass
class EncoderParams:
    mean_layers: list  # [(W (in, out), b (out,)), ...]
    cov_layers: list
    activation: str = "tanh"
    fill_values: torch.Tensor | None = field(default=None)  # column means for mean-fill

    @property
    def D(self) -> int:
        return self.mean_layers[0][0].shape[0]

    @property
    def Q(self) -> int:
        return self.mean_layers[-1][0].shape[1]

    @property
    def mean_sizes(self) -> list[int]:
        return [self.mean_layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.mean_layers]

    @property
    def cov_sizes(self) -> list[int]:
        return [self.cov_layers[0][0].shape[0]] + [W.shape[1] for W, _ in self.cov_layers]

    def tensors(self):
        """(name, tensor) pairs for every weight and bias."""
        for net, layers in (("mean", self.mean_layers), ("cov", self.cov_layers)):
            for i, (W, b) in enumerate(layers):
                yield f"encoder.{net}.{i}.W", W
                yield f"encoder.{net}.{i}.b", b

    def n_params(self) -> int:
        return sum(t.numel() for _, t in self.tensors())


def default_architecture(D: int, Q: int) -> dict:
    """Layer sizes for both networks.

    Covariance hidden width is floor((D + Q^2) / 2).  Mean hidden widths are
    (10, 5) shrunk to D for narrow data and never below Q.
    """
    if D < 1 or Q < 1:
        raise ValueError("D and Q must be positive")
    g = (D + Q * Q) // 2
    h1 = max(min(10, D), Q)
    h2 = max(min(5, D), Q)
    return {"mean": [D, h1, h2, Q], "cov": [D, g, g, Q * Q]}


def _init_mlp(sizes, rng: np.random.Generator) -> list:
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        W = torch.from_numpy(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        layers.append((W, torch.zeros(fan_out, dtype=torch.float64)))
    return layers


def init_encoder(D: int, Q: int, rng: np.random.Generator, mean_hidden=None, cov_hidden=None,
                 init_scale: float = 0.1) -> EncoderParams:
    """Random encoder; the covariance output bias starts at ``init_scale * I``.

    A zero output bias would leave H H^T near singular at the first step.
    """
    arch = default_architecture(D, Q)
    mean_sizes = [D, *mean_hidden, Q] if mean_hidden else arch["mean"]
    cov_sizes = [D, *cov_hidden, Q * Q] if cov_hidden else arch["cov"]
    mean_layers = _init_mlp(mean_sizes, rng)
    cov_layers = _init_mlp(cov_sizes, rng)
    W, _ = cov_layers[-1]
    cov_layers[-1] = (W, init_scale * torch.eye(Q, dtype=torch.float64).reshape(-1))
    return EncoderParams(mean_layers, cov_layers)


def _mlp(layers, x: torch.Tensor, activation: str) -> torch.Tensor:
    act = ACTIVATIONS[activation]
    h = x
    for i, (W, b) in enumerate(layers):
        h = h @ W + b
        if i < len(layers) - 1:
            h = act(h)
    return h


def impute(params: EncoderParams, Y: torch.Tensor, mask, policy: str) -> torch.Tensor:
    if policy not in IMPUTATION_POLICIES:
        raise ValueError(f"unknown imputation policy {policy!r}")
    if mask is None:
        return Y
    mask = torch.as_tensor(np.asarray(mask, dtype=bool))
    if bool(mask.all()):
        return Y
    if policy == "reject":
        raise ValueError("encoder input has missing entries and the imputation policy is 'reject'")
    if policy == "zero-fill":
        warnings.warn("zero-filling missing encoder inputs", stacklevel=3)
        return torch.where(mask, Y, torch.zeros((), dtype=Y.dtype))
    fill = params.fill_values
    if fill is None:
        raise ValueError("mean-fill needs column means set on the encoder (fill_values)")
    return torch.where(mask, Y, fill.expand_as(Y))


def encode_batch(params: EncoderParams, Y, mask=None, policy: str = "zero-fill"):
    """Encode rows ``Y`` (B, D) into means (B, Q) and factors H (B, Q, Q)."""
    Y = as_tensor(Y)
    if mask is not None:
        # masked cells may hold NaN; they must never reach the network
        Y = torch.where(torch.as_tensor(np.asarray(mask, dtype=bool)), Y, torch.zeros((), dtype=Y.dtype))
    if Y.shape[-1] != params.D:
        raise ValueError(f"encoder expects D={params.D} inputs, got {Y.shape[-1]}")
    Yt = impute(params, Y, mask, policy)
    Q = params.Q
    mu = _mlp(params.mean_layers, Yt, params.activation)
    H = _mlp(params.cov_layers, Yt, params.activation).reshape(*Yt.shape[:-1], Q, Q)
    return mu, H


def encode(params: EncoderParams, y, mask=None, policy: str = "zero-fill"):
    """Encode a single D-vector into (mu, H)."""
    mu, H = encode_batch(params, as_tensor(y).reshape(1, -1),
                         None if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1), policy)
    return mu[0], H[0]


def encoder_to_dict(params: EncoderParams) -> dict:
    def dump(layers):
        return [{"W": W.detach().tolist(), "b": b.detach().tolist()} for W, b in layers]

    return {
        "activation": params.activation,
        "mean_sizes": params.mean_sizes,
        "cov_sizes": params.cov_sizes,
        "mean_layers": dump(params.mean_layers),
        "cov_layers": dump(params.cov_layers),
        "fill_values": None if params.fill_values is None else params.fill_values.tolist(),
    }


def encoder_from_dict(d: dict) -> EncoderParams:
    def load(layers, sizes):
        out = [(torch.tensor(l["W"], dtype=torch.float64).reshape(a, b),
                torch.tensor(l["b"], dtype=torch.float64).reshape(b))
               for l, a, b in zip(layers, sizes[:-1], sizes[1:])]
        if len(out) != len(sizes) - 1:
            raise ValueError("layer list does not match the recorded layer sizes")
        return out

    if d.get("activation") not in ACTIVATIONS:
        raise ValueError(f"unsupported activation {d.get('activation')!r}")
    fill = d.get("fill_values")
    return EncoderParams(
        load(d["mean_layers"], d["mean_sizes"]),
        load(d["cov_layers"], d["cov_sizes"]),
        d["activation"],
        None if fill is None else torch.tensor(fill, dtype=torch.float64),
    )


def save_encoder(params: EncoderParams, path) -> None:
    with open(path, "w") as fh:
        json.dump(encoder_to_dict(params), fh)


def load_encoder(path) -> EncoderParams:
    with open(path) as fh:
        return encoder_from_dict(json.load(fh))
