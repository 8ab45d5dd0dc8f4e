"""Minibatch stochastic-gradient training for all four model variants."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .elbo import DEFAULT_F_SAMPLES, ElboBreakdown, elbo_minibatch
from .encoder import default_architecture
from .kernel import KernelParams, inverse_lengthscales
from .model import GPLVM, ModelVariant

log = logging.getLogger(__name__)


class NonFiniteError(FloatingPointError):
    """Objective or gradient became NaN/inf; ``trace`` holds the iterations so far."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 100
    max_iters: int = 1000
    J: int = 1
    seed: int = 0
    beta: float = 1.0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    n_f_samples: int = DEFAULT_F_SAMPLES

    def validate(self, N: int) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 1 <= self.batch_size <= N:
            raise ValueError(f"batch_size must lie in [1, N={N}], got {self.batch_size}")
        if self.max_iters < 0 or self.J < 1 or self.n_f_samples < 1:
            raise ValueError("max_iters must be >= 0 and J, n_f_samples >= 1")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


@dataclass
class TraceRow:
    iteration: int
    elbo: float
    data_term: float
    kl_x: float
    kl_u: float
    seconds: float


@dataclass
class TrainTrace:
    rows: list = field(default_factory=list)

    def append(self, row: TraceRow) -> None:
        if self.rows and row.iteration <= self.rows[-1].iteration:
            raise ValueError("trace iterations must increase")
        self.rows.append(row)

    @property
    def elbo(self) -> np.ndarray:
        return np.array([r.elbo for r in self.rows])

    def __len__(self) -> int:
        return len(self.rows)

    def to_csv(self, path, include_time: bool = True) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "elbo", "data_term", "kl_x", "kl_u", "seconds"])
            for r in self.rows:
                w.writerow([r.iteration, repr(r.elbo), repr(r.data_term), repr(r.kl_x), repr(r.kl_u),
                            f"{r.seconds:.6f}" if include_time else "0"])


def _check_variant(variant, model: GPLVM) -> ModelVariant:
    variant = ModelVariant.parse(variant)
    if variant is not model.variant:
        raise ValueError(f"objective requested for {variant.value} but the model is {model.variant.value}")
    model.check()
    return variant


def evaluate(model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0, beta: float = 1.0,
             n_f_samples: int = DEFAULT_F_SAMPLES) -> ElboBreakdown:
    return elbo_minibatch(model, Y, mask, batch, J, seed, step, beta, n_f_samples)


def objective(variant, model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0,
              beta: float = 1.0, n_f_samples: int = DEFAULT_F_SAMPLES) -> torch.Tensor:
    """Quantity maximized during training.

    B-SVI and AEB-SVI: full bound with ``beta`` on the latent KL.  MAP: data
    term plus the latent log prior minus the inducing KL.  POINT: data term
    minus the inducing KL.
    """
    _check_variant(variant, model)
    return elbo_minibatch(model, Y, mask, batch, J, seed, step, beta, n_f_samples).total


def _require_grad(params: dict) -> dict:
    flags = {}
    for name, p in params.items():
        if not p.is_leaf:
            raise RuntimeError(f"parameter {name} is not a leaf tensor")
        flags[name] = p.requires_grad
        p.requires_grad_(True)
    return flags


def value_and_gradient(variant, model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0,
                       beta: float = 1.0, n_f_samples: int = DEFAULT_F_SAMPLES):
    """Objective breakdown and its exact gradient under fixed random numbers."""
    _check_variant(variant, model)
    params = model.parameters()
    flags = _require_grad(params)
    try:
        out = elbo_minibatch(model, Y, mask, batch, J, seed, step, beta, n_f_samples)
        grads = torch.autograd.grad(out.total, list(params.values()), allow_unused=True)
    finally:
        for name, p in params.items():
            p.requires_grad_(flags[name])
    result = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g.detach()
        if not bool(torch.all(torch.isfinite(g))):
            raise NonFiniteError(f"non-finite gradient in {name}")
        result[name] = g
    out = ElboBreakdown(out.data_term.detach(), out.kl_x.detach(), out.kl_u.detach(), out.total.detach(),
                        out.scale_applied, out.skipped_rows)
    return out, result


def gradient(variant, model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0,
             beta: float = 1.0, n_f_samples: int = DEFAULT_F_SAMPLES) -> dict:
    """Gradient of :func:`objective` for every trainable tensor, keyed by name."""
    return value_and_gradient(variant, model, Y, mask, batch, J, seed, step, beta, n_f_samples)[1]


def flatten(tensors: dict) -> torch.Tensor:
    return torch.cat([t.reshape(-1) for t in tensors.values()])


def adam_step(state: AdamState, params: dict, grads: dict, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam step in the ascent direction.

    Returns new parameter tensors and the updated state; inputs are untouched.
    """
    b1, b2 = betas
    t = state.step + 1
    new_params, m_new, v_new = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match {name} {tuple(p.shape)}")
        m = b1 * state.m.get(name, torch.zeros_like(p)) + (1 - b1) * g
        v = b2 * state.v.get(name, torch.zeros_like(p)) + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        new_params[name] = (p.detach() + lr * m_hat / (torch.sqrt(v_hat) + eps)).detach()
        m_new[name], v_new[name] = m, v
    return new_params, AdamState(m_new, v_new, t)


def _batches(N: int, B: int, rng: np.random.Generator):
    """Endless epoch-shuffled minibatches of exactly B rows."""
    while True:
        perm = rng.permutation(N)
        for start in range(0, N - B + 1, B):
            yield perm[start:start + B]


def train(model: GPLVM, Y, mask, config: TrainConfig, adam_state: AdamState | None = None,
          callback=None):
    """Run ``config.max_iters`` joint Adam steps; returns (model, trace, adam_state).

    The input model is not modified.  Row n's latent draws at iteration t
    come from the stream (seed, t, n), so runs are reproducible bit for bit.
    """
    Y = torch.as_tensor(np.asarray(Y, dtype=float))
    N = Y.shape[0]
    config.validate(N)
    model = model.copy()
    state = adam_state or AdamState()
    trace = TrainTrace()
    rng = np.random.default_rng([config.seed, 7])
    batches = _batches(N, config.batch_size, rng)
    start = time.perf_counter()
    for it in range(config.max_iters):
        batch = next(batches)
        out, grads = value_and_gradient(model.variant, model, Y, mask, batch, config.J, config.seed,
                                        state.step, config.beta, config.n_f_samples)
        if not math.isfinite(float(out.total)):
            raise NonFiniteError(f"non-finite objective at iteration {it}", trace)
        params, state = adam_step(state, model.parameters(), grads, config.learning_rate, config.betas,
                                  config.eps)
        model.set_parameters(params)
        vals = out.as_floats()
        trace.append(TraceRow(it, vals["elbo"], vals["data_term"], vals["kl_x"], vals["kl_u"],
                              time.perf_counter() - start))
        if callback is not None:
            callback(it, model, out)
    return model, trace, state


@dataclass
class ARDReport:
    ranking: list  # [(dimension, inverse lengthscale)], descending
    k: int
    dominance_ratio: float | None

    def to_dict(self) -> dict:
        return {
            "ranking": [{"dim": d, "inverse_lengthscale": v} for d, v in self.ranking],
            "k": self.k,
            "dominance_ratio": self.dominance_ratio,
        }


def ard_report(kparams: KernelParams, k: int = 2) -> ARDReport:
    """Latent dimensions sorted by relevance, with mean(top k) / mean(rest)."""
    inv = inverse_lengthscales(kparams).detach().numpy()
    order = sorted(range(len(inv)), key=lambda q: (-inv[q], q))
    ranking = [(q, float(inv[q])) for q in order]
    ratio = None
    if 0 < k < len(inv):
        top = np.mean([v for _, v in ranking[:k]])
        rest = np.mean([v for _, v in ranking[k:]])
        ratio = float(top / rest)
    return ARDReport(ranking, k, ratio)


def mlp_param_count(sizes) -> int:
    return sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))


def parameter_census(variant, N: int, D: int, Q: int, M: int, encoder_sizes: dict | None = None):
    """(global, local) variational parameter counts.

    Global counts MQ + MD + M^2 D for q(U) and Z (the full M x M factor, as
    tabulated, rather than its M(M+1)/2 free entries); AEB-SVI adds the two
    encoder networks.
    """
    variant = ModelVariant.parse(variant)
    glob = M * Q + M * D + M * M * D
    if variant is ModelVariant.AEBSVI:
        sizes = encoder_sizes or default_architecture(D, Q)
        return glob + mlp_param_count(sizes["mean"]) + mlp_param_count(sizes["cov"]), 0
    if variant is ModelVariant.BSVI:
        return glob, 2 * N * Q
    return glob, N * Q


def finite_difference_check(model: GPLVM, Y, mask, batch, J: int = 1, seed: int = 0, step: int = 0,
                            beta: float = 1.0, n_f_samples: int = DEFAULT_F_SAMPLES, h: float = 1e-5,
                            corrupt: bool = False) -> dict:
    """Max relative error between autograd and central differences, per parameter block.

    The error for one coordinate is |g - fd| / max(|g|, |fd|, 1e-6 * max(1, |f|)),
    the floor tracking the roundoff of a difference quotient of f; both sides
    use the same random numbers.  ``corrupt`` perturbs the analytic
    gradient and exists only as a negative control.
    """
    grads = gradient(model.variant, model, Y, mask, batch, J, seed, step, beta, n_f_samples)
    if corrupt:
        grads = {k: g * 1.01 + 1e-3 for k, g in grads.items()}
    work = model.copy()
    f0 = float(objective(work.variant, work, Y, mask, batch, J, seed, step, beta, n_f_samples))
    floor = 1e-6 * max(1.0, abs(f0))
    errors = {}
    for name, p in work.parameters().items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        worst = 0.0
        for i in range(flat.numel()):
            orig = float(flat[i])
            vals = []
            for delta in (h, -h):
                with torch.no_grad():
                    flat[i] = orig + delta
                vals.append(float(objective(work.variant, work, Y, mask, batch, J, seed, step, beta,
                                            n_f_samples)))
            with torch.no_grad():
                flat[i] = orig
            fd = (vals[0] - vals[1]) / (2 * h)
            err = abs(float(g[i]) - fd) / max(abs(float(g[i])), abs(fd), floor)
            worst = max(worst, err)
        errors[name] = worst
    return errors
