"""Variational families over latents q(X) and inducing outputs q(U).

Three latent representations are supported: point estimates (POINT and MAP
models), per-point diagonal Gaussians (B-SVI) and an encoder producing a mean
and a dense covariance factor per data row (AEB-SVI).
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence, Union

import numpy as np
import torch

from .linalg import as_tensor, cholesky_with_jitter, logdet_from_chol, tri_solve

if TYPE_CHECKING:
    from .encoder import EncoderParams

DENSE_COV_FLOOR = 1e-6
INIT_LATENT_SCALE = 0.1
INIT_INDUCING_SCALE = 0.1


@dataclass
class PointLatents:
    x_hat: torch.Tensor  # (N, Q)

    @property
    def N(self) -> int:
        return self.x_hat.shape[0]

    @property
    def Q(self) -> int:
        return self.x_hat.shape[1]


@dataclass
class DiagGaussianLatents:
    mu: torch.Tensor  # (N, Q)
    log_s: torch.Tensor  # (N, Q), log standard deviations

    @property
    def N(self) -> int:
        return self.mu.shape[0]

    @property
    def Q(self) -> int:
        return self.mu.shape[1]


@dataclass
class AmortisedLatents:
    encoder: EncoderParams
    policy: str = "zero-fill"

    @property
    def Q(self) -> int:
        return self.encoder.Q


LatentState = Union[PointLatents, DiagGaussianLatents, AmortisedLatents]


@dataclass
class InducingState:
    """Inducing inputs and the Gaussian q(u_d) = N(m_d, S_d) per output.

    ``L_raw`` is an unconstrained (D, M, M) tensor; its strictly lower part
    and the exponential of its diagonal form the Cholesky factor of ``S_d``.
    """

    Z: torch.Tensor  # (M, Q)
    m: torch.Tensor  # (D, M)
    L_raw: torch.Tensor  # (D, M, M)

    @classmethod
    def from_factors(cls, Z, m, L_S) -> "InducingState":
        L_S = as_tensor(L_S)
        diag = torch.diagonal(L_S, dim1=-2, dim2=-1)
        if torch.any(diag <= 0):
            raise ValueError("factor diagonals must be strictly positive")
        raw = torch.tril(L_S, -1) + torch.diag_embed(torch.log(diag))
        return cls(as_tensor(Z).clone(), as_tensor(m).clone(), raw.clone())

    @property
    def M(self) -> int:
        return self.Z.shape[0]

    @property
    def D(self) -> int:
        return self.m.shape[0]

    @property
    def L_S(self) -> torch.Tensor:
        return torch.tril(self.L_raw, -1) + torch.diag_embed(
            torch.exp(torch.diagonal(self.L_raw, dim1=-2, dim2=-1))
        )

    @property
    def S(self) -> torch.Tensor:
        L = self.L_S
        return L @ L.transpose(-1, -2)


@dataclass
class LatentSampleBatch:
    samples: torch.Tensor  # (J, B, Q)
    epsilons: torch.Tensor  # (J, B, Q)


def point_normals(seed: int, step: int, rows: Sequence[int], shape: tuple, stream: int = 0) -> torch.Tensor:
    """Standard normals of ``shape`` for each row, keyed on (seed, step, row, stream).

    Each row owns its own stream, so the draw for a data point does not
    depend on which other rows share its minibatch.
    """
    out = np.empty((len(rows),) + tuple(shape))
    for i, r in enumerate(rows):
        out[i] = np.random.default_rng([seed, step, int(r), stream]).standard_normal(shape)
    return torch.from_numpy(out)


def latent_moments(state: LatentState, rows, data_rows=None, mask_rows=None):
    """Mean and scale of q(x_n) for the given rows.

    The scale is ``None`` for point latents, a (B, Q) standard deviation for
    diagonal Gaussians and a (B, Q, Q) factor ``H`` for amortised latents.
    """
    rows = torch.as_tensor(np.asarray(rows, dtype=np.int64))
    if isinstance(state, PointLatents):
        _check_rows(rows, state.N)
        return state.x_hat[rows], None
    if isinstance(state, DiagGaussianLatents):
        _check_rows(rows, state.N)
        return state.mu[rows], torch.exp(state.log_s[rows])
    if isinstance(state, AmortisedLatents):
        if data_rows is None:
            raise ValueError("amortised latents need the data rows to encode")
        from .encoder import encode_batch

        return encode_batch(state.encoder, data_rows, mask_rows, state.policy)
    raise TypeError(f"unknown latent state {type(state).__name__}")


def _check_rows(rows: torch.Tensor, N: int) -> None:
    if rows.numel() and (int(rows.min()) < 0 or int(rows.max()) >= N):
        raise IndexError(f"row index out of range for N={N}")


def reparameterize(mean: torch.Tensor, scale, eps: torch.Tensor) -> torch.Tensor:
    """x = mean + scale * eps for eps of shape (J, B, Q)."""
    if scale is None:
        return mean.unsqueeze(0).expand(eps.shape[0], *mean.shape)
    if scale.dim() == mean.dim():
        return mean + scale * eps
    return mean + torch.einsum("bqr,jbr->jbq", scale, eps)


def sample_latents(state: LatentState, rows, J: int, rng: np.random.Generator | None = None,
                   data_rows=None, mask_rows=None, eps=None) -> LatentSampleBatch:
    """Reparameterized draws x = mu + s * eps (or mu + H eps) for each row."""
    if J < 1:
        raise ValueError("J must be at least 1")
    mean, scale = latent_moments(state, rows, data_rows, mask_rows)
    B, Q = mean.shape
    if scale is None:
        eps = torch.zeros(J, B, Q, dtype=torch.float64)
    elif eps is None:
        if rng is None:
            raise ValueError("a seeded generator is required for stochastic latents")
        eps = torch.from_numpy(rng.standard_normal((J, B, Q)))
    return LatentSampleBatch(reparameterize(mean, scale, eps), eps)


def kl_x_diag(mu, log_s) -> torch.Tensor:
    """KL(N(mu, diag(s^2)) || N(0, I)), summed over the last axis."""
    mu, log_s = as_tensor(mu), as_tensor(log_s)
    s2 = torch.exp(2.0 * log_s)
    return 0.5 * (s2 + mu * mu - 1.0 - 2.0 * log_s).sum(-1)


def dense_cov_chol(H, floor: float = DENSE_COV_FLOOR) -> torch.Tensor:
    H = as_tensor(H)
    Q = H.shape[-1]
    cov = H @ H.transpose(-1, -2) + floor * torch.eye(Q, dtype=H.dtype)
    L, info = torch.linalg.cholesky_ex(cov)
    if bool(torch.any(info != 0)):
        L, _ = cholesky_with_jitter(cov)
    return L


def kl_x_dense(mu, H, floor: float = DENSE_COV_FLOOR) -> torch.Tensor:
    """KL(N(mu, H H^T + floor I) || N(0, I)); batched over leading axes."""
    mu, H = as_tensor(mu), as_tensor(H)
    Q = H.shape[-1]
    L = dense_cov_chol(H, floor)
    trace = (L * L).sum((-1, -2))
    return 0.5 * (trace + (mu * mu).sum(-1) - Q - logdet_from_chol(L))


def kl_u_all(inducing: InducingState, K_mm_chol: torch.Tensor) -> torch.Tensor:
    """KL(q(u_d) || N(0, K_mm)) for every output d, shape (D,)."""
    M = inducing.M
    L_S = inducing.L_S
    A = tri_solve(K_mm_chol, L_S)  # (D, M, M)
    trace = (A * A).sum((-1, -2))
    a = tri_solve(K_mm_chol, inducing.m.transpose(0, 1))  # (M, D)
    maha = (a * a).sum(0)
    logdet_S = 2.0 * torch.diagonal(inducing.L_raw, dim1=-2, dim2=-1).sum(-1)
    return 0.5 * (trace + maha - M + logdet_from_chol(K_mm_chol) - logdet_S)


def kl_u(inducing: InducingState, K_mm_chol: torch.Tensor, d: int) -> torch.Tensor:
    return kl_u_all(inducing, K_mm_chol)[d]


def log_prior_x(x) -> torch.Tensor:
    """log N(x; 0, I) summed over the last axis."""
    x = as_tensor(x)
    Q = x.shape[-1]
    return -0.5 * (x * x).sum(-1) - 0.5 * Q * math.log(2.0 * math.pi)


def init_point_latents(N: int, Q: int, rng: np.random.Generator) -> PointLatents:
    return PointLatents(torch.from_numpy(rng.standard_normal((N, Q))))


def init_diag_latents(N: int, Q: int, rng: np.random.Generator) -> DiagGaussianLatents:
    mu = torch.from_numpy(rng.standard_normal((N, Q)))
    return DiagGaussianLatents(mu, torch.full((N, Q), math.log(INIT_LATENT_SCALE), dtype=torch.float64))


def init_inducing(latent_means: torch.Tensor, M: int, D: int, rng: np.random.Generator) -> InducingState:
    """Z from a random subset of the latent means, m = 0, S_d = 0.01 I."""
    N, Q = latent_means.shape
    take = min(M, N)
    idx = rng.choice(N, size=take, replace=False)
    Z = latent_means.detach()[torch.as_tensor(idx)].clone()
    if M > N:
        Z = torch.cat([Z, torch.from_numpy(rng.standard_normal((M - N, Q)))])
    m = torch.zeros(D, M, dtype=torch.float64)
    L = INIT_INDUCING_SCALE * torch.eye(M, dtype=torch.float64).expand(D, M, M)
    return InducingState.from_factors(Z, m, L)


def latent_summary(state: LatentState, data_rows=None, mask_rows=None):
    """Per-row (mu, s) arrays for export; point latents report s = 0."""
    if isinstance(state, PointLatents):
        x = state.x_hat.detach()
        return x.numpy().copy(), np.zeros(tuple(x.shape))
    if isinstance(state, DiagGaussianLatents):
        return state.mu.detach().numpy().copy(), torch.exp(state.log_s.detach()).numpy()
    with torch.no_grad():
        mu, H = latent_moments(state, np.arange(len(data_rows)), data_rows, mask_rows)
        cov = H @ H.transpose(-1, -2) + DENSE_COV_FLOOR * torch.eye(H.shape[-1], dtype=H.dtype)
        s = torch.sqrt(torch.diagonal(cov, dim1=-2, dim2=-1))
    return mu.numpy().copy(), s.numpy()


def write_latents_csv(path, mu: np.ndarray, s: np.ndarray) -> None:
    N, Q = mu.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index"] + [f"mu_{q + 1}" for q in range(Q)] + [f"s_{q + 1}" for q in range(Q)])
        for n in range(N):
            w.writerow([n] + [repr(float(v)) for v in mu[n]] + [repr(float(v)) for v in s[n]])


def read_latents_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    Q = (len(header) - 1) // 2
    arr = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), 2 * Q)
    return arr[:, :Q], arr[:, Q:]
