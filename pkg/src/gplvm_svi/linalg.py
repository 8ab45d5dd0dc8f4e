"""Dense linear algebra helpers with a jitter-escalating Cholesky.

Everything here works on float64 torch tensors and is differentiable, so the
ELBO can backpropagate through ``K_mm`` factorizations.
"""
from __future__ import annotations

import torch

MAX_JITTER_ESCALATIONS = 6


class CholeskyError(RuntimeError):
    """Raised when a matrix stays indefinite after every jitter escalation."""


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == torch.float64 else a.to(torch.float64)
    return torch.as_tensor(a, dtype=torch.float64)


def default_jitter(A: torch.Tensor) -> float:
    """Base jitter of 1e-6 times the mean diagonal of ``A``."""
    diag = torch.diagonal(A.detach(), dim1=-2, dim2=-1)
    return 1e-6 * max(float(diag.mean()), 1e-300)


def cholesky_with_jitter(A, base_jitter: float | None = None):
    """Lower Cholesky factor of ``A``, adding diagonal jitter only if needed.

    Tries ``A`` as given, then ``A + base_jitter * 10**k * I`` for
    ``k = 0..6``.  Returns ``(L, applied_jitter)`` with ``L @ L.T`` equal to
    ``A + applied_jitter * I``.
    """
    A = as_tensor(A)
    if A.shape[-1] != A.shape[-2]:
        raise ValueError(f"expected a square matrix, got shape {tuple(A.shape)}")
    if not bool(torch.all(torch.isfinite(A))):
        raise CholeskyError("matrix has non-finite entries")
    if base_jitter is None:
        base_jitter = default_jitter(A)
    if not base_jitter > 0:
        raise ValueError("base_jitter must be positive")
    eye = torch.eye(A.shape[-1], dtype=A.dtype)
    candidates = [0.0] + [base_jitter * 10.0**k for k in range(MAX_JITTER_ESCALATIONS + 1)]
    for jitter in candidates:
        target = A if jitter == 0.0 else A + jitter * eye
        L, info = torch.linalg.cholesky_ex(target)
        if not bool(torch.any(info != 0)):
            diag = torch.diagonal(L, dim1=-2, dim2=-1)
            if bool(torch.all(diag > 0)) and bool(torch.all(torch.isfinite(L))):
                return L, jitter
    raise CholeskyError(
        f"Cholesky failed after jitter escalation up to {candidates[-1]:.3g}"
    )


def tri_solve(L, B, transpose: bool = False) -> torch.Tensor:
    """Solve ``L X = B`` (or ``L^T X = B`` when ``transpose``) for lower ``L``."""
    L = as_tensor(L)
    B = as_tensor(B)
    vector = B.dim() == L.dim() - 1
    if vector:
        B = B.unsqueeze(-1)
    if L.shape[-1] != B.shape[-2]:
        raise ValueError(
            f"dimension mismatch: factor is {L.shape[-1]}x{L.shape[-1]}, rhs has {B.shape[-2]} rows"
        )
    if transpose:
        X = torch.linalg.solve_triangular(L.transpose(-1, -2), B, upper=True)
    else:
        X = torch.linalg.solve_triangular(L, B, upper=False)
    return X.squeeze(-1) if vector else X


def chol_solve(L, B) -> torch.Tensor:
    """``A^{-1} B`` given the lower factor of ``A``."""
    return tri_solve(L, tri_solve(L, B), transpose=True)


def logdet_from_chol(L) -> torch.Tensor:
    L = as_tensor(L)
    return 2.0 * torch.log(torch.diagonal(L, dim1=-2, dim2=-1)).sum(-1)
