"""CSV ingestion with missing values, masking, splitting and synthetic data."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np


class DataError(ValueError):
    """Malformed input data."""


@dataclass
class DataMatrix:
    """N x D values with an observedness mask.

    Masked cells hold NaN; nothing downstream reads them.
    """

    values: np.ndarray
    mask: np.ndarray
    column_names: list | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2 or self.values.shape != self.mask.shape:
            raise DataError("values and mask must be matching 2-d arrays")
        if min(self.values.shape) < 1:
            raise DataError("data must have at least one row and one column")
        if not np.all(np.isfinite(self.values[self.mask])):
            raise DataError("observed entries must be finite")
        self.values = np.where(self.mask, self.values, np.nan)

    @classmethod
    def full(cls, values, column_names=None) -> "DataMatrix":
        values = np.asarray(values, dtype=float)
        return cls(values, np.ones(values.shape, dtype=bool), column_names)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def D(self) -> int:
        return self.values.shape[1]

    def take(self, rows) -> "DataMatrix":
        rows = np.asarray(rows, dtype=np.int64)
        return DataMatrix(self.values[rows], self.mask[rows], self.column_names)

    def filled(self, fill: float = 0.0) -> np.ndarray:
        return np.where(self.mask, self.values, fill)


def _is_na(cell: str, na_token: str) -> bool:
    c = cell.strip()
    return c == "" or c.lower() == na_token.lower()


def _is_number(cell: str) -> bool:
    try:
        float(cell)
    except ValueError:
        return False
    return True


def load_csv(path, na_token: str = "NaN", header: bool | None = None) -> DataMatrix:
    """Read a rectangular numeric CSV; ``na_token`` (any case) or an empty cell is missing.

    ``header=None`` detects a header row as a first row with a cell that is
    neither a number nor missing.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    names = None
    if header is None:
        header = any(not _is_na(c, na_token) and not _is_number(c) for c in rows[0])
    if header:
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")
    D = len(rows[0])
    values = np.empty((len(rows), D))
    mask = np.ones((len(rows), D), dtype=bool)
    offset = 2 if header else 1
    for i, row in enumerate(rows):
        if len(row) != D:
            raise DataError(f"{path}: row {i + offset} has {len(row)} cells, expected {D}")
        for j, cell in enumerate(row):
            if _is_na(cell, na_token):
                mask[i, j] = False
                values[i, j] = np.nan
                continue
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"{path}: cannot parse {cell!r} at row {i + offset}, column {j + 1}") from None
            if not math.isfinite(values[i, j]):
                raise DataError(f"{path}: non-finite value at row {i + offset}, column {j + 1}")
    if names is not None and len(names) != D:
        raise DataError(f"{path}: header has {len(names)} names for {D} columns")
    return DataMatrix(values, mask, names)


def write_csv(data: DataMatrix, path, na_token: str = "NaN") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if data.column_names:
            w.writerow(data.column_names)
        for n in range(data.N):
            w.writerow([repr(float(v)) if o else na_token for v, o in zip(data.values[n], data.mask[n])])


def load_mask(path, shape=None) -> np.ndarray:
    """Sidecar mask file of 0/1 cells (1 = observed)."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    try:
        mask = np.array([[int(c.strip()) for c in r] for r in rows])
    except ValueError:
        raise DataError(f"{path}: mask cells must be 0 or 1") from None
    if mask.ndim != 2 or not np.isin(mask, (0, 1)).all():
        raise DataError(f"{path}: mask must be a rectangular 0/1 grid")
    if shape is not None and mask.shape != tuple(shape):
        raise DataError(f"{path}: mask shape {mask.shape} does not match data shape {tuple(shape)}")
    return mask.astype(bool)


def with_mask(data: DataMatrix, mask: np.ndarray) -> DataMatrix:
    """Intersect the data's mask with an extra observedness mask."""
    return DataMatrix(data.values, data.mask & np.asarray(mask, dtype=bool), data.column_names)


def apply_random_mask(data: DataMatrix, p_missing: float, seed: int) -> DataMatrix:
    """Hide each observed entry independently with probability ``p_missing``.

    Rows that would lose every entry are redrawn, so every row that had an
    observation keeps at least one.
    """
    if not 0 <= p_missing < 1:
        raise ValueError("p_missing must lie in [0, 1)")
    if p_missing == 0:
        return DataMatrix(data.values, data.mask.copy(), data.column_names)
    rng = np.random.default_rng(seed)
    new = data.mask.copy()
    for n in range(data.N):
        obs = data.mask[n]
        if not obs.any():
            continue
        while True:
            keep = obs & (rng.random(data.D) >= p_missing)
            if keep.any():
                break
        new[n] = keep
    return DataMatrix(data.values, new, data.column_names)


def _orthonormal_columns(D: int, Q: int, rng: np.random.Generator) -> np.ndarray:
    W, R = np.linalg.qr(rng.standard_normal((D, Q)))
    return W * np.sign(np.diag(R))


def synthetic_ppca(N: int, D: int, Q_true: int, noise_sd: float, seed: int):
    """Y = X W^T + noise with X ~ N(0, I) and W orthonormal columns.

    Returns (DataMatrix, X, W).
    """
    if Q_true > D:
        raise ValueError("Q_true must not exceed D")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((N, Q_true))
    W = _orthonormal_columns(D, Q_true, rng)
    Y = X @ W.T + noise_sd * rng.standard_normal((N, D))
    return DataMatrix.full(Y), X, W


def simplex_centers(n_classes: int, Q: int, edge: float = 4.0) -> np.ndarray:
    """Class centers with pairwise distance ``edge``.

    A regular simplex when it fits in Q dimensions, otherwise points spaced
    on a circle with adjacent distance ``edge``.
    """
    if n_classes - 1 <= Q:
        E = np.eye(n_classes)
        E -= E.mean(0)
        # orthonormal basis of the centered simplex, expressed in n_classes-1 coords
        U, _, _ = np.linalg.svd(E)
        C = E @ U[:, : n_classes - 1]
        C *= edge / np.linalg.norm(C[0] - C[1])
        out = np.zeros((n_classes, Q))
        out[:, : n_classes - 1] = C
        return out
    radius = edge / (2.0 * math.sin(math.pi / n_classes))
    ang = 2.0 * math.pi * np.arange(n_classes) / n_classes
    out = np.zeros((n_classes, Q))
    out[:, 0], out[:, 1] = radius * np.cos(ang), radius * np.sin(ang)
    return out


def synthetic_clusters(N: int, D: int, Q_true: int, n_classes: int, seed: int, blob_sd: float = 0.5,
                       noise_sd: float = 0.05, hidden: int = 20):
    """Gaussian class blobs in Q_true dims lifted to D dims by a fixed random tanh MLP.

    Returns (DataMatrix, labels, latents).  Labels are for evaluation only.
    """
    if n_classes < 2:
        raise ValueError("n_classes must be at least 2")
    rng = np.random.default_rng(seed)
    centers = simplex_centers(n_classes, Q_true)
    labels = rng.integers(0, n_classes, size=N)
    X = centers[labels] + blob_sd * rng.standard_normal((N, Q_true))
    scale = np.sqrt(np.mean(np.sum(X**2, 1)))
    W1 = rng.standard_normal((Q_true, hidden)) / scale
    b1 = 0.5 * rng.standard_normal(hidden)
    W2 = rng.standard_normal((hidden, D)) / math.sqrt(hidden)
    Y = np.tanh(X @ W1 + b1) @ W2
    Y = Y - Y.mean(0)
    Y = Y + noise_sd * rng.standard_normal((N, D))
    return DataMatrix.full(Y), labels, X


@dataclass
class SplitSpec:
    test_fraction: float = 0.2
    seed: int = 0


def split(data: DataMatrix, spec: SplitSpec):
    """Row-wise shuffled split; returns (train, test, train_rows, test_rows)."""
    if not 0 < spec.test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(spec.test_fraction * data.N))
    if n_test < 1 or n_test >= data.N:
        raise ValueError(f"split of N={data.N} at fraction {spec.test_fraction} leaves an empty side")
    perm = np.random.default_rng(spec.seed).permutation(data.N)
    test_rows, train_rows = np.sort(perm[:n_test]), np.sort(perm[n_test:])
    return data.take(train_rows), data.take(test_rows), train_rows, test_rows
