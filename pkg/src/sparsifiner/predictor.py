"""Connectivity-mask predictor.

Pipeline per head: low-rank attention against a token-down-projected key
matrix, thresholding into a sparse coefficient matrix, a sparse-sparse
up-projection onto a learned sparse basis, then per-row top-``budget``
selection binarized into a mask. The diagonal is always part of the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .linalg import (
    CsrMatrix,
    InvalidInputError,
    as_dense,
    softmax_rows,
    spsp_rowscore,
    top_k_row,
)

DEFAULT_N_DOWN = 32
DEFAULT_TAU = 0.05


@dataclass(frozen=True)
class PredictorParams:
    """Per-layer predictor weights, shared by every head of the layer."""

    w_down: np.ndarray
    w_up: CsrMatrix
    tau: float = DEFAULT_TAU
    budget: int = 1

    def __post_init__(self) -> None:
        w_down = as_dense(self.w_down, "w_down")
        object.__setattr__(self, "w_down", w_down)
        if isinstance(self.w_up, np.ndarray):
            object.__setattr__(self, "w_up", CsrMatrix.from_dense(self.w_up))
        n_down, n = w_down.shape
        if n_down < 1:
            raise InvalidInputError("n_down must be >= 1")
        if self.w_up.shape != (n_down, n):
            raise InvalidInputError(f"w_up shape {self.w_up.shape} != w_down shape {(n_down, n)}")
        if not 0.0 < self.tau < 1.0:
            raise InvalidInputError(f"tau must lie in (0, 1), got {self.tau}")
        if not 1 <= self.budget <= n:
            raise InvalidInputError(f"budget must lie in [1, {n}], got {self.budget}")

    @property
    def n_down(self) -> int:
        return self.w_down.shape[0]

    @property
    def n_tokens(self) -> int:
        return self.w_down.shape[1]

    @property
    def w_up_density(self) -> float:
        return self.w_up.density

    def replace(self, **changes) -> PredictorParams:
        fields = dict(w_down=self.w_down, w_up=self.w_up, tau=self.tau, budget=self.budget)
        fields.update(changes)
        return PredictorParams(**fields)


@dataclass(frozen=True)
class ConnectivityMask:
    mask: CsrMatrix
    budget: int

    def __post_init__(self) -> None:
        m = self.mask
        if m.rows != m.cols:
            raise InvalidInputError(f"mask must be square, got {m.shape}")
        if not np.all(m.values == 1.0):
            raise InvalidInputError("mask values must all be exactly 1")
        counts = m.row_nnz()
        if m.rows and (counts.min() < 1 or counts.max() > self.budget):
            raise InvalidInputError(f"mask row sizes must lie in [1, {self.budget}]")
        rows = m.row_ids()
        if np.count_nonzero(rows == m.col_idx) != m.rows:
            raise InvalidInputError("every mask row must contain its diagonal entry")

    @property
    def budget_used(self) -> np.ndarray:
        return self.mask.row_nnz()

    @property
    def n(self) -> int:
        return self.mask.rows

    @property
    def nnz(self) -> int:
        return self.mask.nnz

    def row_set(self, i: int) -> set[int]:
        return set(self.mask.row(i)[0].tolist())

    @classmethod
    def full(cls, n: int) -> ConnectivityMask:
        return cls(CsrMatrix.from_dense(np.ones((n, n))), n)


def budget_from_keep_rate(keep_rate: float, n: int) -> int:
    """``ceil(keep_rate * n)``, robust to products like 0.3 * 10 = 3.0000000000000004."""
    if not 0.0 < keep_rate <= 1.0:
        raise InvalidInputError(f"keep_rate must lie in (0, 1], got {keep_rate}")
    return max(1, math.ceil(round(keep_rate * n, 9)))


def lowrank_attention(q, k, p: PredictorParams) -> np.ndarray:
    """``softmax(Q (W_down K)^T / sqrt(d_head))``, shape ``n x n_down``."""
    q = as_dense(q, "q")
    k = as_dense(k, "k")
    if q.shape != k.shape:
        raise InvalidInputError(f"q {q.shape} and k {k.shape} must match")
    if p.w_down.shape[1] != k.shape[0]:
        raise InvalidInputError(f"w_down expects {p.w_down.shape[1]} tokens, got {k.shape[0]}")
    k_down = p.w_down @ k
    return softmax_rows(q @ k_down.T, 1.0 / math.sqrt(q.shape[1]))


def sparsify_lowrank(a_down, tau: float) -> CsrMatrix:
    """Keep entries strictly above ``tau``; a row with none keeps its maximum."""
    a = as_dense(a_down, "a_down")
    keep = a > tau
    empty = ~keep.any(axis=1)
    if empty.any():
        rows = np.flatnonzero(empty)
        keep[rows, np.argmax(a[rows], axis=1)] = True
    r, c = np.nonzero(keep)
    row_ptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
    np.cumsum(keep.sum(axis=1), out=row_ptr[1:])
    return CsrMatrix(a.shape[0], a.shape[1], row_ptr, c, a[r, c])


def connectivity_scores(a_down_sparse: CsrMatrix, w_up: CsrMatrix) -> CsrMatrix:
    if a_down_sparse.cols != w_up.rows:
        raise InvalidInputError(
            f"coefficients have {a_down_sparse.cols} columns, basis has {w_up.rows} rows"
        )
    return spsp_rowscore(a_down_sparse, w_up)


def select_mask(scores: CsrMatrix, budget: int) -> ConnectivityMask:
    """Top-``budget`` positive scores per row, diagonal forced in.

    When the diagonal is missing from a full selection it displaces the
    lowest-scoring pick, so rows never exceed the budget.
    """
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    n = scores.rows
    if scores.cols != n:
        raise InvalidInputError(f"scores must be square, got {scores.shape}")
    row_cols = []
    for i in range(n):
        picked = top_k_row(*scores.row(i), budget)
        if not np.any(picked == i):
            if picked.size == budget:
                picked = picked[:-1]
            picked = np.append(picked, i)
        row_cols.append(np.sort(picked))
    mask = CsrMatrix.from_rows(n, n, row_cols, [np.ones(c.size) for c in row_cols])
    return ConnectivityMask(mask, budget)


def predict_mask(a_down_sparse: CsrMatrix, p: PredictorParams, budget: int | None = None) -> ConnectivityMask:
    if a_down_sparse.cols != p.n_down:
        raise InvalidInputError(f"coefficients have {a_down_sparse.cols} columns, n_down is {p.n_down}")
    budget = p.budget if budget is None else budget
    if budget < 1:
        raise InvalidInputError(f"budget must be >= 1, got {budget}")
    return select_mask(connectivity_scores(a_down_sparse, p.w_up), budget)


def predict_head_mask(q, k, p: PredictorParams) -> tuple[ConnectivityMask, np.ndarray, CsrMatrix]:
    """Run the whole predictor for one head.

    Returns the mask together with the dense low-rank attention and its
    thresholded sparse form (kept for dumps and accounting).
    """
    a_down = lowrank_attention(q, k, p)
    a_sparse = sparsify_lowrank(a_down, p.tau)
    return predict_mask(a_sparse, p), a_down, a_sparse


def init_predictor(
    n: int,
    n_down: int,
    budget: int,
    rng: np.random.Generator,
    tau: float = DEFAULT_TAU,
    density: float = 0.1,
) -> PredictorParams:
    """Random predictor: uniform ``w_down`` and a nonnegative sparse basis."""
    bound = 1.0 / math.sqrt(n)
    w_down = rng.uniform(-bound, bound, size=(n_down, n))
    w_up = rng.uniform(0.0, 1.0, size=(n_down, n))
    w_up[rng.random((n_down, n)) >= density] = 0.0
    return PredictorParams(w_down, CsrMatrix.from_dense(w_up), tau, budget)


def full_budget_predictor(n: int, n_down: int, rng: np.random.Generator) -> PredictorParams:
    """Predictor whose mask is always complete.

    A strictly positive dense basis makes every connectivity score positive and
    a tiny ``tau`` keeps every low-rank coefficient, so top-``n`` selects all
    columns.
    """
    bound = 1.0 / math.sqrt(n)
    w_down = rng.uniform(-bound, bound, size=(n_down, n))
    w_up = rng.uniform(0.5, 1.5, size=(n_down, n))
    return PredictorParams(w_down, CsrMatrix.from_dense(w_up), 1e-300, n)
