"""Dense and CSR primitives shared by the attention, predictor and training code.

Dense matrices are plain 2-D ``float64`` numpy arrays (row-major). Sparse
matrices use :class:`CsrMatrix`, a small immutable CSR container whose kernels
only ever touch stored entries, so ``nnz`` is an honest cost measure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InvalidInputError(ValueError):
    """Raised when an operation receives inputs that violate its contract."""


def as_dense(a, name: str = "matrix") -> np.ndarray:
    """Coerce ``a`` to a finite 2-D float64 array or raise InvalidInputError."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    return arr


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class CsrMatrix:
    """Compressed sparse row matrix with sorted, unique column indices per row."""

    rows: int
    cols: int
    row_ptr: np.ndarray
    col_idx: np.ndarray
    values: np.ndarray

    def __post_init__(self) -> None:
        object.__setattr__(self, "row_ptr", _readonly(np.asarray(self.row_ptr, dtype=np.int64)))
        object.__setattr__(self, "col_idx", _readonly(np.asarray(self.col_idx, dtype=np.int64)))
        object.__setattr__(self, "values", _readonly(np.asarray(self.values, dtype=np.float64)))
        self.validate()

    def validate(self) -> None:
        """Check every CSR well-formedness invariant; raise InvalidInputError on failure."""
        if self.rows < 0 or self.cols < 0:
            raise InvalidInputError(f"negative shape ({self.rows}, {self.cols})")
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if rp.ndim != 1 or rp.shape[0] != self.rows + 1:
            raise InvalidInputError(f"row_ptr length {rp.shape[0]} != rows + 1 = {self.rows + 1}")
        if rp[0] != 0:
            raise InvalidInputError("row_ptr[0] must be 0")
        if np.any(np.diff(rp) < 0):
            raise InvalidInputError("row_ptr must be non-decreasing")
        nnz = int(rp[-1])
        if ci.shape != (nnz,) or v.shape != (nnz,):
            raise InvalidInputError(
                f"col_idx/values lengths ({ci.shape[0]}, {v.shape[0]}) must equal nnz = {nnz}"
            )
        if nnz:
            if ci.min() < 0 or ci.max() >= self.cols:
                raise InvalidInputError("column index out of range")
            # strictly increasing within a row; row starts may drop
            step = np.diff(ci)
            row_start = np.zeros(nnz, dtype=bool)
            row_start[rp[:-1][rp[:-1] < nnz]] = True
            if np.any((step <= 0) & ~row_start[1:]):
                raise InvalidInputError("column indices must be strictly increasing within a row")
        if not np.all(np.isfinite(v)):
            raise InvalidInputError("values contain non-finite entries")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.row_ptr[-1])

    @property
    def density(self) -> float:
        size = self.rows * self.cols
        return self.nnz / size if size else 0.0

    def row_nnz(self) -> np.ndarray:
        return np.diff(self.row_ptr)

    def row(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values stored in row ``i`` (read-only views)."""
        lo, hi = self.row_ptr[i], self.row_ptr[i + 1]
        return self.col_idx[lo:hi], self.values[lo:hi]

    def row_ids(self) -> np.ndarray:
        """Row index of every stored entry, aligned with ``col_idx``."""
        return np.repeat(np.arange(self.rows, dtype=np.int64), self.row_nnz())

    def to_dense(self) -> np.ndarray:
        out = np.zeros((self.rows, self.cols))
        out[self.row_ids(), self.col_idx] = self.values
        return out

    def with_values(self, values: np.ndarray) -> CsrMatrix:
        """Same sparsity pattern, new values."""
        return CsrMatrix(self.rows, self.cols, self.row_ptr, self.col_idx, values)

    def same_pattern(self, other: CsrMatrix) -> bool:
        return (
            self.shape == other.shape
            and np.array_equal(self.row_ptr, other.row_ptr)
            and np.array_equal(self.col_idx, other.col_idx)
        )

    @classmethod
    def from_dense(cls, a, drop_zeros: bool = True) -> CsrMatrix:
        a = as_dense(a)
        keep = a != 0 if drop_zeros else np.ones(a.shape, dtype=bool)
        r, c = np.nonzero(keep)
        row_ptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
        np.cumsum(np.bincount(r, minlength=a.shape[0]), out=row_ptr[1:])
        return cls(a.shape[0], a.shape[1], row_ptr, c, a[r, c])

    @classmethod
    def from_rows(cls, rows: int, cols: int, row_cols, row_vals) -> CsrMatrix:
        """Build from per-row (sorted column indices, values) sequences."""
        counts = [len(c) for c in row_cols]
        row_ptr = np.zeros(rows + 1, dtype=np.int64)
        np.cumsum(counts, out=row_ptr[1:])
        col_idx = np.concatenate(row_cols) if rows else np.zeros(0)
        values = np.concatenate(row_vals) if rows else np.zeros(0)
        return cls(rows, cols, row_ptr, col_idx, values)

    @classmethod
    def identity(cls, n: int) -> CsrMatrix:
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def empty(cls, rows: int, cols: int) -> CsrMatrix:
        return cls(rows, cols, np.zeros(rows + 1), np.zeros(0), np.zeros(0))

    def __repr__(self) -> str:
        return f"CsrMatrix(shape={self.shape}, nnz={self.nnz})"


def dense_matmul(a, b) -> np.ndarray:
    a = as_dense(a, "a")
    b = as_dense(b, "b")
    if a.shape[1] != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax_rows(a, scale: float = 1.0) -> np.ndarray:
    """Row-wise ``softmax(scale * a)`` with max subtraction."""
    a = as_dense(a)
    if a.size == 0:
        raise InvalidInputError("softmax_rows needs a nonempty matrix")
    z = scale * a
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def top_k_row(cols, vals, k: int) -> np.ndarray:
    """Indices of the ``k`` largest positive entries of a sparse row.

    Ordering is value descending, then column ascending; the returned array is
    in that selection order. Zero and negative values are never selected.
    """
    if k < 1:
        raise InvalidInputError(f"k must be >= 1, got {k}")
    cols = np.asarray(cols, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.float64)
    pos = vals > 0
    cols, vals = cols[pos], vals[pos]
    if cols.size > k:
        # cheap pre-cut: everything strictly above the k-th largest value is kept
        kth = np.partition(vals, cols.size - k)[cols.size - k]
        keep = vals >= kth
        cols, vals = cols[keep], vals[keep]
    order = np.lexsort((cols, -vals))
    return cols[order[:k]]


def spsp_rowscore(a: CsrMatrix, b: CsrMatrix) -> CsrMatrix:
    """Sparse-sparse product ``a @ b`` (row-by-row Gustavson accumulation).

    Work is proportional to the sum over a's stored entries of the matching
    b-row nnz. Entries that cancel to exactly zero are dropped.
    """
    if a.cols != b.rows:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    acc = np.zeros(b.cols)
    out_cols, out_vals = [], []
    for i in range(a.rows):
        a_cols, a_vals = a.row(i)
        touched = []
        for j, av in zip(a_cols.tolist(), a_vals.tolist()):
            b_cols, b_vals = b.row(j)
            if b_cols.size:
                acc[b_cols] += av * b_vals
                touched.append(b_cols)
        if touched:
            idx = np.unique(np.concatenate(touched))
            vals = acc[idx]
            acc[idx] = 0.0
            nz = vals != 0
            out_cols.append(idx[nz])
            out_vals.append(vals[nz])
        else:
            out_cols.append(np.zeros(0, dtype=np.int64))
            out_vals.append(np.zeros(0))
    return CsrMatrix.from_rows(a.rows, b.cols, out_cols, out_vals)


def sp_dense_matmul(a: CsrMatrix, b) -> np.ndarray:
    """``a @ b`` touching only a's stored entries: nnz(a) * b.cols MACs."""
    b = as_dense(b, "b")
    if a.cols != b.shape[0]:
        raise InvalidInputError(f"cannot multiply {a.shape} by {b.shape}")
    out = np.zeros((a.rows, b.shape[1]))
    np.add.at(out, a.row_ids(), a.values[:, None] * b[a.col_idx])
    return out
