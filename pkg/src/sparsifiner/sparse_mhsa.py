"""Sparse full-rank attention driven by a predicted connectivity mask.

Only the masked query-key dot products are computed, softmax runs over each
row's stored logits, and the attention-value product touches stored entries
only. Work per head is ``nnz(mask) * d_head`` MACs for each of the two steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, NamedTuple, Sequence

import numpy as np

from .dense_attention import AttentionHeadParams, _check_output_proj
from .linalg import CsrMatrix, InvalidInputError, as_dense, sp_dense_matmul
from .predictor import ConnectivityMask, PredictorParams, predict_head_mask

Semantics = Literal["renormalized", "masked"]


@dataclass(frozen=True)
class SparseAttention:
    """Sparse attention matrix.

    With ``normalized`` set (the default semantics) every row's stored values
    are positive and sum to one. The ``masked`` semantics keep the full-softmax
    values at masked positions instead, so rows sum to at most one.
    """

    attn: CsrMatrix
    normalized: bool = True

    def __post_init__(self) -> None:
        a = self.attn
        if np.any(a.values < 0) or (self.normalized and np.any(a.values == 0)):
            raise InvalidInputError("attention values must be positive")
        if self.normalized and a.rows:
            sums = np.add.reduceat(a.values, a.row_ptr[:-1]) if a.nnz else np.zeros(a.rows)
            if np.any(a.row_nnz() == 0) or not np.allclose(sums, 1.0, rtol=0, atol=1e-6):
                raise InvalidInputError("normalized attention rows must sum to 1")


@dataclass(frozen=True)
class HeadStats:
    nnz: int
    n: int
    budget: int
    d_head: int
    saturated_rows: int

    @property
    def qk_macs(self) -> int:
        return self.nnz * self.d_head

    @property
    def av_macs(self) -> int:
        return self.nnz * self.d_head


class HeadResult(NamedTuple):
    out: np.ndarray
    mask: ConnectivityMask
    attn: SparseAttention
    a_down: np.ndarray
    a_down_sparse: CsrMatrix
    stats: HeadStats


class SparseMhsaOutput(NamedTuple):
    out: np.ndarray
    masks: list[ConnectivityMask]
    stats: list[HeadStats]
    heads: list[HeadResult]


def masked_qk(q, k, mask: ConnectivityMask) -> CsrMatrix:
    """Scaled logits ``<q_i, k_j> / sqrt(d)`` at the stored mask positions only."""
    q = as_dense(q, "q")
    k = as_dense(k, "k")
    if q.shape != k.shape:
        raise InvalidInputError(f"q {q.shape} and k {k.shape} must match")
    m = mask.mask
    if m.shape != (q.shape[0], q.shape[0]):
        raise InvalidInputError(f"mask {m.shape} does not fit {q.shape[0]} tokens")
    rows = m.row_ids()
    logits = np.einsum("ij,ij->i", q[rows], k[m.col_idx]) / math.sqrt(q.shape[1])
    return m.with_values(logits)


def sparse_row_softmax(logits: CsrMatrix, log_normalizer: np.ndarray | None = None) -> SparseAttention:
    """Softmax over each row's stored entries.

    If ``log_normalizer`` (per-row log-sum-exp of the *full* logit row) is
    supplied the stored values are the full-softmax values at those positions
    and are not renormalized.
    """
    counts = logits.row_nnz()
    if logits.rows and counts.min() < 1:
        raise InvalidInputError(f"row {int(np.argmin(counts))} has no stored logits")
    if logits.rows == 0:
        return SparseAttention(logits)
    rows = logits.row_ids()
    starts = logits.row_ptr[:-1]
    if log_normalizer is not None:
        vals = np.exp(logits.values - np.asarray(log_normalizer)[rows])
        return SparseAttention(logits.with_values(vals), normalized=False)
    row_max = np.maximum.reduceat(logits.values, starts)
    e = np.exp(logits.values - row_max[rows])
    vals = e / np.add.reduceat(e, starts)[rows]
    return SparseAttention(logits.with_values(vals))


def sparse_attention_value(attn: SparseAttention, v) -> np.ndarray:
    v = as_dense(v, "v")
    if attn.attn.cols != v.shape[0]:
        raise InvalidInputError(f"attention {attn.attn.shape} cannot multiply values {v.shape}")
    return sp_dense_matmul(attn.attn, v)


def _full_log_normalizer(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    z = q @ k.T / math.sqrt(q.shape[1])
    zmax = z.max(axis=1)
    return zmax + np.log(np.exp(z - zmax[:, None]).sum(axis=1))


def sparsifiner_head(
    x, head: AttentionHeadParams, pred: PredictorParams, semantics: Semantics = "renormalized"
) -> HeadResult:
    q, k, v = head.project(x)
    if pred.n_tokens != q.shape[0]:
        raise InvalidInputError(f"predictor built for {pred.n_tokens} tokens, input has {q.shape[0]}")
    mask, a_down, a_sparse = predict_head_mask(q, k, pred)
    logits = masked_qk(q, k, mask)
    if semantics == "renormalized":
        attn = sparse_row_softmax(logits)
    elif semantics == "masked":
        attn = sparse_row_softmax(logits, _full_log_normalizer(q, k))
    else:
        raise InvalidInputError(f"unknown attention semantics {semantics!r}")
    out = sparse_attention_value(attn, v)
    stats = HeadStats(
        nnz=mask.nnz,
        n=mask.n,
        budget=pred.budget,
        d_head=head.d_head,
        saturated_rows=int(np.count_nonzero(mask.budget_used == pred.budget)),
    )
    return HeadResult(out, mask, attn, a_down, a_sparse, stats)


def sparsifiner_mhsa(
    x,
    heads: Sequence[AttentionHeadParams],
    pred: PredictorParams,
    w_o,
    semantics: Semantics = "renormalized",
) -> SparseMhsaOutput:
    w_o = _check_output_proj(heads, w_o)
    results = [sparsifiner_head(x, h, pred, semantics) for h in heads]
    out = np.concatenate([r.out for r in results], axis=1) @ w_o
    return SparseMhsaOutput(out, [r.mask for r in results], [r.stats for r in results], results)
