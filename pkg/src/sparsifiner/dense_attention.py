"""Reference dense multi-head self-attention and a Linformer-style baseline."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import InvalidInputError, as_dense, softmax_rows


@dataclass(frozen=True)
class AttentionHeadParams:
    """Per-head projections, each ``d_model x d_head``."""

    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self) -> None:
        shapes = {as_dense(w, name).shape for w, name in
                  ((self.w_q, "w_q"), (self.w_k, "w_k"), (self.w_v, "w_v"))}
        if len(shapes) != 1:
            raise InvalidInputError(f"head projections disagree in shape: {sorted(shapes)}")

    @property
    def d_model(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_head(self) -> int:
        return self.w_q.shape[1]

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        x = as_dense(x, "x")
        if x.shape[1] != self.d_model:
            raise InvalidInputError(f"x has {x.shape[1]} features, head expects {self.d_model}")
        return x @ self.w_q, x @ self.w_k, x @ self.w_v


@dataclass(frozen=True)
class LinformerParams:
    """A head plus token-dimension projections ``E`` (keys) and ``F`` (values)."""

    head: AttentionHeadParams
    e_proj: np.ndarray
    f_proj: np.ndarray

    def __post_init__(self) -> None:
        e = as_dense(self.e_proj, "e_proj")
        f = as_dense(self.f_proj, "f_proj")
        if e.shape != f.shape:
            raise InvalidInputError(f"e_proj {e.shape} and f_proj {f.shape} must match")
        if e.shape[0] < 1:
            raise InvalidInputError("Linformer projection needs at least one row")


def naive_attention_head(x, p: AttentionHeadParams) -> tuple[np.ndarray, np.ndarray]:
    """Full attention for one head. Returns ``(A, A @ V)``."""
    q, k, v = p.project(x)
    attn = softmax_rows(q @ k.T, 1.0 / math.sqrt(p.d_head))
    return attn, attn @ v


def _check_output_proj(heads: Sequence[AttentionHeadParams], w_o) -> np.ndarray:
    if not heads:
        raise InvalidInputError("at least one attention head is required")
    w_o = as_dense(w_o, "w_o")
    total = sum(h.d_head for h in heads)
    if w_o.shape[0] != total:
        raise InvalidInputError(f"w_o has {w_o.shape[0]} rows but heads provide {total} features")
    return w_o


def multi_head_attention(x, heads: Sequence[AttentionHeadParams], w_o) -> np.ndarray:
    w_o = _check_output_proj(heads, w_o)
    outs = [naive_attention_head(x, h)[1] for h in heads]
    return np.concatenate(outs, axis=1) @ w_o


def linformer_head(x, p: LinformerParams) -> np.ndarray:
    q, k, v = p.head.project(x)
    if p.e_proj.shape[1] != k.shape[0]:
        raise InvalidInputError(
            f"projection expects {p.e_proj.shape[1]} tokens, input has {k.shape[0]}"
        )
    k_proj = p.e_proj @ k
    v_proj = p.f_proj @ v
    attn = softmax_rows(q @ k_proj.T, 1.0 / math.sqrt(p.head.d_head))
    return attn @ v_proj


def linformer_attention(x, heads: Sequence[AttentionHeadParams], e_proj, f_proj, w_o) -> np.ndarray:
    """Multi-head Linformer with projections shared across heads."""
    w_o = _check_output_proj(heads, w_o)
    outs = [linformer_head(x, LinformerParams(h, e_proj, f_proj)) for h in heads]
    return np.concatenate(outs, axis=1) @ w_o
