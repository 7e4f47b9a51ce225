"""Instance-dependent sparse attention for vision transformers.

A connectivity predictor turns a cheap low-rank attention estimate into a
per-head sparse mask; attention is then computed exactly, but only at the
masked positions.
"""

from .dense_attention import (
    AttentionHeadParams,
    LinformerParams,
    linformer_attention,
    linformer_head,
    multi_head_attention,
    naive_attention_head,
)
from .linalg import (
    CsrMatrix,
    InvalidInputError,
    dense_matmul,
    softmax_rows,
    sp_dense_matmul,
    spsp_rowscore,
    top_k_row,
)
from .predictor import (
    ConnectivityMask,
    PredictorParams,
    budget_from_keep_rate,
    lowrank_attention,
    predict_head_mask,
    predict_mask,
    sparsify_lowrank,
)
from .sparse_mhsa import (
    SparseAttention,
    masked_qk,
    sparse_attention_value,
    sparse_row_softmax,
    sparsifiner_mhsa,
)
from .vit import ModelConfig, ViTModel, forward, forward_classify, init_model

__version__ = "0.1.0"
