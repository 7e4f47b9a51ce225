"""Toy-scale ViT forward pass with pluggable MHSA (dense, sparse-mask, Linformer).

Blocks are pre-norm: ``x + MHSA(LN(x))`` followed by ``x + MLP(LN(x))`` with
an exact-erf GELU. The classifier reads the CLS token after a final norm.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Literal, Sequence

import numpy as np
from scipy.special import erf

from .dense_attention import AttentionHeadParams, linformer_attention, multi_head_attention
from .linalg import InvalidInputError, as_dense
from .predictor import (
    DEFAULT_N_DOWN,
    DEFAULT_TAU,
    PredictorParams,
    full_budget_predictor,
    init_predictor,
)
from .sparse_mhsa import HeadResult, HeadStats, Semantics, sparsifiner_mhsa

Mode = Literal["dense", "sparsifiner", "linformer"]
MODES: tuple[str, ...] = ("dense", "sparsifiner", "linformer")
LN_EPS = 1e-6


@dataclass(frozen=True)
class ModelConfig:
    image_size: int
    patch_size: int
    d_model: int
    n_heads: int
    n_layers: int
    mlp_ratio: float = 4.0
    n_classes: int = 10

    def __post_init__(self) -> None:
        if self.image_size <= 0 or self.patch_size <= 0 or self.image_size % self.patch_size:
            raise InvalidInputError(
                f"image_size {self.image_size} must be a positive multiple of patch_size {self.patch_size}"
            )
        if self.n_heads <= 0 or self.d_model % self.n_heads:
            raise InvalidInputError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.n_layers < 1 or self.n_classes < 1:
            raise InvalidInputError("need at least one layer and one class")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_tokens(self) -> int:
        return self.grid**2 + 1

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return int(round(self.d_model * self.mlp_ratio))

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3


DEIT_S = ModelConfig(image_size=224, patch_size=16, d_model=384, n_heads=6, n_layers=12, n_classes=1000)
DEIT_T_384 = ModelConfig(image_size=384, patch_size=16, d_model=192, n_heads=3, n_layers=12, n_classes=1000)


@dataclass(frozen=True)
class LayerParams:
    heads: list[AttentionHeadParams]
    w_o: np.ndarray
    predictor: PredictorParams
    mlp_in: np.ndarray
    mlp_out: np.ndarray
    norm1: tuple[np.ndarray, np.ndarray]
    norm2: tuple[np.ndarray, np.ndarray]
    # token projections for linformer mode; identity when absent
    linformer_e: np.ndarray | None = None
    linformer_f: np.ndarray | None = None


@dataclass(frozen=True)
class ViTModel:
    config: ModelConfig
    patch_proj: np.ndarray
    patch_bias: np.ndarray
    cls_token: np.ndarray
    pos_embed: np.ndarray
    layers: list[LayerParams]
    final_norm: tuple[np.ndarray, np.ndarray]
    head: np.ndarray
    head_bias: np.ndarray

    def with_predictors(self, predictors: Sequence[PredictorParams]) -> ViTModel:
        if len(predictors) != len(self.layers):
            raise InvalidInputError(f"need {len(self.layers)} predictors, got {len(predictors)}")
        layers = [replace(layer, predictor=p) for layer, p in zip(self.layers, predictors)]
        return replace(self, layers=layers)

    def with_budget(self, budget: int) -> ViTModel:
        return self.with_predictors([layer.predictor.replace(budget=budget) for layer in self.layers])


@dataclass
class LayerTrace:
    """What one block saw and did; filled in when tracing a forward pass."""

    x_norm: np.ndarray
    head_results: list[HeadResult] = field(default_factory=list)

    @property
    def stats(self) -> list[HeadStats]:
        return [r.stats for r in self.head_results]


@dataclass
class ForwardResult:
    scores: np.ndarray
    tokens: np.ndarray
    traces: list[LayerTrace]


def layer_norm(x: np.ndarray, scale: np.ndarray, shift: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * scale + shift


def gelu(x: np.ndarray) -> np.ndarray:
    return 0.5 * x * (1.0 + erf(x / math.sqrt(2.0)))


def image_patches(image, cfg: ModelConfig) -> np.ndarray:
    """Non-overlapping patches in raster order, each flattened as (row, col, channel)."""
    img = np.asarray(image)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = np.asarray(img, dtype=np.float64)
    expected = (cfg.image_size, cfg.image_size, 3)
    if img.shape != expected:
        raise InvalidInputError(f"image shape {img.shape} != expected {expected}")
    g, p = cfg.grid, cfg.patch_size
    return img.reshape(g, p, g, p, 3).transpose(0, 2, 1, 3, 4).reshape(g * g, p * p * 3)


def patch_embed(image, cfg: ModelConfig, patch_proj, pos_embed, cls_token, patch_bias=None) -> np.ndarray:
    patches = image_patches(image, cfg)
    proj = as_dense(patch_proj, "patch_proj")
    if proj.shape != (cfg.patch_dim, cfg.d_model):
        raise InvalidInputError(f"patch_proj shape {proj.shape} != {(cfg.patch_dim, cfg.d_model)}")
    pos = as_dense(pos_embed, "pos_embed")
    if pos.shape != (cfg.n_tokens, cfg.d_model):
        raise InvalidInputError(f"pos_embed shape {pos.shape} != {(cfg.n_tokens, cfg.d_model)}")
    tokens = patches @ proj
    if patch_bias is not None:
        tokens = tokens + np.asarray(patch_bias, dtype=np.float64)
    cls = np.asarray(cls_token, dtype=np.float64).reshape(1, cfg.d_model)
    return np.concatenate([cls, tokens], axis=0) + pos


def transformer_block(
    x,
    p: LayerParams,
    mode: Mode = "dense",
    semantics: Semantics = "renormalized",
    trace: list[LayerTrace] | None = None,
) -> np.ndarray:
    x = as_dense(x, "tokens")
    h = layer_norm(x, *p.norm1)
    record = LayerTrace(h)
    if mode == "dense":
        attn_out = multi_head_attention(h, p.heads, p.w_o)
    elif mode == "sparsifiner":
        res = sparsifiner_mhsa(h, p.heads, p.predictor, p.w_o, semantics)
        attn_out = res.out
        record.head_results = res.heads
    elif mode == "linformer":
        n = x.shape[0]
        e = np.eye(n) if p.linformer_e is None else p.linformer_e
        f = np.eye(n) if p.linformer_f is None else p.linformer_f
        attn_out = linformer_attention(h, p.heads, e, f, p.w_o)
    else:
        raise InvalidInputError(f"unknown attention mode {mode!r}")
    if trace is not None:
        trace.append(record)
    x = x + attn_out
    h = layer_norm(x, *p.norm2)
    return x + gelu(h @ p.mlp_in) @ p.mlp_out


def forward(image, model: ViTModel, mode: Mode = "dense", semantics: Semantics = "renormalized") -> ForwardResult:
    cfg = model.config
    x = patch_embed(image, cfg, model.patch_proj, model.pos_embed, model.cls_token, model.patch_bias)
    traces: list[LayerTrace] = []
    for layer in model.layers:
        x = transformer_block(x, layer, mode, semantics, traces)
    tokens = layer_norm(x, *model.final_norm)
    scores = tokens[0] @ model.head + model.head_bias
    return ForwardResult(scores, tokens, traces)


def forward_classify(image, model: ViTModel, mode: Mode = "dense", semantics: Semantics = "renormalized") -> np.ndarray:
    return forward(image, model, mode, semantics).scores


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(
    cfg: ModelConfig,
    seed: int = 0,
    n_down: int = DEFAULT_N_DOWN,
    tau: float = DEFAULT_TAU,
    budget: int | None = None,
    wup_density: float = 0.1,
    full_budget: bool = False,
) -> ViTModel:
    """Seeded random model; weights uniform in +-1/sqrt(fan_in).

    ``full_budget`` swaps in predictors whose masks are always complete, which
    makes sparse mode reproduce dense mode.
    """
    rng = np.random.default_rng(seed)
    d, n, dh = cfg.d_model, cfg.n_tokens, cfg.d_head
    budget = n if budget is None else budget
    layers = []
    for _ in range(cfg.n_layers):
        heads = [
            AttentionHeadParams(_uniform(rng, d, (d, dh)), _uniform(rng, d, (d, dh)), _uniform(rng, d, (d, dh)))
            for _ in range(cfg.n_heads)
        ]
        if full_budget:
            pred = full_budget_predictor(n, n_down, rng)
        else:
            pred = init_predictor(n, n_down, budget, rng, tau=tau, density=wup_density)
        layers.append(
            LayerParams(
                heads=heads,
                w_o=_uniform(rng, d, (d, d)),
                predictor=pred,
                mlp_in=_uniform(rng, d, (d, cfg.d_mlp)),
                mlp_out=_uniform(rng, cfg.d_mlp, (cfg.d_mlp, d)),
                norm1=(1.0 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d)),
                norm2=(1.0 + 0.1 * rng.standard_normal(d), 0.1 * rng.standard_normal(d)),
            )
        )
    return ViTModel(
        config=cfg,
        patch_proj=_uniform(rng, cfg.patch_dim, (cfg.patch_dim, d)),
        patch_bias=_uniform(rng, cfg.patch_dim, d),
        cls_token=0.02 * rng.standard_normal(d),
        pos_embed=0.02 * rng.standard_normal((n, d)),
        layers=layers,
        final_norm=(np.ones(d), np.zeros(d)),
        head=_uniform(rng, d, (d, cfg.n_classes)),
        head_bias=np.zeros(cfg.n_classes),
    )


def random_image(cfg: ModelConfig, rng: np.random.Generator) -> np.ndarray:
    return rng.random((cfg.image_size, cfg.image_size, 3))
