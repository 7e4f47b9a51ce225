"""Training objectives and predictor-only (phase 1) training.

Phase 1 freezes the backbone and fits each layer's predictor so that the dense
connectivity scores ``A_down @ W_up`` match the teacher's attention maps.
Gradients are derived by hand through the low-rank softmax and the bilinear
up-projection; thresholding and top-k are inference-only.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .linalg import CsrMatrix, InvalidInputError, as_dense, softmax_rows
from .predictor import PredictorParams
from .vit import ViTModel, forward

logger = logging.getLogger(__name__)

KL_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    lambda_token: float = 0.0
    lambda_cls: float = 0.0
    lambda_attn: float = 0.0
    weight_decay: float = 0.05

    def __post_init__(self) -> None:
        for name in ("lambda_token", "lambda_cls", "lambda_attn", "weight_decay"):
            if getattr(self, name) < 0:
                raise InvalidInputError(f"{name} must be >= 0")


PHASE1_WEIGHTS = LossWeights(lambda_token=0.0, lambda_cls=0.0, lambda_attn=1.0)
PHASE2_WEIGHTS = LossWeights(lambda_token=0.5, lambda_cls=0.5, lambda_attn=0.0)


@dataclass(frozen=True)
class TeacherOutputs:
    tokens: np.ndarray
    class_probs: np.ndarray
    attn: dict[tuple[int, int], np.ndarray]


@dataclass(frozen=True)
class LossParts:
    """Individual loss terms. ``None`` marks a term that was not evaluated."""

    cls: float | None = None
    token: float | None = None
    cls_distill: float | None = None
    attn: float | None = None


def loss_cls(pred_scores, label: int) -> float:
    s = np.asarray(pred_scores, dtype=np.float64).ravel()
    if not 0 <= label < s.size:
        raise InvalidInputError(f"label {label} outside [0, {s.size})")
    m = s.max()
    lse = m + math.log(np.exp(s - m).sum())
    return float(lse - s[label])


def loss_token_distill(x, x_teach) -> float:
    x = np.asarray(x, dtype=np.float64)
    x_teach = np.asarray(x_teach, dtype=np.float64)
    if x.shape != x_teach.shape:
        raise InvalidInputError(f"token shapes differ: {x.shape} vs {x_teach.shape}")
    return float(np.mean((x - x_teach) ** 2))


def _check_distribution(p, name: str) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64).ravel()
    if p.size == 0 or np.any(p < 0) or not np.all(np.isfinite(p)) or abs(p.sum() - 1.0) > 1e-6:
        raise InvalidInputError(f"{name} is not a probability distribution")
    return p


def loss_cls_distill(pred_probs, teach_probs) -> float:
    """``KL(pred || teach)`` with both distributions floored at 1e-12 inside the log."""
    p = _check_distribution(pred_probs, "pred_probs")
    q = _check_distribution(teach_probs, "teach_probs")
    if p.shape != q.shape:
        raise InvalidInputError(f"distribution sizes differ: {p.size} vs {q.size}")
    kl = np.sum(p * (np.log(np.maximum(p, KL_EPS)) - np.log(np.maximum(q, KL_EPS))))
    return float(max(kl, 0.0))


def loss_attn_distill(scores, a_teach) -> float:
    """MSE between predicted connectivity scores and teacher attention.

    Accepts one matrix each or equal-length sequences (layers/heads); the
    result is the mean of the per-map MSEs.
    """
    if isinstance(scores, np.ndarray) or not isinstance(scores, Sequence):
        scores, a_teach = [scores], [a_teach]
    if len(scores) != len(a_teach) or not scores:
        raise InvalidInputError("need matching, nonempty lists of score and teacher maps")
    total = 0.0
    for s, t in zip(scores, a_teach):
        s = as_dense(s, "scores")
        t = as_dense(t, "a_teach")
        if s.shape != t.shape:
            raise InvalidInputError(f"score map {s.shape} vs teacher {t.shape}")
        total += float(np.mean((s - t) ** 2))
    return total / len(scores)


def l2_reg(w_up) -> float:
    vals = w_up.values if isinstance(w_up, CsrMatrix) else np.asarray(w_up, dtype=np.float64)
    return float(np.sum(vals**2))


def total_loss(parts: LossParts, weights: LossWeights) -> float:
    """Weighted objective; the L2 basis penalty is left to the optimizer's decay.

    Terms left as ``None`` contribute nothing, which is how phase 1 (no
    classification pass) is expressed. A ``None`` term with a positive weight
    is an error.
    """
    total = 0.0 if parts.cls is None else parts.cls
    for value, lam, name in (
        (parts.token, weights.lambda_token, "token"),
        (parts.cls_distill, weights.lambda_cls, "cls_distill"),
        (parts.attn, weights.lambda_attn, "attn"),
    ):
        if lam == 0:
            continue
        if value is None:
            raise InvalidInputError(f"loss term {name!r} has weight {lam} but was not evaluated")
        total += lam * value
    return float(total)


@dataclass(frozen=True)
class Phase1Sample:
    """Frozen-backbone query/key for one head and that head's teacher attention."""

    q: np.ndarray
    k: np.ndarray
    a_teach: np.ndarray


class TrainingDivergedError(FloatingPointError):
    pass


def phase1_loss(samples: Sequence[Phase1Sample], w_down: np.ndarray, w_up: np.ndarray) -> float:
    scores = []
    for s in samples:
        a_down = softmax_rows(s.q @ (w_down @ s.k).T, 1.0 / math.sqrt(s.q.shape[1]))
        scores.append(a_down @ w_up)
    return loss_attn_distill(scores, [s.a_teach for s in samples])


def phase1_gradients(
    samples: Sequence[Phase1Sample], w_down: np.ndarray, w_up: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and its gradients w.r.t. ``w_down`` and dense ``w_up``."""
    if not samples:
        raise InvalidInputError("phase-1 step needs at least one sample")
    g_down = np.zeros_like(w_down)
    g_up = np.zeros_like(w_up)
    loss = 0.0
    m = len(samples)
    for s in samples:
        scale = 1.0 / math.sqrt(s.q.shape[1])
        qk = s.q @ s.k.T
        a_down = softmax_rows(qk @ w_down.T, scale)
        resid = a_down @ w_up - s.a_teach
        loss += float(np.mean(resid**2))
        g_scores = 2.0 * resid / (resid.size * m)
        g_up += a_down.T @ g_scores
        g_a = g_scores @ w_up.T
        g_logits = a_down * (g_a - np.sum(g_a * a_down, axis=1, keepdims=True))
        g_down += scale * g_logits.T @ qk
    return loss / m, g_down, g_up


def phase1_step(
    samples: Sequence[Phase1Sample],
    params: PredictorParams,
    lr: float,
    weight_decay: float = PHASE1_WEIGHTS.weight_decay,
) -> PredictorParams:
    """One gradient-descent step with decoupled weight decay on both matrices."""
    w_down = params.w_down
    w_up = params.w_up.to_dense()
    _, g_down, g_up = phase1_gradients(samples, w_down, w_up)
    for name, g in (("w_down", g_down), ("w_up", g_up)):
        if not np.all(np.isfinite(g)):
            bad = int(np.count_nonzero(~np.isfinite(g)))
            raise TrainingDivergedError(f"non-finite gradient for {name}: {bad} entries; step aborted")
    decay = 1.0 - lr * weight_decay
    new_down = decay * w_down - lr * g_down
    new_up = decay * w_up - lr * g_up
    return params.replace(w_down=new_down, w_up=CsrMatrix.from_dense(new_up))


def prune_wup(w_up, threshold: float) -> CsrMatrix:
    """Drop entries with ``|value| < threshold``."""
    w = w_up if isinstance(w_up, CsrMatrix) else CsrMatrix.from_dense(w_up)
    keep = np.abs(w.values) >= threshold
    rows = w.row_ids()[keep]
    row_ptr = np.zeros(w.rows + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=w.rows), out=row_ptr[1:])
    pruned = CsrMatrix(w.rows, w.cols, row_ptr, w.col_idx[keep], w.values[keep])
    logger.info("pruned w_up at %g: density %.4f -> %.4f", threshold, w.density, pruned.density)
    return pruned


def collect_phase1_samples(model: ViTModel, images) -> list[list[Phase1Sample]]:
    """Per-layer samples from the frozen dense backbone (teacher = dense attention)."""
    per_layer: list[list[Phase1Sample]] = [[] for _ in model.layers]
    for image in images:
        result = forward(image, model, "dense")
        for li, (layer, trace) in enumerate(zip(model.layers, result.traces)):
            for head in layer.heads:
                q, k, _ = head.project(trace.x_norm)
                a = softmax_rows(q @ k.T, 1.0 / math.sqrt(head.d_head))
                per_layer[li].append(Phase1Sample(q, k, a))
    return per_layer


@dataclass
class Phase1Result:
    predictors: list[PredictorParams]
    losses: list[list[float]]
    densities: list[float]


def train_phase1(
    model: ViTModel,
    images,
    steps: int,
    lr: float,
    weight_decay: float = PHASE1_WEIGHTS.weight_decay,
    prune_threshold: float = 1e-2,
) -> Phase1Result:
    """Train every layer's predictor for ``steps`` steps, then prune its basis."""
    samples = collect_phase1_samples(model, images)
    predictors, losses, densities = [], [], []
    for li, (layer, layer_samples) in enumerate(zip(model.layers, samples)):
        p = layer.predictor
        history = []
        for _ in range(steps):
            history.append(phase1_loss(layer_samples, p.w_down, p.w_up.to_dense()))
            p = phase1_step(layer_samples, p, lr, weight_decay)
        history.append(phase1_loss(layer_samples, p.w_down, p.w_up.to_dense()))
        p = p.replace(w_up=prune_wup(p.w_up, prune_threshold))
        logger.info("layer %d: attn loss %.6g -> %.6g, w_up density %.3f", li, history[0], history[-1], p.w_up_density)
        predictors.append(p)
        losses.append(history)
        densities.append(p.w_up_density)
    return Phase1Result(predictors, losses, densities)
