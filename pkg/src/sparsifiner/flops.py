"""Analytic MHSA cost model.

Convention: one multiply-accumulate counts as one FLOP, and only attention
matrix construction plus the attention-value product are counted (QKV/output
projections and softmax are excluded). Dense DeiT-S at 224px gives
``12 * 2 * 197^2 * 384 = 357.7M``.

The sparse model adds a predictor overhead per layer:

* ``2 * n * n_down * d_model``   key down-projection and query x projected-key
* ``n * n_down * n``             up-projection, counted dense (worst case)
* ``n_heads * n * n``            top-k selection, one comparison per score
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

from .linalg import InvalidInputError
from .predictor import budget_from_keep_rate

DEFAULT_HEAD_DIM = 64


@dataclass(frozen=True)
class LayerFlops:
    qk_macs: int
    av_macs: int
    predictor_macs: int = 0

    @property
    def total(self) -> int:
        return self.qk_macs + self.av_macs + self.predictor_macs


@dataclass(frozen=True)
class FlopReport:
    per_layer: tuple[LayerFlops, ...]

    @property
    def qk_macs(self) -> int:
        return sum(l.qk_macs for l in self.per_layer)

    @property
    def av_macs(self) -> int:
        return sum(l.av_macs for l in self.per_layer)

    @property
    def predictor_macs(self) -> int:
        return sum(l.predictor_macs for l in self.per_layer)

    @property
    def total_macs(self) -> int:
        return sum(l.total for l in self.per_layer)

    @property
    def mflops(self) -> float:
        return self.total_macs / 1e6

    def breakdown(self) -> dict[str, float]:
        """Percentage share of each cost component."""
        total = self.total_macs
        if total == 0:
            return {"qk": 0.0, "av": 0.0, "predictor": 0.0}
        return {
            "qk": 100.0 * self.qk_macs / total,
            "av": 100.0 * self.av_macs / total,
            "predictor": 100.0 * self.predictor_macs / total,
        }


def _check_counts(**counts: int) -> None:
    for name, value in counts.items():
        if value < 0:
            raise InvalidInputError(f"{name} must be >= 0, got {value}")


def dense_mhsa_flops(n: int, d_model: int, n_layers: int) -> FlopReport:
    _check_counts(n=n, d_model=d_model, n_layers=n_layers)
    layer = LayerFlops(qk_macs=n * n * d_model, av_macs=n * n * d_model)
    return FlopReport((layer,) * n_layers)


def sparsifiner_mhsa_flops(
    n: int, d_model: int, n_down: int, budget: int, n_layers: int, n_heads: int | None = None
) -> FlopReport:
    """Sparse MHSA cost. ``n_down = 0`` disables the predictor entirely.

    ``n_heads`` defaults to ``d_model // 64`` (at least 1), the DeiT head width.
    """
    _check_counts(n=n, d_model=d_model, n_down=n_down, budget=budget, n_layers=n_layers)
    if budget > n:
        raise InvalidInputError(f"budget {budget} exceeds token count {n}")
    if n_heads is None:
        n_heads = max(1, d_model // DEFAULT_HEAD_DIM)
    predictor = 0
    if n_down > 0:
        predictor = 2 * n * n_down * d_model + n * n_down * n + n_heads * n * n
    layer = LayerFlops(qk_macs=n * budget * d_model, av_macs=n * budget * d_model, predictor_macs=predictor)
    return FlopReport((layer,) * n_layers)


def linformer_mhsa_flops(n: int, d_model: int, k_lin: int, n_layers: int) -> FlopReport:
    _check_counts(n=n, d_model=d_model, k_lin=k_lin, n_layers=n_layers)
    layer = LayerFlops(
        qk_macs=n * k_lin * d_model,
        av_macs=n * k_lin * d_model,
        predictor_macs=2 * k_lin * n * d_model,
    )
    return FlopReport((layer,) * n_layers)


@dataclass(frozen=True)
class Discrepancy:
    analytic: tuple[int, ...]
    measured: tuple[int, ...]

    @property
    def excess(self) -> tuple[int, ...]:
        """``analytic - measured`` per layer; never negative when accounting holds."""
        return tuple(a - m for a, m in zip(self.analytic, self.measured))

    @property
    def measured_within_analytic(self) -> bool:
        return all(m <= a for a, m in zip(self.analytic, self.measured))

    @property
    def exact(self) -> bool:
        return self.analytic == self.measured

    @property
    def overcount_ratio(self) -> float:
        measured = sum(self.measured)
        return sum(self.analytic) / measured if measured else float("inf")


def measured_vs_analytic(report: FlopReport, measured: Sequence[Iterable]) -> Discrepancy:
    """Compare analytic masked QK + AV MACs against instrumented per-head stats.

    ``measured`` holds, per layer, the head statistics produced by the sparse
    MHSA path (anything with ``qk_macs`` and ``av_macs``).
    """
    if len(measured) != len(report.per_layer):
        raise InvalidInputError(f"{len(measured)} measured layers vs {len(report.per_layer)} analytic")
    analytic = tuple(l.qk_macs + l.av_macs for l in report.per_layer)
    counted = tuple(sum(s.qk_macs + s.av_macs for s in layer) for layer in measured)
    return Discrepancy(analytic, counted)


CSV_COLUMNS = ("keep_rate", "budget", "qk_macs", "av_macs", "predictor_macs", "total_mflops")


def table_rows(
    keep_rates: Sequence[float], n: int, d_model: int, n_down: int, n_layers: int, n_heads: int | None = None
) -> list[dict]:
    """One row per keep rate; keep rate 1.0 is the dense baseline (no predictor)."""
    rows = []
    for kr in keep_rates:
        budget = budget_from_keep_rate(kr, n)
        if kr == 1.0:
            rep = dense_mhsa_flops(n, d_model, n_layers)
        else:
            rep = sparsifiner_mhsa_flops(n, d_model, n_down, budget, n_layers, n_heads)
        rows.append({
            "keep_rate": kr,
            "budget": budget,
            "qk_macs": rep.qk_macs,
            "av_macs": rep.av_macs,
            "predictor_macs": rep.predictor_macs,
            "total_mflops": f"{rep.mflops:.4f}",
        })
    return rows


def rows_to_csv(rows: Sequence[dict], columns: Sequence[str] = CSV_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
    writer.writeheader()
    writer.writerows(rows)
    return buf.getvalue()
