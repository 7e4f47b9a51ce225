"""Command-line front end: equivalence checks, budget sweeps, FLOP tables, dumps, phase-1 training.

Exit codes: 0 success, 1 check failure, 2 I/O or file-format error, 64 usage error.
Settings resolve as defaults < ``--config`` YAML file < ``SPARSIFINER_*`` env vars < flags.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml

from .dense_attention import naive_attention_head
from .distill import train_phase1
from .flops import (
    CSV_COLUMNS,
    linformer_mhsa_flops,
    measured_vs_analytic,
    rows_to_csv,
    sparsifiner_mhsa_flops,
    table_rows,
)
from .linalg import InvalidInputError
from .pnm import PnmError, read_ppm, write_pgm
from .predictor import budget_from_keep_rate, full_budget_predictor
from .vit import DEIT_S, DEIT_T_384, MODES, ModelConfig, ViTModel, forward, init_model, random_image
from .weights import WeightFileError, load_weights, save_weights

log = logging.getLogger("sparsifiner")

EXIT_OK, EXIT_CHECK, EXIT_IO, EXIT_USAGE = 0, 1, 2, 64
ENV_PREFIX = "SPARSIFINER_"

PRESETS = {
    "tiny": dict(image_size=32, patch_size=8, d_model=32, n_heads=2, n_layers=2, n_classes=10),
    "deit-s": dict(image_size=DEIT_S.image_size, patch_size=16, d_model=384, n_heads=6, n_layers=12, n_classes=1000),
    "deit-t-384": dict(image_size=DEIT_T_384.image_size, patch_size=16, d_model=192, n_heads=3, n_layers=12,
                       n_classes=1000),
}

# modes each command accepts; None means the flag is meaningless there
COMMAND_MODES = {
    "equivalence": None,
    "sweep": ("sparsifiner",),
    "flops": MODES,
    "dump-attention": ("sparsifiner",),
    "train-phase1": ("sparsifiner",),
}


class UsageError(Exception):
    pass


class CheckFailure(Exception):
    pass


@dataclass
class RunConfig:
    seed: int = 42
    preset: str = "tiny"
    image_size: int | None = None
    patch_size: int | None = None
    d_model: int | None = None
    n_heads: int | None = None
    n_layers: int | None = None
    n_classes: int | None = None
    mlp_ratio: float = 4.0
    model: str | None = None
    keep_rates: list[float] = field(default_factory=lambda: [1.0, 0.5, 0.2, 0.1])
    n_down: int = 32
    tau: float = 0.05
    mode: str | None = None
    semantics: str = "renormalized"
    out_dir: str = "out"
    n_images: int = 2
    images: list[str] = field(default_factory=list)
    n_models: int = 20
    tolerance: float = 1e-5
    full_budget: bool = False
    layer: int = 0
    head: int = 0
    query: int = 0
    steps: int = 50
    lr: float = 1e-2
    weight_decay: float = 0.05
    prune_threshold: float = 1e-2

    def model_config(self) -> ModelConfig:
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r}; choose from {sorted(PRESETS)}")
        dims = dict(PRESETS[self.preset])
        for key in dims:
            if getattr(self, key) is not None:
                dims[key] = getattr(self, key)
        try:
            return ModelConfig(mlp_ratio=self.mlp_ratio, **dims)
        except InvalidInputError as exc:
            raise UsageError(str(exc)) from exc

    def validate(self) -> None:
        if not self.keep_rates:
            raise UsageError("keep_rates must not be empty")
        for kr in self.keep_rates:
            if not 0.0 < kr <= 1.0:
                raise UsageError(f"keep rate {kr} outside (0, 1]")
        if self.semantics not in ("renormalized", "masked"):
            raise UsageError(f"unknown semantics {self.semantics!r}")
        if self.n_down < 1:
            raise UsageError("n_down must be >= 1")
        if not 0.0 < self.tau < 1.0:
            raise UsageError("tau must lie in (0, 1)")


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    kind = _FIELD_TYPES[name]
    try:
        if "list[float]" in kind:
            if isinstance(value, str):
                value = [v for v in value.replace(",", " ").split() if v]
            return [float(v) for v in value]
        if "list[str]" in kind:
            return [value] if isinstance(value, str) else [str(v) for v in value]
        if value is None:
            return None
        if kind.startswith("bool"):
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes", "on")
            return bool(value)
        if kind.startswith("int"):
            return int(value)
        if kind.startswith("float"):
            return float(value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad value for {name}: {value!r}") from exc


def _flatten(doc: dict, out: dict) -> dict:
    # nesting is organisational only: model: {d_model: ...} == d_model: ...
    for key, value in doc.items():
        key = str(key).replace("-", "_")
        if isinstance(value, dict):
            _flatten(value, out)
        else:
            out[key] = value
    return out


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    settings: dict = {}
    if args.config:
        try:
            doc = yaml.safe_load(Path(args.config).read_text()) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"config {args.config} is not valid YAML: {exc}") from exc
        if not isinstance(doc, dict):
            raise UsageError(f"config {args.config} must be a mapping")
        settings.update(_flatten(doc, {}))
    for name in _FIELD_TYPES:
        env = environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            settings[name] = env
    for name in _FIELD_TYPES:
        value = getattr(args, name, None)
        if value is not None and value is not False:
            settings[name] = value
    unknown = set(settings) - set(_FIELD_TYPES)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    cfg = RunConfig(**{k: _coerce(k, v) for k, v in settings.items()})
    cfg.validate()
    mode_ok = COMMAND_MODES[args.command]
    if cfg.mode is not None:
        if mode_ok is None:
            raise UsageError(f"--mode does not apply to {args.command}")
        if cfg.mode not in mode_ok:
            raise UsageError(f"{args.command} does not support mode {cfg.mode!r} (allowed: {', '.join(mode_ok)})")
    return cfg


def build_model(cfg: RunConfig, budget: int | None = None) -> ViTModel:
    if cfg.model:
        model = load_weights(cfg.model)
        if budget is not None:
            model = model.with_budget(budget)
        if cfg.full_budget:
            rng = np.random.default_rng(cfg.seed)
            n = model.config.n_tokens
            model = model.with_predictors([full_budget_predictor(n, cfg.n_down, rng) for _ in model.layers])
        return model
    return init_model(cfg.model_config(), seed=cfg.seed, n_down=cfg.n_down, tau=cfg.tau, budget=budget,
                      full_budget=cfg.full_budget)


def load_images(cfg: RunConfig, mcfg: ModelConfig) -> list[np.ndarray]:
    if cfg.images:
        return [read_ppm(p) for p in cfg.images]
    rng = np.random.default_rng(cfg.seed + 1_000_003)
    return [random_image(mcfg, rng) for _ in range(cfg.n_images)]


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_equivalence(cfg: RunConfig) -> int:
    records = []
    if cfg.model:
        models = [build_model(dataclasses.replace(cfg, full_budget=True))]
    else:
        models = [init_model(cfg.model_config(), seed=cfg.seed + i, n_down=cfg.n_down, full_budget=True)
                  for i in range(cfg.n_models)]
    for i, model in enumerate(models):
        image = random_image(model.config, np.random.default_rng(cfg.seed + i))
        dense = forward(image, model, "dense").scores
        for mode in ("sparsifiner", "linformer"):
            err = rel_err(forward(image, model, mode, cfg.semantics).scores, dense)
            records.append({"model": i, "check": f"dense_vs_{mode}", "max_rel_err": f"{err:.3e}",
                            "pass": int(err < cfg.tolerance)})
    out = _out_dir(cfg) / "equivalence.csv"
    out.write_text(rows_to_csv(records, ("model", "check", "max_rel_err", "pass")))
    failed = [r for r in records if not r["pass"]]
    for r in failed:
        print(f"FAIL model {r['model']} {r['check']}: {r['max_rel_err']} >= {cfg.tolerance:g}", file=sys.stderr)
    print(f"equivalence: {len(records) - len(failed)}/{len(records)} checks passed -> {out}")
    return EXIT_CHECK if failed else EXIT_OK


SWEEP_COLUMNS = CSV_COLUMNS + ("measured_qk_macs", "measured_av_macs", "mean_row_nnz", "agreement")


def cmd_sweep(cfg: RunConfig) -> int:
    base = build_model(cfg)
    mcfg = base.config
    n = mcfg.n_tokens
    images = load_images(cfg, mcfg)
    dense_pred = [int(np.argmax(forward(img, base, "dense").scores)) for img in images]
    rows = table_rows(cfg.keep_rates, n, mcfg.d_model, cfg.n_down, mcfg.n_layers, mcfg.n_heads)
    for kr, row in zip(cfg.keep_rates, rows):
        budget = row["budget"]
        qk = av = nnz = agree = 0
        for img, ref in zip(images, dense_pred):
            if kr == 1.0:
                res = forward(img, base, "dense")
                qk += n * n * mcfg.d_model * mcfg.n_layers
                nnz += n * n * mcfg.n_heads * mcfg.n_layers
            else:
                model = base.with_budget(budget)
                res = forward(img, model, "sparsifiner", cfg.semantics)
                stats = [t.stats for t in res.traces]
                analytic = _analytic_masked(n, budget, mcfg)
                disc = measured_vs_analytic(analytic, stats)
                if not disc.measured_within_analytic:
                    raise CheckFailure(f"keep rate {kr}: measured MACs exceed analytic bound")
                qk += sum(s.qk_macs for layer in stats for s in layer)
                nnz += sum(s.nnz for layer in stats for s in layer)
            agree += int(np.argmax(res.scores)) == ref
        m = len(images)
        row["measured_qk_macs"] = f"{qk / m:.1f}"
        row["measured_av_macs"] = f"{qk / m:.1f}"
        row["mean_row_nnz"] = f"{nnz / (m * n * mcfg.n_heads * mcfg.n_layers):.4f}"
        row["agreement"] = f"{agree / m:.4f}"
    ordered = sorted(zip(cfg.keep_rates, rows), key=lambda t: -t[0])
    totals = [float(r["total_mflops"]) for kr, r in ordered if kr < 1.0]
    if any(a < b for a, b in zip(totals, totals[1:])):
        raise CheckFailure("FLOPs are not monotone in keep rate")
    out = _out_dir(cfg) / "sweep.csv"
    out.write_text(rows_to_csv(rows, SWEEP_COLUMNS))
    print(out.read_text(), end="")
    return EXIT_OK


def _analytic_masked(n: int, budget: int, mcfg: ModelConfig):
    # predictor disabled: only the masked QK/AV terms are comparable with measurements
    return sparsifiner_mhsa_flops(n, mcfg.d_model, 0, budget, mcfg.n_layers)


def cmd_flops(cfg: RunConfig) -> int:
    mcfg = load_weights(cfg.model).config if cfg.model else cfg.model_config()
    n = mcfg.n_tokens
    mode = cfg.mode or "sparsifiner"
    if mode == "dense":
        rows = table_rows([1.0], n, mcfg.d_model, cfg.n_down, mcfg.n_layers, mcfg.n_heads)
    elif mode == "sparsifiner":
        rows = table_rows(cfg.keep_rates, n, mcfg.d_model, cfg.n_down, mcfg.n_layers, mcfg.n_heads)
    else:
        rows = []
        for kr in cfg.keep_rates:
            k_lin = budget_from_keep_rate(kr, n)
            rep = linformer_mhsa_flops(n, mcfg.d_model, k_lin, mcfg.n_layers)
            rows.append({"keep_rate": kr, "budget": k_lin, "qk_macs": rep.qk_macs, "av_macs": rep.av_macs,
                         "predictor_macs": rep.predictor_macs, "total_mflops": f"{rep.mflops:.4f}"})
    text = rows_to_csv(rows)
    (_out_dir(cfg) / f"flops_{mode}.csv").write_text(text)
    print(text, end="")
    return EXIT_OK


def _write_row(out: Path, stem: str, values: np.ndarray, grid: int | None) -> None:
    values = np.atleast_2d(values)
    with open(out / f"{stem}.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in values:
            writer.writerow([repr(float(v)) for v in row])
    img = values
    if grid is not None and values.shape[0] == 1:
        img = values[0, 1:].reshape(grid, grid)  # patch tokens only, CLS dropped
    write_pgm(out / f"{stem}.pgm", img)


def cmd_dump_attention(cfg: RunConfig) -> int:
    budget = None
    if not cfg.full_budget:
        n = (load_weights(cfg.model).config if cfg.model else cfg.model_config()).n_tokens
        budget = budget_from_keep_rate(cfg.keep_rates[0], n)
    model = build_model(cfg, budget)
    mcfg = model.config
    n = mcfg.n_tokens
    for name, value, bound in (("layer", cfg.layer, mcfg.n_layers), ("head", cfg.head, mcfg.n_heads),
                               ("query", cfg.query, n)):
        if not 0 <= value < bound:
            raise UsageError(f"{name} {value} out of range [0, {bound})")
    image = load_images(dataclasses.replace(cfg, n_images=1), mcfg)[0]
    res = forward(image, model, "sparsifiner", cfg.semantics)
    trace = res.traces[cfg.layer]
    hr = trace.head_results[cfg.head]
    full, _ = naive_attention_head(trace.x_norm, model.layers[cfg.layer].heads[cfg.head])
    mask_row = np.zeros(n)
    cols, _ = hr.mask.mask.row(cfg.query)
    mask_row[cols] = 1.0
    sparse_row = np.zeros(n)
    cols, vals = hr.attn.attn.row(cfg.query)
    sparse_row[cols] = vals
    a_sparse_row = np.zeros(hr.a_down.shape[1])
    cols, vals = hr.a_down_sparse.row(cfg.query)
    a_sparse_row[cols] = vals
    out = _out_dir(cfg)
    tag = f"l{cfg.layer}_h{cfg.head}_q{cfg.query}"
    _write_row(out, f"mask_{tag}", mask_row, mcfg.grid)
    _write_row(out, f"sparse_attn_{tag}", sparse_row, mcfg.grid)
    _write_row(out, f"full_attn_{tag}", full[cfg.query], mcfg.grid)
    _write_row(out, f"a_down_{tag}", hr.a_down[cfg.query], None)
    _write_row(out, f"a_down_sparse_{tag}", a_sparse_row, None)
    _write_row(out, f"w_up_l{cfg.layer}", model.layers[cfg.layer].predictor.w_up.to_dense(), None)
    print(f"dump-attention: wrote layer {cfg.layer} head {cfg.head} query {cfg.query} to {out}")
    return EXIT_OK


def cmd_train_phase1(cfg: RunConfig) -> int:
    n = (load_weights(cfg.model).config if cfg.model else cfg.model_config()).n_tokens
    model = build_model(cfg, budget_from_keep_rate(cfg.keep_rates[-1], n))
    images = load_images(cfg, model.config)
    result = train_phase1(model, images, cfg.steps, cfg.lr, cfg.weight_decay, cfg.prune_threshold)
    out = _out_dir(cfg)
    loss_rows = [{"layer": li, "step": s, "attn_loss": f"{v:.10e}"}
                 for li, hist in enumerate(result.losses) for s, v in enumerate(hist)]
    (out / "phase1_loss.csv").write_text(rows_to_csv(loss_rows, ("layer", "step", "attn_loss")))
    dens_rows = [{"layer": li, "w_up_density": f"{d:.6f}"} for li, d in enumerate(result.densities)]
    (out / "phase1_density.csv").write_text(rows_to_csv(dens_rows, ("layer", "w_up_density")))
    trained = model.with_predictors(result.predictors)
    # trained predictors must still yield valid masks
    forward(images[0], trained, "sparsifiner", cfg.semantics)
    save_weights(trained, out / "phase1_model.spfw")
    for li, (hist, d) in enumerate(zip(result.losses, result.densities)):
        print(f"layer {li}: attn loss {hist[0]:.6g} -> {hist[-1]:.6g}, w_up density {d:.3f}")
    return EXIT_OK


COMMANDS = {
    "equivalence": cmd_equivalence,
    "sweep": cmd_sweep,
    "flops": cmd_flops,
    "dump-attention": cmd_dump_attention,
    "train-phase1": cmd_train_phase1,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--preset", choices=sorted(PRESETS))
    common.add_argument("--model", help="weight file; overrides the synthetic model")
    for dim in ("image-size", "patch-size", "d-model", "n-heads", "n-layers", "n-classes"):
        common.add_argument(f"--{dim}", type=int)
    common.add_argument("--keep-rates", help="comma-separated keep rates in (0, 1]")
    common.add_argument("--n-down", type=int)
    common.add_argument("--tau", type=float)
    common.add_argument("--mode", choices=MODES)
    common.add_argument("--semantics", choices=("renormalized", "masked"))
    common.add_argument("--out-dir")
    common.add_argument("--image", dest="images", action="append", help="binary PPM input (repeatable)")
    common.add_argument("--n-images", type=int)
    common.add_argument("--full-budget", action="store_true", default=None,
                        help="use predictors whose masks are always complete")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="sparsifiner", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    eq = sub.add_parser("equivalence", parents=[common], help="dense vs full-budget sparse vs full-rank Linformer")
    eq.add_argument("--n-models", type=int)
    eq.add_argument("--tolerance", type=float)
    sub.add_parser("sweep", parents=[common], help="FLOPs, measured work and agreement per keep rate")
    sub.add_parser("flops", parents=[common], help="analytic MHSA FLOP table")
    dump = sub.add_parser("dump-attention", parents=[common], help="mask/attention/basis heatmaps for one query")
    dump.add_argument("--layer", type=int)
    dump.add_argument("--head", type=int)
    dump.add_argument("--query", type=int)
    tr = sub.add_parser("train-phase1", parents=[common], help="predictor-only distillation + basis pruning")
    tr.add_argument("--steps", type=int)
    tr.add_argument("--lr", type=float)
    tr.add_argument("--weight-decay", type=float)
    tr.add_argument("--prune-threshold", type=float)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (WeightFileError, PnmError, OSError) as exc:
        code = getattr(exc, "code", type(exc).__name__)
        print(f"error [{code}]: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CheckFailure, InvalidInputError, FloatingPointError) as exc:
        print(f"check failed: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
