"""Binary weight file.

Layout::

    magic      4 bytes   b"SPFW"
    version    uint32 LE
    length     uint64 LE  byte length of the manifest
    manifest   UTF-8 JSON {"config": ..., "predictors": [...], "tensors": [...]}
    payload    raw little-endian 64-bit values, tensors concatenated in manifest order

Each manifest tensor entry is ``{"name", "shape", "dtype"}`` with dtype
``"f64"`` or ``"i64"`` (the latter only for CSR index arrays). Tensors not
belonging to the model (for example ``teacher.attn.{layer}.{head}``) may be
appended and are returned by :func:`read_tensors`.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .dense_attention import AttentionHeadParams
from .linalg import CsrMatrix, InvalidInputError
from .predictor import PredictorParams
from .vit import LayerParams, ModelConfig, ViTModel

MAGIC = b"SPFW"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")
_DTYPES = {"f64": np.dtype("<f8"), "i64": np.dtype("<i8")}


class WeightFileError(Exception):
    code = "weight_file"


class BadMagicError(WeightFileError):
    code = "bad_magic"


class VersionMismatchError(WeightFileError):
    code = "version_mismatch"


class TruncatedFileError(WeightFileError):
    code = "truncated"


class ShapeMismatchError(WeightFileError):
    code = "shape_mismatch"

    def __init__(self, tensor: str, declared, expected):
        super().__init__(f"tensor {tensor!r}: manifest shape {list(declared)} != expected {list(expected)}")
        self.tensor = tensor


class ManifestError(WeightFileError):
    code = "bad_manifest"


def write_tensors(path, tensors: dict[str, np.ndarray], header: dict | None = None) -> None:
    entries, blobs = [], []
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        dtype = "i64" if np.issubdtype(arr.dtype, np.integer) else "f64"
        entries.append({"name": name, "shape": list(arr.shape), "dtype": dtype})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes())
    manifest = dict(header or {})
    manifest["tensors"] = entries
    text = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, len(text)))
        fh.write(text)
        for blob in blobs:
            fh.write(blob)


def read_tensors(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a weight file into its manifest and a name -> array mapping."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        if not MAGIC.startswith(raw[:4]):
            raise BadMagicError(f"{path}: not a weight file")
        raise TruncatedFileError(f"{path}: header truncated ({len(raw)} bytes)")
    magic, version, mlen = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{path}: version {version}, reader supports {VERSION}")
    start = _HEADER.size + mlen
    if len(raw) < start:
        raise TruncatedFileError(f"{path}: manifest truncated")
    try:
        manifest = json.loads(raw[_HEADER.size:start].decode("utf-8"))
        entries = manifest["tensors"]
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ManifestError(f"{path}: unreadable manifest ({exc})") from exc
    tensors: dict[str, np.ndarray] = {}
    offset = start
    for entry in entries:
        try:
            name, shape, dtype = entry["name"], tuple(int(s) for s in entry["shape"]), _DTYPES[entry["dtype"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: malformed tensor entry {entry!r}") from exc
        count = int(np.prod(shape, dtype=np.int64))
        end = offset + count * dtype.itemsize
        if end > len(raw):
            raise TruncatedFileError(f"{path}: payload ends inside tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape).astype(
            dtype.newbyteorder("=")
        )
        offset = end
    if offset != len(raw):
        raise ManifestError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return manifest, tensors


def _model_tensors(model: ViTModel) -> dict[str, np.ndarray]:
    t = {
        "patch_proj": model.patch_proj,
        "patch_bias": model.patch_bias,
        "cls_token": model.cls_token,
        "pos_embed": model.pos_embed,
        "final_norm.scale": model.final_norm[0],
        "final_norm.shift": model.final_norm[1],
        "head": model.head,
        "head_bias": model.head_bias,
    }
    for li, layer in enumerate(model.layers):
        pre = f"layers.{li}."
        for hi, h in enumerate(layer.heads):
            t[f"{pre}heads.{hi}.w_q"] = h.w_q
            t[f"{pre}heads.{hi}.w_k"] = h.w_k
            t[f"{pre}heads.{hi}.w_v"] = h.w_v
        t[pre + "w_o"] = layer.w_o
        t[pre + "mlp_in"] = layer.mlp_in
        t[pre + "mlp_out"] = layer.mlp_out
        t[pre + "norm1.scale"], t[pre + "norm1.shift"] = layer.norm1
        t[pre + "norm2.scale"], t[pre + "norm2.shift"] = layer.norm2
        p = layer.predictor
        t[pre + "predictor.w_down"] = p.w_down
        t[pre + "predictor.w_up.row_ptr"] = p.w_up.row_ptr
        t[pre + "predictor.w_up.col_idx"] = p.w_up.col_idx
        t[pre + "predictor.w_up.values"] = p.w_up.values
        if layer.linformer_e is not None:
            t[pre + "linformer_e"] = layer.linformer_e
            t[pre + "linformer_f"] = layer.linformer_f
    return t


def save_weights(model: ViTModel, path, extra: dict[str, np.ndarray] | None = None) -> None:
    tensors = _model_tensors(model)
    for name, arr in (extra or {}).items():
        if name in tensors:
            raise InvalidInputError(f"extra tensor {name!r} collides with a model tensor")
        tensors[name] = arr
    header = {
        "config": asdict(model.config),
        "predictors": [{"tau": l.predictor.tau, "budget": l.predictor.budget} for l in model.layers],
    }
    write_tensors(path, tensors, header)


def _expected_shapes(cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> dict[str, tuple]:
    d, n, dh, dm = cfg.d_model, cfg.n_tokens, cfg.d_head, cfg.d_mlp
    shapes = {
        "patch_proj": (cfg.patch_dim, d),
        "patch_bias": (d,),
        "cls_token": (d,),
        "pos_embed": (n, d),
        "final_norm.scale": (d,),
        "final_norm.shift": (d,),
        "head": (d, cfg.n_classes),
        "head_bias": (cfg.n_classes,),
    }
    for li in range(cfg.n_layers):
        pre = f"layers.{li}."
        for hi in range(cfg.n_heads):
            for w in ("w_q", "w_k", "w_v"):
                shapes[f"{pre}heads.{hi}.{w}"] = (d, dh)
        shapes[pre + "w_o"] = (d, d)
        shapes[pre + "mlp_in"] = (d, dm)
        shapes[pre + "mlp_out"] = (dm, d)
        for nm in ("norm1", "norm2"):
            shapes[f"{pre}{nm}.scale"] = (d,)
            shapes[f"{pre}{nm}.shift"] = (d,)
        w_down = tensors.get(pre + "predictor.w_down")
        n_down = w_down.shape[0] if w_down is not None and w_down.ndim == 2 else 0
        shapes[pre + "predictor.w_down"] = (n_down, n)
        shapes[pre + "predictor.w_up.row_ptr"] = (n_down + 1,)
        nnz = tensors.get(pre + "predictor.w_up.values")
        nnz = nnz.shape[0] if nnz is not None and nnz.ndim == 1 else -1
        shapes[pre + "predictor.w_up.col_idx"] = (nnz,)
        shapes[pre + "predictor.w_up.values"] = (nnz,)
        e = tensors.get(pre + "linformer_e")
        if e is not None:
            k = e.shape[0] if e.ndim == 2 else 0
            shapes[pre + "linformer_e"] = (k, n)
            shapes[pre + "linformer_f"] = (k, n)
    return shapes


def load_weights(path) -> ViTModel:
    manifest, t = read_tensors(path)
    try:
        cfg = ModelConfig(**manifest["config"])
        pred_meta = manifest["predictors"]
    except (KeyError, TypeError, InvalidInputError) as exc:
        raise ManifestError(f"{path}: bad model header ({exc})") from exc
    if len(pred_meta) != cfg.n_layers:
        raise ManifestError(f"{path}: {len(pred_meta)} predictor entries for {cfg.n_layers} layers")
    for name, shape in _expected_shapes(cfg, t).items():
        if name not in t:
            raise ManifestError(f"{path}: missing tensor {name!r}")
        if t[name].shape != shape:
            raise ShapeMismatchError(name, t[name].shape, shape)
    layers = []
    try:
        for li in range(cfg.n_layers):
            pre = f"layers.{li}."
            heads = [
                AttentionHeadParams(t[f"{pre}heads.{hi}.w_q"], t[f"{pre}heads.{hi}.w_k"], t[f"{pre}heads.{hi}.w_v"])
                for hi in range(cfg.n_heads)
            ]
            w_down = t[pre + "predictor.w_down"]
            w_up = CsrMatrix(
                w_down.shape[0], w_down.shape[1],
                t[pre + "predictor.w_up.row_ptr"], t[pre + "predictor.w_up.col_idx"], t[pre + "predictor.w_up.values"],
            )
            pred = PredictorParams(w_down, w_up, float(pred_meta[li]["tau"]), int(pred_meta[li]["budget"]))
            layers.append(
                LayerParams(
                    heads=heads,
                    w_o=t[pre + "w_o"],
                    predictor=pred,
                    mlp_in=t[pre + "mlp_in"],
                    mlp_out=t[pre + "mlp_out"],
                    norm1=(t[pre + "norm1.scale"], t[pre + "norm1.shift"]),
                    norm2=(t[pre + "norm2.scale"], t[pre + "norm2.shift"]),
                    linformer_e=t.get(pre + "linformer_e"),
                    linformer_f=t.get(pre + "linformer_f"),
                )
            )
    except (InvalidInputError, KeyError) as exc:
        raise ManifestError(f"{path}: invalid layer data ({exc})") from exc
    return ViTModel(
        config=cfg,
        patch_proj=t["patch_proj"],
        patch_bias=t["patch_bias"],
        cls_token=t["cls_token"],
        pos_embed=t["pos_embed"],
        layers=layers,
        final_norm=(t["final_norm.scale"], t["final_norm.shift"]),
        head=t["head"],
        head_bias=t["head_bias"],
    )


_TEACHER = re.compile(r"^teacher\.attn\.(\d+)\.(\d+)$")


def teacher_attn_tensors(attn: dict[tuple[int, int], np.ndarray]) -> dict[str, np.ndarray]:
    return {f"teacher.attn.{l}.{h}": a for (l, h), a in attn.items()}


def load_teacher_attn(path) -> dict[tuple[int, int], np.ndarray]:
    _, tensors = read_tensors(path)
    out = {}
    for name, arr in tensors.items():
        m = _TEACHER.match(name)
        if m:
            out[(int(m.group(1)), int(m.group(2)))] = arr
    return out
