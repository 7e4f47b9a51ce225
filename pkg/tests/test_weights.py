import json
import struct

import numpy as np
import pytest

from sparsifiner.vit import ModelConfig, forward_classify, init_model, random_image
from sparsifiner.weights import (
    BadMagicError,
    ManifestError,
    ShapeMismatchError,
    TruncatedFileError,
    VersionMismatchError,
    WeightFileError,
    load_teacher_attn,
    load_weights,
    read_tensors,
    save_weights,
    teacher_attn_tensors,
    write_tensors,
)

CFG = ModelConfig(image_size=16, patch_size=8, d_model=8, n_heads=2, n_layers=2, n_classes=4)


@pytest.fixture
def model():
    return init_model(CFG, seed=3, n_down=3, budget=2)


def test_roundtrip_bit_identical(tmp_path, model, rng):
    path = tmp_path / "m.spfw"
    save_weights(model, path)
    loaded = load_weights(path)
    assert loaded.config == model.config
    img = random_image(CFG, rng)
    for mode in ("dense", "sparsifiner", "linformer"):
        np.testing.assert_array_equal(forward_classify(img, loaded, mode), forward_classify(img, model, mode))
    for a, b in zip(loaded.layers, model.layers):
        assert a.predictor.tau == b.predictor.tau and a.predictor.budget == b.predictor.budget
        np.testing.assert_array_equal(a.predictor.w_up.col_idx, b.predictor.w_up.col_idx)


def test_raw_tensor_roundtrip(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3), "idx": np.array([3, 1, 4], dtype=np.int64), "s": np.array(2.5)}
    write_tensors(tmp_path / "t.bin", t, {"note": "x"})
    manifest, back = read_tensors(tmp_path / "t.bin")
    assert manifest["note"] == "x"
    assert back["idx"].dtype == np.int64
    for k in t:
        np.testing.assert_array_equal(back[k], t[k])


def test_bad_magic(tmp_path):
    p = tmp_path / "x.spfw"
    p.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(BadMagicError) as ei:
        read_tensors(p)
    assert ei.value.code == "bad_magic"


def test_version_mismatch(tmp_path):
    p = tmp_path / "x.spfw"
    p.write_bytes(struct.pack("<4sIQ", b"SPFW", 99, 2) + b"{}")
    with pytest.raises(VersionMismatchError):
        read_tensors(p)


@pytest.mark.parametrize("cut", [3, 10, 40, -8])
def test_truncation(tmp_path, model, cut):
    p = tmp_path / "m.spfw"
    save_weights(model, p)
    raw = p.read_bytes()
    p.write_bytes(raw[:cut])
    with pytest.raises(WeightFileError) as ei:
        load_weights(p)
    assert isinstance(ei.value, (TruncatedFileError, ManifestError))


def test_payload_truncation_is_typed(tmp_path, model):
    p = tmp_path / "m.spfw"
    save_weights(model, p)
    p.write_bytes(p.read_bytes()[:-8])
    with pytest.raises(TruncatedFileError):
        load_weights(p)


def test_trailing_bytes(tmp_path, model):
    p = tmp_path / "m.spfw"
    save_weights(model, p)
    p.write_bytes(p.read_bytes() + b"\0" * 8)
    with pytest.raises(ManifestError):
        load_weights(p)


def _rewrite_manifest(path, edit):
    raw = path.read_bytes()
    magic, version, mlen = struct.unpack_from("<4sIQ", raw)
    manifest = json.loads(raw[16:16 + mlen])
    edit(manifest)
    text = json.dumps(manifest).encode()
    path.write_bytes(struct.pack("<4sIQ", magic, version, len(text)) + text + raw[16 + mlen:])


def test_shape_mismatch_names_tensor(tmp_path, model):
    p = tmp_path / "m.spfw"
    save_weights(model, p)

    def edit(m):
        for e in m["tensors"]:
            if e["name"] == "layers.1.w_o":
                e["shape"] = [4, 16]  # same element count, wrong shape

    _rewrite_manifest(p, edit)
    with pytest.raises(ShapeMismatchError) as ei:
        load_weights(p)
    assert ei.value.tensor == "layers.1.w_o"
    assert "layers.1.w_o" in str(ei.value)


def test_config_disagreeing_with_tensors(tmp_path, model):
    p = tmp_path / "m.spfw"
    save_weights(model, p)
    _rewrite_manifest(p, lambda m: m["config"].update(n_classes=5))
    with pytest.raises(ShapeMismatchError):
        load_weights(p)


def test_missing_config(tmp_path, model):
    p = tmp_path / "m.spfw"
    save_weights(model, p)
    _rewrite_manifest(p, lambda m: m.pop("config"))
    with pytest.raises(ManifestError):
        load_weights(p)


def test_teacher_attention(tmp_path, model, rng):
    attn = {(0, 1): rng.random((5, 5)), (1, 0): rng.random((5, 5))}
    p = tmp_path / "m.spfw"
    save_weights(model, p, extra=teacher_attn_tensors(attn))
    back = load_teacher_attn(p)
    assert set(back) == set(attn)
    for key in attn:
        np.testing.assert_array_equal(back[key], attn[key])
    load_weights(p)  # model still loads with extra tensors present
