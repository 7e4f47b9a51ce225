import math

import numpy as np
import pytest

from conftest import dense_sparse_pipeline_head, random_csr, rel_err
from sparsifiner.dense_attention import AttentionHeadParams, multi_head_attention, naive_attention_head
from sparsifiner.linalg import CsrMatrix, InvalidInputError
from sparsifiner.predictor import ConnectivityMask, PredictorParams, full_budget_predictor, init_predictor
from sparsifiner.sparse_mhsa import (
    SparseAttention,
    masked_qk,
    sparse_attention_value,
    sparse_row_softmax,
    sparsifiner_head,
    sparsifiner_mhsa,
)


def random_mask(rng, n, density=0.3):
    m = (rng.random((n, n)) < density).astype(float)
    np.fill_diagonal(m, 1.0)
    return ConnectivityMask(CsrMatrix.from_dense(m), n)


def make_heads(rng, n_heads, d_model, d_head):
    return [AttentionHeadParams(*(rng.standard_normal((d_model, d_head)) * 0.4 for _ in range(3)))
            for _ in range(n_heads)]


class TestMaskedQK:
    def test_full_mask(self, rng):
        q, k = rng.standard_normal((7, 4)), rng.standard_normal((7, 4))
        out = masked_qk(q, k, ConnectivityMask.full(7))
        assert rel_err(out.to_dense(), q @ k.T / 2.0) < 1e-12

    def test_diagonal(self, rng):
        q, k = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        out = masked_qk(q, k, ConnectivityMask(CsrMatrix.identity(5), 1))
        np.testing.assert_allclose(out.values, np.sum(q * k, axis=1) / math.sqrt(3), rtol=1e-14)

    def test_random_mask_elementwise(self, rng):
        q, k = rng.standard_normal((12, 4)), rng.standard_normal((12, 4))
        mask = random_mask(rng, 12)
        out = masked_qk(q, k, mask)
        assert out.same_pattern(mask.mask)
        m = mask.mask.to_dense()
        ref = m * (q @ k.T / 2.0)
        assert rel_err(out.to_dense(), ref) < 1e-12

    def test_mismatch(self, rng):
        with pytest.raises(InvalidInputError):
            masked_qk(np.ones((4, 2)), np.ones((4, 2)), ConnectivityMask.full(5))


class TestSparseSoftmax:
    def test_single_entry(self):
        out = sparse_row_softmax(CsrMatrix(1, 3, [0, 1], [2], [-7.5]))
        assert out.attn.values.tolist() == [1.0]

    def test_equal_logits(self):
        out = sparse_row_softmax(CsrMatrix(1, 6, [0, 4], [0, 1, 3, 5], [2.0] * 4))
        np.testing.assert_allclose(out.attn.values, 0.25)

    def test_gather_scatter_oracle(self, rng):
        mask = random_mask(rng, 15, 0.4)
        logits = mask.mask.with_values(rng.standard_normal(mask.nnz) * 5)
        out = sparse_row_softmax(logits)
        assert out.attn.same_pattern(logits)
        dense = np.zeros((15, 15))
        for i in range(15):
            c, v = logits.row(i)
            e = np.exp(v - v.max())
            dense[i, c] = e / e.sum()
        assert rel_err(out.attn.to_dense(), dense) < 1e-10

    def test_empty_row_rejected(self):
        with pytest.raises(InvalidInputError):
            sparse_row_softmax(CsrMatrix(2, 2, [0, 1, 1], [0], [1.0]))

    def test_unnormalized_semantics(self, rng):
        q, k = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        mask = random_mask(rng, 6)
        z = q @ k.T / math.sqrt(3)
        lse = np.log(np.exp(z).sum(axis=1))
        out = sparse_row_softmax(masked_qk(q, k, mask), lse)
        full = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        assert not out.normalized
        np.testing.assert_allclose(out.attn.to_dense(), full * mask.mask.to_dense(), rtol=1e-12)

    def test_sparse_attention_checks_rows(self):
        with pytest.raises(InvalidInputError):
            SparseAttention(CsrMatrix.from_dense(np.array([[0.5, 0.4]])))


class TestAttentionValue:
    def test_diagonal_identity(self, rng):
        v = rng.standard_normal((5, 3))
        out = sparse_attention_value(SparseAttention(CsrMatrix.identity(5)), v)
        np.testing.assert_array_equal(out, v)

    def test_uniform_averages(self, rng):
        v = rng.standard_normal((6, 2))
        attn = SparseAttention(CsrMatrix.from_dense(np.full((6, 6), 1 / 6)))
        np.testing.assert_allclose(sparse_attention_value(attn, v), np.tile(v.mean(axis=0), (6, 1)), rtol=1e-12)

    def test_densify_oracle(self, rng):
        mask = random_mask(rng, 10)
        attn = sparse_row_softmax(mask.mask.with_values(rng.standard_normal(mask.nnz)))
        v = rng.standard_normal((10, 4))
        assert rel_err(sparse_attention_value(attn, v), attn.attn.to_dense() @ v) < 1e-12

    def test_mismatch(self):
        with pytest.raises(InvalidInputError):
            sparse_attention_value(SparseAttention(CsrMatrix.identity(3)), np.ones((4, 2)))


class TestSparsifinerMhsa:
    def test_full_budget_equals_dense(self, rng):
        n, d = 10, 8
        heads = make_heads(rng, 2, d, 4)
        w_o = rng.standard_normal((8, 8))
        pred = full_budget_predictor(n, 4, rng)
        x = rng.standard_normal((n, d))
        res = sparsifiner_mhsa(x, heads, pred, w_o)
        assert all(m.nnz == n * n for m in res.masks)
        assert rel_err(res.out, multi_head_attention(x, heads, w_o)) < 1e-6

    def test_budget_one_projects_values(self, rng):
        n, d = 9, 6
        heads = make_heads(rng, 3, d, 2)
        w_o = rng.standard_normal((6, 6))
        pred = init_predictor(n, 4, 1, rng)
        x = rng.standard_normal((n, d))
        res = sparsifiner_mhsa(x, heads, pred, w_o)
        ref = np.concatenate([x @ h.w_v for h in heads], axis=1) @ w_o
        np.testing.assert_allclose(res.out, ref, rtol=1e-12)

    def test_dense_pipeline_oracle(self, rng):
        n, d = 16, 8
        heads = make_heads(rng, 2, d, 4)
        w_o = rng.standard_normal((8, 8))
        w_up = random_csr(rng, 4, n, 0.5)  # signed basis exercises the fallback paths
        pred = PredictorParams(rng.standard_normal((4, n)), w_up, 0.05, 4)
        x = rng.standard_normal((n, d))
        res = sparsifiner_mhsa(x, heads, pred, w_o)
        outs = []
        for h, mask in zip(heads, res.masks):
            out, ref_mask = dense_sparse_pipeline_head(x, h, pred)
            np.testing.assert_array_equal(mask.mask.to_dense(), ref_mask)
            outs.append(out)
        assert rel_err(res.out, np.concatenate(outs, axis=1) @ w_o) < 1e-10

    def test_stats_and_work_bound(self, rng):
        n, d = 12, 6
        heads = make_heads(rng, 2, d, 3)
        pred = init_predictor(n, 4, 5, rng, density=0.3)
        res = sparsifiner_mhsa(rng.standard_normal((n, d)), heads, pred, np.eye(6))
        for s, m in zip(res.stats, res.masks):
            assert s.nnz == m.nnz
            assert s.qk_macs == s.av_macs == m.nnz * 3
            assert s.qk_macs + s.av_macs <= 2 * n * pred.budget * 3
            assert s.saturated_rows == int(np.sum(m.budget_used == 5))

    def test_masked_semantics_rows_sum_below_one(self, rng):
        n = 8
        head = make_heads(rng, 1, 4, 4)[0]
        pred = init_predictor(n, 3, 3, rng, density=0.5)
        x = rng.standard_normal((n, 4))
        r = sparsifiner_head(x, head, pred, semantics="masked")
        full, _ = naive_attention_head(x, head)
        np.testing.assert_allclose(r.attn.attn.to_dense(), full * r.mask.mask.to_dense(), rtol=1e-12)
        with pytest.raises(InvalidInputError):
            sparsifiner_head(x, head, pred, semantics="bogus")

    def test_token_count_mismatch(self, rng):
        head = make_heads(rng, 1, 4, 2)[0]
        pred = init_predictor(8, 3, 3, rng)
        with pytest.raises(InvalidInputError):
            sparsifiner_head(rng.standard_normal((7, 4)), head, pred)
