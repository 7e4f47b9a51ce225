import math

import mpmath
import numpy as np
import pytest

from conftest import rel_err
from sparsifiner.dense_attention import (
    AttentionHeadParams,
    LinformerParams,
    linformer_head,
    multi_head_attention,
    naive_attention_head,
)
from sparsifiner.linalg import InvalidInputError


def make_head(rng, d_model, d_head):
    return AttentionHeadParams(*(rng.standard_normal((d_model, d_head)) * 0.5 for _ in range(3)))


def mp_attention(x, head):
    """Step-by-step 40-digit evaluation of softmax(Q K^T / sqrt(d)) V."""
    with mpmath.workdps(40):
        X = mpmath.matrix(x.tolist())
        Q, K, V = (X * mpmath.matrix(w.tolist()) for w in (head.w_q, head.w_k, head.w_v))
        S = Q * K.T / mpmath.sqrt(head.d_head)
        n = S.rows
        A = mpmath.matrix(n, n)
        for i in range(n):
            e = [mpmath.exp(S[i, j]) for j in range(n)]
            tot = mpmath.fsum(e)
            for j in range(n):
                A[i, j] = e[j] / tot
        out = A * V
        return np.array(A.tolist(), dtype=float), np.array(out.tolist(), dtype=float)


def test_single_token():
    rng = np.random.default_rng(0)
    head = make_head(rng, 4, 2)
    x = rng.standard_normal((1, 4))
    a, out = naive_attention_head(x, head)
    np.testing.assert_array_equal(a, [[1.0]])
    np.testing.assert_allclose(out, x @ head.w_v)


def test_identical_rows_give_uniform_attention(rng):
    head = make_head(rng, 4, 3)
    x = np.tile(rng.standard_normal(4), (6, 1))
    a, _ = naive_attention_head(x, head)
    np.testing.assert_allclose(a, np.full((6, 6), 1 / 6), rtol=1e-12)


def test_matches_extended_precision(rng):
    head = make_head(rng, 4, 4)
    x = rng.standard_normal((8, 4))
    a, out = naive_attention_head(x, head)
    a_ref, out_ref = mp_attention(x, head)
    assert rel_err(a, a_ref) < 1e-10
    assert rel_err(out, out_ref) < 1e-10


def test_rows_sum_to_one(rng):
    for _ in range(10):
        head = make_head(rng, 5, 3)
        a, _ = naive_attention_head(rng.standard_normal((9, 5)) * 4, head)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-6)


def test_permutation_equivariance(rng):
    head = make_head(rng, 4, 3)
    x = rng.standard_normal((7, 4))
    perm = rng.permutation(7)
    _, out = naive_attention_head(x, head)
    _, out_p = naive_attention_head(x[perm], head)
    np.testing.assert_allclose(out_p, out[perm], rtol=1e-12, atol=1e-14)


def test_dimension_mismatch(rng):
    with pytest.raises(InvalidInputError):
        naive_attention_head(np.ones((3, 5)), make_head(rng, 4, 2))
    with pytest.raises(InvalidInputError):
        AttentionHeadParams(np.ones((4, 2)), np.ones((4, 3)), np.ones((4, 2)))


class TestMultiHead:
    def test_single_head_identity_output(self, rng):
        head = make_head(rng, 4, 4)
        x = rng.standard_normal((5, 4))
        np.testing.assert_allclose(multi_head_attention(x, [head], np.eye(4)), naive_attention_head(x, head)[1])

    def test_duplicate_heads_block_projection(self, rng):
        head = make_head(rng, 4, 3)
        x = rng.standard_normal((5, 4))
        w_o = np.vstack([np.eye(3), np.zeros((3, 3))])
        np.testing.assert_allclose(multi_head_attention(x, [head, head], w_o), naive_attention_head(x, head)[1])

    def test_six_heads_compositional(self, rng):
        heads = [make_head(rng, 12, 2) for _ in range(6)]
        w_o = rng.standard_normal((12, 12))
        x = rng.standard_normal((7, 12))
        ref = sum(naive_attention_head(x, h)[1] @ w_o[2 * i:2 * i + 2] for i, h in enumerate(heads))
        assert rel_err(multi_head_attention(x, heads, w_o), ref) < 1e-10

    def test_mismatched_output_projection(self, rng):
        with pytest.raises(InvalidInputError):
            multi_head_attention(np.ones((3, 4)), [make_head(rng, 4, 2)], np.eye(4))
        with pytest.raises(InvalidInputError):
            multi_head_attention(np.ones((3, 4)), [], np.eye(4))


class TestLinformer:
    def test_identity_projection_is_full_rank(self, rng):
        head = make_head(rng, 4, 3)
        x = rng.standard_normal((6, 4))
        out = linformer_head(x, LinformerParams(head, np.eye(6), np.eye(6)))
        assert rel_err(out, naive_attention_head(x, head)[1]) < 1e-10

    def test_rank_one_collapse(self, rng):
        head = make_head(rng, 4, 3)
        x = rng.standard_normal((6, 4))
        e = rng.standard_normal((1, 6))
        out = linformer_head(x, LinformerParams(head, e, rng.standard_normal((1, 6))))
        np.testing.assert_allclose(out, np.tile(out[0], (6, 1)), rtol=1e-12)

    def test_random_against_loops(self, rng):
        head = make_head(rng, 5, 3)
        x = rng.standard_normal((7, 5))
        e, f = rng.standard_normal((3, 7)), rng.standard_normal((3, 7))
        q, k, v = x @ head.w_q, x @ head.w_k, x @ head.w_v
        kp, vp = e @ k, f @ v
        ref = np.zeros((7, 3))
        for i in range(7):
            s = [float(q[i] @ kp[j]) / math.sqrt(3) for j in range(3)]
            w = [math.exp(v_) for v_ in s]
            tot = sum(w)
            ref[i] = sum(w[j] / tot * vp[j] for j in range(3))
        assert rel_err(linformer_head(x, LinformerParams(head, e, f)), ref) < 1e-10

    def test_bad_shapes(self, rng):
        head = make_head(rng, 4, 2)
        with pytest.raises(InvalidInputError):
            LinformerParams(head, np.ones((2, 5)), np.ones((3, 5)))
        with pytest.raises(InvalidInputError):
            linformer_head(np.ones((4, 4)), LinformerParams(head, np.ones((2, 5)), np.ones((2, 5))))
