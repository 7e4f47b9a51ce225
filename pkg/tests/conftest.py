import math

import mpmath
import numpy as np
import pytest

from sparsifiner.linalg import CsrMatrix


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_csr(rng, rows, cols, density, positive=False):
    a = rng.uniform(0.1, 1.0, (rows, cols)) if positive else rng.standard_normal((rows, cols))
    a[rng.random((rows, cols)) >= density] = 0.0
    return CsrMatrix.from_dense(a)


def rel_err(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.max(np.abs(b)), 1e-300) if b.size else 1.0
    return float(np.max(np.abs(a - b)) / scale) if a.size else 0.0


def triple_loop_matmul(a, b):
    n, k = len(a), len(b)
    m = len(b[0])
    out = [[0.0] * m for _ in range(n)]
    for i in range(n):
        for j in range(m):
            s = 0.0
            for t in range(k):
                s += a[i][t] * b[t][j]
            out[i][j] = s
    return np.array(out)


def mp_softmax_rows(a, scale=1.0, dps=50):
    """Row softmax in 50-digit arithmetic."""
    with mpmath.workdps(dps):
        out = []
        for row in np.asarray(a):
            e = [mpmath.exp(mpmath.mpf(float(scale)) * mpmath.mpf(float(v))) for v in row]
            s = mpmath.fsum(e)
            out.append([float(x / s) for x in e])
    return np.array(out)


def dense_sparse_pipeline_head(x, head, pred):
    """Straight-line dense reference of one sparse-attention head.

    Builds the full attention matrix, the dense connectivity scores and a mask
    by sorting every row, then renormalizes the masked attention.
    """
    q, k, v = x @ head.w_q, x @ head.w_k, x @ head.w_v
    d = q.shape[1]
    n = q.shape[0]
    logits = q @ (pred.w_down @ k).T / math.sqrt(d)
    a_down = np.exp(logits - logits.max(axis=1, keepdims=True))
    a_down /= a_down.sum(axis=1, keepdims=True)
    a_thr = np.where(a_down > pred.tau, a_down, 0.0)
    for i in range(n):
        if not np.any(a_thr[i]):
            j = int(np.argmax(a_down[i]))
            a_thr[i, j] = a_down[i, j]
    scores = a_thr @ pred.w_up.to_dense()
    mask = np.zeros((n, n))
    for i in range(n):
        cand = [(-scores[i, j], j) for j in range(n) if scores[i, j] > 0]
        picked = [j for _, j in sorted(cand)[: pred.budget]]
        if i not in picked:
            if len(picked) == pred.budget:
                picked = picked[:-1]
            picked.append(i)
        mask[i, picked] = 1.0
    full = q @ k.T / math.sqrt(d)
    e = np.exp(full - full.max(axis=1, keepdims=True)) * mask
    attn = e / e.sum(axis=1, keepdims=True)
    return attn @ v, mask
