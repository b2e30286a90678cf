"""Pure-numpy reference kernels.

Every function here has a signature-identical twin in the compiled
module (_fastops).  The tape layer calls whichever set the package
selected at import time, so these kernels define the backend contract:

- all arrays are C-contiguous float64 (int64 for index arguments)
- forward kernels return the saved context the matching backward needs
- kernels never mutate their inputs (scatter_add_rows mutates its
  accumulator argument by design and says so)

Matrix products are deliberately absent: both backends route matmul
through numpy's BLAS binding, which no hand-written loop beats.
"""

import numpy as np

BACKEND_NAME = "numpy"


def relu_fwd(x):
    return np.maximum(x, 0.0)


def relu_bwd(x, g):
    return np.where(x > 0.0, g, 0.0)


def swish_fwd(x):
    # exp may overflow for very negative x; the quotient then rounds to
    # the correct limit of 0
    with np.errstate(over="ignore"):
        return x / (1.0 + np.exp(-x))


def swish_bwd(x, g):
    with np.errstate(over="ignore"):
        s = 1.0 / (1.0 + np.exp(-x))
    return g * (s * (1.0 + x * (1.0 - s)))


def rmsnorm_fwd(x, eps):
    """Row-wise x / sqrt(mean(x^2) + eps).  Returns (y, inv_rms)."""
    ms = np.mean(x * x, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(ms + eps)
    return x * inv, inv[:, 0].copy()


def rmsnorm_bwd(x, inv_rms, g):
    n = x.shape[1]
    inv = inv_rms[:, None]
    dot = np.sum(g * x, axis=1, keepdims=True)
    return g * inv - x * (dot * inv**3 / n)


def rows_nll_fwd(logits, targets):
    """Per-row -log softmax(logits)[target].  Returns (nll, probs)."""
    m = np.max(logits, axis=1, keepdims=True)
    z = logits - m
    ez = np.exp(z)
    denom = np.sum(ez, axis=1, keepdims=True)
    probs = ez / denom
    rows = np.arange(logits.shape[0])
    nll = np.log(denom[:, 0]) - z[rows, targets]
    return nll, probs


def rows_nll_bwd(probs, targets, g):
    d = probs * g[:, None]
    rows = np.arange(probs.shape[0])
    d[rows, targets] -= g
    return d


def rows_kl_fwd(ref, cur):
    """Per-row KL(softmax(ref) || softmax(cur)).  Returns (kl, pref, pcur)."""

    def logsoftmax(a):
        m = np.max(a, axis=1, keepdims=True)
        z = a - m
        return z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))

    lref = logsoftmax(ref)
    lcur = logsoftmax(cur)
    pref = np.exp(lref)
    kl = np.sum(pref * (lref - lcur), axis=1)
    return kl, pref, np.exp(lcur)


def rows_kl_bwd(pref, pcur, g):
    return (pcur - pref) * g[:, None]


def _split_heads(x, n_seq, seq_len, n_heads):
    dh = x.shape[1] // n_heads
    return x.reshape(n_seq, seq_len, n_heads, dh).transpose(0, 2, 1, 3)


def _merge_heads(x, n_seq, seq_len):
    return np.ascontiguousarray(x.transpose(0, 2, 1, 3)).reshape(n_seq * seq_len, -1)


def attn_fwd(q, k, v, n_seq, seq_len, n_heads, scale):
    """Causal scaled dot-product attention over stacked sequences.

    q, k, v are [n_seq*seq_len, d] with sequences stored contiguously.
    Returns (out [n_seq*seq_len, d], probs [n_seq, n_heads, S, S]).
    """
    Q = _split_heads(q, n_seq, seq_len, n_heads)
    K = _split_heads(k, n_seq, seq_len, n_heads)
    V = _split_heads(v, n_seq, seq_len, n_heads)
    scores = np.matmul(Q, K.transpose(0, 1, 3, 2)) * scale
    mask = np.triu(np.ones((seq_len, seq_len), dtype=bool), k=1)
    scores[:, :, mask] = -np.inf
    m = np.max(scores, axis=3, keepdims=True)
    ez = np.exp(scores - m)
    probs = ez / np.sum(ez, axis=3, keepdims=True)
    out = np.matmul(probs, V)
    return _merge_heads(out, n_seq, seq_len), probs


def attn_bwd(q, k, v, probs, g, n_seq, seq_len, n_heads, scale):
    Q = _split_heads(q, n_seq, seq_len, n_heads)
    K = _split_heads(k, n_seq, seq_len, n_heads)
    V = _split_heads(v, n_seq, seq_len, n_heads)
    G = _split_heads(g, n_seq, seq_len, n_heads)
    dV = np.matmul(probs.transpose(0, 1, 3, 2), G)
    dP = np.matmul(G, V.transpose(0, 1, 3, 2))
    dS = probs * (dP - np.sum(dP * probs, axis=3, keepdims=True))
    dQ = np.matmul(dS, K) * scale
    dK = np.matmul(dS.transpose(0, 1, 3, 2), Q) * scale
    return (
        _merge_heads(dQ, n_seq, seq_len),
        _merge_heads(dK, n_seq, seq_len),
        _merge_heads(dV, n_seq, seq_len),
    )


def scatter_add_rows(acc, idx, rows):
    """acc[idx[i]] += rows[i], duplicates accumulate.  Mutates acc."""
    np.add.at(acc, idx, rows)
