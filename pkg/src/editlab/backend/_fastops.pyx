# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernel core.

Signature-for-signature twin of editlab.backend.numpy_ops; see that
module for the backend contract.  Loops are written against typed
memoryviews so the hot per-edit-step kernels run at C speed; matrix
products stay with numpy's BLAS and are not duplicated here.
"""

import numpy as np

from libc.math cimport exp, log, sqrt

BACKEND_NAME = "compiled"


def relu_fwd(x):
    # ascontiguousarray promotes 0-D to 1-D; restore the shape on return
    shp = np.shape(x)
    xa = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty_like(xa)
    cdef double[::1] xi = xa.ravel()
    cdef double[::1] oi = out.ravel()
    cdef Py_ssize_t i, n = xi.shape[0]
    for i in range(n):
        oi[i] = xi[i] if xi[i] > 0.0 else 0.0
    return out.reshape(shp)


def relu_bwd(x, g):
    shp = np.shape(x)
    xa = np.ascontiguousarray(x, dtype=np.float64)
    ga = np.ascontiguousarray(g, dtype=np.float64)
    out = np.empty_like(xa)
    cdef double[::1] xi = xa.ravel()
    cdef double[::1] gi = ga.ravel()
    cdef double[::1] oi = out.ravel()
    cdef Py_ssize_t i, n = xi.shape[0]
    for i in range(n):
        oi[i] = gi[i] if xi[i] > 0.0 else 0.0
    return out.reshape(shp)


def swish_fwd(x):
    # ascontiguousarray promotes 0-D to 1-D; restore the shape on return
    # the bulk exponential goes through numpy's SIMD exp (scalar libm
    # exp in a loop is several times slower); the rest is fused here
    shp = np.shape(x)
    xa = np.ascontiguousarray(x, dtype=np.float64)
    with np.errstate(over="ignore"):
        ex = np.exp(np.negative(xa))
    out = np.empty_like(xa)
    cdef double[::1] xi = xa.ravel()
    cdef double[::1] ei = ex.ravel()
    cdef double[::1] oi = out.ravel()
    cdef Py_ssize_t i, n = xi.shape[0]
    for i in range(n):
        oi[i] = xi[i] / (1.0 + ei[i])
    return out.reshape(shp)


def swish_bwd(x, g):
    shp = np.shape(x)
    xa = np.ascontiguousarray(x, dtype=np.float64)
    ga = np.ascontiguousarray(g, dtype=np.float64)
    with np.errstate(over="ignore"):
        ex = np.exp(np.negative(xa))
    out = np.empty_like(xa)
    cdef double[::1] xi = xa.ravel()
    cdef double[::1] ei = ex.ravel()
    cdef double[::1] gi = ga.ravel()
    cdef double[::1] oi = out.ravel()
    cdef Py_ssize_t i, n = xi.shape[0]
    cdef double s
    for i in range(n):
        s = 1.0 / (1.0 + ei[i])
        oi[i] = gi[i] * (s * (1.0 + xi[i] * (1.0 - s)))
    return out.reshape(shp)


def rmsnorm_fwd(x, double eps):
    cdef double[:, ::1] xm = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xm.shape[0], d = xm.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    inv = np.empty(n, dtype=np.float64)
    cdef double[:, ::1] om = out
    cdef double[::1] im = inv
    cdef double ms
    for i in range(n):
        ms = 0.0
        for j in range(d):
            ms += xm[i, j] * xm[i, j]
        ms = 1.0 / sqrt(ms / d + eps)
        im[i] = ms
        for j in range(d):
            om[i, j] = xm[i, j] * ms
    return out, inv


def rmsnorm_bwd(x, inv_rms, g):
    cdef double[:, ::1] xm = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] im = np.ascontiguousarray(inv_rms, dtype=np.float64)
    cdef double[:, ::1] gm = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = xm.shape[0], d = xm.shape[1], i, j
    out = np.empty((n, d), dtype=np.float64)
    cdef double[:, ::1] om = out
    cdef double dot, iv, c
    for i in range(n):
        iv = im[i]
        dot = 0.0
        for j in range(d):
            dot += gm[i, j] * xm[i, j]
        c = dot * iv * iv * iv / d
        for j in range(d):
            om[i, j] = gm[i, j] * iv - xm[i, j] * c
    return out


def rows_nll_fwd(logits, targets):
    la = np.ascontiguousarray(logits, dtype=np.float64)
    cdef double[:, ::1] lm = la
    cdef long[::1] tm = np.ascontiguousarray(targets, dtype=np.int64)
    cdef Py_ssize_t n = lm.shape[0], v = lm.shape[1], i, j
    # shifted exponentials via numpy's SIMD exp; reductions fused below
    mx = np.max(la, axis=1)
    probs = np.exp(la - mx[:, None])
    nll = np.empty(n, dtype=np.float64)
    cdef double[::1] mm = mx
    cdef double[::1] nm = nll
    cdef double[:, ::1] pm = probs
    cdef double denom
    for i in range(n):
        denom = 0.0
        for j in range(v):
            denom += pm[i, j]
        for j in range(v):
            pm[i, j] /= denom
        nm[i] = log(denom) - (lm[i, tm[i]] - mm[i])
    return nll, probs


def rows_nll_bwd(probs, targets, g):
    cdef double[:, ::1] pm = np.ascontiguousarray(probs, dtype=np.float64)
    cdef long[::1] tm = np.ascontiguousarray(targets, dtype=np.int64)
    cdef double[::1] gm = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = pm.shape[0], v = pm.shape[1], i, j
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] om = out
    for i in range(n):
        for j in range(v):
            om[i, j] = pm[i, j] * gm[i]
        om[i, tm[i]] -= gm[i]
    return out


def rows_kl_fwd(ref, cur):
    ra = np.ascontiguousarray(ref, dtype=np.float64)
    ca = np.ascontiguousarray(cur, dtype=np.float64)
    cdef double[:, ::1] rm = ra
    cdef double[:, ::1] cm = ca
    cdef Py_ssize_t n = rm.shape[0], v = rm.shape[1], i, j
    # shifted exponentials via numpy's SIMD exp; reductions fused below
    mr_arr = np.max(ra, axis=1)
    mc_arr = np.max(ca, axis=1)
    pref = np.exp(ra - mr_arr[:, None])
    pcur = np.exp(ca - mc_arr[:, None])
    kl = np.empty(n, dtype=np.float64)
    cdef double[::1] mrm = mr_arr
    cdef double[::1] mcm = mc_arr
    cdef double[::1] km = kl
    cdef double[:, ::1] prm = pref
    cdef double[:, ::1] pcm = pcur
    cdef double dr, dc, ldr, ldc, acc, mr, mc
    for i in range(n):
        dr = 0.0
        dc = 0.0
        for j in range(v):
            dr += prm[i, j]
            dc += pcm[i, j]
        ldr = log(dr)
        ldc = log(dc)
        mr = mrm[i]
        mc = mcm[i]
        acc = 0.0
        for j in range(v):
            prm[i, j] /= dr
            pcm[i, j] /= dc
            acc += prm[i, j] * (
                (rm[i, j] - mr - ldr) - (cm[i, j] - mc - ldc)
            )
        km[i] = acc
    return kl, pref, pcur


def rows_kl_bwd(pref, pcur, g):
    cdef double[:, ::1] prm = np.ascontiguousarray(pref, dtype=np.float64)
    cdef double[:, ::1] pcm = np.ascontiguousarray(pcur, dtype=np.float64)
    cdef double[::1] gm = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t n = prm.shape[0], v = prm.shape[1], i, j
    out = np.empty((n, v), dtype=np.float64)
    cdef double[:, ::1] om = out
    for i in range(n):
        for j in range(v):
            om[i, j] = (pcm[i, j] - prm[i, j]) * gm[i]
    return out


def attn_fwd(q, k, v, Py_ssize_t n_seq, Py_ssize_t seq_len, Py_ssize_t n_heads, double scale):
    cdef double[:, ::1] qm = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] km = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, ::1] vm = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t d = qm.shape[1], dh = d // n_heads
    out = np.zeros((n_seq * seq_len, d), dtype=np.float64)
    probs = np.zeros((n_seq, n_heads, seq_len, seq_len), dtype=np.float64)
    cdef double[:, ::1] om = out
    cdef double[:, :, :, ::1] pm = probs
    cdef Py_ssize_t b, h, i, j, c, r0, base
    cdef double s, m, denom
    for b in range(n_seq):
        r0 = b * seq_len
        for h in range(n_heads):
            base = h * dh
            for i in range(seq_len):
                m = -1e300
                for j in range(i + 1):
                    s = 0.0
                    for c in range(dh):
                        s += qm[r0 + i, base + c] * km[r0 + j, base + c]
                    s *= scale
                    pm[b, h, i, j] = s
                    if s > m:
                        m = s
                denom = 0.0
                for j in range(i + 1):
                    s = exp(pm[b, h, i, j] - m)
                    pm[b, h, i, j] = s
                    denom += s
                for j in range(i + 1):
                    pm[b, h, i, j] /= denom
                    for c in range(dh):
                        om[r0 + i, base + c] += pm[b, h, i, j] * vm[r0 + j, base + c]
    return out, probs


def attn_bwd(q, k, v, probs, g, Py_ssize_t n_seq, Py_ssize_t seq_len, Py_ssize_t n_heads, double scale):
    cdef double[:, ::1] qm = np.ascontiguousarray(q, dtype=np.float64)
    cdef double[:, ::1] km = np.ascontiguousarray(k, dtype=np.float64)
    cdef double[:, ::1] vm = np.ascontiguousarray(v, dtype=np.float64)
    cdef double[:, :, :, ::1] pm = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[:, ::1] gm = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t d = qm.shape[1], dh = d // n_heads
    dq = np.zeros((n_seq * seq_len, d), dtype=np.float64)
    dk = np.zeros((n_seq * seq_len, d), dtype=np.float64)
    dv = np.zeros((n_seq * seq_len, d), dtype=np.float64)
    cdef double[:, ::1] dqm = dq
    cdef double[:, ::1] dkm = dk
    cdef double[:, ::1] dvm = dv
    cdef Py_ssize_t b, h, i, j, c, r0, base
    cdef double rowdot, dp, ds
    # dP[i,j] = g[i] . v[j]; dS = p * (dP - sum_j dP*p); dQ = dS K, dK = dS^T Q
    cdef double[::1] dprow = np.empty(seq_len, dtype=np.float64)
    for b in range(n_seq):
        r0 = b * seq_len
        for h in range(n_heads):
            base = h * dh
            for i in range(seq_len):
                rowdot = 0.0
                for j in range(i + 1):
                    dp = 0.0
                    for c in range(dh):
                        dp += gm[r0 + i, base + c] * vm[r0 + j, base + c]
                    dprow[j] = dp
                    rowdot += dp * pm[b, h, i, j]
                for j in range(i + 1):
                    ds = pm[b, h, i, j] * (dprow[j] - rowdot) * scale
                    for c in range(dh):
                        dqm[r0 + i, base + c] += ds * km[r0 + j, base + c]
                        dkm[r0 + j, base + c] += ds * qm[r0 + i, base + c]
                for j in range(i + 1):
                    for c in range(dh):
                        dvm[r0 + j, base + c] += pm[b, h, i, j] * gm[r0 + i, base + c]
    return dq, dk, dv


def scatter_add_rows(acc, idx, rows):
    cdef double[:, ::1] am = acc
    cdef long[::1] im = np.ascontiguousarray(idx, dtype=np.int64)
    cdef double[:, ::1] rm = np.ascontiguousarray(rows, dtype=np.float64)
    cdef Py_ssize_t n = im.shape[0], d = am.shape[1], i, j, r
    for i in range(n):
        r = im[i]
        for j in range(d):
            am[r, j] += rm[i, j]
