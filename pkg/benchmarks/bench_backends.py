#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the pure-numpy fallback.

Two views:

- per-kernel microbenchmarks on desk-scale shapes (the row counts an
  edit step actually pushes through each kernel);
- one full edit step (gradient capture, selection, low-level updates,
  editing loss) repeated under each backend.

Matrix products are delegated to BLAS by both backends, so the
interesting deltas are the fused row kernels (rmsnorm, attention,
softmax losses).  Run from the repository root:

    python benchmarks/bench_backends.py [--repeats N]
"""

import argparse
import time

import numpy as np

import editlab.backend as backend
import editlab.hypernets as hn
import editlab.toylm as toylm
import editlab.trainer as tr
from editlab.stream import FactRecord


def best_of(fn, repeats, inner=10):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for _ in range(inner):
            fn()
        best = min(best, (time.perf_counter() - t0) / inner)
    return best


def kernel_cases(rng):
    """(name, callable factory) pairs; shapes mirror a 200-edit run
    over the default desk model (d=32, window of 11 two-token rows)."""
    rows = rng.normal(size=(264, 32))
    grad = rng.normal(size=(264, 32))
    logits = rng.normal(size=(264, 256))
    ref = rng.normal(size=(264, 256))
    targets = rng.integers(0, 256, size=264)
    q = rng.normal(size=(264, 32))
    k = rng.normal(size=(264, 32))
    v = rng.normal(size=(264, 32))
    scale = 1.0 / np.sqrt(32.0)

    def attn_fwd():
        return backend.K.attn_fwd(q, k, v, 132, 2, 1, scale)

    out, probs = backend.K.attn_fwd(q, k, v, 132, 2, 1, scale)
    _, nll_probs = backend.K.rows_nll_fwd(logits, targets)
    _, pref, pcur = backend.K.rows_kl_fwd(ref, logits)
    y, inv = backend.K.rmsnorm_fwd(rows, 1e-6)

    return [
        ("relu_fwd", lambda: backend.K.relu_fwd(rows)),
        ("swish_fwd", lambda: backend.K.swish_fwd(rows)),
        ("swish_bwd", lambda: backend.K.swish_bwd(rows, grad)),
        ("rmsnorm_fwd", lambda: backend.K.rmsnorm_fwd(rows, 1e-6)),
        ("rmsnorm_bwd", lambda: backend.K.rmsnorm_bwd(rows, inv, grad)),
        ("rows_nll_fwd", lambda: backend.K.rows_nll_fwd(logits, targets)),
        ("rows_nll_bwd", lambda: backend.K.rows_nll_bwd(nll_probs, targets, np.ones(264))),
        ("rows_kl_fwd", lambda: backend.K.rows_kl_fwd(ref, logits)),
        ("rows_kl_bwd", lambda: backend.K.rows_kl_bwd(pref, pcur, np.ones(264))),
        ("attn_fwd", attn_fwd),
        ("attn_bwd", lambda: backend.K.attn_bwd(q, k, v, probs, grad, 132, 2, 1, scale)),
        ("scatter_add_rows", lambda: backend.K.scatter_add_rows(
            np.zeros((256, 32)), targets, grad)),
    ]


def edit_step_case(seed=0):
    cfg = toylm.LMConfig(vocab_size=64, d_model=16, d_ff=32, n_blocks=2,
                         n_heads=1, max_seq=4)
    weights = toylm.init_lm(cfg, seed=seed)
    slots = toylm.default_slots(cfg)
    shapes = [(cfg.d_model, cfg.d_ff) for _ in slots]
    ecfg = hn.EditorConfig(d_hidden=8, d_rank=4, n_blocks=2, k_select=2)
    high, low = hn.init_editor(ecfg, shapes, seed=seed)
    tcfg = tr.TrainConfig(window=6, epochs=1, seed=seed)
    recs = [
        FactRecord((i, 40), 50 + i % 8, 51 + i % 8, (i, 41), (9 - i, 42), 60)
        for i in range(8)
    ]

    def run():
        state = tr.EditState(tr.detach_weights(weights))
        rng = np.random.default_rng(0)
        for rec in recs:
            state, _ = tr.edit_step(state, rec, high, low, tcfg, slots, 2, rng)

    return run


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=5,
                    help="timing repetitions per case (default 5)")
    args = ap.parse_args()

    names = ["numpy"]
    if backend.HAVE_COMPILED:
        names.append("compiled")
    else:
        print("note: compiled backend not built; timing numpy only\n")

    rng = np.random.default_rng(0)
    results = {}
    for name in names:
        backend.use(name)
        results[name] = {
            kname: best_of(fn, args.repeats)
            for kname, fn in kernel_cases(rng)
        }
        results[name]["edit_step(x8)"] = best_of(
            edit_step_case(), args.repeats, inner=1
        )

    width = max(len(k) for k in results[names[0]])
    header = f"{'kernel':<{width}}  " + "".join(f"{n:>12}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    print("-" * len(header))
    for kname in results[names[0]]:
        row = f"{kname:<{width}}  "
        for n in names:
            row += f"{results[n][kname] * 1e6:>10.1f}us"
        if len(names) == 2:
            ratio = results["numpy"][kname] / results["compiled"][kname]
            row += f"{ratio:>9.2f}x"
        print(row)
    backend.use("compiled" if backend.HAVE_COMPILED else "numpy")


if __name__ == "__main__":
    main()
