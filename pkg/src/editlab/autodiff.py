"""Tape-based reverse-mode automatic differentiation on float64 arrays.

Design
------
A Tensor wraps an ndarray plus gradient state.  While a recording
context (`record()`) is open, every op whose inputs include a traced
tensor appends a tape entry: (output id, input tensors, backward
closure).  `backward(loss, params)` walks the tape once in reverse
execution order, accumulating vector-Jacobian products into a dict and
into each parameter's `.grad`.  Repeated backward calls keep
accumulating until grads are cleared; that is the contract the
optimizers rely on.

Scope is deliberately narrow: tensors are 0-D, 1-D or 2-D float64, ops
are the closed set the models in this package need, and batching is
expressed by stacking sequences as rows of a 2-D array.  Heavy kernels
(activations, row losses, norm, attention) are delegated to the
selected backend in editlab.backend; linear algebra goes through
numpy's BLAS in both backends.

Every op validates shapes (ShapeError) and checks its output for
NaN/Inf (NumericsError), so divergence surfaces at the op that produced
it instead of corrupting a trajectory silently.
"""

import itertools
from contextlib import contextmanager

import numpy as np

from . import backend


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested op."""


class NumericsError(FloatingPointError):
    """An op produced NaN or Inf."""


_IDS = itertools.count(1)
_STACK = []  # recording contexts; None entries disable recording
_LAST = None  # most recently closed ComputationRecord


class Tensor:
    """Float64 array with gradient state.

    `requires_grad` marks leaf parameters.  `traced` marks any tensor
    gradients can flow through (leaves, and op outputs recorded on a
    tape); constants stay untraced and cost nothing at backward time.
    """

    __slots__ = ("data", "grad", "requires_grad", "traced", "nid")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError(f"tensors are at most 2-D, got shape {arr.shape}")
        # exact check here: user data may be legitimately huge, and the
        # fast sum probe below would overflow on it
        if not np.all(np.isfinite(arr)):
            raise NumericsError("non-finite values in Tensor data")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.traced = self.requires_grad
        self.nid = next(_IDS)

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flags = "P" if self.requires_grad else ("t" if self.traced else "c")
        return f"Tensor(shape={self.shape}, {flags}, nid={self.nid})"


def _wrap(arr, traced):
    t = Tensor.__new__(Tensor)
    t.data = arr
    t.grad = None
    t.requires_grad = False
    t.traced = traced
    t.nid = next(_IDS)
    return t


def _ensure_finite(arr, op):
    # one-pass probe: any NaN/Inf makes the sum non-finite; activations
    # and gradients here are far too small in magnitude to overflow a
    # sum of finite entries
    with np.errstate(over="ignore", invalid="ignore"):
        if not np.isfinite(np.sum(arr)):
            raise NumericsError(f"non-finite values produced by {op}")


class ComputationRecord:
    """Ordered tape of recorded ops for one forward computation."""

    __slots__ = ("entries",)

    def __init__(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)


@contextmanager
def record():
    """Open a recording context; ops inside it build the tape."""
    global _LAST
    tape = ComputationRecord()
    _STACK.append(tape)
    try:
        yield tape
    finally:
        _STACK.pop()
        _LAST = tape


@contextmanager
def no_grad():
    """Disable recording inside the block; outputs come out untraced."""
    _STACK.append(None)
    try:
        yield
    finally:
        _STACK.pop()


def _tape():
    return _STACK[-1] if _STACK else None


def _emit(kernel_out, op, inputs, bwd):
    _ensure_finite(kernel_out, op)
    tape = _tape()
    traced = tape is not None and any(t.traced for t in inputs)
    out = _wrap(kernel_out, traced)
    if traced:
        tape.entries.append((out.nid, inputs, bwd))
    return out


def backward(loss, params, tape=None):
    """Accumulate d(loss)/d(param) into each param's .grad.

    Walks the given tape (default: the active or most recently closed
    record) once in reverse.  Returns {param: gradient array}; params
    the loss does not reach get zeros.  Calling again without clearing
    grads adds another copy of the gradient.
    """
    if tape is None:
        tape = _tape() or _LAST
    if tape is None:
        raise RuntimeError("backward() called with no computation recorded")
    if loss.data.ndim != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {loss.nid: np.asarray(1.0)}
    for out_nid, inputs, bwd in reversed(tape.entries):
        g = grads.get(out_nid)
        if g is None:
            continue
        for t, d in zip(inputs, bwd(g)):
            if d is None or not t.traced:
                continue
            _ensure_finite(d, "backward")
            have = grads.get(t.nid)
            grads[t.nid] = d if have is None else have + d
    out = {}
    for p in params:
        g = grads.get(p.nid)
        if g is None:
            g = np.zeros_like(p.data)
        p.grad = g if p.grad is None else p.grad + g
        out[p] = g
    return out


def clear_grads(params):
    for p in params:
        p.grad = None


def _need(t, op, ndim=None):
    if not isinstance(t, Tensor):
        raise TypeError(f"{op} expects Tensor operands, got {type(t).__name__}")
    if ndim is not None and t.data.ndim != ndim:
        raise ShapeError(f"{op} expects a {ndim}-D operand, got shape {t.shape}")
    return t


def _same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op} shape mismatch: {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- arithmetic


def add(a, b):
    _need(a, "add"), _need(b, "add")
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, "add", (a, b), lambda g: (g, g))


def sub(a, b):
    _need(a, "sub"), _need(b, "sub")
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, "sub", (a, b), lambda g: (g, -g))


def hadamard(a, b):
    _need(a, "hadamard"), _need(b, "hadamard")
    _same_shape(a, b, "hadamard")
    return _emit(
        a.data * b.data,
        "hadamard",
        (a, b),
        lambda g: (g * b.data, g * a.data),
    )


def scale(a, c):
    """Multiply by a python constant."""
    _need(a, "scale")
    c = float(c)
    return _emit(a.data * c, "scale", (a,), lambda g: (g * c,))


def tscale(a, s):
    """Multiply a tensor by a 0-D tensor; gradients reach both."""
    _need(a, "tscale"), _need(s, "tscale", ndim=0)
    sv = float(s.data)
    return _emit(
        a.data * sv,
        "tscale",
        (a, s),
        lambda g: (g * sv, np.asarray(np.sum(g * a.data))),
    )


def relu(a):
    _need(a, "relu")
    # gradient at exactly 0 is taken as 0
    return _emit(
        backend.K.relu_fwd(a.data),
        "relu",
        (a,),
        lambda g: (backend.K.relu_bwd(a.data, g),),
    )


def swish(a):
    """x * sigmoid(x)."""
    _need(a, "swish")
    return _emit(
        backend.K.swish_fwd(a.data),
        "swish",
        (a,),
        lambda g: (backend.K.swish_bwd(a.data, g),),
    )


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "hadamard": hadamard,
    "scale": scale,
    "relu": relu,
    "swish": swish,
}


def elementwise(kind, *operands):
    """Dispatch by name over the element-level op family."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*operands)


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    _need(a, "matmul", ndim=2), _need(b, "matmul", ndim=2)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} vs {b.shape}")
    return _emit(
        a.data @ b.data,
        "matmul",
        (a, b),
        lambda g: (g @ b.data.T, a.data.T @ g),
    )


def matvec(w, x):
    _need(w, "matvec", ndim=2), _need(x, "matvec", ndim=1)
    if w.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec dims differ: {w.shape} vs {x.shape}")
    return _emit(
        w.data @ x.data,
        "matvec",
        (w, x),
        lambda g: (np.outer(g, x.data), w.data.T @ g),
    )


def outer(u, v):
    _need(u, "outer", ndim=1), _need(v, "outer", ndim=1)
    return _emit(
        np.outer(u.data, v.data),
        "outer",
        (u, v),
        lambda g: (g @ v.data, g.T @ u.data),
    )


def transpose(a):
    _need(a, "transpose", ndim=2)
    return _emit(
        np.ascontiguousarray(a.data.T),
        "transpose",
        (a,),
        lambda g: (np.ascontiguousarray(g.T),),
    )


def reshape(a, shape):
    _need(a, "reshape")
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {tuple(shape)}")
    orig = a.data.shape
    return _emit(
        a.data.reshape(shape).copy(),
        "reshape",
        (a,),
        lambda g: (g.reshape(orig),),
    )


# ------------------------------------------------------- indexing / assembly


def gather_rows(m, idx):
    """Select rows of a matrix; duplicate indices accumulate on backward."""
    _need(m, "gather_rows", ndim=2)
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows takes a flat index array")
    if idx.size and (idx.min() < 0 or idx.max() >= m.shape[0]):
        raise IndexError(f"gather_rows index out of range for {m.shape[0]} rows")

    def bwd(g):
        dm = np.zeros_like(m.data)
        backend.K.scatter_add_rows(dm, idx, g)
        return (dm,)

    return _emit(m.data[idx], "gather_rows", (m,), bwd)


def take(v, i):
    """Extract element i of a vector as a 0-D tensor."""
    _need(v, "take", ndim=1)
    i = int(i)
    if not (0 <= i < v.shape[0]):
        raise IndexError(f"take index {i} out of range for length {v.shape[0]}")

    def bwd(g):
        d = np.zeros_like(v.data)
        d[i] = g
        return (d,)

    return _emit(np.asarray(v.data[i]), "take", (v,), bwd)


def slice_cols(a, start, stop):
    _need(a, "slice_cols", ndim=2)
    if not (0 <= start < stop <= a.shape[1]):
        raise IndexError(f"slice_cols [{start}:{stop}] out of range for {a.shape}")

    def bwd(g):
        d = np.zeros_like(a.data)
        d[:, start:stop] = g
        return (d,)

    return _emit(np.ascontiguousarray(a.data[:, start:stop]), "slice_cols", (a,), bwd)


def concat(parts):
    """Concatenate 1-D tensors."""
    parts = tuple(parts)
    for p in parts:
        _need(p, "concat", ndim=1)
    if not parts:
        raise ShapeError("concat needs at least one operand")
    sizes = [p.shape[0] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits))

    return _emit(np.concatenate([p.data for p in parts]), "concat", parts, bwd)


def hstack(a, b):
    """Concatenate two matrices with equal row counts along columns."""
    _need(a, "hstack", ndim=2), _need(b, "hstack", ndim=2)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"hstack row counts differ: {a.shape} vs {b.shape}")
    d1 = a.shape[1]

    def bwd(g):
        return np.ascontiguousarray(g[:, :d1]), np.ascontiguousarray(g[:, d1:])

    return _emit(np.hstack([a.data, b.data]), "hstack", (a, b), bwd)


def mul_row(a, v):
    """Scale every row of a matrix by a vector."""
    _need(a, "mul_row", ndim=2), _need(v, "mul_row", ndim=1)
    if a.shape[1] != v.shape[0]:
        raise ShapeError(f"mul_row dims differ: {a.shape} vs {v.shape}")
    return _emit(
        a.data * v.data,
        "mul_row",
        (a, v),
        lambda g: (g * v.data, np.sum(g * a.data, axis=0)),
    )


def add_row(a, v):
    """Add a vector to every row of a matrix."""
    _need(a, "add_row", ndim=2), _need(v, "add_row", ndim=1)
    if a.shape[1] != v.shape[0]:
        raise ShapeError(f"add_row dims differ: {a.shape} vs {v.shape}")
    return _emit(
        a.data + v.data,
        "add_row",
        (a, v),
        lambda g: (g, np.sum(g, axis=0)),
    )


# ------------------------------------------------------------- reductions


def tsum(a):
    _need(a, "tsum")
    shape = a.data.shape
    return _emit(
        np.asarray(np.sum(a.data)),
        "tsum",
        (a,),
        lambda g: (np.broadcast_to(g, shape).copy(),),
    )


def sumsq(a):
    """Sum of squared entries (squared Frobenius norm)."""
    _need(a, "sumsq")
    return _emit(
        np.asarray(np.sum(a.data * a.data)),
        "sumsq",
        (a,),
        lambda g: (2.0 * g * a.data,),
    )


def weighted_sum(v, w):
    """Dot a 1-D tensor with a constant weight vector."""
    _need(v, "weighted_sum", ndim=1)
    w = np.asarray(w, dtype=np.float64)
    if w.shape != v.data.shape:
        raise ShapeError(f"weighted_sum weights {w.shape} vs values {v.shape}")
    return _emit(
        np.asarray(v.data @ w),
        "weighted_sum",
        (v,),
        lambda g: (g * w,),
    )


# ---------------------------------------------------------------- losses


def rows_nll(logits, targets):
    """Per-row negative log softmax probability of the target column."""
    _need(logits, "rows_nll", ndim=2)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != (logits.shape[0],):
        raise ShapeError(
            f"rows_nll targets {targets.shape} vs logits rows {logits.shape[0]}"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexError("rows_nll target id out of vocabulary range")
    nll, probs = backend.K.rows_nll_fwd(logits.data, targets)
    return _emit(
        nll,
        "rows_nll",
        (logits,),
        lambda g: (backend.K.rows_nll_bwd(probs, targets, g),),
    )


def softmax_nll(logits, target):
    """Scalar cross-entropy of one logit vector against an integer target."""
    _need(logits, "softmax_nll", ndim=1)
    target = int(target)
    if not (0 <= target < logits.shape[0]):
        raise IndexError(f"softmax_nll target {target} out of range")
    nll, probs = backend.K.rows_nll_fwd(logits.data[None, :], np.asarray([target]))
    return _emit(
        np.asarray(nll[0]),
        "softmax_nll",
        (logits,),
        lambda g: (
            backend.K.rows_nll_bwd(probs, np.asarray([target]), np.asarray([g]))[0],
        ),
    )


def rows_kl(ref_logits, cur_logits):
    """Per-row KL(softmax(ref) || softmax(cur)); ref is a constant."""
    _need(cur_logits, "rows_kl", ndim=2)
    ref = ref_logits.data if isinstance(ref_logits, Tensor) else np.asarray(ref_logits)
    if ref.shape != cur_logits.shape:
        raise ShapeError(f"rows_kl shapes differ: {ref.shape} vs {cur_logits.shape}")
    kl, pref, pcur = backend.K.rows_kl_fwd(ref, cur_logits.data)
    return _emit(
        kl,
        "rows_kl",
        (cur_logits,),
        lambda g: (backend.K.rows_kl_bwd(pref, pcur, g),),
    )


def kl_div(ref_logits, cur_logits):
    """Scalar KL between softmaxes of two logit vectors; ref is constant."""
    _need(cur_logits, "kl_div", ndim=1)
    ref = ref_logits.data if isinstance(ref_logits, Tensor) else np.asarray(ref_logits)
    if ref.shape != cur_logits.data.shape:
        raise ShapeError(f"kl_div shapes differ: {ref.shape} vs {cur_logits.shape}")
    kl, pref, pcur = backend.K.rows_kl_fwd(ref[None, :], cur_logits.data[None, :])
    return _emit(
        np.asarray(kl[0]),
        "kl_div",
        (cur_logits,),
        lambda g: (backend.K.rows_kl_bwd(pref, pcur, np.asarray([g]))[0],),
    )


# ------------------------------------------------------ structured kernels


def rmsnorm(x, eps=1e-6):
    """Row-wise RMS normalization without learned gain."""
    _need(x, "rmsnorm", ndim=2)
    y, inv = backend.K.rmsnorm_fwd(x.data, eps)
    return _emit(
        y,
        "rmsnorm",
        (x,),
        lambda g: (backend.K.rmsnorm_bwd(x.data, inv, g),),
    )


def attention(q, k, v, n_seq, seq_len, n_heads):
    """Causal multi-head attention over sequences stacked as rows.

    Inputs are [n_seq*seq_len, d] with each sequence contiguous; output
    position p attends to positions <= p of its own sequence only.
    """
    for t in (q, k, v):
        _need(t, "attention", ndim=2)
    _same_shape(q, k, "attention")
    _same_shape(q, v, "attention")
    rows, d = q.shape
    if rows != n_seq * seq_len:
        raise ShapeError(f"attention rows {rows} != n_seq*seq_len {n_seq * seq_len}")
    if d % n_heads:
        raise ShapeError(f"attention width {d} not divisible by {n_heads} heads")
    sc = 1.0 / np.sqrt(d // n_heads)
    out, probs = backend.K.attn_fwd(q.data, k.data, v.data, n_seq, seq_len, n_heads, sc)

    def bwd(g):
        return backend.K.attn_bwd(
            q.data, k.data, v.data, probs, g, n_seq, seq_len, n_heads, sc
        )

    return _emit(out, "attention", (q, k, v), bwd)


# ------------------------------------------------------- gradient plumbing


def stop_gradient(x):
    """Identity forward; blocks gradient flow (output is a constant)."""
    _need(x, "stop_gradient")
    return _wrap(x.data, False)


def topk_mask(z, k):
    """Hard top-k arrays helper shared by both the op and its oracle."""
    z = np.asarray(z)
    if not (1 <= k <= z.shape[0]):
        raise ValueError(f"top-k size {k} out of range for length {z.shape[0]}")
    m = np.zeros_like(z)
    # stable sort on -z: ties resolve to the lowest index
    m[np.argsort(-z, kind="stable")[:k]] = 1.0
    return m


def topk_mask_st(z, k):
    """Hard top-k 0/1 mask with a straight-through (identity) backward.

    Forward has exactly k ones, ties broken toward the lowest index.
    Equivalent to stop_gradient(m - z) + z evaluated exactly.
    """
    _need(z, "topk_mask_st", ndim=1)
    return _emit(topk_mask(z.data, k), "topk_mask_st", (z,), lambda g: (g,))
