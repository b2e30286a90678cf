"""Two-level editor networks.

High level (selector, parameters phi): per slot, the position-pooled
gradient factors (u_mean || v_mean) pass through a weight-shape-shared
linear encoder, a relu, and a slot-specific diagonal affine (the
slot-parameterized elementwise transform, "SPE").  A gate matrix maps
the concatenated slot codes to one importance score per slot; the hard
top-k of those scores is the slot mask, with a straight-through
backward so selection stays trainable.

Low level (updater, parameters theta): per slot and per position, the
raw factor pair (u_p || v_p) flows through residual low-rank blocks,
h <- h + SPE(relu(B A h)), with B zero-initialized so the whole network
starts as the identity map.  The transformed factors recombine into the
slot update gain_l * sum_p outer(u_t, v_t), where gain_l is a learnable
per-slot scalar initialized to a small negative value: the raw factors
reproduce the loss gradient, so at initialization each edit is a gentle
scaled fine-tuning step rather than a full-magnitude ascent step, and
training is free to grow or flip each slot's step size.  Blocks are
shared across slots of the same weight shape; the SPE stages and gains
are slot-specific.

Both nets batch positions as rows; slot parameter structures are plain
named-tensor containers so the optimizer and the checkpoint writer can
enumerate them.
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import (
    Tensor,
    add,
    add_row,
    concat,
    hadamard,
    hstack,
    matmul,
    matvec,
    mul_row,
    relu,
    slice_cols,
    topk_mask_st,
    transpose,
    tscale,
)

EDITOR_FORMAT = "editor-v1"


@dataclass(frozen=True)
class EditorConfig:
    d_hidden: int = 16  # per-slot code width in the selector
    d_rank: int = 8  # bottleneck rank of the low-level blocks
    n_blocks: int = 2  # residual blocks in the low-level net
    k_select: int = 0  # slots committed per edit; 0 means n_slots // 2
    init_gain: float = -0.01  # starting value of the per-slot update gain

    def validate(self):
        if min(self.d_hidden, self.d_rank, self.n_blocks) < 1:
            raise ValueError("editor dimensions must be positive")
        if self.k_select < 0:
            raise ValueError("k_select must be non-negative")
        if not np.isfinite(self.init_gain):
            raise ValueError("init_gain must be finite")
        return self

    def resolve_k(self, n_slots):
        k = self.k_select if self.k_select else max(1, n_slots // 2)
        if not (1 <= k <= n_slots):
            raise ValueError(f"k_select {k} out of range for {n_slots} slots")
        return k

    def to_dict(self):
        return {
            "d_hidden": self.d_hidden,
            "d_rank": self.d_rank,
            "n_blocks": self.n_blocks,
            "k_select": self.k_select,
            "init_gain": self.init_gain,
        }

    @staticmethod
    def from_dict(d):
        kw = {k: (float(v) if k == "init_gain" else int(v)) for k, v in d.items()}
        return EditorConfig(**kw).validate()


def _shape_key(shape):
    return f"{shape[0]}x{shape[1]}"


class HighNetParams:
    """Selector parameters: shape-shared encoders, slot SPEs, gate."""

    def __init__(self, config, slot_shapes, enc, spe_scale, spe_offset, gate):
        self.config = config
        self.slot_shapes = [tuple(s) for s in slot_shapes]
        self.enc = enc  # {shape key: Tensor [d_hidden, d_in+d_out]}
        self.spe_scale = spe_scale  # per slot, Tensor [d_hidden]
        self.spe_offset = spe_offset
        self.gate = gate  # Tensor [n_slots, n_slots * d_hidden]

    @property
    def n_slots(self):
        return len(self.slot_shapes)

    def parameters(self):
        out = [(f"enc.{k}", t) for k, t in self.enc.items()]
        for i in range(self.n_slots):
            out.append((f"spe_scale.{i}", self.spe_scale[i]))
            out.append((f"spe_offset.{i}", self.spe_offset[i]))
        out.append(("gate", self.gate))
        return out


class LowNetParams:
    """Updater parameters: shape-shared low-rank blocks, slot SPEs."""

    def __init__(self, config, slot_shapes, blocks, spe_scale, spe_offset, gains):
        self.config = config
        self.slot_shapes = [tuple(s) for s in slot_shapes]
        self.blocks = blocks  # {shape key: [(A [D, d_rank], B [d_rank, D]), ...]}
        self.spe_scale = spe_scale  # [slot][block] -> Tensor [D]
        self.spe_offset = spe_offset
        self.gains = gains  # per slot, 0-D Tensor scaling the slot update

    @property
    def n_slots(self):
        return len(self.slot_shapes)

    def parameters(self):
        out = []
        for k, blocks in self.blocks.items():
            for c, (a, b) in enumerate(blocks):
                out.append((f"{k}.A.{c}", a))
                out.append((f"{k}.B.{c}", b))
        for i in range(self.n_slots):
            for c in range(self.config.n_blocks):
                out.append((f"spe_scale.{i}.{c}", self.spe_scale[i][c]))
                out.append((f"spe_offset.{i}.{c}", self.spe_offset[i][c]))
        for i in range(self.n_slots):
            out.append((f"gain.{i}", self.gains[i]))
        return out


def init_editor(config: EditorConfig, slot_shapes, seed):
    """Fresh selector and updater for the given slot shapes.

    Slots sharing a weight shape share encoder and block tensors (the
    same objects, not copies); every slot gets its own SPE stages.
    """
    config.validate()
    shapes = [tuple(s) for s in slot_shapes]
    if not shapes:
        raise ValueError("need at least one editable slot")
    uniq = list(dict.fromkeys(shapes))
    ss = np.random.SeedSequence([seed, 0x0ED1])
    rng = np.random.default_rng(ss)
    d1 = config.d_hidden
    enc, blocks = {}, {}
    for shape in uniq:
        dim = shape[0] + shape[1]
        key = _shape_key(shape)
        enc[key] = Tensor(rng.normal(0.0, dim**-0.5, (d1, dim)), requires_grad=True)
        blocks[key] = [
            (
                Tensor(rng.normal(0.0, dim**-0.5, (dim, config.d_rank)), requires_grad=True),
                Tensor(np.zeros((config.d_rank, dim)), requires_grad=True),
            )
            for _ in range(config.n_blocks)
        ]
    n = len(shapes)
    hi_scale = [Tensor(np.ones(d1), requires_grad=True) for _ in range(n)]
    hi_offset = [Tensor(np.zeros(d1), requires_grad=True) for _ in range(n)]
    gate = Tensor(rng.normal(0.0, (n * d1) ** -0.5, (n, n * d1)), requires_grad=True)
    lo_scale = [
        [Tensor(np.ones(s[0] + s[1]), requires_grad=True) for _ in range(config.n_blocks)]
        for s in shapes
    ]
    lo_offset = [
        [Tensor(np.zeros(s[0] + s[1]), requires_grad=True) for _ in range(config.n_blocks)]
        for s in shapes
    ]
    gains = [
        Tensor(np.asarray(float(config.init_gain)), requires_grad=True)
        for _ in range(n)
    ]
    high = HighNetParams(config, shapes, enc, hi_scale, hi_offset, gate)
    low = LowNetParams(config, shapes, blocks, lo_scale, lo_offset, gains)
    return high, low


def encode_layer(u_mean, v_mean, slot_index, high: HighNetParams) -> Tensor:
    """Slot code h_l from the pooled gradient factors of slot l."""
    shape = high.slot_shapes[slot_index]
    x = concat([_const_vec(u_mean, shape[0]), _const_vec(v_mean, shape[1])])
    h = relu(matvec(high.enc[_shape_key(shape)], x))
    return add(hadamard(h, high.spe_scale[slot_index]), high.spe_offset[slot_index])


def route_importance(codes, high: HighNetParams, k):
    """Importance scores z and the hard straight-through top-k mask."""
    if len(codes) != high.n_slots:
        raise ValueError(f"expected {high.n_slots} slot codes, got {len(codes)}")
    z = matvec(high.gate, concat(list(codes)))
    return z, topk_mask_st(z, k)


def select_mask(decomposed, high: HighNetParams, k):
    """Full selector pass from a DecomposedGrad: (z, mask)."""
    codes = []
    for i, sg in enumerate(decomposed):
        u_mean, v_mean = sg.pooled()
        codes.append(encode_layer(u_mean, v_mean, i, high))
    return route_importance(codes, high, k)


def _const_vec(v, dim):
    t = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    if t.shape != (dim,):
        raise ValueError(f"factor has shape {t.shape}, slot wants ({dim},)")
    return t


def edit_network_forward(slot_index, u, v, low: LowNetParams):
    """Transform the position-factor rows of one slot: (u_t, v_t).

    u is [P, d_in], v is [P, d_out]; rows pass jointly through the
    residual blocks.  With freshly initialized parameters this is the
    identity map on both factors.
    """
    shape = low.slot_shapes[slot_index]
    d_in, d_out = shape
    u = u if isinstance(u, Tensor) else Tensor(np.asarray(u, dtype=np.float64))
    v = v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float64))
    if u.data.ndim != 2 or v.data.ndim != 2 or u.shape[0] != v.shape[0]:
        raise ValueError("u and v must be 2-D with matching row counts")
    if u.shape[1] != d_in or v.shape[1] != d_out:
        raise ValueError(
            f"factor widths {u.shape[1]}/{v.shape[1]} vs slot shape {shape}"
        )
    h = hstack(u, v)
    for c, (a, b) in enumerate(low.blocks[_shape_key(shape)]):
        inner = matmul(relu(matmul(h, a)), b)
        inner = add_row(mul_row(inner, low.spe_scale[slot_index][c]),
                        low.spe_offset[slot_index][c])
        h = add(h, inner)
    return slice_cols(h, 0, d_in), slice_cols(h, d_in, d_in + d_out)


def slot_update(slot_index, u, v, low: LowNetParams) -> Tensor:
    """Proposed update for one slot: gain_l * sum_p outer(u_t_p, v_t_p)."""
    u_t, v_t = edit_network_forward(slot_index, u, v, low)
    return tscale(matmul(transpose(u_t), v_t), low.gains[slot_index])


def save_editor(path, high: HighNetParams, low: LowNetParams):
    arrays = [("high." + n, t.data) for n, t in high.parameters()]
    arrays += [("low." + n, t.data) for n, t in low.parameters()]
    cfg = {
        "editor": high.config.to_dict(),
        "slot_shapes": [list(s) for s in high.slot_shapes],
    }
    checkpoint.save_arrays(path, EDITOR_FORMAT, cfg, arrays)


def load_editor(path):
    _, cfg, arrays = checkpoint.load_arrays(path, expect_format=EDITOR_FORMAT)
    config = EditorConfig.from_dict(cfg["editor"])
    shapes = [tuple(s) for s in cfg["slot_shapes"]]
    high, low = init_editor(config, shapes, seed=0)
    for prefix, net in (("high.", high), ("low.", low)):
        for name, t in net.parameters():
            key = prefix + name
            if key not in arrays:
                raise checkpoint.CheckpointError(f"{path}: missing array {key!r}")
            if arrays[key].shape != t.data.shape:
                raise checkpoint.CheckpointError(f"{path}: shape mismatch for {key!r}")
            np.copyto(t.data, arrays[key])
    return config, high, low
