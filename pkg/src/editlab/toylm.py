"""Tiny decoder-only transformer language model with editable MLP slots.

The model is deliberately small: token embeddings (no positional table;
the synthetic vocabulary assigns token roles by id range, so position
carries no extra information), pre-norm residual blocks with causal
attention and a swish-gated MLP, final RMS norm, and an output head
tied to the embedding.  Everything is float64 on the autodiff tape.

Sequences batch as stacked rows: a [B, S] token matrix becomes a
[B*S, d] activation matrix, and the fused attention op keeps each
sequence causal inside the stack.

The editable parameter surface is the per-block MLP gate and up
matrices ("slots").  For a single example the gradient of the loss with
respect to a slot factors exactly into per-position rank-1 terms,
grad W = sum_p outer(u_p, v_p), where u_p is the slot's input row and
v_p the loss gradient at its pre-activation row.  capture_decomposed
_grads returns those factor pairs; the editing machinery never needs
the full dense gradient.
"""

from dataclasses import dataclass

import numpy as np

from . import checkpoint
from .autodiff import (
    NumericsError,
    ShapeError,
    Tensor,
    add,
    attention,
    backward,
    gather_rows,
    hadamard,
    matmul,
    no_grad,
    record,
    rmsnorm,
    rows_nll,
    scale,
    swish,
    take,
    transpose,
    tscale,
    tsum,
)

CHECKPOINT_FORMAT = "toylm-v1"


@dataclass(frozen=True)
class LMConfig:
    vocab_size: int = 256
    d_model: int = 32
    d_ff: int = 64
    n_blocks: int = 2
    n_heads: int = 1
    max_seq: int = 8
    eps: float = 1e-6

    def validate(self):
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if min(self.d_model, self.d_ff, self.n_blocks, self.n_heads, self.max_seq) < 1:
            raise ValueError("all model dimensions must be positive")
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        return self

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "d_model": self.d_model,
            "d_ff": self.d_ff,
            "n_blocks": self.n_blocks,
            "n_heads": self.n_heads,
            "max_seq": self.max_seq,
            "eps": self.eps,
        }

    @staticmethod
    def from_dict(d):
        return LMConfig(**d).validate()


@dataclass(frozen=True)
class EditSlot:
    """One editable weight matrix: the gate or up projection of a block."""

    block: int
    kind: str  # "gate" or "up"

    @property
    def name(self):
        return f"blocks.{self.block}.{self.kind}"


@dataclass(frozen=True)
class SlotRange:
    """Which blocks/kinds are editable; default covers every block's
    gate and up matrices in block-major order."""

    blocks: tuple
    kinds: tuple = ("gate", "up")

    def slots(self):
        return [EditSlot(b, k) for b in self.blocks for k in self.kinds]


def default_slots(config: LMConfig):
    return SlotRange(tuple(range(config.n_blocks))).slots()


def _param_names(config: LMConfig):
    names = ["embed"]
    for b in range(config.n_blocks):
        names += [f"blocks.{b}.{k}" for k in ("wq", "wk", "wv", "wo", "gate", "up", "down")]
    return names


class LMWeights:
    """Named parameter tensors plus the config that shaped them."""

    def __init__(self, config: LMConfig, tensors: dict):
        self.config = config
        self.tensors = tensors
        missing = [n for n in _param_names(config) if n not in tensors]
        if missing:
            raise ValueError(f"missing weight tensors: {missing}")

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]

    def params(self):
        return [(n, self.tensors[n]) for n in _param_names(self.config)]

    def snapshot(self):
        """Copy of every array, keyed by name."""
        return {n: t.data.copy() for n, t in self.params()}

    def restore(self, snap):
        for n, t in self.params():
            np.copyto(t.data, snap[n])

    def replace(self, updates: dict):
        """New container sharing every tensor except the given ones."""
        merged = dict(self.tensors)
        merged.update(updates)
        return LMWeights(self.config, merged)

    @staticmethod
    def from_snapshot(config, snap, requires_grad=False):
        return LMWeights(
            config,
            {n: Tensor(snap[n], requires_grad=requires_grad) for n in _param_names(config)},
        )


def init_lm(config: LMConfig, seed: int) -> LMWeights:
    """Random init; embedding kept small so initial logits sit near
    uniform and the untrained NLL lands at about log(vocab_size)."""
    config.validate()
    rng = np.random.default_rng(seed)
    d, f = config.d_model, config.d_ff
    tensors = {"embed": Tensor(rng.normal(0.0, 0.05, (config.vocab_size, d)), True)}
    for b in range(config.n_blocks):
        pre = f"blocks.{b}."
        for k in ("wq", "wk", "wv", "wo"):
            tensors[pre + k] = Tensor(rng.normal(0.0, d**-0.5, (d, d)), True)
        tensors[pre + "gate"] = Tensor(rng.normal(0.0, d**-0.5, (d, f)), True)
        tensors[pre + "up"] = Tensor(rng.normal(0.0, d**-0.5, (d, f)), True)
        tensors[pre + "down"] = Tensor(rng.normal(0.0, f**-0.5, (f, d)), True)
    return LMWeights(config, tensors)


def _as_prompts(tokens, config):
    arr = np.asarray(tokens, dtype=np.int64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ShapeError(f"prompts must be 1-D or 2-D, got shape {arr.shape}")
    if arr.shape[1] > config.max_seq:
        raise ShapeError(
            f"sequence length {arr.shape[1]} exceeds max_seq {config.max_seq}"
        )
    if arr.size and (arr.min() < 0 or arr.max() >= config.vocab_size):
        raise IndexError("token id out of vocabulary range")
    return arr


def _forward_rows(weights: LMWeights, ids, n_seq, seq_len, capture=None):
    """Logits for stacked sequences: [n_seq*seq_len, vocab].

    When `capture` is a dict it receives, per editable slot, the slot's
    input tensor and pre-activation tensor (for gradient decomposition).
    """
    cfg = weights.config
    x = gather_rows(weights["embed"], ids)
    for b in range(cfg.n_blocks):
        pre = f"blocks.{b}."
        h = rmsnorm(x, cfg.eps)
        q = matmul(h, weights[pre + "wq"])
        k = matmul(h, weights[pre + "wk"])
        v = matmul(h, weights[pre + "wv"])
        a = attention(q, k, v, n_seq, seq_len, cfg.n_heads)
        x = add(x, matmul(a, weights[pre + "wo"]))
        h2 = rmsnorm(x, cfg.eps)
        gate_pre = matmul(h2, weights[pre + "gate"])
        up_pre = matmul(h2, weights[pre + "up"])
        if capture is not None:
            capture[pre + "gate"] = (h2, gate_pre)
            capture[pre + "up"] = (h2, up_pre)
        x = add(x, matmul(hadamard(swish(gate_pre), up_pre), weights[pre + "down"]))
    return matmul(rmsnorm(x, cfg.eps), transpose(weights["embed"]))


def lm_forward(weights: LMWeights, tokens) -> Tensor:
    """Logits at every position of one sequence: [S, vocab]."""
    prompts = _as_prompts(tokens, weights.config)
    if prompts.shape[0] != 1:
        raise ShapeError("lm_forward takes a single sequence; use lm_logits_last")
    return _forward_rows(weights, prompts.ravel(), 1, prompts.shape[1])


def lm_logits_last(weights: LMWeights, prompts) -> Tensor:
    """Next-token logits at the final position of each prompt: [B, vocab]."""
    p = _as_prompts(prompts, weights.config)
    n_seq, seq_len = p.shape
    logits = _forward_rows(weights, p.ravel(), n_seq, seq_len)
    last = np.arange(1, n_seq + 1) * seq_len - 1
    return gather_rows(logits, last)


def batched_nll(weights: LMWeights, prompts, targets) -> Tensor:
    """Per-prompt NLL of the target token after each prompt: [B]."""
    return rows_nll(lm_logits_last(weights, prompts), np.asarray(targets, np.int64))


def lm_nll(weights: LMWeights, x_tokens, y_token) -> Tensor:
    """Scalar NLL of one (prompt, target) pair."""
    return tsum(batched_nll(weights, x_tokens, [int(y_token)]))


@dataclass
class SlotGrad:
    """Rank-decomposed gradient of one slot: grad = u.T @ v, with one
    (input row, pre-activation gradient row) pair per prompt position."""

    slot: EditSlot
    u: np.ndarray  # [P, d_in]
    v: np.ndarray  # [P, d_out]

    def reconstruct(self):
        return self.u.T @ self.v

    def frob_norm(self):
        return float(np.linalg.norm(self.reconstruct()))

    def pooled(self):
        return self.u.mean(axis=0), self.v.mean(axis=0)


@dataclass
class DecomposedGrad:
    """Per-slot factor pairs for one example, in slot order."""

    slots: list  # list[SlotGrad]

    def __iter__(self):
        return iter(self.slots)

    def __len__(self):
        return len(self.slots)


def capture_decomposed_grads(weights: LMWeights, x_tokens, y_token, slots) -> DecomposedGrad:
    """Run one traced example and return each slot's (u, v) factors.

    Gradients flow only inside this call; the weights passed in are not
    touched (slot matrices are re-wrapped as local leaves).
    """
    prompts = _as_prompts(x_tokens, weights.config)
    if prompts.shape[0] != 1:
        raise ShapeError("capture_decomposed_grads takes a single example")
    local = weights.replace(
        {s.name: Tensor(weights[s.name].data, requires_grad=True) for s in slots}
    )
    cap = {}
    with record() as tape:
        logits = _forward_rows(local, prompts.ravel(), 1, prompts.shape[1], capture=cap)
        last = gather_rows(logits, [prompts.shape[1] - 1])
        loss = tsum(rows_nll(last, [int(y_token)]))
        preacts = [cap[s.name][1] for s in slots]
        grads = backward(loss, preacts, tape=tape)
    return DecomposedGrad(
        [
            SlotGrad(s, cap[s.name][0].data.copy(), grads[p].copy())
            for s, p in zip(slots, preacts)
        ]
    )


def apply_masked_update(weights: LMWeights, slots, updates, mask) -> LMWeights:
    """New weights with W_l + mask_l * U_l on each slot.

    `mask` is a 1-D tensor aligned with `slots`; every non-slot tensor
    is shared, and a masked-out slot stays bit-identical (adding the
    exactly-zero scaled update cannot change any float64).
    """
    if len(slots) != len(updates):
        raise ValueError("one update per slot required")
    if mask.shape != (len(slots),):
        raise ShapeError(f"mask shape {mask.shape} vs {len(slots)} slots")
    new = {}
    for i, (slot, upd) in enumerate(zip(slots, updates)):
        cur = weights[slot.name]
        if upd.shape != cur.shape:
            raise ShapeError(f"update for {slot.name} has shape {upd.shape}, want {cur.shape}")
        new[slot.name] = add(cur, tscale(upd, take(mask, i)))
    return weights.replace(new)


def pretrain(weights: LMWeights, prompts, targets, steps, lr, log_every=0):
    """Plain full-batch gradient descent on mean next-token NLL.

    Mutates the weight arrays in place; returns (weights, final_loss).
    """
    p = _as_prompts(prompts, weights.config)
    t = np.asarray(targets, dtype=np.int64)
    if t.shape != (p.shape[0],):
        raise ShapeError(f"targets shape {t.shape} vs {p.shape[0]} prompts")
    params = [w for _, w in weights.params()]
    loss_val = float("nan")
    for step in range(steps):
        with record() as tape:
            loss = scale(tsum(batched_nll(weights, p, t)), 1.0 / p.shape[0])
            grads = backward(loss, params, tape=tape)
        loss_val = loss.item()
        if not np.isfinite(loss_val):
            raise NumericsError(f"pretraining diverged at step {step}")
        for w in params:
            w.data -= lr * grads[w]
            w.grad = None
        if log_every and (step + 1) % log_every == 0:
            print(f"  pretrain step {step + 1}/{steps}  loss {loss_val:.4f}")
    return weights, loss_val


def top1_accuracy(weights: LMWeights, prompts, targets) -> float:
    """Fraction of prompts whose argmax next token equals the target."""
    t = np.asarray(targets, dtype=np.int64)
    with no_grad():
        logits = lm_logits_last(weights, prompts).data
    return float(np.mean(np.argmax(logits, axis=1) == t))


def save_lm(path, weights: LMWeights):
    checkpoint.save_arrays(
        path,
        CHECKPOINT_FORMAT,
        weights.config.to_dict(),
        [(n, t.data) for n, t in weights.params()],
    )


def load_lm(path, requires_grad=False) -> LMWeights:
    _, cfg, arrays = checkpoint.load_arrays(path, expect_format=CHECKPOINT_FORMAT)
    config = LMConfig.from_dict(cfg)
    expected = {n: None for n in _param_names(config)}
    missing = [n for n in expected if n not in arrays]
    if missing:
        raise checkpoint.CheckpointError(f"{path}: missing arrays {missing}")
    return LMWeights.from_snapshot(config, arrays, requires_grad=requires_grad)
