"""Hierarchical edit-trajectory execution and editor training.

One edit step, given the model state W_{t-1} and a stream record:

1. capture the rank-decomposed gradient factors of the record's edit
   loss at every slot;
2. high level picks a hard top-k slot mask from the pooled factors
   (or a baseline selector: random, gradient-norm, all slots);
3. low level transforms the per-position factors into slot updates;
4. commit W_t = W_{t-1} + mask_l * U_l on each slot;
5. score the result with the memory-backtracking editing loss over the
   last `window` records: an update-norm penalty, the decayed edit NLL
   terms, and decayed drift (KL against W_{t-1}) on each record's
   unrelated probe.

Rewards: r_low = -loss; r_high compares the committed loss against a
counterfactual that reuses the same updates under a reference mask
(all slots, or a random draw), so a selective mask earns reward by
beating indiscriminate editing.  Returns are undiscounted sums over
the trajectory.

Training runs whole trajectories from the same base weights each
epoch.  One backward per step accumulates gradients; the updater
parameters step once per trajectory on the low-level return, and the
selector parameters step either per trajectory (rl_training) or after
every edit (the non-RL ablation).  W_{t-1} enters each step as a
constant, so credit never flows across step boundaries.  Ascending a
trajectory can take several optimizer steps (inner_steps): after the
collection pass, the frozen step states and captured factors are
replayed under the updated parameters for each remaining step, the
usual trade of gradient freshness for sample reuse.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import hypernets as hn
from . import toylm
from .autodiff import (
    NumericsError,
    Tensor,
    add,
    backward,
    clear_grads,
    concat,
    no_grad,
    record,
    reshape,
    rows_kl,
    scale,
    stop_gradient,
    sumsq,
    take,
    topk_mask,
    tscale,
    weighted_sum,
)
from .metrics import OUTCOME_KEYS, immediate_outcomes
from .toylm import batched_nll, capture_decomposed_grads, lm_logits_last

TRAJLOG_FORMAT = "trajlog-v1"

SELECT_MODES = ("hinet", "random", "gradnorm", "all")
REWARD_MODES = ("full", "rand", "none")


class TrajectoryDiverged(RuntimeError):
    """An edit step produced a non-finite value; carries the step index."""

    def __init__(self, step, cause):
        super().__init__(f"trajectory diverged at step {step}: {cause}")
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    eta: float = 0.01  # update-norm penalty weight
    mu: float = 0.8  # backtracking decay
    lambda_kl: float = 1.0  # drift penalty weight
    window: int = 10  # how many past records stay in the loss
    gamma: float = 1.0  # return discount; the undiscounted regime is part
    # of the method, so any other value is rejected
    epochs: int = 30
    inner_steps: int = 1  # ascent steps per collected trajectory
    lr_high: float = 1e-3
    lr_low: float = 1e-3
    clip_norm: float = 1.0
    select_mode: str = "hinet"
    reward_mode: str = "full"
    rl_training: bool = True
    paraphrase_weight: float = 0.0  # extra NLL weight on the paraphrase prompt
    seed: int = 0

    def validate(self):
        if not (0.0 <= self.mu <= 1.0):
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.gamma != 1.0:
            raise ValueError("returns are undiscounted: gamma must be 1.0")
        if self.window < 0 or self.epochs < 1:
            raise ValueError("window must be >= 0 and epochs >= 1")
        if self.inner_steps < 1:
            raise ValueError("inner_steps must be >= 1")
        if min(self.eta, self.lambda_kl, self.paraphrase_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.select_mode not in SELECT_MODES:
            raise ValueError(f"select_mode must be one of {SELECT_MODES}")
        if self.reward_mode not in REWARD_MODES:
            raise ValueError(f"reward_mode must be one of {REWARD_MODES}")
        if min(self.lr_high, self.lr_low) <= 0 or self.clip_norm < 0:
            raise ValueError("learning rates must be positive, clip_norm >= 0")
        return self


@dataclass
class StepLog:
    t: int
    mask: np.ndarray  # hard 0/1 slot mask actually committed
    z: np.ndarray  # selector scores; empty array for baseline selectors
    loss: float  # committed editing loss L_t
    cf_loss: float  # counterfactual reference loss (nan when reward_mode=none)
    r_low: float
    r_high: float
    update_norms: np.ndarray  # per-slot Frobenius norm of the proposed update
    outcomes: dict = field(default_factory=dict)  # immediate hit bits on W_t


@dataclass
class TrajectoryResult:
    logs: list
    j_low: float
    j_high: float
    final_weights: toylm.LMWeights

    def mask_matrix(self):
        return np.stack([log.mask for log in self.logs])


@dataclass
class EditState:
    weights: toylm.LMWeights  # constants (untraced)
    window: list = field(default_factory=list)  # trailing FactRecords
    t: int = 0


@dataclass
class _FrozenStep:
    """Everything needed to re-score one collected edit step: the state
    it saw is rebuilt from the previous step's committed slot arrays, so
    replay never re-runs gradient capture or the model commit chain."""

    t: int
    dec: list  # captured rank-decomposed factors (constants)
    window: list  # loss window, oldest first, current record last
    mask: np.ndarray  # hard mask committed during collection
    committed: dict  # slot name -> post-commit array for masked slots


class Adam:
    """Adam with a global gradient-norm clip, reading each param's
    accumulated .grad."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=0.0):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        grads = []
        total = 0.0
        for p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads.append(g)
            total += float(np.sum(g * g))
        total = math.sqrt(total)
        if self.clip_norm and total > self.clip_norm:
            grads = [g * (self.clip_norm / total) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m += (1.0 - self.b1) * (g - m)
            v += (1.0 - self.b2) * (g * g - v)
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return total

    def zero_grad(self):
        clear_grads(self.params)


def detach_weights(weights: toylm.LMWeights) -> toylm.LMWeights:
    """Same arrays wrapped as untraced constants (no copies)."""
    return toylm.LMWeights(
        weights.config, {n: stop_gradient(t) for n, t in weights.params()}
    )


def select_layers(mode, decomposed, high, k, rng):
    """Slot mask for one step: (mask tensor, score tensor).

    Only the learned selector produces scores and a traced mask; the
    baselines return constant masks and an empty score array.
    """
    n = len(decomposed)
    if mode == "hinet":
        z, mask = hn.select_mask(decomposed, high, k)
        return mask, z
    if mode == "all":
        return Tensor(np.ones(n)), None
    if mode == "random":
        m = np.zeros(n)
        m[rng.choice(n, size=k, replace=False)] = 1.0
        return Tensor(m), None
    if mode == "gradnorm":
        norms = np.array([sg.frob_norm() for sg in decomposed])
        return Tensor(topk_mask(norms, k)), None
    raise ValueError(f"unknown select mode {mode!r}")


def _nll_vec(weights, prompts, targets):
    lens = {len(p) for p in prompts}
    if len(lens) == 1:
        return batched_nll(weights, np.asarray(prompts, np.int64), targets)
    parts = [
        reshape(batched_nll(weights, np.asarray([p], np.int64), [y]), (1,))
        for p, y in zip(prompts, targets)
    ]
    return concat(parts)


def _kl_vec(weights, ref_weights, prompts):
    with no_grad():
        ref = lm_logits_last(ref_weights, np.asarray(prompts, np.int64)).data
    cur = lm_logits_last(weights, np.asarray(prompts, np.int64))
    return rows_kl(ref, cur)


def editing_loss(weights, ref_weights, window, upd_sq, cfg: TrainConfig) -> Tensor:
    """Memory-backtracking loss for the current window.

    upd_sq is the already-masked total squared update norm; window is
    ordered oldest first with the current record last.  Every window
    record contributes a decayed edit NLL and a decayed probe drift
    term against ref_weights (the pre-update model).  An empty window
    degenerates to the norm penalty alone, which is almost never what
    a caller wants, so it warns.
    """
    n = len(window)
    if n == 0:
        warnings.warn("editing_loss called with an empty window; "
                      "only the update-norm penalty contributes")
        return scale(upd_sq, cfg.eta)
    decay = cfg.mu ** np.arange(n - 1, -1, -1, dtype=np.float64)
    xs = [r.x for r in window]
    ys = [r.y for r in window]
    loss = scale(upd_sq, cfg.eta)
    loss = add(loss, weighted_sum(_nll_vec(weights, xs, ys), decay))
    if cfg.paraphrase_weight:
        bars = [r.x_bar for r in window]
        loss = add(
            loss,
            scale(weighted_sum(_nll_vec(weights, bars, ys), decay), cfg.paraphrase_weight),
        )
    if cfg.lambda_kl:
        probes = [r.x_tilde for r in window]
        kl = _kl_vec(weights, ref_weights, probes)
        loss = add(loss, scale(weighted_sum(kl, decay), cfg.lambda_kl))
    return loss


def low_reward(loss_value: float) -> float:
    return -loss_value


def high_reward(loss_value: float, cf_loss_value, reward_mode: str) -> float:
    """Selection reward: committed loss against the counterfactual
    reference (or raw -loss when no counterfactual is configured)."""
    if reward_mode == "none":
        return -loss_value
    if cf_loss_value is None or not np.isfinite(cf_loss_value):
        raise ValueError(
            f"reward mode {reward_mode!r} needs a counterfactual loss"
        )
    return cf_loss_value - loss_value


def _masked_upd_sq(updates, mask):
    total = tscale(sumsq(updates[0]), take(mask, 0))
    for i in range(1, len(updates)):
        total = add(total, tscale(sumsq(updates[i]), take(mask, i)))
    return total


def edit_step(state: EditState, rec, high, low, cfg: TrainConfig, slots, k, rng,
              grad_params=None, frozen=None):
    """Apply one stream record; returns (new state, StepLog).

    With grad_params given, the step runs traced and one backward
    accumulates d(loss)/d(param) into every listed parameter.  With a
    `frozen` list given, the step appends what a later replay pass
    needs to re-score it under updated editor parameters.
    """
    t = state.t
    try:
        dec = capture_decomposed_grads(state.weights, rec.x, rec.y, slots)
        window = (state.window + [rec])[-(cfg.window + 1):]
        ctx = record() if grad_params is not None else no_grad()
        with ctx as tape:
            mask, z = select_layers(cfg.select_mode, dec, high, k, rng)
            updates = [hn.slot_update(i, sg.u, sg.v, low) for i, sg in enumerate(dec)]
            upd_sq = _masked_upd_sq(updates, mask)
            w_t = toylm.apply_masked_update(state.weights, slots, updates, mask)
            loss = editing_loss(w_t, state.weights, window, upd_sq, cfg)
            if grad_params is not None:
                backward(loss, grad_params, tape=tape)
        loss_val = loss.item()
        cf_val = float("nan")
        if cfg.reward_mode != "none":
            if cfg.reward_mode == "full":
                cf_mask = np.ones(len(slots))
            else:
                cf_mask = np.zeros(len(slots))
                cf_mask[rng.choice(len(slots), size=k, replace=False)] = 1.0
            with no_grad():
                cf_updates = [stop_gradient(u) for u in updates]
                cfm = Tensor(cf_mask)
                cf_sq = _masked_upd_sq(cf_updates, cfm)
                w_cf = toylm.apply_masked_update(state.weights, slots, cf_updates, cfm)
                cf_val = editing_loss(w_cf, state.weights, window, cf_sq, cfg).item()
        committed = detach_weights(w_t)
        if not np.isfinite(loss_val):
            raise TrajectoryDiverged(t, f"loss {loss_val}")
        outcomes = immediate_outcomes(committed, rec)
        if frozen is not None:
            changed = {
                s.name: committed[s.name].data
                for s, b in zip(slots, mask.data) if b
            }
            frozen.append(_FrozenStep(t, dec, window, mask.data.copy(), changed))
    except NumericsError as e:
        raise TrajectoryDiverged(t, e) from e
    log = StepLog(
        t=t,
        mask=mask.data.copy(),
        z=z.data.copy() if z is not None else np.empty(0),
        loss=loss_val,
        cf_loss=cf_val,
        r_low=low_reward(loss_val),
        r_high=high_reward(loss_val, cf_val, cfg.reward_mode),
        update_norms=np.array([math.sqrt(sumsq(u).item()) for u in updates]),
        outcomes=outcomes,
    )
    new_state = EditState(committed, window, t + 1)
    return new_state, log


def _replay_pass(base_weights, frozen, high, low, cfg: TrainConfig, slots, k,
                 grad_params, rescore_mask):
    """One extra ascent pass over a collected trajectory.

    Each frozen step is re-scored under the current editor parameters
    against the exact state and captured factors it saw during
    collection; the state chain is rebuilt from the stored committed
    arrays, so the trajectory itself never changes.  The learned
    selector re-scores its mask (rescore_mask) so it keeps receiving
    gradients; baseline masks and random draws are replayed verbatim.
    Counterfactuals and logging are collection-time concerns and are
    skipped here.
    """
    weights = detach_weights(base_weights)
    for item in frozen:
        try:
            with record() as tape:
                if rescore_mask:
                    _, mask = hn.select_mask(item.dec, high, k)
                else:
                    mask = Tensor(item.mask)
                updates = [
                    hn.slot_update(i, sg.u, sg.v, low) for i, sg in enumerate(item.dec)
                ]
                upd_sq = _masked_upd_sq(updates, mask)
                w_t = toylm.apply_masked_update(weights, slots, updates, mask)
                loss = editing_loss(w_t, weights, item.window, upd_sq, cfg)
                backward(loss, grad_params, tape=tape)
            if not np.isfinite(loss.item()):
                raise TrajectoryDiverged(item.t, f"replay loss {loss.item()}")
        except NumericsError as e:
            raise TrajectoryDiverged(item.t, e) from e
        weights = weights.replace(
            {name: Tensor(arr) for name, arr in item.committed.items()}
        )


def _trajectory_rng(cfg, epoch):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, 3, epoch]))


def run_trajectory(base_weights, stream, high, low, cfg: TrainConfig,
                   phi_opt=None, theta_opt=None, epoch=0) -> TrajectoryResult:
    """Run the full stream from the base model.

    Without optimizers this is a pure evaluation pass.  With them, the
    step backward accumulates into both parameter groups; the selector
    steps per edit when rl_training is off, otherwise both groups step
    once after the final edit (selector on its return, updater on its
    own), which is what makes the returns trajectory-level objectives.

    cfg.inner_steps sets the total ascent steps taken on the collected
    trajectory: the collection pass supplies the first, and each
    remaining step replays the frozen trajectory (states, captured
    factors, loss windows) under the updated parameters before stepping
    the optimizers again.  The learned selector re-scores its masks on
    replay; when rl_training is off the replays refine the updater only,
    since the selector already consumed each edit as it happened.
    """
    cfg.validate()
    slots = toylm.default_slots(base_weights.config)
    k = low.config.resolve_k(len(slots))
    rng = _trajectory_rng(cfg, epoch)
    training = phi_opt is not None and theta_opt is not None
    grad_params = None
    frozen = None
    if training:
        grad_params = [p for _, p in high.parameters()] + [p for _, p in low.parameters()]
        if cfg.inner_steps > 1:
            frozen = []
    state = EditState(detach_weights(base_weights))
    logs = []
    for rec in stream:
        state, log = edit_step(state, rec, high, low, cfg, slots, k, rng,
                               grad_params=grad_params, frozen=frozen)
        logs.append(log)
        if training and not cfg.rl_training:
            # non-RL ablation: selector consumes its per-edit gradient
            # immediately; the updater still learns from the whole
            # trajectory
            phi_opt.step()
            phi_opt.zero_grad()
    if training:
        if cfg.rl_training:
            phi_opt.step()
            phi_opt.zero_grad()
        theta_opt.step()
        theta_opt.zero_grad()
        if frozen is not None:
            rescore = cfg.select_mode == "hinet" and cfg.rl_training
            replay_params = grad_params if cfg.rl_training else [
                p for _, p in low.parameters()
            ]
            for _ in range(cfg.inner_steps - 1):
                _replay_pass(base_weights, frozen, high, low, cfg, slots, k,
                             replay_params, rescore)
                if cfg.rl_training:
                    phi_opt.step()
                    phi_opt.zero_grad()
                theta_opt.step()
                theta_opt.zero_grad()
    j_low = float(sum(l.r_low for l in logs))
    j_high = float(sum(l.r_high for l in logs))
    return TrajectoryResult(logs, j_low, j_high, state.weights)


def train_editor(base_weights, stream, high, low, cfg: TrainConfig):
    """Train selector and updater over repeated trajectories.

    The model resets to the base weights at the start of every epoch.
    Returns the per-epoch history [(epoch, j_high, j_low), ...].
    """
    cfg.validate()
    phi_opt = Adam([p for _, p in high.parameters()], cfg.lr_high,
                   clip_norm=cfg.clip_norm)
    theta_opt = Adam([p for _, p in low.parameters()], cfg.lr_low,
                     clip_norm=cfg.clip_norm)
    history = []
    for epoch in range(cfg.epochs):
        result = run_trajectory(base_weights, stream, high, low, cfg,
                                phi_opt=phi_opt, theta_opt=theta_opt, epoch=epoch)
        history.append((epoch, result.j_high, result.j_low))
    return history


def run_single_level_trajectory(base_weights, stream, low, cfg: TrainConfig) -> TrajectoryResult:
    """Reference flat pipeline: one level, every slot committed every
    step, reward -loss.  Deliberately written as its own loop (no mask,
    no selector, no counterfactual) so the hierarchical path can be
    checked against an independent implementation."""
    cfg.validate()
    slots = toylm.default_slots(base_weights.config)
    weights = detach_weights(base_weights)
    window = []
    logs = []
    for t, rec in enumerate(stream):
        try:
            dec = capture_decomposed_grads(weights, rec.x, rec.y, slots)
            window = (window + [rec])[-(cfg.window + 1):]
            with no_grad():
                updates = [hn.slot_update(i, sg.u, sg.v, low) for i, sg in enumerate(dec)]
                upd_sq = sumsq(updates[0])
                for u in updates[1:]:
                    upd_sq = add(upd_sq, sumsq(u))
                new = {
                    s.name: add(weights[s.name], u) for s, u in zip(slots, updates)
                }
                w_t = weights.replace(new)
                loss = editing_loss(w_t, weights, window, upd_sq, cfg)
            committed = detach_weights(w_t)
            outcomes = immediate_outcomes(committed, rec)
        except NumericsError as e:
            raise TrajectoryDiverged(t, e) from e
        loss_val = loss.item()
        logs.append(
            StepLog(
                t=t,
                mask=np.ones(len(slots)),
                z=np.empty(0),
                loss=loss_val,
                cf_loss=float("nan"),
                r_low=low_reward(loss_val),
                r_high=low_reward(loss_val),
                update_norms=np.array([math.sqrt(sumsq(u).item()) for u in updates]),
                outcomes=outcomes,
            )
        )
        weights = committed
    j = float(sum(l.r_low for l in logs))
    return TrajectoryResult(logs, j, j, weights)


# ------------------------------------------------------------ trajectory log


def write_trajlog(path, result: TrajectoryResult):
    from . import checkpoint

    lines = [TRAJLOG_FORMAT]
    for log in result.logs:
        bits = "".join(str(int(b)) for b in log.mask)
        hits = "".join(str(int(log.outcomes[k])) for k in OUTCOME_KEYS)
        lines.append(
            f"t={log.t} mask={bits} loss={log.loss:.17g} cf_loss={log.cf_loss:.17g} "
            f"r_low={log.r_low:.17g} r_high={log.r_high:.17g} hits={hits}"
        )
    lines.append(f"j_low={result.j_low:.17g} j_high={result.j_high:.17g}")
    checkpoint.atomic_write_text(path, "\n".join(lines) + "\n")


def read_trajlog(path):
    """Step logs back from a trajectory log file (scores and update
    norms are not persisted and come back empty)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0] != TRAJLOG_FORMAT:
        raise ValueError(f"{path}: not a {TRAJLOG_FORMAT} file")
    logs = []
    for ln in lines[1:]:
        if ln.startswith("j_low="):
            continue
        fields = dict(part.split("=", 1) for part in ln.split())
        hits = fields["hits"]
        logs.append(
            StepLog(
                t=int(fields["t"]),
                mask=np.array([float(c) for c in fields["mask"]]),
                z=np.empty(0),
                loss=float(fields["loss"]),
                cf_loss=float(fields["cf_loss"]),
                r_low=float(fields["r_low"]),
                r_high=float(fields["r_high"]),
                update_norms=np.empty(0),
                outcomes={k: int(c) for k, c in zip(OUTCOME_KEYS, hits)},
            )
        )
    return logs
