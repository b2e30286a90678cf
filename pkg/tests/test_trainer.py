"""Edit-trajectory trainer: loss decomposition against a hand-built
oracle, reward semantics, the flat-pipeline degeneracy, gradient
scoping, divergence handling, and determinism."""

import numpy as np
import pytest

import editlab.autodiff as ad
import editlab.hypernets as hn
import editlab.toylm as toylm
import editlab.trainer as tr
from editlab.stream import FactRecord
from editlab.trainer import TrainConfig, TrajectoryDiverged

from oracles import kl_oracle, nll_oracle

TINY = toylm.LMConfig(
    vocab_size=12, d_model=6, d_ff=8, n_blocks=2, n_heads=2, max_seq=4
)
ECFG = hn.EditorConfig(d_hidden=6, d_rank=4, n_blocks=2, k_select=2)


def tiny_weights(seed=0):
    return toylm.init_lm(TINY, seed=seed)


def tiny_editor(seed=0, k=2, randomize=False):
    shapes = [
        (TINY.d_model, TINY.d_ff) if s.kind == "gate" else (TINY.d_model, TINY.d_ff)
        for s in toylm.default_slots(TINY)
    ]
    cfg = hn.EditorConfig(d_hidden=6, d_rank=4, n_blocks=2, k_select=k)
    high, low = hn.init_editor(cfg, shapes, seed=seed)
    if randomize:
        rng = np.random.default_rng(seed + 99)
        for _, t in low.parameters():
            if ".B." in _:
                t.data[...] = rng.normal(0.0, 0.05, t.data.shape)
    return high, low


def rec(x, y, y_prev, x_bar, x_tilde, y_tilde):
    return FactRecord(tuple(x), y, y_prev, tuple(x_bar), tuple(x_tilde), y_tilde).validate()


STREAM6 = [
    rec((0, 6), 9, 10, (0, 7), (5, 8), 11),
    rec((1, 6), 10, 9, (1, 7), (4, 8), 9),
    rec((2, 6), 11, 9, (2, 7), (3, 8), 10),
    rec((3, 6), 9, 11, (3, 7), (2, 8), 11),
    rec((4, 6), 10, 11, (4, 7), (1, 8), 9),
    rec((5, 6), 11, 10, (5, 7), (0, 8), 10),
]


def base_cfg(**kw):
    kw.setdefault("eta", 0.01)
    kw.setdefault("mu", 0.5)
    kw.setdefault("lambda_kl", 0.7)
    kw.setdefault("window", 3)
    kw.setdefault("epochs", 1)
    kw.setdefault("lr_high", 1e-3)
    kw.setdefault("lr_low", 1e-3)
    kw.setdefault("seed", 0)
    return TrainConfig(**kw).validate()


# --------------------------------------------------------------- loss oracle


def _loss_oracle(w_after, w_before, window, upd_sq, cfg):
    """Independent recomputation of the editing loss with plain numpy."""
    total = cfg.eta * upd_sq
    n = len(window)
    for i, r in enumerate(window):
        decay = cfg.mu ** (n - 1 - i)
        with ad.no_grad():
            logits = toylm.lm_logits_last(w_after, [r.x]).data[0]
            total += decay * nll_oracle(logits, r.y)
            if cfg.paraphrase_weight:
                lb = toylm.lm_logits_last(w_after, [r.x_bar]).data[0]
                total += decay * cfg.paraphrase_weight * nll_oracle(lb, r.y)
            ref = toylm.lm_logits_last(w_before, [r.x_tilde]).data[0]
            cur = toylm.lm_logits_last(w_after, [r.x_tilde]).data[0]
            total += decay * cfg.lambda_kl * kl_oracle(ref, cur)
    return total


@pytest.mark.parametrize("rho", [0.0, 0.4])
def test_editing_loss_matches_hand_computed_decay_sum(rho):
    # window of three records with mu=0.5: weights 0.25, 0.5, 1.0
    cfg = base_cfg(window=2, paraphrase_weight=rho)
    w0 = tiny_weights()
    slots = toylm.default_slots(TINY)
    window = STREAM6[:3]
    dec = toylm.capture_decomposed_grads(w0, window[-1].x, window[-1].y, slots)
    _, low = tiny_editor(randomize=True)
    mask_arr = np.array([1.0, 0.0, 1.0, 0.0])
    with ad.no_grad():
        updates = [hn.slot_update(i, sg.u, sg.v, low) for i, sg in enumerate(dec)]
        mask = ad.Tensor(mask_arr)
        upd_sq = tr._masked_upd_sq(updates, mask)
        w1 = toylm.apply_masked_update(w0, slots, updates, mask)
        got = tr.editing_loss(w1, w0, window, upd_sq, cfg).item()
    upd_sq_oracle = sum(
        m * float(np.sum(u.data**2)) for m, u in zip(mask_arr, updates)
    )
    assert upd_sq.item() == pytest.approx(upd_sq_oracle, rel=1e-12)
    want = _loss_oracle(w1, w0, window, upd_sq_oracle, cfg)
    assert got == pytest.approx(want, rel=1e-9)


def test_window_keeps_only_recent_records():
    cfg = base_cfg(window=2)
    high, low = tiny_editor()
    slots = toylm.default_slots(TINY)
    k = ECFG.resolve_k(len(slots))
    rng = np.random.default_rng(0)
    state = tr.EditState(tr.detach_weights(tiny_weights()))
    for t, r in enumerate(STREAM6):
        state, _ = tr.edit_step(state, r, high, low, cfg, slots, k, rng)
        assert len(state.window) == min(t + 1, cfg.window + 1)
        assert state.window == STREAM6[max(0, t - cfg.window): t + 1]
    assert state.t == len(STREAM6)


# ------------------------------------------------------------------- rewards


def test_full_mask_counterfactual_reward_is_exactly_zero():
    # with every slot selected, the committed model and the
    # counterfactual are the same arithmetic, so r_high == 0.0 exactly
    cfg = base_cfg(select_mode="all", reward_mode="full")
    high, low = tiny_editor(randomize=True)
    res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    for log in res.logs:
        assert log.mask.sum() == len(log.mask)
        assert log.r_high == 0.0
        assert log.cf_loss == log.loss


def test_hinet_full_k_counterfactual_reward_is_exactly_zero():
    slots = toylm.default_slots(TINY)
    high, low = tiny_editor(k=len(slots), randomize=True)
    cfg = base_cfg(select_mode="hinet", reward_mode="full")
    res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    for log in res.logs:
        assert log.mask.sum() == len(slots)
        assert log.r_high == 0.0


def test_reward_modes_sign_conventions():
    high, low = tiny_editor(randomize=True)
    cfg = base_cfg(select_mode="hinet", reward_mode="none")
    res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    for log in res.logs:
        assert log.r_low == -log.loss
        assert log.r_high == -log.loss
        assert np.isnan(log.cf_loss)
    cfg2 = base_cfg(select_mode="hinet", reward_mode="rand")
    res2 = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg2)
    for log in res2.logs:
        assert log.r_high == pytest.approx(log.cf_loss - log.loss, rel=1e-12)


# ---------------------------------------------------------------- degeneracy


def test_all_mask_trajectory_equals_flat_single_level_pipeline():
    # hierarchical machinery with an all-ones mask must reproduce the
    # independent single-level loop bit for bit
    high, low = tiny_editor(randomize=True)
    cfg = base_cfg(select_mode="all", reward_mode="none")
    hier = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    flat = tr.run_single_level_trajectory(tiny_weights(), STREAM6, low, cfg)
    assert len(hier.logs) == len(flat.logs)
    for a, b in zip(hier.logs, flat.logs):
        assert a.loss == b.loss  # bitwise
        assert a.r_low == b.r_low
        assert np.array_equal(a.update_norms, b.update_norms)
    assert hier.j_low == flat.j_low
    for name, t in hier.final_weights.params():
        assert np.array_equal(t.data, flat.final_weights[name].data)


# ------------------------------------------------------------------- scoping


def test_training_updates_are_scoped_to_each_level():
    high, low = tiny_editor(randomize=True)
    phi_before = {n: t.data.copy() for n, t in high.parameters()}
    theta_before = {n: t.data.copy() for n, t in low.parameters()}
    cfg = base_cfg(select_mode="hinet", reward_mode="full", epochs=2,
                   lr_high=1e-2, lr_low=1e-2)
    tr.train_editor(tiny_weights(), STREAM6, high, low, cfg)
    phi_moved = any(
        not np.array_equal(t.data, phi_before[n]) for n, t in high.parameters()
    )
    theta_moved = any(
        not np.array_equal(t.data, theta_before[n]) for n, t in low.parameters()
    )
    assert phi_moved and theta_moved


def test_constant_mask_training_leaves_selector_frozen():
    # with a baseline selector the mask is a constant, so no gradient
    # can reach the selector parameters and they must stay bit-identical
    high, low = tiny_editor(randomize=True)
    phi_before = {n: t.data.copy() for n, t in high.parameters()}
    theta_before = {n: t.data.copy() for n, t in low.parameters()}
    cfg = base_cfg(select_mode="all", reward_mode="none", epochs=2, lr_low=1e-2)
    tr.train_editor(tiny_weights(), STREAM6, high, low, cfg)
    for n, t in high.parameters():
        assert np.array_equal(t.data, phi_before[n]), n
    assert any(
        not np.array_equal(t.data, theta_before[n]) for n, t in low.parameters()
    )


def test_full_and_none_reward_modes_train_identically():
    # the counterfactual term never depends on the selector parameters,
    # so the training gradient (hence the whole run) matches bitwise
    results = {}
    for mode in ("full", "none"):
        high, low = tiny_editor(randomize=True)
        cfg = base_cfg(select_mode="hinet", reward_mode=mode, epochs=2,
                       lr_high=1e-2, lr_low=1e-2)
        tr.train_editor(tiny_weights(), STREAM6, high, low, cfg)
        results[mode] = {
            **{"high." + n: t.data.copy() for n, t in high.parameters()},
            **{"low." + n: t.data.copy() for n, t in low.parameters()},
        }
    for name, arr in results["full"].items():
        assert np.array_equal(arr, results["none"][name]), name


def test_non_rl_selector_steps_every_edit():
    high1, low1 = tiny_editor(randomize=True)
    high2, low2 = tiny_editor(randomize=True)
    cfg_rl = base_cfg(select_mode="hinet", reward_mode="full", rl_training=True)
    cfg_no = base_cfg(select_mode="hinet", reward_mode="full", rl_training=False)
    tr.train_editor(tiny_weights(), STREAM6, high1, low1, cfg_rl)
    tr.train_editor(tiny_weights(), STREAM6, high2, low2, cfg_no)
    # different schedules must produce different selector parameters
    diff = any(
        not np.array_equal(t1.data, t2.data)
        for (_, t1), (_, t2) in zip(high1.parameters(), high2.parameters())
    )
    assert diff


# --------------------------------------------------------------- divergence


@pytest.mark.filterwarnings("ignore:overflow")
def test_divergent_step_reports_step_index():
    high, low = tiny_editor()
    for name, t in low.parameters():
        if ".A." in name or ".B." in name:
            t.data[...] = 1e160
    cfg = base_cfg(select_mode="all", reward_mode="none")
    with pytest.raises(TrajectoryDiverged) as exc:
        tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    assert exc.value.step == 0
    assert "step 0" in str(exc.value)


# ------------------------------------------------------------- select modes


def test_baseline_selectors_produce_valid_masks():
    high, low = tiny_editor(randomize=True)
    slots = toylm.default_slots(TINY)
    k = ECFG.resolve_k(len(slots))
    for mode in ("random", "gradnorm", "all"):
        cfg = base_cfg(select_mode=mode, reward_mode="none")
        res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
        for log in res.logs:
            want = len(slots) if mode == "all" else k
            assert log.mask.sum() == want
            assert set(np.unique(log.mask)) <= {0.0, 1.0}
            assert log.z.size == 0


def test_gradnorm_selector_norm_fixture():
    # slot norms [3, 1, 2, 5] with k=2 select slots 0 and 3
    dec = [
        toylm.SlotGrad(s, np.array([[n]]), np.array([[1.0]]))
        for s, n in zip(toylm.default_slots(TINY), [3.0, 1.0, 2.0, 5.0])
    ]
    mask, z = tr.select_layers("gradnorm", dec, None, 2, np.random.default_rng(0))
    assert np.array_equal(mask.data, [1.0, 0.0, 0.0, 1.0])


def test_empty_window_loss_is_norm_penalty_with_warning():
    cfg = base_cfg(eta=0.25)
    w0 = tiny_weights()
    with ad.no_grad():
        upd = ad.Tensor(np.array(3.0))
        with pytest.warns(UserWarning, match="empty window"):
            loss = tr.editing_loss(w0, w0, [], upd, cfg)
    assert loss.item() == pytest.approx(0.75, rel=1e-15)


def test_high_reward_requires_counterfactual():
    with pytest.raises(ValueError, match="counterfactual"):
        tr.high_reward(1.0, None, "full")
    with pytest.raises(ValueError, match="counterfactual"):
        tr.high_reward(1.0, float("nan"), "rand")
    assert tr.high_reward(1.0, 1.4, "full") == pytest.approx(0.4)
    assert tr.high_reward(2.5, None, "none") == -2.5


def test_gradnorm_selector_picks_largest_update_factors():
    w0 = tiny_weights()
    slots = toylm.default_slots(TINY)
    dec = toylm.capture_decomposed_grads(w0, STREAM6[0].x, STREAM6[0].y, slots)
    norms = np.array([sg.frob_norm() for sg in dec])
    mask, z = tr.select_layers("gradnorm", dec, None, 2, np.random.default_rng(0))
    top2 = np.sort(np.argsort(-norms, kind="stable")[:2])
    assert np.array_equal(np.flatnonzero(mask.data), top2)
    assert z is None


def test_hinet_mask_has_exactly_k_ones_and_scores():
    high, low = tiny_editor(randomize=True)
    cfg = base_cfg(select_mode="hinet", reward_mode="full")
    res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    for log in res.logs:
        assert log.mask.sum() == 2
        assert log.z.shape == (4,)
        assert np.isfinite(log.z).all()


# ------------------------------------------------------------ optimizer


def test_adam_minimizes_quadratic_and_clips():
    target = np.array([1.0, -2.0, 3.0])
    x = ad.Tensor(np.zeros(3), requires_grad=True)
    opt = tr.Adam([x], lr=0.05, clip_norm=1.0)
    c = ad.Tensor(target)
    for _ in range(400):
        with ad.record() as tape:
            loss = ad.sumsq(ad.sub(x, c))
        ad.backward(loss, [x], tape=tape)
        gnorm = opt.step()
        assert gnorm >= 0.0
        opt.zero_grad()
        assert x.grad is None
    assert np.allclose(x.data, target, atol=1e-2)


def test_adam_clip_rescales_large_gradients():
    x = ad.Tensor(np.zeros(2), requires_grad=True)
    opt = tr.Adam([x], lr=0.1, clip_norm=1.0)
    x.grad = np.array([30.0, 40.0])  # norm 50 -> scaled to 1
    opt.step()
    # after clipping, first Adam step is lr * ghat/(sqrt(ghat^2)+eps)
    want = -0.1 * np.array([0.6, 0.8]) / (np.array([0.6, 0.8]) + 1e-8)
    assert np.allclose(x.data, want, rtol=1e-6)


# ------------------------------------------------------------- determinism


def test_trajectory_runs_are_bitwise_deterministic():
    high, low = tiny_editor(randomize=True)
    cfg = base_cfg(select_mode="hinet", reward_mode="rand")
    r1 = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    r2 = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    for a, b in zip(r1.logs, r2.logs):
        assert a.loss == b.loss
        assert np.array_equal(a.mask, b.mask)
        assert (a.cf_loss == b.cf_loss) or (np.isnan(a.cf_loss) and np.isnan(b.cf_loss))
    for name, t in r1.final_weights.params():
        assert np.array_equal(t.data, r2.final_weights[name].data)


def test_trajlog_write_is_deterministic(tmp_path):
    high, low = tiny_editor(randomize=True)
    cfg = base_cfg(select_mode="hinet", reward_mode="full")
    res = tr.run_trajectory(tiny_weights(), STREAM6, high, low, cfg)
    p1, p2 = tmp_path / "a.log", tmp_path / "b.log"
    tr.write_trajlog(p1, res)
    tr.write_trajlog(p2, res)
    b1, b2 = p1.read_bytes(), p2.read_bytes()
    assert b1 == b2
    text = b1.decode()
    assert text.startswith(tr.TRAJLOG_FORMAT + "\n")
    assert f"t={len(STREAM6) - 1} " in text
    assert "j_low=" in text


# ------------------------------------------------------------- validation


def test_config_validation_rejects_bad_values():
    with pytest.raises(ValueError):
        base_cfg(gamma=0.9)
    with pytest.raises(ValueError):
        base_cfg(mu=1.5)
    with pytest.raises(ValueError):
        base_cfg(select_mode="nope")
    with pytest.raises(ValueError):
        base_cfg(reward_mode="nope")
    with pytest.raises(ValueError):
        base_cfg(eta=-0.1)
    with pytest.raises(ValueError):
        base_cfg(lr_high=0.0)
