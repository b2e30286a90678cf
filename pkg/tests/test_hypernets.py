"""Editor network tests: identity at init, parameter sharing, routing,
gradient flow to every parameter, and checkpoint round-trips."""

import numpy as np
import pytest

from editlab import autodiff as ad
from editlab import hypernets as hn
from editlab import toylm
from oracles import fd_check

CFG = hn.EditorConfig(d_hidden=6, d_rank=4, n_blocks=2)
SHAPES = [(5, 7), (5, 7), (5, 7), (5, 7)]
RNG = np.random.default_rng(23)


def fresh():
    return hn.init_editor(CFG, SHAPES, seed=9)


def test_low_net_is_identity_at_init():
    _, low = fresh()
    u = RNG.normal(size=(3, 5))
    v = RNG.normal(size=(3, 7))
    u_t, v_t = hn.edit_network_forward(2, u, v, low)
    assert np.array_equal(u_t.data, u)
    assert np.array_equal(v_t.data, v)
    # the update is the raw gradient direction, scaled by the init gain
    upd = hn.slot_update(2, u, v, low)
    assert np.array_equal(upd.data, (u.T @ v) * CFG.init_gain)


def test_gain_scales_update_and_learns():
    _, low = fresh()
    assert all(g.shape == () for g in low.gains)
    assert all(float(g.data) == CFG.init_gain for g in low.gains)
    u = RNG.normal(size=(2, 5))
    v = RNG.normal(size=(2, 7))
    low.gains[0].data[...] = -2.5
    upd = hn.slot_update(0, u, v, low)
    assert np.allclose(upd.data, (u.T @ v) * -2.5)
    # the gain itself receives gradient
    with ad.record() as tape:
        loss = ad.tsum(hn.slot_update(0, ad.Tensor(u), ad.Tensor(v), low))
    grads = ad.backward(loss, [low.gains[0]], tape=tape)
    assert abs(float(grads[low.gains[0]]) - float((u.T @ v).sum())) < 1e-12


def test_editor_config_gain_roundtrip():
    cfg = hn.EditorConfig(init_gain=-0.125)
    d = cfg.to_dict()
    assert isinstance(d["init_gain"], float)
    back = hn.EditorConfig.from_dict(d)
    assert back == cfg and isinstance(back.d_hidden, int)
    with pytest.raises(ValueError):
        hn.EditorConfig(init_gain=float("nan")).validate()


def test_parameter_sharing_by_shape():
    high, low = fresh()
    # all four slots share one weight shape: one encoder, one block set
    assert len(high.enc) == 1
    assert len(low.blocks) == 1
    enc = next(iter(high.enc.values()))
    for i in range(4):
        key = hn._shape_key(high.slot_shapes[i])
        assert high.enc[key] is enc
    # slot-specific stages are distinct objects
    assert high.spe_scale[0] is not high.spe_scale[1]
    assert low.spe_offset[1][0] is not low.spe_offset[2][0]
    mixed = hn.init_editor(CFG, [(5, 7), (3, 2)], seed=1)
    assert len(mixed[0].enc) == 2


def test_route_importance_shapes_and_mask():
    high, _ = fresh()
    codes = [
        hn.encode_layer(RNG.normal(size=5), RNG.normal(size=7), i, high)
        for i in range(4)
    ]
    z, m = hn.route_importance(codes, high, k=2)
    assert z.shape == (4,) and m.shape == (4,)
    assert int(m.data.sum()) == 2
    assert set(np.unique(m.data)) <= {0.0, 1.0}


def test_scores_not_degenerate_across_inputs():
    high, _ = fresh()
    spread = []
    for _ in range(100):
        codes = [
            hn.encode_layer(RNG.normal(size=5), RNG.normal(size=7), i, high)
            for i in range(4)
        ]
        z, _ = hn.route_importance(codes, high, 2)
        spread.append(np.std(z.data))
    assert min(spread) > 0.0


def test_high_forward_fd_on_all_parameters():
    high, _ = fresh()
    u = [RNG.normal(size=5) for _ in range(4)]
    v = [RNG.normal(size=7) for _ in range(4)]
    w = RNG.normal(size=4)

    def loss():
        codes = [hn.encode_layer(u[i], v[i], i, high) for i in range(4)]
        z, _ = hn.route_importance(codes, high, 2)
        return ad.weighted_sum(z, w)

    params = [t for _, t in high.parameters()]
    fd_check(loss, params, rtol=1e-5)


def test_low_forward_fd_on_all_parameters():
    _, low = fresh()
    # move B off zero so the relu sees varied signs
    for blocks in low.blocks.values():
        for _, b in blocks:
            b.data[:] = RNG.normal(0.0, 0.3, b.data.shape)
    u = RNG.normal(size=(2, 5))
    v = RNG.normal(size=(2, 7))
    c = RNG.normal(size=(5, 7))

    def loss():
        upd = hn.slot_update(1, u, v, low)
        return ad.tsum(ad.hadamard(upd, ad.Tensor(c)))

    params = [t for _, t in low.parameters()]
    fd_check(loss, params, rtol=1e-5)


def test_select_mask_from_model_capture():
    cfg = toylm.LMConfig(vocab_size=12, d_model=6, d_ff=8, n_blocks=2, n_heads=1, max_seq=4)
    w = toylm.init_lm(cfg, seed=2)
    slots = toylm.default_slots(cfg)
    dec = toylm.capture_decomposed_grads(w, [2, 5], 7, slots)
    high, low = hn.init_editor(
        hn.EditorConfig(d_hidden=4, d_rank=3, n_blocks=1),
        [(cfg.d_model, cfg.d_ff)] * len(slots),
        seed=0,
    )
    with ad.record():
        z, m = hn.select_mask(dec, high, k=2)
    assert m.data.sum() == 2.0
    # updates for the selected slots have the slot's weight shape
    upd = hn.slot_update(0, dec.slots[0].u, dec.slots[0].v, low)
    assert upd.shape == (cfg.d_model, cfg.d_ff)


def test_factor_width_validation():
    _, low = fresh()
    with pytest.raises(ValueError):
        hn.edit_network_forward(0, RNG.normal(size=(2, 4)), RNG.normal(size=(2, 7)), low)
    high, _ = fresh()
    with pytest.raises(ValueError):
        hn.encode_layer(RNG.normal(size=4), RNG.normal(size=7), 0, high)


def test_k_resolution():
    assert CFG.resolve_k(4) == 2
    assert hn.EditorConfig(k_select=3).resolve_k(4) == 3
    with pytest.raises(ValueError):
        hn.EditorConfig(k_select=5).resolve_k(4)


def test_editor_checkpoint_roundtrip(tmp_path):
    high, low = fresh()
    # perturb so we are not saving init values
    for _, t in high.parameters() + low.parameters():
        t.data += RNG.normal(0.0, 0.1, t.data.shape)
    p = tmp_path / "editor.ckpt"
    hn.save_editor(p, high, low)
    cfg2, high2, low2 = hn.load_editor(p)
    assert cfg2 == CFG
    for (n1, t1), (n2, t2) in zip(high.parameters(), high2.parameters()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)
    for (n1, t1), (n2, t2) in zip(low.parameters(), low2.parameters()):
        assert n1 == n2 and np.array_equal(t1.data, t2.data)


def test_editor_checkpoint_missing_array(tmp_path):
    from editlab import checkpoint

    high, low = fresh()
    p = tmp_path / "editor.ckpt"
    hn.save_editor(p, high, low)
    fmt, cfg, arrays = checkpoint.load_arrays(p)
    del arrays["high.gate"]
    checkpoint.save_arrays(p, fmt, cfg, arrays)
    with pytest.raises(checkpoint.CheckpointError, match="high.gate"):
        hn.load_editor(p)
