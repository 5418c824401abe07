from __future__ import annotations

import numpy as np
import pytest

from dgfusion import diffmath as dm
from dgfusion.diffmath import ContractViolation, Tensor
from dgfusion.fusenet import (
    DEPTH_HEAD_PREFIX,
    AttentionRecorder,
    build_params,
    condition_branch,
    depth_fuse,
    depth_guided_fusion,
    depth_head,
    depth_token,
    encode_all,
    encode_modality,
    forward,
    forward_inference,
    tiny_config,
    window_partition,
    window_reassemble,
)
from dgfusion.fusenet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from dgfusion.fusenet.config import ModelConfig
from dgfusion.kvconfig import ConfigError

CFG = tiny_config()


def random_images(cfg, n=2, seed=0):
    rng = np.random.default_rng(seed)
    return {m: rng.random((n, 3, cfg.height, cfg.width)) for m in cfg.modalities}


@pytest.fixture(scope="module")
def params():
    return build_params(CFG, 0)


# -- windows -----------------------------------------------------------------------------------


@pytest.mark.parametrize("shape, k", [((2, 16, 24), 8), ((3, 16, 16), 4), ((1, 2, 32, 32), 16),
                                      ((2, 3, 10, 13), 4), ((1, 5, 7), 8)])
def test_window_round_trip(shape, k):
    x = np.random.default_rng(0).normal(size=shape)
    w, lay = window_partition(Tensor(x), k)
    assert w.shape[0] == lay.n * -(-shape[-2] // k) * -(-shape[-1] // k)
    back = window_reassemble(w, lay, squeeze=len(shape) == 3)
    np.testing.assert_array_equal(back.data, x)


def test_window_count_and_constant_input():
    w, lay = window_partition(Tensor(np.full((2, 16, 24), 3.5)), 8)
    assert lay.per_image == 6 and w.shape == (6, 2, 8, 8)
    assert np.all(w.data == 3.5)


def test_window_padding_reflects():
    x = np.arange(6.0).reshape(1, 1, 6)
    w, _ = window_partition(Tensor(x), 4)
    # width 6 -> 8 with reflect padding of the last two columns (4, 3)
    np.testing.assert_array_equal(w.data[1, 0, 0], [4, 5, 4, 3])


def test_window_layout_mismatch_rejected():
    w, lay = window_partition(Tensor(np.zeros((1, 8, 8))), 4)
    with pytest.raises(ContractViolation):
        window_reassemble(w[:3], lay)


# -- encoder and depth branch -----------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(token_dim=10, heads=3)
    with pytest.raises(ConfigError):
        ModelConfig(modalities=("lidar", "rgb"))
    with pytest.raises(ConfigError):
        ModelConfig(height=40)


def test_pyramid_shapes(params):
    pyr = encode_all(params, CFG, random_images(CFG))
    for m in CFG.modalities:
        for l, lv in enumerate(pyr[m]):
            assert lv.shape == (2, CFG.widths[l]) + CFG.level_hw(l)
    assert CFG.strides == (2, 4, 8, 16)
    assert ModelConfig().strides == (4, 8, 16, 32)


def test_shared_backbone_with_identical_adapters():
    p = build_params(CFG, 1)
    for suffix in ("w", "b"):
        p[f"adapter.lidar.{suffix}"].data[...] = p[f"adapter.rgb.{suffix}"].data
    img = np.random.default_rng(1).random((3, CFG.height, CFG.width))
    a = encode_modality(p, CFG, img, "rgb")
    b = encode_modality(p, CFG, img, "lidar")
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.data, y.data)
    # the batched path agrees with the single-modality path
    imgs = {m: img[None] for m in CFG.modalities}
    batched = encode_all(p, CFG, imgs)
    for x, y in zip(a, batched["rgb"]):
        np.testing.assert_allclose(x.data, y.data, rtol=0, atol=1e-12)


def test_zero_input_zero_pre_activation():
    p = build_params(CFG, 2)
    p["adapter.rgb.b"].data[...] = 0.0
    taps: list = []
    encode_modality(p, CFG, np.zeros((3, CFG.height, CFG.width)), "rgb", taps)
    assert taps and all(np.all(t.data == 0) for t in taps)


def test_unknown_modality_rejected(params):
    with pytest.raises(ContractViolation):
        encode_modality(params, CFG, np.zeros((3, 16, 16)), "sonar")
    with pytest.raises(ContractViolation):
        encode_modality(params, CFG, np.zeros((3, 8, 16)), "rgb")


def test_depth_fuse_residual_and_lidar_sensitivity():
    p = build_params(CFG, 3)
    imgs = random_images(CFG, 1, 3)
    pyr = encode_all(p, CFG, imgs)
    d = depth_fuse(p, CFG, pyr)
    imgs2 = dict(imgs)
    imgs2["lidar"] = imgs["lidar"] + 0.1
    d2 = depth_fuse(p, CFG, encode_all(p, CFG, imgs2))
    for a, b in zip(d, d2):
        assert np.abs(a.data - b.data).max() > 0
    for name in p.names("depthfuse."):
        p[name].data[...] = 0.0
    for lv, rgb in zip(depth_fuse(p, CFG, pyr), pyr["rgb"]):
        np.testing.assert_array_equal(lv.data, rgb.data)


def test_depth_head_range_and_level_gradients(params):
    pyr = encode_all(params, CFG, random_images(CFG, 1))
    d = [Tensor(lv.data, requires_grad=True) for lv in depth_fuse(params, CFG, pyr)]
    out = depth_head(params, CFG, d)
    assert out.shape == (1, CFG.height, CFG.width)
    assert out.data.min() >= CFG.d_min and out.data.max() <= CFG.d_max
    dm.backward(dm.sum(out))
    assert all(np.linalg.norm(lv.grad) > 0 for lv in d)


def test_condition_branch_shapes_and_permutation():
    cfg = tiny_config(cond_pos_embed=False)
    p = build_params(cfg, 4)
    top = np.random.default_rng(4).normal(size=(1, cfg.widths[3]) + cfg.level_hw(3))
    ct, logits = condition_branch(p, cfg, Tensor(top))
    assert ct.shape == (1, cfg.token_dim) and logits.shape == (1, 8)
    flat = top.reshape(1, cfg.widths[3], -1)
    perm = np.random.default_rng(5).permutation(flat.shape[-1])
    shuffled = flat[:, :, perm].reshape(top.shape)
    ct2, _ = condition_branch(p, cfg, Tensor(shuffled))
    np.testing.assert_allclose(ct2.data, ct.data, atol=1e-12)


# -- fusion ------------------------------------------------------------------------------------


def _fusion_inputs(cfg, p, seed=6, level=1):
    pyr = encode_all(p, cfg, random_images(cfg, 1, seed))
    d = depth_fuse(p, cfg, pyr) if cfg.has_depth_branch else None
    ct = condition_branch(p, cfg, pyr["rgb"][3])[0] if cfg.use_ct else None
    return pyr["rgb"][level], pyr["lidar"][level], (d[level] if d else None), ct


@pytest.mark.parametrize("use_dt, use_ct, extra", [(True, True, 2), (True, False, 1),
                                                   (False, True, 1), (False, False, 0)])
def test_token_removal_and_attention_rows(use_dt, use_ct, extra):
    cfg = tiny_config(use_dt=use_dt, use_ct=use_ct)
    p = build_params(cfg, 0)
    rgb, sec, d, ct = _fusion_inputs(cfg, p)
    with AttentionRecorder() as rec:
        out = depth_guided_fusion(p, cfg, "lidar", 1, rgb, sec, d, ct)
    assert out.shape == rgb.shape
    kk = cfg.window ** 2
    self_att, cross_att = rec.maps
    assert self_att.shape[-2:] == (kk + extra, kk + extra)
    assert cross_att.shape[-2:] == (kk + extra, kk)
    for a in rec.maps:
        np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-12)


def test_depth_token_is_mean_of_conv(params):
    rng = np.random.default_rng(7)
    win = rng.normal(size=(2, CFG.widths[0], 4, 4))
    win[1] = win[0]
    dt = depth_token(params, "fusion.lidar.0.dt", Tensor(win))
    full = dm.conv2d(Tensor(win), params["fusion.lidar.0.dt.w"], params["fusion.lidar.0.dt.b"]).data
    np.testing.assert_allclose(dt.data, full.sum(axis=(-2, -1)) / 16, rtol=1e-13)
    np.testing.assert_array_equal(dt.data[0], dt.data[1])


def test_depth_token_constant_window_closed_form():
    p = build_params(CFG, 0)
    c, d = CFG.widths[0], CFG.token_dim
    w = np.zeros((d, c, 3, 3))
    w[:, :, 1, 1] = 1.0 / c  # centre tap only: zero padding never enters
    p["fusion.lidar.0.dt.w"].data[...] = w
    p["fusion.lidar.0.dt.b"].data[...] = 0.25
    dt = depth_token(p, "fusion.lidar.0.dt", Tensor(np.full((1, c, 4, 4), 2.0)))
    np.testing.assert_allclose(dt.data, 2.25, rtol=1e-14)


@pytest.mark.parametrize("use_dt", [True, False])
def test_dt_sensitivity(use_dt):
    cfg = tiny_config(use_dt=use_dt)
    p = build_params(cfg, 0)
    rgb, sec, d, ct = _fusion_inputs(cfg, p)
    base = depth_guided_fusion(p, cfg, "lidar", 1, rgb, sec, d, ct).data
    bumped = dm.add(d, Tensor(np.random.default_rng(8).normal(size=d.shape) * 0.5))
    moved = depth_guided_fusion(p, cfg, "lidar", 1, rgb, sec, bumped, ct).data
    if use_dt:
        assert np.abs(moved - base).max() > 1e-8
    else:
        np.testing.assert_array_equal(moved, base)


def test_fusion_rejects_missing_streams(params):
    rgb, sec, d, ct = _fusion_inputs(CFG, params)
    with pytest.raises(ContractViolation):
        depth_guided_fusion(params, CFG, "lidar", 1, rgb, sec, None, ct)
    with pytest.raises(ContractViolation):
        depth_guided_fusion(params, CFG, "lidar", 1, rgb, sec, d, None)
    with pytest.raises(ContractViolation):
        depth_guided_fusion(params, CFG, "lidar", 1, rgb, sec[:, :, :2, :2], d, ct)


# -- full graph --------------------------------------------------------------------------------


def test_forward_shapes(params):
    out = forward(params, CFG, random_images(CFG))
    assert out.seg_logits.shape == (2, CFG.n_classes, 16, 16)
    assert out.depth_pred.shape == (2, 16, 16) and np.all(out.depth_pred.data > 0)
    assert out.cond_logits.shape == (2, 8) and out.ct.shape == (2, CFG.token_dim)
    assert np.isfinite(out.seg_logits.data).all()
    assert len(out.depth_pyramid) == 4


def test_head_detachability(params):
    imgs = random_images(CFG, 1, 9)
    dm.reset_op_count()
    full = forward(params, CFG, imgs)
    n_full = dm.op_count()
    dm.reset_op_count()
    inf = forward_inference(params, CFG, imgs)
    n_inf = dm.op_count()
    np.testing.assert_array_equal(full.seg_logits.data, inf.seg_logits.data)
    assert inf.depth_pred is None and inf.depth_pyramid is not None
    assert n_inf < n_full

    p = build_params(CFG, 0)
    for name in p.names(DEPTH_HEAD_PREFIX):
        p[name].data[...] = 0.0
    np.testing.assert_array_equal(forward(p, CFG, imgs).seg_logits.data, full.seg_logits.data)


def test_zeroed_fusion_leaves_rgb_residual():
    p = build_params(CFG, 0)
    for name in p.names("fusion."):
        if name.endswith(".out.w") or name.endswith(".out.b"):
            p[name].data[...] = 0.0
    out = forward(p, CFG, random_images(CFG, 1))
    for f, r in zip(out.fused_pyramid, out.rgb_pyramid):
        np.testing.assert_array_equal(f.data, r.data)


def test_toggles_change_only_declared_parameters():
    full = build_params(CFG, 0)
    expected_missing = {
        "use_aux_depth_head": lambda n: n.startswith("depthhead."),
        "use_ct": lambda n: n.startswith("cond."),
        "use_dt": lambda n: n.endswith(".dt.w") or n.endswith(".dt.b"),
    }
    for toggle, is_owned in expected_missing.items():
        p = build_params(CFG.with_toggles(**{toggle: False}), 0)
        missing = set(full.names()) - set(p.names())
        assert missing == {n for n in full.names() if is_owned(n)}, toggle
        assert not set(p.names()) - set(full.names())
        for name in p.names():
            np.testing.assert_array_equal(p[name].data, full[name].data)
    # without the head and without DT, the depth branch disappears entirely
    bare = build_params(CFG.with_toggles(use_aux_depth_head=False, use_dt=False), 0)
    assert not bare.names("depthfuse.")


def test_toggled_forward_outputs():
    cfg = CFG.with_toggles(use_ct=False, use_aux_depth_head=False, use_dt=False)
    out = forward(build_params(cfg, 0), cfg, random_images(cfg, 1))
    assert out.depth_pred is None and out.cond_logits is None and out.depth_pyramid is None


def test_parameter_init_is_seeded():
    a, b, c = build_params(CFG, 0), build_params(CFG, 0), build_params(CFG, 1)
    for name in a.names():
        np.testing.assert_array_equal(a[name].data, b[name].data)
    assert any(not np.array_equal(a[n].data, c[n].data) for n in a.names())


def test_checkpoint_round_trip(tmp_path, params):
    save_checkpoint(tmp_path / "m.dgfs", params, CFG, step=7)
    p2, cfg2, meta = load_checkpoint(tmp_path / "m.dgfs")
    assert cfg2 == CFG and meta["step"] == 7
    for name in params.names():
        np.testing.assert_array_equal(p2[name].data, params[name].data)
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.dgfs")
