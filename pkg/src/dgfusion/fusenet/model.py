"""Depth-guided fusion network: shared backbone, depth branch, condition branch,
windowed depth/condition-token cross-attention fusion and a light seg head."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import diffmath as dm
from ..diffmath import ContractViolation, Tensor
from .config import ModelConfig
from .layers import (
    Params,
    attention,
    conv,
    declare_attention,
    declare_conv,
    declare_layernorm,
    declare_linear,
    declare_mlp,
    layernorm,
    linear,
    mlp,
)
from .windows import window_partition, window_reassemble, windows_to_tokens, tokens_to_windows

FeaturePyramid = list  # four Tensors, [N, C_l, H/s_l, W/s_l]


@dataclass
class ModelOutput:
    seg_logits: Tensor  # N, C, H, W
    depth_pred: Tensor | None  # N, H, W metres
    cond_logits: Tensor | None  # N, n_conditions
    ct: Tensor | None  # N, token_dim
    depth_pyramid: FeaturePyramid | None
    fused_pyramid: FeaturePyramid
    rgb_pyramid: FeaturePyramid


# -- parameter layout -----------------------------------------------------------------


def build_params(cfg: ModelConfig, seed: int = 0) -> Params:
    p = Params(seed)
    a = cfg.adapter_channels
    for m in cfg.modalities:
        declare_conv(p, f"adapter.{m}", 3, a, 1, bias=True, init="xavier")
    c_prev = a
    for l, c in enumerate(cfg.widths):
        f = cfg.stem if l == 0 else 2
        declare_conv(p, f"backbone.{l}.proj", c_prev * f * f, c, 1, bias=False)
        declare_conv(p, f"backbone.{l}.conv", c, c, 3, bias=False)
        c_prev = c

    if cfg.has_depth_branch:
        n_mod = len(cfg.modalities)
        for l, c in enumerate(cfg.widths):
            declare_conv(p, f"depthfuse.{l}.down", n_mod * c, c // cfg.bottleneck, 1)
            declare_conv(p, f"depthfuse.{l}.up", c // cfg.bottleneck, c, 1, init="xavier")

    if cfg.use_aux_depth_head:
        h = cfg.depth_dim
        for l, c in enumerate(cfg.widths):
            declare_conv(p, f"depthhead.{l}.0", c, h, 3)
            for s in range(1, l):
                declare_conv(p, f"depthhead.{l}.{s}", h, h, 3)
        declare_conv(p, "depthhead.out", h, 1, 1, init="xavier")

    if cfg.use_ct:
        d = cfg.token_dim
        declare_linear(p, "cond.in", cfg.widths[3], d)
        if cfg.cond_pos_embed:
            h4, w4 = cfg.level_hw(3)
            p.new("cond.pos", (h4 * w4, d), "small")
        for i in range(2):
            declare_layernorm(p, f"cond.enc{i}.ln1", d)
            declare_attention(p, f"cond.enc{i}.attn", d)
            declare_layernorm(p, f"cond.enc{i}.ln2", d)
            declare_mlp(p, f"cond.enc{i}.mlp", d, cfg.mlp_ratio)
        p.new("cond.query", (1, d), "small")
        for i in range(2):
            declare_layernorm(p, f"cond.dec{i}.ln_q", d)
            declare_layernorm(p, f"cond.dec{i}.ln_m", d)
            declare_attention(p, f"cond.dec{i}.attn", d)
            declare_layernorm(p, f"cond.dec{i}.ln2", d)
            declare_mlp(p, f"cond.dec{i}.mlp", d, cfg.mlp_ratio)
        declare_layernorm(p, "cond.ln_out", d)
        declare_linear(p, "cond.cls", d, cfg.n_conditions)

    d = cfg.token_dim
    kk = cfg.window * cfg.window
    for m in cfg.secondary:
        for l, c in enumerate(cfg.widths):
            pre = f"fusion.{m}.{l}"
            declare_linear(p, f"{pre}.rgb_in", c, d)
            declare_linear(p, f"{pre}.sec_in", c, d)
            if cfg.use_dt:
                declare_conv(p, f"{pre}.dt", c, d, 3, init="xavier")
            if cfg.use_pos_bias:
                p.new(f"{pre}.pos_q", (kk, d), "small")
                p.new(f"{pre}.pos_k", (kk, d), "small")
            declare_layernorm(p, f"{pre}.ln_self", d)
            declare_attention(p, f"{pre}.self", d)
            declare_layernorm(p, f"{pre}.ln_q", d)
            declare_layernorm(p, f"{pre}.ln_kv", d)
            declare_attention(p, f"{pre}.cross", d)
            declare_linear(p, f"{pre}.out", d, c)

    s = cfg.seg_dim
    for l, c in enumerate(cfg.widths):
        declare_conv(p, f"seghead.lat.{l}", c, s, 1)
    declare_conv(p, "seghead.conv", s, s, 3)
    declare_conv(p, "seghead.cls", s, cfg.n_classes, 1, init="xavier")
    return p


DEPTH_HEAD_PREFIX = "depthhead."


# -- branches --------------------------------------------------------------------------


def _as_batch(x) -> Tensor:
    t = dm.as_tensor(x)
    return dm.reshape(t, (1,) + t.shape) if t.ndim == 3 else t


def backbone(p: Params, cfg: ModelConfig, x: Tensor, taps: list | None = None) -> FeaturePyramid:
    """Shared 4-stage backbone; ``taps`` collects pre-activation maps."""
    levels = []
    for l in range(4):
        f = cfg.stem if l == 0 else 2
        if f > 1:
            x = dm.space_to_depth(x, f)
        pre = conv(p, f"backbone.{l}.proj", x)
        if taps is not None:
            taps.append(pre)
        x = dm.gelu(pre)
        x = dm.add(x, dm.gelu(conv(p, f"backbone.{l}.conv", x)))
        levels.append(x)
    return levels


def encode_modality(p: Params, cfg: ModelConfig, image, modality: str, taps: list | None = None) -> FeaturePyramid:
    if modality not in cfg.modalities:
        raise ContractViolation(f"unknown modality {modality!r}")
    x = _as_batch(image)
    if x.shape[-2:] != (cfg.height, cfg.width) or x.shape[-3] != 3:
        raise ContractViolation(f"{modality} plane {x.shape} does not match the config")
    return backbone(p, cfg, conv(p, f"adapter.{modality}", x), taps)


def encode_all(p: Params, cfg: ModelConfig, images: dict) -> dict[str, FeaturePyramid]:
    """Adapters per modality, then one backbone pass over the stacked batch."""
    adapted = []
    for m in cfg.modalities:
        x = _as_batch(images[m])
        if x.shape[-2:] != (cfg.height, cfg.width) or x.shape[-3] != 3:
            raise ContractViolation(f"{m} plane {x.shape} does not match the config")
        adapted.append(conv(p, f"adapter.{m}", x))
    n = adapted[0].shape[0]
    levels = backbone(p, cfg, dm.concat(adapted, axis=0))
    return {
        m: [lv[i * n:(i + 1) * n] for lv in levels]
        for i, m in enumerate(cfg.modalities)
    }


def depth_fuse(p: Params, cfg: ModelConfig, pyramids: dict[str, FeaturePyramid]) -> FeaturePyramid:
    out = []
    for l in range(4):
        feats = [pyramids[m][l] for m in cfg.modalities]
        shapes = {f.shape for f in feats}
        if len(shapes) != 1:
            raise ContractViolation(f"level {l} shapes differ across modalities: {shapes}")
        h = dm.gelu(conv(p, f"depthfuse.{l}.down", dm.concat(feats, axis=1)))
        out.append(dm.add(conv(p, f"depthfuse.{l}.up", h), pyramids["rgb"][l]))
    return out


def depth_head(p: Params, cfg: ModelConfig, d: FeaturePyramid) -> Tensor:
    total = None
    for l in range(4):
        x = dm.gelu(conv(p, f"depthhead.{l}.0", d[l]))
        for s in range(1, l):
            x = dm.gelu(conv(p, f"depthhead.{l}.{s}", dm.upsample2x(x)))
        if l > 0:
            x = dm.upsample2x(x)
        total = x if total is None else dm.add(total, x)
    z = conv(p, "depthhead.out", total)  # N,1,h,w
    # log-space squashing into [d_min, d_max]; strictly positive
    lo, hi = math.log(cfg.d_min), math.log(cfg.d_max)
    depth = dm.exp(dm.add(dm.mul(dm.sigmoid(z), hi - lo), lo))
    depth = dm.resize_bilinear(depth, cfg.height, cfg.width)
    n = depth.shape[0]
    return dm.reshape(depth, (n, cfg.height, cfg.width))


def condition_branch(p: Params, cfg: ModelConfig, rgb_top: Tensor) -> tuple[Tensor, Tensor]:
    """Level-4 RGB features -> (condition token N x D, condition logits N x 8)."""
    n, c, h, w = rgb_top.shape
    tokens = dm.transpose(dm.reshape(rgb_top, (n, c, h * w)), (0, 2, 1))
    x = linear(p, "cond.in", tokens)
    if cfg.cond_pos_embed:
        x = dm.add(x, p["cond.pos"])
    for i in range(2):
        pre = f"cond.enc{i}"
        y = layernorm(p, f"{pre}.ln1", x)
        x = dm.add(x, attention(p, f"{pre}.attn", y, y, cfg.heads))
        x = dm.add(x, mlp(p, f"{pre}.mlp", layernorm(p, f"{pre}.ln2", x)))
    q = dm.add(Tensor(np.zeros((n, 1, cfg.token_dim))), p["cond.query"])
    for i in range(2):
        pre = f"cond.dec{i}"
        mem = layernorm(p, f"{pre}.ln_m", x)
        q = dm.add(q, attention(p, f"{pre}.attn", layernorm(p, f"{pre}.ln_q", q), mem, cfg.heads))
        q = dm.add(q, mlp(p, f"{pre}.mlp", layernorm(p, f"{pre}.ln2", q)))
    ct = dm.reshape(layernorm(p, "cond.ln_out", q), (n, cfg.token_dim))
    return ct, linear(p, "cond.cls", ct)


def depth_token(p: Params, name: str, depth_windows: Tensor) -> Tensor:
    """3x3 conv then spatial mean: (B, C, k, k) -> (B, D)."""
    return dm.mean(conv(p, name, depth_windows), axis=(-2, -1))


def depth_guided_fusion(p: Params, cfg: ModelConfig, modality: str, level: int,
                        rgb: Tensor, sec: Tensor, depth: Tensor | None, ct: Tensor | None) -> Tensor:
    """One fusion module; returns the [N, C_l, H_l, W_l] contribution."""
    pre = f"fusion.{modality}.{level}"
    k = cfg.window
    kk = k * k
    rgb_w, lay = window_partition(rgb, k)
    sec_w, lay_s = window_partition(sec, k)
    if lay_s != lay:
        raise ContractViolation("rgb and secondary windows disagree")
    q = linear(p, f"{pre}.rgb_in", windows_to_tokens(rgb_w))
    kv = linear(p, f"{pre}.sec_in", windows_to_tokens(sec_w))
    if cfg.use_pos_bias:
        q = dm.add(q, p[f"{pre}.pos_q"])
        kv = dm.add(kv, p[f"{pre}.pos_k"])
    extra = []
    b = q.shape[0]
    if cfg.use_dt:
        if depth is None:
            raise ContractViolation("depth tokens need the depth pyramid")
        d_w, lay_d = window_partition(depth, k)
        if lay_d.per_image * lay_d.n != b:
            raise ContractViolation("depth windows disagree with rgb windows")
        extra.append(dm.reshape(depth_token(p, f"{pre}.dt", d_w), (b, 1, cfg.token_dim)))
    if cfg.use_ct:
        if ct is None:
            raise ContractViolation("condition token missing")
        per_window = dm.take(ct, np.repeat(np.arange(lay.n), lay.per_image), axis=0)
        extra.append(dm.reshape(per_window, (b, 1, cfg.token_dim)))
    queries = dm.concat([q] + extra, axis=1) if extra else q
    y = layernorm(p, f"{pre}.ln_self", queries)
    queries = dm.add(queries, attention(p, f"{pre}.self", y, y, cfg.heads))
    kv_n = layernorm(p, f"{pre}.ln_kv", kv)
    queries = dm.add(queries, attention(p, f"{pre}.cross", layernorm(p, f"{pre}.ln_q", queries), kv_n, cfg.heads))
    rgb_tokens = queries[:, :kk, :] if extra else queries  # drop DT / CT rows
    out = linear(p, f"{pre}.out", rgb_tokens)
    return window_reassemble(tokens_to_windows(out, k), lay)


def seg_head(p: Params, cfg: ModelConfig, fused: FeaturePyramid) -> Tensor:
    h1, w1 = cfg.level_hw(0)
    total = None
    for l in range(4):
        x = dm.resize_bilinear(conv(p, f"seghead.lat.{l}", fused[l]), h1, w1)
        total = x if total is None else dm.add(total, x)
    x = dm.gelu(conv(p, "seghead.conv", dm.gelu(total)))
    logits = conv(p, "seghead.cls", x)
    return dm.resize_bilinear(logits, cfg.height, cfg.width)


# -- full graph --------------------------------------------------------------------------


def forward(p: Params, cfg: ModelConfig, images: dict, with_depth_head: bool = True) -> ModelOutput:
    """``images`` maps modality name -> [N,]3,H,W array or tensor."""
    pyr = encode_all(p, cfg, images)
    d = depth_fuse(p, cfg, pyr) if cfg.has_depth_branch else None
    depth_pred = None
    if with_depth_head and cfg.use_aux_depth_head:
        depth_pred = depth_head(p, cfg, d)
    ct = cond_logits = None
    if cfg.use_ct:
        ct, cond_logits = condition_branch(p, cfg, pyr["rgb"][3])
    fused = []
    for l in range(4):
        f = pyr["rgb"][l]
        for m in cfg.secondary:
            f = dm.add(f, depth_guided_fusion(
                p, cfg, m, l, pyr["rgb"][l], pyr[m][l],
                d[l] if (d is not None and cfg.use_dt) else None, ct,
            ))
        fused.append(f)
    seg = seg_head(p, cfg, fused)
    return ModelOutput(seg, depth_pred, cond_logits, ct, d, fused, pyr["rgb"])


def forward_inference(p: Params, cfg: ModelConfig, images: dict) -> ModelOutput:
    """Forward without the auxiliary depth head; depth features still feed fusion."""
    with dm.no_grad():
        return forward(p, cfg, images, with_depth_head=False)


def images_from_samples(samples, modalities) -> dict[str, np.ndarray]:
    return {m: np.stack([s.modality(m) for s in samples]) for m in modalities}
