"""Procedural driving-like scenes with condition-dependent sensor degradation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .sensors import dilate, project_and_dilate
from .types import (
    CLASS_NAMES,
    VOID_CLASS,
    VOID_INSTANCE,
    ConditionLabel,
    MultimodalSample,
    PanopticMap,
    SceneConfig,
    SparseDepthMap,
)

SKY, ROAD, SIDEWALK, BUILDING, VEGETATION, POLE, CAR, PERSON = range(len(CLASS_NAMES))

BASE_COLOR = np.array([
    [0.55, 0.75, 0.95],  # sky
    [0.33, 0.33, 0.36],  # road
    [0.68, 0.62, 0.55],  # sidewalk
    [0.62, 0.34, 0.24],  # building
    [0.18, 0.55, 0.20],  # vegetation
    [0.90, 0.82, 0.10],  # pole
    [0.12, 0.22, 0.72],  # car
    [0.88, 0.20, 0.48],  # person
])
REFLECTIVITY = np.array([0.0, 0.35, 0.45, 0.7, 0.3, 0.8, 0.95, 0.5])
RADAR_RCS = {BUILDING: 0.8, VEGETATION: 0.2, POLE: 0.6, CAR: 1.0, PERSON: 0.3}

# (weight, depth range m, width range m, height range m)
OBJECT_TYPES = {
    BUILDING: (0.22, (25.0, 60.0), (8.0, 25.0), (8.0, 20.0)),
    VEGETATION: (0.18, (12.0, 45.0), (3.0, 8.0), (3.0, 8.0)),
    POLE: (0.15, (6.0, 22.0), (0.4, 0.5), (4.0, 7.0)),
    CAR: (0.28, (5.0, 30.0), (3.5, 4.5), (1.4, 1.8)),
    PERSON: (0.17, (4.0, 20.0), (0.6, 0.8), (1.6, 1.9)),
}
CAMERA_HEIGHT = 1.5


@dataclass
class _Object:
    cls: int
    depth: float
    rows: slice
    cols: slice
    disc: bool
    instance: int


def _ground_geometry(cfg: SceneConfig, h0: int) -> tuple[float, float]:
    # depth(row) = a / (row - h0 + 0.5); the bottom row sits at 3 d_min
    a = 3.0 * cfg.d_min * (cfg.height - h0 - 0.5)
    focal = a / CAMERA_HEIGHT
    return a, focal


def _layout(cfg: SceneConfig, rng: np.random.Generator):
    h, w = cfg.height, cfg.width
    h0 = int(rng.uniform(0.35, 0.45) * h)
    a, focal = _ground_geometry(cfg, h0)
    rows = np.arange(h)[:, None] * np.ones((1, w))
    cols = np.ones((h, 1)) * np.arange(w)[None, :]

    depth = np.full((h, w), cfg.d_max)
    below = rows >= h0
    depth[below] = np.minimum(cfg.d_max, a / (rows[below] - h0 + 0.5))

    cls = np.full((h, w), SKY, dtype=np.int64)
    cx = rng.uniform(0.35, 0.65) * w
    half = (rows - h0 + 1) * rng.uniform(0.6, 0.9)
    cls[below] = SIDEWALK
    cls[below & (np.abs(cols - cx) < half)] = ROAD
    inst = np.where(cls == SKY, 1, np.where(cls == ROAD, 2, 3)).astype(np.int64)

    kinds = list(OBJECT_TYPES)
    weights = np.array([OBJECT_TYPES[k][0] for k in kinds])
    n = int(rng.integers(cfg.n_objects_min, cfg.n_objects_max + 1))
    objects: list[_Object] = []
    next_id = 4
    for _ in range(n):
        kind = kinds[int(rng.choice(len(kinds), p=weights / weights.sum()))]
        _, (z0, z1), (w0, w1), (hh0, hh1) = OBJECT_TYPES[kind]
        z = float(rng.uniform(z0, z1))
        wm, hm = rng.uniform(w0, w1), rng.uniform(hh0, hh1)
        base = h0 - 0.5 + a / z
        width_px = max(2, int(round(wm * focal / z)))
        height_px = max(2, int(round(hm * focal / z)))
        c0 = int(rng.integers(-width_px // 2, w - width_px // 2))
        if kind == VEGETATION:
            lift = int(round(rng.uniform(1.5, 4.0) * focal / z))
            top = int(round(base)) - lift - height_px
        else:
            top = int(round(base)) - height_px
        objects.append(_Object(kind, z, slice(top, top + height_px), slice(c0, c0 + width_px),
                               kind == VEGETATION, next_id))
        next_id += 1
        if kind == CAR and rng.random() < 0.5:
            # a second car touching the first: same class, same depth, new instance
            side = 1 if rng.random() < 0.5 else -1
            w2 = max(2, int(round(rng.uniform(w0, w1) * focal / z)))
            h2 = max(2, int(round(rng.uniform(hh0, hh1) * focal / z)))
            c2 = c0 + width_px if side > 0 else c0 - w2
            objects.append(_Object(CAR, z, slice(int(round(base)) - h2, int(round(base))),
                                   slice(c2, c2 + w2), False, next_id))
            next_id += 1

    objects.sort(key=lambda o: -o.depth)
    jitter = np.zeros((h, w))
    for o in objects:
        r0, r1 = max(o.rows.start, 0), min(o.rows.stop, h)
        c0, c1 = max(o.cols.start, 0), min(o.cols.stop, w)
        if r0 >= r1 or c0 >= c1:
            continue
        mask = np.zeros((h, w), dtype=bool)
        mask[r0:r1, c0:c1] = True
        if o.disc:
            cy = (o.rows.start + o.rows.stop - 1) / 2
            cxo = (o.cols.start + o.cols.stop - 1) / 2
            ry = max((o.rows.stop - o.rows.start) / 2, 1.0)
            rx = max((o.cols.stop - o.cols.start) / 2, 1.0)
            mask &= ((rows - cy) / ry) ** 2 + ((cols - cxo) / rx) ** 2 <= 1.0
        if not mask.any():
            continue
        cls[mask] = o.cls
        inst[mask] = o.instance
        depth[mask] = o.depth
        jitter[mask] = 0.0
        # bounded per-pixel depth jitter inside the object
        u = rng.uniform(-0.45, 0.45, size=int(mask.sum()))
        jitter[mask] = u * cfg.depth_jitter
    depth = np.clip(depth * (1.0 + jitter), cfg.d_min, cfg.d_max)
    return h0, depth, cls, inst, objects


def _render_clean_rgb(cfg, rng, depth, cls, inst):
    h, w = cls.shape
    ids = np.unique(inst)
    tint = {int(i): rng.normal(0.0, 0.05, size=3) for i in ids}
    rgb = BASE_COLOR[cls].transpose(2, 0, 1).copy()
    for i, t in tint.items():
        m = inst == i
        rgb[:, m] += t[:, None]
    rgb += rng.normal(0.0, 0.02, size=rgb.shape)
    haze = 0.25 * (depth / cfg.d_max)
    rgb = rgb * (1.0 - haze) + haze * BASE_COLOR[SKY][:, None, None]
    return np.clip(rgb, 0.0, 1.0)


def _apply_condition(cfg, rng, rgb, depth, cond: ConditionLabel):
    out = rgb.copy()
    h, w = depth.shape
    if cond.weather == "fog":
        t = np.exp(-cfg.fog_density * depth)
        out = out * t + 0.75 * (1.0 - t)
    elif cond.weather == "snow":
        t = np.exp(-cfg.snow_fog_density * depth)
        out = out * t + 0.85 * (1.0 - t)
        flakes = rng.random((h, w)) < 0.04
        out[:, flakes] = 0.97
    elif cond.weather == "rain":
        out = out * 0.8
        for _ in range(max(1, w // 6)):
            c = int(rng.integers(0, w))
            r0 = int(rng.integers(0, h))
            length = int(rng.integers(4, 11))
            out[:, r0:r0 + length, c] += 0.25
    if cond.time == "night":
        out = out * cfg.night_gain
        out += rng.normal(0.0, 0.02, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def _event_image(cfg, rgb_clean, rng, cond):
    intensity = rgb_clean.mean(axis=0)
    h, w = intensity.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    gx[:, :-1] = np.abs(intensity[:, 1:] - intensity[:, :-1])
    gy[:-1, :] = np.abs(intensity[1:, :] - intensity[:-1, :])
    fired = np.maximum(gx, gy) > cfg.event_threshold
    if cond.time == "night":
        fired |= rng.random((h, w)) < 0.01
    img = np.stack([gx * fired, gy * fired, fired.astype(np.float64)])
    return dilate(img, cfg.k_event)


def _lidar(cfg, rng, depth, cls, cond):
    h, w = depth.shape
    offset = int(rng.integers(0, cfg.lidar_row_step))
    scan = np.zeros((h, w), dtype=bool)
    scan[offset::cfg.lidar_row_step, :] = True
    hit = scan & (cls != SKY) & (depth < cfg.d_max)
    beta = cfg.weather_param("lidar_dropout_beta", cond.weather)
    p_drop = np.minimum(1.0, beta * depth / cfg.d_max)
    valid = hit & (rng.random((h, w)) >= p_drop)
    sigma = cfg.weather_param("lidar_noise_sigma", cond.weather)
    measured = depth * np.exp(sigma * rng.standard_normal((h, w)))
    outlier = valid & (rng.random((h, w)) < cfg.weather_param("lidar_outlier_rate", cond.weather))
    spurious = rng.uniform(cfg.d_min, np.maximum(cfg.d_min * 1.01, 0.4 * depth))
    measured = np.where(outlier, spurious, measured)
    if not valid.any():
        r = h - 1 - ((h - 1 - offset) % cfg.lidar_row_step)
        valid[r, w // 2] = True
        measured[r, w // 2] = depth[r, w // 2]
    measured = np.clip(measured, cfg.d_min, cfg.d_max)
    measured = np.where(valid, measured, 0.0)
    refl = np.where(cls == VOID_CLASS, 0.5, REFLECTIVITY[np.minimum(cls, len(REFLECTIVITY) - 1)])
    intensity = np.clip(refl * (0.5 + 0.5 * np.exp(-depth / cfg.d_max)), 0.05, 1.0)
    intensity = np.where(outlier, 0.1, intensity)
    intensity = np.where(valid, intensity, 0.0)
    return SparseDepthMap(measured, valid, intensity)


def _radar(cfg, rng, depth, inst, objects, cond):
    h, w = depth.shape
    d = np.zeros((h, w))
    rcs = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    p_drop = cfg.weather_param("radar_dropout", cond.weather)
    for o in objects:
        if rng.random() < p_drop:
            continue
        ys, xs = np.nonzero(inst == o.instance)
        if ys.size == 0:
            continue
        j = int(np.argmin((ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2))
        y, x = ys[j], xs[j]
        valid[y, x] = True
        d[y, x] = np.clip(o.depth * (1.0 + 0.03 * rng.standard_normal()), cfg.d_min, cfg.d_max)
        rcs[y, x] = RADAR_RCS.get(o.cls, 0.3)
    for _ in range(int(rng.poisson(1.0))):
        y, x = int(rng.integers(0, h)), int(rng.integers(0, w))
        if not valid[y, x]:
            valid[y, x] = True
            d[y, x] = depth[y, x]
            rcs[y, x] = 0.1
    return project_and_dilate(SparseDepthMap(d, valid), cfg.k_radar, cfg.d_min, rcs)


def _void_patches(cfg, rng, cls, inst):
    h, w = cls.shape
    for _ in range(int(rng.integers(0, cfg.void_patches_max + 1))):
        ph, pw = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        r, c = int(rng.integers(0, h - ph + 1)), int(rng.integers(0, w - pw + 1))
        cls[r:r + ph, c:c + pw] = VOID_CLASS
        inst[r:r + ph, c:c + pw] = VOID_INSTANCE


def generate_scene(
    cfg: SceneConfig, seed: int, condition: ConditionLabel | None = None
) -> MultimodalSample:
    """Render one scene; a pure function of ``(cfg, seed, condition)``."""
    rng = np.random.default_rng(seed)
    if condition is None:
        condition = ConditionLabel.from_index(int(rng.integers(0, 8)))
    h0, depth, cls, inst, objects = _layout(cfg, rng)
    rgb_clean = _render_clean_rgb(cfg, rng, depth, cls, inst)
    rgb = _apply_condition(cfg, rng, rgb_clean, depth, condition)
    event = _event_image(cfg, rgb_clean, rng, condition)
    _void_patches(cfg, rng, cls, inst)
    lidar = _lidar(cfg, rng, depth, cls, condition)
    lidar_input = project_and_dilate(lidar, cfg.k_lidar, cfg.d_min)
    radar = _radar(cfg, rng, depth, inst, objects, condition)
    panoptic = PanopticMap(cls.astype(np.uint16), inst.astype(np.uint16))
    return MultimodalSample(
        rgb=rgb,
        lidar_raw=lidar,
        lidar_input=lidar_input,
        radar_input=radar,
        event_input=event,
        panoptic=panoptic,
        condition=condition,
        depth_true=depth,
        seed=int(seed),
    )

