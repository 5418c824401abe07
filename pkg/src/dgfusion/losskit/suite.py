"""Randomised comparison of the vectorised losses against the scalar oracles."""
from __future__ import annotations

import time

import numpy as np

from .. import diffmath as dm
from . import losses, oracles


def random_label_map(rng: np.random.Generator, h: int, w: int, n_classes: int = 3,
                     void_prob: float = 0.5) -> tuple[np.ndarray, np.ndarray]:
    """Painted rectangles; always includes two touching same-class instances."""
    cls = np.zeros((h, w), dtype=np.uint16)
    inst = np.ones((h, w), dtype=np.uint16)
    next_id = 2
    for _ in range(int(rng.integers(2, 7))):
        rh, rw = int(rng.integers(2, max(3, h // 2))), int(rng.integers(2, max(3, w // 2)))
        r, c = int(rng.integers(0, h - rh + 1)), int(rng.integers(0, w - rw + 1))
        cls[r:r + rh, c:c + rw] = int(rng.integers(0, n_classes))
        inst[r:r + rh, c:c + rw] = next_id
        next_id += 1
    # adjacent instances of one class sharing a vertical seam
    rh = int(rng.integers(2, max(3, h // 2)))
    r = int(rng.integers(0, h - rh + 1))
    c = int(rng.integers(1, w - 1))
    lw = int(rng.integers(1, c + 1))
    rw = int(rng.integers(1, w - c + 1))
    k = int(rng.integers(0, n_classes))
    cls[r:r + rh, c - lw:c] = k
    inst[r:r + rh, c - lw:c] = next_id
    cls[r:r + rh, c:c + rw] = k
    inst[r:r + rh, c:c + rw] = next_id + 1
    if rng.random() < void_prob:
        vh, vw = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        vr, vc = int(rng.integers(0, h - vh + 1)), int(rng.integers(0, w - vw + 1))
        cls[vr:vr + vh, vc:vc + vw] = 255
        inst[vr:vr + vh, vc:vc + vw] = 0
    return cls, inst


def random_depth_case(rng: np.random.Generator, h: int, w: int, d_min=1.0, d_max=80.0):
    pred = np.exp(rng.uniform(np.log(d_min), np.log(d_max), size=(h, w)))
    gt = np.exp(rng.uniform(np.log(0.5 * d_min), np.log(1.2 * d_max), size=(h, w)))
    valid = rng.random((h, w)) < 0.3
    valid[int(rng.integers(0, h)), int(rng.integers(0, w))] = True
    return pred, gt, valid


def run(n_cases: int = 100, seed: int = 0, tau: float = 0.8, k: int = 3) -> dict[str, float]:
    """Max absolute deviation per loss over ``n_cases`` random 8x8..32x32 inputs."""
    rng = np.random.default_rng(seed)
    dev = {name: 0.0 for name in (
        "log_l1", "tau_kept_mask", "edge_smooth", "boundary_weights",
        "panoptic_smooth", "seg_ce", "cond_ce",
    )}
    d_min, d_max = 1.0, 80.0
    t0 = time.perf_counter()
    for _ in range(n_cases):
        h, w = int(rng.integers(8, 33)), int(rng.integers(8, 33))
        pred, gt, valid = random_depth_case(rng, h, w, d_min, d_max)
        rgb = rng.random((3, h, w))
        cls, inst = random_label_map(rng, h, w)
        logits = rng.normal(size=(5, h, w)) * 3
        labels = np.where(cls == 255, 255, cls)
        cond_logits = rng.normal(size=8) * 2
        cond_label = int(rng.integers(0, 8))

        t = dm.Tensor(pred)
        res = losses.log_l1_terms(t, gt, valid, tau, d_min, d_max)
        ref = oracles.log_l1(pred, gt, valid, tau, d_min, d_max)
        dev["log_l1"] = max(dev["log_l1"], abs(float(res.loss.data) - ref))

        r = oracles.log_residuals(pred, gt, valid, d_min, d_max)
        kept = oracles.kept_pixels(r, tau)
        ref_mask = np.zeros((h, w), dtype=bool)
        for i, j in kept:
            ref_mask[i, j] = True
        dev["tau_kept_mask"] = max(dev["tau_kept_mask"], float(np.sum(ref_mask != res.kept_mask)))

        es = float(losses.loss_edge_smooth(t, rgb).data)
        dev["edge_smooth"] = max(dev["edge_smooth"], abs(es - oracles.edge_smooth(pred, rgb)))

        bw = losses.panoptic_boundary_weights(cls, inst, k)
        owx, owy = oracles.boundary_weights(cls, inst, k)
        dev["boundary_weights"] = max(
            dev["boundary_weights"],
            float(np.abs(bw.w_x - np.array(owx)).max()),
            float(np.abs(bw.w_y - np.array(owy)).max()),
        )

        pes = float(losses.loss_panoptic_smooth(t, cls, inst, k).data)
        dev["panoptic_smooth"] = max(dev["panoptic_smooth"], abs(pes - oracles.panoptic_smooth(pred, cls, inst, k)))

        seg = float(losses.loss_seg(dm.Tensor(logits), labels).data)
        dev["seg_ce"] = max(dev["seg_ce"], abs(seg - oracles.cross_entropy_seg(logits, labels)))

        cnd = float(losses.loss_cond(dm.Tensor(cond_logits), cond_label).data)
        dev["cond_ce"] = max(dev["cond_ce"], abs(cnd - oracles.cross_entropy_cond(cond_logits, cond_label)))
    dev["_seconds"] = time.perf_counter() - t0
    dev["_cases"] = n_cases
    return dev
