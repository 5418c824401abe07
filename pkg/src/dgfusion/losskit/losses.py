"""Depth, segmentation and condition losses.

Depth maps are ``[N,]H,W`` tensors; per-image losses are averaged over the
batch. Label-derived masks (tau selection, boundary weights, RGB edge weights)
are constants: no gradient flows through them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .. import diffmath as dm
from ..diffmath import ContractViolation, Tensor
from ..scenegen.types import VOID_CLASS, VOID_INSTANCE


@dataclass(frozen=True)
class LossWeights:
    tau: float = 0.8
    lambda_l1: float = 0.9
    lambda_es: float = 0.05
    lambda_pes: float = 0.05
    lambda_depth: float = 1.0
    lambda_seg: float = 1.0
    lambda_cond: float = 0.1
    k: int = 3
    d_min: float = 1.0
    d_max: float = 80.0
    log_smoothness: bool = False

    def __post_init__(self):
        if not 0.0 < self.tau <= 1.0:
            raise ValueError(f"tau must lie in (0, 1], got {self.tau}")
        for name in ("lambda_l1", "lambda_es", "lambda_pes", "lambda_depth", "lambda_seg", "lambda_cond"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError("boundary dilation k must be odd")
        if not 0 < self.d_min < self.d_max:
            raise ValueError("need 0 < d_min < d_max")


# -- log-L1 with tau filtering -----------------------------------------------------


@dataclass
class ResidualMap:
    """Absolute log errors on the lidar pixels of a ``[N,]H,W`` grid.

    ``values[j]`` belongs to flat pixel ``index[j]`` (row-major over the whole
    batch, ascending).
    """

    values: Tensor
    index: np.ndarray
    shape: tuple[int, ...]

    @property
    def valid(self) -> np.ndarray:
        m = np.zeros(int(np.prod(self.shape)), dtype=bool)
        m[self.index] = True
        return m.reshape(self.shape)

    def dense(self) -> np.ndarray:
        out = np.zeros(int(np.prod(self.shape)))
        out[self.index] = self.values.data
        return out.reshape(self.shape)


def log_residuals(pred: Tensor, gt_depth: np.ndarray, gt_valid: np.ndarray,
                  d_min: float, d_max: float) -> ResidualMap:
    pred = dm.as_tensor(pred)
    valid = np.asarray(gt_valid, dtype=bool)
    if valid.shape != pred.shape:
        raise ContractViolation(f"gt mask {valid.shape} vs prediction {pred.shape}")
    idx = np.flatnonzero(valid)
    gt = np.clip(np.asarray(gt_depth, dtype=np.float64).reshape(-1)[idx], d_min, d_max)
    p = dm.take_flat(pred, idx)
    if np.any(p.data <= 0):
        raise dm.DomainError("depth prediction must be strictly positive")
    r = dm.abs(dm.sub(dm.log(p), np.log(gt)))
    return ResidualMap(r, idx, pred.shape)


def n_kept(tau: float, n: int) -> int:
    """ceil(tau * n), exact for decimal tau."""
    return math.ceil(Fraction(tau).limit_denominator(10**9) * n)


def _tau_select(values: np.ndarray, tau: float) -> np.ndarray:
    """Positions of the ceil(tau*n) smallest values; ties keep the earlier index."""
    if values.size == 0:
        raise ContractViolation("tau filter needs at least one valid pixel")
    order = np.argsort(values, kind="stable")
    return np.sort(order[: n_kept(tau, values.size)])


def tau_filter(residuals: ResidualMap, tau: float) -> np.ndarray:
    """Boolean mask (shape of the grid) of the supervised pixel set."""
    keep = _kept_positions(residuals, tau)
    m = np.zeros(int(np.prod(residuals.shape)), dtype=bool)
    m[residuals.index[keep]] = True
    return m.reshape(residuals.shape)


def _per_image(residuals: ResidualMap) -> tuple[int, np.ndarray]:
    hw = residuals.shape[-2] * residuals.shape[-1]
    n_img = int(np.prod(residuals.shape[:-2])) if len(residuals.shape) > 2 else 1
    return n_img, residuals.index // hw


def _kept_positions(residuals: ResidualMap, tau: float) -> np.ndarray:
    n_img, img = _per_image(residuals)
    r = residuals.values.data
    kept = []
    for i in range(n_img):
        pos = np.flatnonzero(img == i)
        if pos.size == 0:
            raise ContractViolation(f"image {i} has no valid lidar pixel")
        kept.append(pos[_tau_select(r[pos], tau)])
    return np.concatenate(kept)


@dataclass
class LogL1Result:
    loss: Tensor
    n_valid: int
    n_kept: int
    kept_mask: np.ndarray


def log_l1_terms(pred: Tensor, gt_depth, gt_valid, tau: float,
                 d_min: float, d_max: float) -> LogL1Result:
    res = log_residuals(pred, gt_depth, gt_valid, d_min, d_max)
    n_img, img = _per_image(res)
    keep = _kept_positions(res, tau)
    counts = np.bincount(img[keep], minlength=n_img).astype(np.float64)
    weights = 1.0 / (n_img * counts[img[keep]])
    kept_vals = dm.take_flat(res.values, keep)
    loss = dm.sum(dm.mul(kept_vals, weights))
    mask = np.zeros(int(np.prod(res.shape)), dtype=bool)
    mask[res.index[keep]] = True
    return LogL1Result(loss, int(res.index.size), int(keep.size), mask.reshape(res.shape))


def loss_log_l1(pred, gt_depth, gt_valid, tau: float = 0.8,
                d_min: float = 1.0, d_max: float = 80.0) -> Tensor:
    return log_l1_terms(pred, gt_depth, gt_valid, tau, d_min, d_max).loss


# -- smoothness -------------------------------------------------------------------


def _diffs(pred: Tensor) -> tuple[Tensor | None, Tensor | None]:
    h, w = pred.shape[-2:]
    dx = dm.sub(pred[..., :, 1:], pred[..., :, :-1]) if w > 1 else None
    dy = dm.sub(pred[..., 1:, :], pred[..., :-1, :]) if h > 1 else None
    return dx, dy


def _weighted_abs_mean(pred: Tensor, wx, wy) -> Tensor:
    """sum(wx|dx| + wy|dy|) / (#images * H * W)."""
    h, w = pred.shape[-2:]
    denom = float(pred.size)
    dx, dy = _diffs(pred)
    terms = []
    if dx is not None:
        terms.append(dm.sum(dm.mul(dm.abs(dx), wx)))
    if dy is not None:
        terms.append(dm.sum(dm.mul(dm.abs(dy), wy)))
    if not terms:
        return dm.mul(dm.sum(pred), 0.0)
    total = terms[0] if len(terms) == 1 else dm.add(terms[0], terms[1])
    return dm.div(total, denom)


def image_intensity(rgb: np.ndarray) -> np.ndarray:
    return np.asarray(rgb, dtype=np.float64).mean(axis=-3)


def edge_weights(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    i = image_intensity(rgb)
    wx = np.exp(-np.abs(i[..., :, 1:] - i[..., :, :-1]))
    wy = np.exp(-np.abs(i[..., 1:, :] - i[..., :-1, :]))
    return wx, wy


def loss_edge_smooth(pred, rgb: np.ndarray, log_domain: bool = False) -> Tensor:
    pred = dm.as_tensor(pred)
    if np.asarray(rgb).shape[-2:] != pred.shape[-2:]:
        raise ContractViolation("rgb and depth planes differ in size")
    if log_domain:
        pred = dm.log(pred)
    wx, wy = edge_weights(rgb)
    return _weighted_abs_mean(pred, wx, wy)


@dataclass
class BoundaryWeights:
    w_x: np.ndarray  # [N,]H,W-1 in {0,1}
    w_y: np.ndarray  # [N,]H-1,W in {0,1}


def _erode_ones(b: np.ndarray, k: int) -> np.ndarray:
    """Grow the zero set of a boolean map by a k x k square (border = 1)."""
    if k == 1 or b.size == 0:
        return b.copy()
    r = k // 2
    width = [(0, 0)] * (b.ndim - 2) + [(r, r), (r, r)]
    padded = np.pad(b, width, constant_values=True)
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(-2, -1))
    return win.all(axis=(-2, -1))


def boundary_weights(class_id: np.ndarray, instance_id: np.ndarray | None, k: int = 3) -> BoundaryWeights:
    """Smoothness masks: 0 near label changes (dilated by k) or at void endpoints.

    With ``instance_id=None`` only class changes count (semantic edges).
    """
    if k < 1 or k % 2 == 0:
        raise ContractViolation("k must be odd")
    cls = np.asarray(class_id).astype(np.int64)
    void = cls == VOID_CLASS
    if instance_id is not None:
        inst = np.asarray(instance_id).astype(np.int64)
        void = void | (inst == VOID_INSTANCE)
    else:
        inst = np.zeros_like(cls)

    def one_axis(axis: int):
        a = [slice(None)] * cls.ndim
        b = [slice(None)] * cls.ndim
        a[axis] = slice(1, None)
        b[axis] = slice(None, -1)
        a, b = tuple(a), tuple(b)
        same = (cls[a] == cls[b]) & (inst[a] == inst[b])
        labelled = ~void[a] & ~void[b]
        return (_erode_ones(same, k) & labelled).astype(np.float64)

    return BoundaryWeights(one_axis(-1), one_axis(-2))


def panoptic_boundary_weights(class_id, instance_id, k: int = 3) -> BoundaryWeights:
    return boundary_weights(class_id, instance_id, k)


def loss_panoptic_smooth(pred, class_id=None, instance_id=None, k: int = 3,
                         weights: BoundaryWeights | None = None, log_domain: bool = False) -> Tensor:
    pred = dm.as_tensor(pred)
    if weights is None:
        weights = panoptic_boundary_weights(class_id, instance_id, k)
    if log_domain:
        pred = dm.log(pred)
    return _weighted_abs_mean(pred, weights.w_x, weights.w_y)


# -- segmentation and condition ------------------------------------------------------


def loss_seg(seg_logits, class_map: np.ndarray) -> Tensor:
    """Mean cross-entropy over non-void pixels of ``[N,]C,H,W`` logits."""
    logits = dm.as_tensor(seg_logits)
    c = logits.shape[-3]
    labels = np.asarray(class_map).astype(np.int64)
    if labels.shape != logits.shape[:-3] + logits.shape[-2:]:
        raise ContractViolation(f"labels {labels.shape} vs logits {logits.shape}")
    keep = labels != VOID_CLASS
    if not keep.any():
        raise ContractViolation("segmentation loss over an all-void map")
    if np.any(labels[keep] >= c) or np.any(labels[keep] < 0):
        raise ContractViolation("class id outside [0, C)")
    nd = logits.ndim
    perm = tuple(i for i in range(nd) if i != nd - 3) + (nd - 3,)
    flat = dm.reshape(dm.transpose(dm.log_softmax(logits, axis=-3), perm), (-1,))
    pix = np.flatnonzero(keep.reshape(-1))
    picked = dm.take_flat(flat, pix * c + labels.reshape(-1)[pix])
    return dm.neg(dm.mean(picked))


def loss_cond(cond_logits, condition_index) -> Tensor:
    """Cross-entropy over the 8 weather x time classes; batch mean."""
    logits = dm.as_tensor(cond_logits)
    idx = np.atleast_1d(np.asarray(condition_index, dtype=np.int64))
    if logits.ndim == 1:
        logits = dm.reshape(logits, (1, -1))
    n, c = logits.shape
    if idx.shape != (n,) or np.any(idx < 0) or np.any(idx >= c):
        raise ContractViolation("condition labels do not match logits")
    flat = dm.reshape(dm.log_softmax(logits, axis=-1), (-1,))
    picked = dm.take_flat(flat, np.arange(n) * c + idx)
    return dm.neg(dm.mean(picked))


# -- weighted sums --------------------------------------------------------------------


@dataclass
class DepthLoss:
    log_l1: Tensor
    edge_smooth: Tensor | None
    panoptic_smooth: Tensor | None
    total: Tensor
    n_valid: int
    n_kept: int


def loss_depth_total(pred, gt_depth, gt_valid, rgb, class_id, instance_id,
                     weights: LossWeights = LossWeights(),
                     use_smoothness: bool = True, use_tau_filter: bool = True) -> DepthLoss:
    """lambda_L1 * logL1 + lambda_es * L_es + lambda_pes * L_pes.

    ``use_tau_filter=False`` supervises every lidar pixel (tau = 1);
    ``use_smoothness=False`` drops both smoothness terms from the graph.
    """
    pred = dm.as_tensor(pred)
    tau = weights.tau if use_tau_filter else 1.0
    l1 = log_l1_terms(pred, gt_depth, gt_valid, tau, weights.d_min, weights.d_max)
    total = dm.mul(l1.loss, weights.lambda_l1)
    es = pes = None
    if use_smoothness:
        es = loss_edge_smooth(pred, rgb, weights.log_smoothness)
        pes = loss_panoptic_smooth(pred, class_id, instance_id, weights.k,
                                   log_domain=weights.log_smoothness)
        total = dm.add(total, dm.add(dm.mul(es, weights.lambda_es), dm.mul(pes, weights.lambda_pes)))
    return DepthLoss(l1.loss, es, pes, total, l1.n_valid, l1.n_kept)


@dataclass
class LossReport:
    L_logL1: float | None
    L_es: float | None
    L_pes: float | None
    L_depth: float | None
    L_seg: float | None
    L_cond: float | None
    L_total: float
    n_valid: int = 0
    n_kept: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def loss_total(seg: Tensor | None, cond: Tensor | None, depth: Tensor | None,
               weights: LossWeights = LossWeights()) -> Tensor:
    """lambda_seg * L_seg + lambda_cond * L_cond + lambda_depth * L_depth.

    Absent parts (ablated branches) contribute nothing.
    """
    parts = [(seg, weights.lambda_seg), (cond, weights.lambda_cond), (depth, weights.lambda_depth)]
    total = None
    for t, lam in parts:
        if t is None:
            continue
        term = dm.mul(t, lam)
        total = term if total is None else dm.add(total, term)
    if total is None:
        raise ContractViolation("loss_total needs at least one part")
    return total


def make_report(total: Tensor, seg=None, cond=None, depth: DepthLoss | None = None) -> LossReport:
    def f(t):
        return None if t is None else float(t.data)

    return LossReport(
        L_logL1=f(depth.log_l1) if depth else None,
        L_es=f(depth.edge_smooth) if depth else None,
        L_pes=f(depth.panoptic_smooth) if depth else None,
        L_depth=f(depth.total) if depth else None,
        L_seg=f(seg),
        L_cond=f(cond),
        L_total=float(total.data),
        n_valid=depth.n_valid if depth else 0,
        n_kept=depth.n_kept if depth else 0,
    )
