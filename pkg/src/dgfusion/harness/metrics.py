from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..scenegen.types import VOID_CLASS


def confusion_matrix(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    """Rows = ground truth, columns = prediction; void ground truth skipped."""
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    keep = gt != VOID_CLASS
    gt, pred = gt[keep], pred[keep]
    if gt.size and (gt.max() >= n_classes or pred.max() >= n_classes):
        raise ValueError("class id outside [0, n_classes)")
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(cm: np.ndarray) -> tuple[float, list[float | None]]:
    """(mIoU, per-class IoU); classes absent from both gt and pred are None and skipped."""
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    per = [None if d == 0 else float(t / d) for t, d in zip(tp, denom)]
    present = [x for x in per if x is not None]
    miou = float(np.mean(present)) if present else 0.0
    return miou, per


def miou(gt: np.ndarray, pred: np.ndarray, n_classes: int) -> float:
    return iou_from_confusion(confusion_matrix(gt, pred, n_classes))[0]


@dataclass
class DepthAccumulator:
    abs_err: float = 0.0
    sq_log_err: float = 0.0
    sq_log_err_lidar: float = 0.0
    n: int = 0

    def add(self, pred: np.ndarray, reference: np.ndarray, lidar: np.ndarray, valid: np.ndarray) -> None:
        v = np.asarray(valid, dtype=bool)
        p, r, d = pred[v], reference[v], lidar[v]
        self.abs_err += float(np.abs(p - r).sum())
        self.sq_log_err += float(((np.log(p) - np.log(r)) ** 2).sum())
        self.sq_log_err_lidar += float(((np.log(p) - np.log(d)) ** 2).sum())
        self.n += int(v.sum())

    def result(self) -> dict[str, float | None]:
        if self.n == 0:
            return {"depth_mae": None, "depth_log_rmse": None, "depth_log_rmse_lidar": None}
        return {
            "depth_mae": self.abs_err / self.n,
            "depth_log_rmse": float(np.sqrt(self.sq_log_err / self.n)),
            "depth_log_rmse_lidar": float(np.sqrt(self.sq_log_err_lidar / self.n)),
        }


@dataclass
class MetricsReport:
    mIoU: float
    per_class_iou: list
    depth_mae: float | None = None
    depth_log_rmse: float | None = None
    depth_log_rmse_lidar: float | None = None
    depth_log_rmse_adverse: float | None = None
    condition_accuracy: float | None = None
    n_samples: int = 0
    loss_curve: list = field(default_factory=list)

    def as_dict(self) -> dict:
        return dict(self.__dict__)
