"""Projection of sparse sensor returns to 3-channel image planes and dilation."""
from __future__ import annotations

import numpy as np

from ..diffmath import ContractViolation
from .types import SparseDepthMap


def project_points(
    depth: np.ndarray,
    valid: np.ndarray,
    intensity: np.ndarray | None,
    d_min: float,
) -> np.ndarray:
    """Point image with channels (d_min/depth, intensity, validity).

    The range channel is inverse-normalised so that a max filter keeps the
    nearest return. Invalid pixels are all-zero.
    """
    h, w = depth.shape
    out = np.zeros((3, h, w))
    v = valid.astype(bool)
    out[0][v] = d_min / depth[v]
    out[1][v] = 1.0 if intensity is None else intensity[v]
    out[2][v] = 1.0
    return out


def dilate(image: np.ndarray, k: int) -> np.ndarray:
    """Per-channel max filter with a k x k square; outside the image counts as 0."""
    if k < 1 or k % 2 == 0:
        raise ContractViolation(f"dilation kernel must be odd and >= 1, got {k}")
    if k == 1:
        return image.copy()
    r = k // 2
    padded = np.pad(image, ((0, 0), (r, r), (r, r)))
    win = np.lib.stride_tricks.sliding_window_view(padded, (k, k), axis=(1, 2))
    return win.max(axis=(-2, -1))


def project_and_dilate(
    sparse: SparseDepthMap | np.ndarray,
    k_sensor: int,
    d_min: float = 1.0,
    intensity: np.ndarray | None = None,
) -> np.ndarray:
    if k_sensor < 1 or k_sensor % 2 == 0:
        raise ContractViolation(f"K_sensor must be odd and >= 1, got {k_sensor}")
    if isinstance(sparse, SparseDepthMap):
        if intensity is None:
            intensity = sparse.intensity
        point_image = project_points(sparse.depth, sparse.valid, intensity, d_min)
    else:
        point_image = np.asarray(sparse, dtype=np.float64)
        if point_image.ndim != 3 or point_image.shape[0] != 3:
            raise ContractViolation("point image must be 3 x H x W")
    return dilate(point_image, k_sensor)
