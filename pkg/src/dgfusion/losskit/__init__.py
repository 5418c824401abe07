"""Loss stack: tau-filtered log-L1, edge-aware and panoptic-edge-aware smoothness."""
from .losses import (
    BoundaryWeights,
    DepthLoss,
    LogL1Result,
    LossReport,
    LossWeights,
    ResidualMap,
    boundary_weights,
    edge_weights,
    log_l1_terms,
    log_residuals,
    loss_cond,
    loss_depth_total,
    loss_edge_smooth,
    loss_log_l1,
    loss_panoptic_smooth,
    loss_seg,
    loss_total,
    make_report,
    n_kept,
    panoptic_boundary_weights,
    tau_filter,
)
