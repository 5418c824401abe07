"""Training, evaluation, ablations and gradient checks."""
from .metrics import DepthAccumulator, MetricsReport, confusion_matrix, iou_from_confusion, miou
from .optim import AdamW, poly_lr
from .train import (
    OUTPUT_ROOT_ENV,
    TOGGLES,
    SplitData,
    TrainConfig,
    TrainResult,
    compute_losses,
    evaluate,
    evaluate_params,
    load_data,
    read_train_config,
    resolve_path,
    train,
    train_config_from_mapping,
)
