"""Model graph: shared backbone with adapters, depth and condition branches,
depth-guided windowed fusion and a simplified segmentation head."""
from .config import MODALITIES, ModelConfig, tiny_config
from .layers import AttentionRecorder, Params
from .model import (
    DEPTH_HEAD_PREFIX,
    ModelOutput,
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
    images_from_samples,
    seg_head,
)
from .windows import WindowLayout, window_partition, window_reassemble
