"""Synthetic multimodal scenes, sensor projection, and the DGFS file format."""
from .dataset import (
    DatasetError,
    dataset_checksum,
    load_split,
    make_dataset,
    manifest_checksum,
    read_manifest,
    split_seeds,
)
from .generate import generate_scene
from .io import FormatError, load_sample, read_blocks, samples_equal, save_sample, write_blocks
from .sensors import dilate, project_and_dilate, project_points
from .types import (
    CLASS_NAMES,
    TIMES,
    VOID_CLASS,
    VOID_INSTANCE,
    WEATHERS,
    ConditionLabel,
    MultimodalSample,
    PanopticMap,
    SceneConfig,
    SparseDepthMap,
)
