from .archive import artifact_digest, load_weights, save_weights
from .config import ModelConfig
from .network import (
    ArchConfig,
    DetectionOutput,
    ElasticWeights,
    EncoderOutput,
    QuerySelection,
    StageOutput,
    compute_pixel_embedding,
    decoder_forward,
    default_windowed_blocks,
    encoder_forward,
    mask_logits,
    model_forward,
    segmentation_forward,
    select_queries,
)
from .resample import (
    bilinear_resize_matrix,
    interpolate_position_grid,
    resample_patch_kernel,
    resize_patch,
)
from .windows import window_merge, window_partition

__all__ = [
    "ArchConfig",
    "DetectionOutput",
    "ElasticWeights",
    "EncoderOutput",
    "ModelConfig",
    "QuerySelection",
    "StageOutput",
    "artifact_digest",
    "bilinear_resize_matrix",
    "compute_pixel_embedding",
    "decoder_forward",
    "default_windowed_blocks",
    "encoder_forward",
    "interpolate_position_grid",
    "load_weights",
    "mask_logits",
    "model_forward",
    "resample_patch_kernel",
    "resize_patch",
    "save_weights",
    "segmentation_forward",
    "select_queries",
    "window_merge",
    "window_partition",
]
