"""The elastic detector: one shared parameter set, many runnable sub-nets.

Every architectural knob (resolution, patch size, windows per block, decoder
depth, query count) is applied at call time by slicing or resampling the
shared weights, so any valid ModelConfig runs without retraining.
"""

from dataclasses import dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from ..errors import InvalidConfigError, UnsupportedOperationError
from .config import ModelConfig
from .layers import (
    DecoderBlock,
    EncoderBlock,
    PixelEmbedding,
    StageHead,
    grid_position_embedding,
    inverse_sigmoid,
    sine_position_embedding,
)
from .resample import interpolate_position_grid, resample_patch_kernel


def default_windowed_blocks(depth: int) -> tuple[int, ...]:
    """Windowed-attention block positions: two windowed, one global, repeated.

    For a 12-block encoder this yields {0,1,3,4,6,7,9,10} with global blocks
    at every third position; shallower encoders keep the same rhythm.
    """
    return tuple(i for i in range(depth) if i % 3 != 2)


@dataclass(frozen=True)
class ArchConfig:
    """Fixed (non-elastic) dimensions of the shared weights.

    ``memory_stride`` fixes the spatial organization of the projected
    detection features: whatever the patch size, the projector resamples the
    encoder grid to resolution / memory_stride per side, so proposals and
    cross-attention see a consistent geometry across sub-nets.
    """

    embed_dim: int = 64
    num_heads: int = 4
    mlp_ratio: float = 2.0
    enc_depth: int = 4
    dec_depth: int = 2
    num_classes: int = 3
    base_patch_size: int = 16
    min_patch_size: int = 8
    max_resolution: int = 96
    max_queries: int = 60
    mask_dim: int = 16
    mask_head: bool = True
    memory_stride: int = 16
    windowed_blocks: tuple[int, ...] | None = None

    @property
    def max_grid_side(self) -> int:
        return self.max_resolution // self.min_patch_size

    def memory_grid_side(self, resolution: int) -> int:
        return max(1, resolution // self.memory_stride)

    def resolved_windowed_blocks(self) -> tuple[int, ...]:
        if self.windowed_blocks is not None:
            return tuple(self.windowed_blocks)
        return default_windowed_blocks(self.enc_depth)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        if d["windowed_blocks"] is not None:
            d["windowed_blocks"] = list(d["windowed_blocks"])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        if d.get("windowed_blocks") is not None:
            d["windowed_blocks"] = tuple(d["windowed_blocks"])
        return cls(**d)


@dataclass
class EncoderOutput:
    tokens: Tensor          # [B, T, D] backbone features after the final norm
    cls_token: Tensor       # [B, D]
    memory: Tensor          # [B, M, D] projected features on the fixed-stride grid
    class_logits: Tensor    # [B, M, C] per-token proposal logits
    boxes: Tensor           # [B, M, 4] per-token proposal boxes, cxcywh in [0,1]
    memory_grid_side: int = 0


@dataclass
class QuerySelection:
    scores: Tensor          # [k] descending max-sigmoid class scores
    boxes: Tensor           # [k, 4]
    token_indices: Tensor   # [k]


@dataclass
class StageOutput:
    logits: Tensor          # [B, k, C]
    boxes: Tensor           # [B, k, 4]
    embed: Tensor           # [B, k, D] query embeddings feeding this stage's heads


@dataclass
class DetectionOutput:
    """Per-stage predictions; stage 0 is the encoder (single-stage) output.

    ``encoder_logits``/``encoder_boxes`` are the dense per-token proposals the
    queries were selected from. Training supervises the encoder stage on this
    full map so the proposal heads learn at every spatial position; at
    inference only the selected stage-0 slice matters.
    """

    per_layer_boxes: Tensor                 # [B, S, k, 4] cxcywh in [0,1]
    per_layer_logits: Tensor                # [B, S, k, C]
    query_scores: Tensor                    # [B, k] encoder-stage selection scores
    query_token_indices: Tensor             # [B, k]
    encoder_logits: Tensor | None = None    # [B, T, C] dense proposal logits
    encoder_boxes: Tensor | None = None     # [B, T, 4]
    masks: Tensor | None = None             # [B, k, R/4, R/4] final-stage mask logits
    per_layer_masks: Tensor | None = None   # [B, S, k, R/4, R/4] when requested
    config: ModelConfig | None = None

    @property
    def num_stages(self) -> int:
        return self.per_layer_boxes.shape[1]


class ElasticWeights(nn.Module):
    """The single shared parameter set every sub-network is derived from.

    Holds the patch kernel at the base patch size, position embeddings at the
    largest token grid, the encoder blocks with their windowed/global layout,
    the projector, the decoder stack, and one prediction head per stage.
    """

    def __init__(self, arch: ArchConfig):
        super().__init__()
        self.arch = arch
        dim = arch.embed_dim
        g = arch.max_grid_side
        if arch.max_resolution % arch.min_patch_size != 0:
            raise InvalidConfigError("max_resolution must be divisible by min_patch_size")

        self.patch_proj = nn.Conv2d(3, dim, kernel_size=arch.base_patch_size, stride=arch.base_patch_size)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, dim))
        self.pos_grid = nn.Parameter(torch.zeros(g * g, dim))
        self.pos_cls = nn.Parameter(torch.zeros(1, 1, dim))
        nn.init.trunc_normal_(self.pos_grid, std=0.02)
        nn.init.trunc_normal_(self.cls_token, std=0.02)

        self.blocks = nn.ModuleList(
            EncoderBlock(dim, arch.num_heads, arch.mlp_ratio) for _ in range(arch.enc_depth)
        )
        self.windowed = set(arch.resolved_windowed_blocks())
        self.norm = nn.LayerNorm(dim)

        self.projector = nn.Linear(dim, dim)
        self.projector_norm = nn.LayerNorm(dim)  # per-feature norm, batch-size independent

        mask_dim = arch.mask_dim if arch.mask_head else 0
        self.enc_head = StageHead(dim, arch.num_classes, mask_dim)
        self.dec_blocks = nn.ModuleList(
            DecoderBlock(dim, arch.num_heads, arch.mlp_ratio) for _ in range(arch.dec_depth)
        )
        self.dec_heads = nn.ModuleList(
            StageHead(dim, arch.num_classes, mask_dim) for _ in range(arch.dec_depth)
        )
        self.query_proj = nn.Linear(dim, dim)
        self.query_pos_proj = nn.Linear(dim, dim)
        self.pixel_head = PixelEmbedding(dim, arch.mask_dim) if arch.mask_head else None

    def validate_config(self, config: ModelConfig) -> None:
        config.validate()
        arch = self.arch
        if config.grid_side > arch.max_grid_side:
            raise InvalidConfigError(
                f"token grid {config.grid_side} exceeds position table side {arch.max_grid_side}"
            )
        if config.num_decoder_layers > arch.dec_depth:
            raise InvalidConfigError(
                f"num_decoder_layers {config.num_decoder_layers} exceeds max depth {arch.dec_depth}"
            )
        if config.num_queries > arch.max_queries:
            raise InvalidConfigError(
                f"num_queries {config.num_queries} exceeds max query count {arch.max_queries}"
            )
        memory_tokens = arch.memory_grid_side(config.resolution) ** 2
        if config.num_queries > memory_tokens:
            raise InvalidConfigError(
                f"num_queries {config.num_queries} exceeds memory token count {memory_tokens}"
            )
        if config.mask_head_enabled and not arch.mask_head:
            raise UnsupportedOperationError("weights were built without a mask head")

    def forward(self, images: Tensor, config: ModelConfig, with_all_masks: bool = False) -> DetectionOutput:
        return model_forward(images, config, self, with_all_masks=with_all_masks)


def _anchor_boxes(grid_side: int, dtype: torch.dtype, device: torch.device) -> Tensor:
    """Per-token box priors: tile centers with a fixed medium size."""
    steps = (torch.arange(grid_side, dtype=dtype, device=device) + 0.5) / grid_side
    yy, xx = torch.meshgrid(steps, steps, indexing="ij")
    wh = torch.full_like(xx, 0.25)
    return torch.stack([xx, yy, wh, wh], dim=-1).reshape(-1, 4)


def encoder_forward(
    images: Tensor,
    config: ModelConfig,
    weights: ElasticWeights,
    force_global: bool = False,
) -> EncoderOutput:
    """Patchify, run the interleaved windowed/global blocks, project, and
    emit per-token proposals.

    ``force_global`` runs every block without windows; it is the reference
    path the windowed implementation is checked against.
    """
    weights.validate_config(config)
    b, c, h, w = images.shape
    if h != config.resolution or w != config.resolution:
        raise InvalidConfigError(
            f"input {h}x{w} does not match config resolution {config.resolution}"
        )
    arch = weights.arch
    g = config.grid_side

    kernel = resample_patch_kernel(weights.patch_proj.weight, arch.base_patch_size, config.patch_size)
    x = F.conv2d(images, kernel, weights.patch_proj.bias, stride=config.patch_size)
    x = x.flatten(2).transpose(1, 2)  # [B, T, D]

    pos = interpolate_position_grid(weights.pos_grid, g)
    x = x + pos.unsqueeze(0)
    cls = (weights.cls_token + weights.pos_cls).expand(b, -1, -1)
    x = torch.cat([cls, x], dim=1)

    for i, block in enumerate(weights.blocks):
        windowed = (i in weights.windowed) and not force_global
        x = block(x, num_windows=config.num_windows if windowed else 1)
    x = weights.norm(x)

    cls_out = x[:, 0]
    tokens = x[:, 1:]
    m = arch.memory_grid_side(config.resolution)
    if m != g:
        fmap = tokens.transpose(1, 2).reshape(b, arch.embed_dim, g, g)
        fmap = F.interpolate(fmap, size=(m, m), mode="bilinear", align_corners=False)
        resampled = fmap.flatten(2).transpose(1, 2)
    else:
        resampled = tokens
    memory = weights.projector_norm(weights.projector(resampled))
    logits, box_delta = weights.enc_head(memory)
    anchors = _anchor_boxes(m, memory.dtype, memory.device)
    boxes = torch.sigmoid(box_delta + inverse_sigmoid(anchors).unsqueeze(0))
    return EncoderOutput(tokens=tokens, cls_token=cls_out, memory=memory,
                         class_logits=logits, boxes=boxes, memory_grid_side=m)


def select_queries(encoder_logits: Tensor, encoder_boxes: Tensor, k: int) -> QuerySelection:
    """Top-k tokens by max sigmoid class score, descending; ties keep the
    lower token index. Query dropping at inference is this call with a
    smaller k."""
    t = encoder_logits.shape[0]
    if k < 1 or k > t:
        raise ValueError(f"k must be in [1, {t}], got {k}")
    scores = torch.sigmoid(encoder_logits).max(dim=-1).values
    order = torch.argsort(scores, descending=True, stable=True)[:k]
    return QuerySelection(scores=scores[order], boxes=encoder_boxes[order], token_indices=order)


def decoder_forward(
    query_content: Tensor,
    query_boxes: Tensor,
    memory: Tensor,
    num_layers: int,
    weights: ElasticWeights,
) -> list[StageOutput]:
    """Run the first ``num_layers`` decoder blocks with per-layer heads.

    Layer k's output depends only on layers < k, so a truncated run equals
    the prefix of the full run. ``num_layers == 0`` returns an empty list and
    the caller falls back to the encoder-stage predictions.
    """
    if num_layers < 0 or num_layers > weights.arch.dec_depth:
        raise InvalidConfigError(
            f"num_layers {num_layers} outside [0, {weights.arch.dec_depth}]"
        )
    b, t, dim = memory.shape
    grid_side = int(round(t ** 0.5))
    memory_pos = grid_position_embedding(grid_side, dim, memory.dtype, memory.device).unsqueeze(0)

    outputs: list[StageOutput] = []
    q = query_content
    ref = query_boxes
    for i in range(num_layers):
        query_pos = weights.query_pos_proj(sine_position_embedding(ref, dim))
        q = weights.dec_blocks[i](q, query_pos, memory, memory_pos)
        logits, box_delta = weights.dec_heads[i](q)
        boxes = torch.sigmoid(box_delta + inverse_sigmoid(ref))
        outputs.append(StageOutput(logits=logits, boxes=boxes, embed=q))
        ref = boxes
    return outputs


def compute_pixel_embedding(memory: Tensor, config: ModelConfig, weights: ElasticWeights) -> Tensor:
    """Stride-4 pixel embedding map [B, mask_dim, R/4, R/4]."""
    if weights.pixel_head is None:
        raise UnsupportedOperationError("weights were built without a mask head")
    return weights.pixel_head(memory, config.grid_side, config.resolution)


def mask_logits(mask_embeds: Tensor, pixel_map: Tensor) -> Tensor:
    """mask[q, y, x] = <embed_q, pixel_map[:, y, x]> for [B, k, m] embeds."""
    return torch.einsum("bkm,bmyx->bkyx", mask_embeds, pixel_map)


def segmentation_forward(
    memory: Tensor,
    query_embeddings: Tensor,
    config: ModelConfig,
    weights: ElasticWeights,
    stage: int = -1,
) -> Tensor:
    """Masks for one stage's query embeddings: FFN then dot product with the
    pixel embedding map. ``stage`` 0 is the encoder stage, i >= 1 decoder
    layer i; -1 picks the final decoder stage."""
    if not config.mask_head_enabled:
        raise UnsupportedOperationError("mask head disabled in this config")
    weights.validate_config(config)
    if stage == -1:
        stage = config.num_decoder_layers
    head = weights.enc_head if stage == 0 else weights.dec_heads[stage - 1]
    if head.mask_ffn is None:
        raise UnsupportedOperationError("weights were built without a mask head")
    embeds = head.mask_embedding(query_embeddings)
    pixel_map = compute_pixel_embedding(memory, config, weights)
    return mask_logits(embeds, pixel_map)


def model_forward(
    images: Tensor,
    config: ModelConfig,
    weights: ElasticWeights,
    with_all_masks: bool = False,
) -> DetectionOutput:
    """Full forward pass for one sub-network configuration."""
    enc = encoder_forward(images, config, weights)
    b, t, dim = enc.memory.shape
    k = config.num_queries

    scores = torch.sigmoid(enc.class_logits).max(dim=-1).values  # [B, T]
    order = torch.argsort(scores, dim=1, descending=True, stable=True)[:, :k]
    sel_scores = scores.gather(1, order)
    sel_memory = enc.memory.gather(1, order.unsqueeze(-1).expand(b, k, dim))
    sel_boxes = enc.boxes.gather(1, order.unsqueeze(-1).expand(b, k, 4))
    sel_logits = enc.class_logits.gather(
        1, order.unsqueeze(-1).expand(b, k, enc.class_logits.shape[-1])
    )

    stages = [StageOutput(logits=sel_logits, boxes=sel_boxes, embed=sel_memory)]
    q = weights.query_proj(sel_memory)
    stages.extend(decoder_forward(q, sel_boxes, enc.memory, config.num_decoder_layers, weights))

    out = DetectionOutput(
        per_layer_boxes=torch.stack([s.boxes for s in stages], dim=1),
        per_layer_logits=torch.stack([s.logits for s in stages], dim=1),
        query_scores=sel_scores,
        query_token_indices=order,
        encoder_logits=enc.class_logits,
        encoder_boxes=enc.boxes,
        config=config,
    )

    if config.mask_head_enabled:
        pixel_map = compute_pixel_embedding(enc.memory, config, weights)

        def stage_masks(idx: int) -> Tensor:
            head = weights.enc_head if idx == 0 else weights.dec_heads[idx - 1]
            return mask_logits(head.mask_embedding(stages[idx].embed), pixel_map)

        out.masks = stage_masks(len(stages) - 1)
        if with_all_masks:
            out.per_layer_masks = torch.stack([stage_masks(i) for i in range(len(stages))], dim=1)
    return out
