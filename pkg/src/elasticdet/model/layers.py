"""Transformer building blocks for the elastic detector.

Attention uses separate q/k/v/out projections and explicit matmul math so
the analytic FLOPs estimator can mirror the forward pass operator by
operator. No dropout anywhere: inference must be deterministic and every
sub-net shares these weights.
"""

import math

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch import Tensor

from .windows import window_merge, window_partition


class MultiheadAttention(nn.Module):
    """Scaled dot-product attention with separate q/k/v inputs."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.scale = self.head_dim ** -0.5
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, q: Tensor, k: Tensor, v: Tensor) -> Tensor:
        *lead, nq, dim = q.shape
        nk = k.shape[-2]
        h, hd = self.num_heads, self.head_dim

        def split(x: Tensor, n: int) -> Tensor:
            return x.reshape(*lead, n, h, hd).transpose(-3, -2)

        qh = split(self.q_proj(q), nq)
        kh = split(self.k_proj(k), nk)
        vh = split(self.v_proj(v), nk)
        attn = (qh @ kh.transpose(-2, -1)) * self.scale
        attn = attn.softmax(dim=-1)
        out = (attn @ vh).transpose(-3, -2).reshape(*lead, nq, dim)
        return self.out_proj(out)


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderBlock(nn.Module):
    """Pre-norm ViT block; attention optionally runs inside windows."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, x: Tensor, num_windows: int = 1) -> Tensor:
        h = self.norm1(x)
        if num_windows > 1:
            groups = window_partition(h, num_windows)
            attended = self.attn(groups, groups, groups)
            h = window_merge(attended, num_windows)
        else:
            h = self.attn(h, h, h)
        x = x + h
        return x + self.mlp(self.norm2(x))


class DecoderBlock(nn.Module):
    """Query self-attention, cross-attention to memory tokens, FFN."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.self_attn = MultiheadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.cross_attn = MultiheadAttention(dim, num_heads)
        self.norm3 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    def forward(self, queries: Tensor, query_pos: Tensor, memory: Tensor, memory_pos: Tensor) -> Tensor:
        h = self.norm1(queries)
        queries = queries + self.self_attn(h + query_pos, h + query_pos, h)
        h = self.norm2(queries)
        queries = queries + self.cross_attn(h + query_pos, memory + memory_pos, memory)
        return queries + self.mlp(self.norm3(queries))


class BoxMlp(nn.Module):
    """Three-layer box regression head emitting cxcywh deltas."""

    def __init__(self, dim: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim)
        self.fc2 = nn.Linear(dim, dim)
        self.fc3 = nn.Linear(dim, 4)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc3(F.relu(self.fc2(F.relu(self.fc1(x)))))


class StageHead(nn.Module):
    """Per-stage prediction head: class logits, box delta, mask embedding.

    Each decoder layer (and the encoder stage) owns one of these so the
    decoder can be truncated at any depth.
    """

    def __init__(self, dim: int, num_classes: int, mask_dim: int = 0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.class_proj = nn.Linear(dim, num_classes)
        self.box_mlp = BoxMlp(dim)
        self.mask_ffn = None
        if mask_dim > 0:
            self.mask_ffn = nn.Sequential(nn.Linear(dim, dim), nn.ReLU(), nn.Linear(dim, mask_dim))
        # bias classification toward background so early training is stable
        prior = 0.01
        nn.init.constant_(self.class_proj.bias, -math.log((1 - prior) / prior))

    def forward(self, embed: Tensor) -> tuple[Tensor, Tensor]:
        h = self.norm(embed)
        return self.class_proj(h), self.box_mlp(h)

    def mask_embedding(self, embed: Tensor) -> Tensor:
        if self.mask_ffn is None:
            raise RuntimeError("head was built without a mask FFN")
        return self.mask_ffn(self.norm(embed))


class PixelEmbedding(nn.Module):
    """Quarter-resolution pixel embedding map for the segmentation head.

    Memory tokens are bilinearly upsampled to stride 4 and pushed through a
    small convolutional projector; instance masks are dot products of query
    mask embeddings with this map.
    """

    def __init__(self, dim: int, mask_dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(dim, mask_dim, kernel_size=1)

    def forward(self, memory: Tensor, grid_side: int, resolution: int) -> Tensor:
        b, t, dim = memory.shape
        fmap = memory.transpose(1, 2).reshape(b, dim, grid_side, grid_side)
        target = resolution // 4
        fmap = F.interpolate(fmap, size=(target, target), mode="bilinear", align_corners=False)
        return self.conv2(F.relu(self.conv1(fmap)))


def sine_position_embedding(coords: Tensor, dim: int, temperature: float = 10000.0) -> Tensor:
    """Sine/cosine embedding of normalized coordinates [..., C] -> [..., dim].

    dim is split evenly over the C coordinates; each slot alternates sin and
    cos over a geometric frequency ladder, DETR style.
    """
    num_coords = coords.shape[-1]
    per = dim // num_coords
    if per % 2 != 0 or per * num_coords != dim:
        raise ValueError(f"dim {dim} must split evenly into sin/cos pairs over {num_coords} coords")
    freq = torch.arange(per // 2, dtype=coords.dtype, device=coords.device)
    freq = temperature ** (2 * freq / per)
    angles = coords.unsqueeze(-1) * (2 * math.pi) / freq  # [..., C, per/2]
    emb = torch.stack([angles.sin(), angles.cos()], dim=-1)
    return emb.reshape(*coords.shape[:-1], dim)


def grid_position_embedding(grid_side: int, dim: int, dtype: torch.dtype, device: torch.device) -> Tensor:
    """Sine embedding of token-grid centers: [grid_side^2, dim]."""
    steps = (torch.arange(grid_side, dtype=dtype, device=device) + 0.5) / grid_side
    yy, xx = torch.meshgrid(steps, steps, indexing="ij")
    coords = torch.stack([xx.reshape(-1), yy.reshape(-1)], dim=-1)
    return sine_position_embedding(coords, dim)


def inverse_sigmoid(x: Tensor, eps: float = 1e-5) -> Tensor:
    x = x.clamp(min=eps, max=1 - eps)
    return torch.log(x / (1 - x))
