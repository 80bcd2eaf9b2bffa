"""Elastic resampling of the patch-embedding kernel and the position grid.

The patch kernel is stored once at the base patch size and mapped to any
requested size with a pseudo-inverse resize: the linear map that preserves
kernel/patch inner products under bilinear patch resizing. For upsampling the
preservation is exact; for downsampling it is the least-squares optimum.

Position embeddings are stored for the largest token grid and sampled down
with align-corners bilinear interpolation, so the full-grid case is an exact
identity and affine embeddings survive interpolation unchanged.
"""

import functools

import torch
import torch.nn.functional as F
from torch import Tensor

from ..errors import InvalidConfigError


def resize_patch(patch: Tensor, side: int) -> Tensor:
    """Bilinear resize of a patch [..., h, w] to [..., side, side].

    This is the reference resize the kernel resampling is inverse to; tests
    and the resize-matrix construction must share it.
    """
    lead = patch.shape[:-2]
    flat = patch.reshape(-1, 1, patch.shape[-2], patch.shape[-1])
    out = F.interpolate(flat, size=(side, side), mode="bilinear", align_corners=False)
    return out.reshape(*lead, side, side)


@functools.lru_cache(maxsize=None)
def bilinear_resize_matrix(p_from: int, p_to: int) -> Tensor:
    """Matrix B with B @ vec(x) == vec(resize_patch(x, p_to)), float64."""
    basis = torch.eye(p_from * p_from, dtype=torch.float64)
    basis = basis.reshape(p_from * p_from, p_from, p_from)
    resized = resize_patch(basis, p_to)
    return resized.reshape(p_from * p_from, p_to * p_to).T.contiguous()


@functools.lru_cache(maxsize=None)
def _pinv_resize_matrix(p_from: int, p_to: int) -> Tensor:
    return torch.linalg.pinv(bilinear_resize_matrix(p_from, p_to))


def resample_patch_kernel(kernel: Tensor, p_from: int, p_to: int) -> Tensor:
    """Map a patch-embedding kernel [out, in, p_from, p_from] to p_to.

    Uses the pseudo-inverse resize: w' = pinv(B)^T w, with B the bilinear
    patch-resize matrix, so <w', resize(x)> tracks <w, x>.
    """
    if p_from < 2 or p_to < 2:
        raise InvalidConfigError(f"patch sizes must be >= 2, got {p_from} -> {p_to}")
    if kernel.shape[-2:] != (p_from, p_from):
        raise InvalidConfigError(
            f"kernel spatial shape {tuple(kernel.shape[-2:])} does not match p_from {p_from}"
        )
    if p_from == p_to:
        return kernel
    mapping = _pinv_resize_matrix(p_from, p_to).to(kernel.dtype)  # [p_from^2, p_to^2]
    out_dim, in_dim = kernel.shape[0], kernel.shape[1]
    flat = kernel.reshape(out_dim * in_dim, p_from * p_from)
    return (flat @ mapping).reshape(out_dim, in_dim, p_to, p_to)


def interpolate_position_grid(pe_table: Tensor, target_grid_side: int) -> Tensor:
    """Resample a square position-embedding table [G*G, D] to a target side.

    Align-corners bilinear: corner embeddings map to corner embeddings and
    the G -> G case returns the table unchanged. A target side of 1 samples
    the grid center. The class-token embedding is not part of the table and
    passes through the encoder unchanged.
    """
    n, dim = pe_table.shape
    side = int(round(n ** 0.5))
    if side * side != n:
        raise InvalidConfigError(f"pe_table length {n} is not a square grid")
    if target_grid_side < 1:
        raise InvalidConfigError(f"target grid side must be >= 1, got {target_grid_side}")
    if target_grid_side > side:
        raise InvalidConfigError(
            f"target grid side {target_grid_side} exceeds stored grid {side}"
        )
    if target_grid_side == side:
        return pe_table

    grid = pe_table.reshape(side, side, dim)
    if target_grid_side == 1:
        coords = torch.tensor([(side - 1) / 2.0], dtype=pe_table.dtype, device=pe_table.device)
    else:
        steps = torch.arange(target_grid_side, dtype=pe_table.dtype, device=pe_table.device)
        coords = steps * ((side - 1) / (target_grid_side - 1))
    lo = coords.floor().long().clamp(max=side - 1)
    hi = (lo + 1).clamp(max=side - 1)
    frac = (coords - lo.to(coords.dtype)).reshape(-1, 1)

    rows = grid[lo] * (1 - frac[:, None]) + grid[hi] * frac[:, None]  # [t, side, D]
    out = rows[:, lo] * (1 - frac[None, :]) + rows[:, hi] * frac[None, :]  # [t, t, D]
    return out.reshape(target_grid_side * target_grid_side, dim)
