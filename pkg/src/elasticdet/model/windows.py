"""Window partition/merge for class-token-aware windowed attention.

Windows tile the square token grid into num_windows x num_windows contiguous
tiles. The single class token is duplicated into every window on partition;
the merge averages the duplicates back into one class token and restores the
original spatial order.
"""

import math

import torch
from torch import Tensor

from ..errors import InvalidConfigError


def _grid_side(num_spatial: int) -> int:
    side = int(round(math.sqrt(num_spatial)))
    if side * side != num_spatial:
        raise InvalidConfigError(f"{num_spatial} spatial tokens do not form a square grid")
    return side


def window_partition(tokens: Tensor, num_windows: int) -> Tensor:
    """[B, 1+T, D] -> [B, num_windows^2, 1 + T/num_windows^2, D].

    Entry 0 of every group is a copy of the class token; the rest are the
    spatial tokens of one tile, row-major within the tile.
    """
    if num_windows < 1:
        raise InvalidConfigError(f"num_windows must be >= 1, got {num_windows}")
    b, n, dim = tokens.shape
    side = _grid_side(n - 1)
    if side % num_windows != 0:
        raise InvalidConfigError(
            f"token grid side {side} not divisible by num_windows {num_windows}"
        )
    tile = side // num_windows
    cls = tokens[:, :1]
    spatial = tokens[:, 1:].reshape(b, num_windows, tile, num_windows, tile, dim)
    spatial = spatial.permute(0, 1, 3, 2, 4, 5).reshape(b, num_windows * num_windows, tile * tile, dim)
    cls = cls.unsqueeze(1).expand(b, num_windows * num_windows, 1, dim)
    return torch.cat([cls, spatial], dim=2)


def window_merge(groups: Tensor, num_windows: int) -> Tensor:
    """Inverse of window_partition; class-token copies are reduced by mean."""
    b, w, n, dim = groups.shape
    if w != num_windows * num_windows:
        raise InvalidConfigError(f"expected {num_windows ** 2} window groups, got {w}")
    tile = _grid_side(n - 1)
    side = tile * num_windows
    cls = groups[:, :, 0].mean(dim=1, keepdim=True)
    spatial = groups[:, :, 1:].reshape(b, num_windows, num_windows, tile, tile, dim)
    spatial = spatial.permute(0, 1, 3, 2, 4, 5).reshape(b, side * side, dim)
    return torch.cat([cls, spatial], dim=1)
