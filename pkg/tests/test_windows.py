import pytest
import torch

from elasticdet.errors import InvalidConfigError
from elasticdet.model import window_merge, window_partition


def test_single_window_is_identity():
    torch.manual_seed(0)
    x = torch.randn(2, 1 + 16, 8)
    groups = window_partition(x, 1)
    assert groups.shape == (2, 1, 17, 8)
    assert torch.equal(groups[:, 0], x)
    assert torch.equal(window_merge(groups, 1), x)


def test_partition_counts_grid4_two_windows():
    x = torch.randn(1, 1 + 16, 4)
    groups = window_partition(x, 2)
    assert groups.shape == (1, 4, 1 + 4, 4)
    # every group carries a copy of the class token
    assert torch.equal(groups[:, :, 0], x[:, 0].unsqueeze(1).expand(1, 4, 4))
    # spatial tokens conserved: the union of groups is the original set
    spatial = groups[:, :, 1:].reshape(1, 16, 4)
    assert torch.equal(
        spatial.reshape(-1, 4).sort(dim=0).values,
        x[:, 1:].reshape(-1, 4).sort(dim=0).values,
    )


def test_partition_tile_layout():
    # grid positions encoded as values: window 0 must hold the top-left tile
    side = 4
    vals = torch.arange(side * side, dtype=torch.float32).reshape(1, side * side, 1)
    x = torch.cat([torch.full((1, 1, 1), -1.0), vals], dim=1)
    groups = window_partition(x, 2)
    assert groups[0, 0, 1:, 0].tolist() == [0.0, 1.0, 4.0, 5.0]
    assert groups[0, 1, 1:, 0].tolist() == [2.0, 3.0, 6.0, 7.0]
    assert groups[0, 2, 1:, 0].tolist() == [8.0, 9.0, 12.0, 13.0]


@pytest.mark.parametrize("num_windows", [1, 2])
def test_round_trip_restores_spatial_tokens(num_windows):
    torch.manual_seed(1)
    x = torch.randn(3, 1 + 16, 6)
    merged = window_merge(window_partition(x, num_windows), num_windows)
    assert torch.equal(merged[:, 1:], x[:, 1:])
    # with unmodified copies, the class-token mean equals the original too
    assert torch.allclose(merged[:, 0], x[:, 0])


def test_merge_averages_diverged_class_copies():
    x = torch.zeros(1, 1 + 16, 1)
    groups = window_partition(x, 2)
    groups = groups.clone()
    groups[0, :, 0, 0] = torch.tensor([1.0, 2.0, 3.0, 6.0])
    merged = window_merge(groups, 2)
    assert merged[0, 0, 0].item() == 3.0


def test_indivisible_grid_rejected():
    x = torch.randn(1, 1 + 9, 4)  # grid side 3
    with pytest.raises(InvalidConfigError):
        window_partition(x, 2)


def test_non_square_token_count_rejected():
    x = torch.randn(1, 1 + 15, 4)
    with pytest.raises(InvalidConfigError):
        window_partition(x, 2)
