import pytest
import torch

from elasticdet.errors import InvalidConfigError
from elasticdet.model import (
    bilinear_resize_matrix,
    interpolate_position_grid,
    resample_patch_kernel,
    resize_patch,
)


def test_resample_identity_same_size():
    torch.manual_seed(0)
    kernel = torch.randn(6, 3, 16, 16)
    out = resample_patch_kernel(kernel, 16, 16)
    assert torch.equal(out, kernel)


def test_resample_output_shape_downscale():
    kernel = torch.randn(5, 4, 16, 16)
    out = resample_patch_kernel(kernel, 16, 12)
    assert out.shape == (5, 4, 12, 12)


def test_resize_matrix_matches_resize_patch():
    torch.manual_seed(1)
    x = torch.randn(8, 8, dtype=torch.float64)
    mat = bilinear_resize_matrix(8, 16)
    direct = resize_patch(x, 16).flatten()
    via_matrix = mat @ x.flatten()
    assert torch.allclose(direct, via_matrix, atol=1e-12)


def test_inner_product_preserved_upsampling():
    # the map is built from the explicit resize matrix; the identity
    # <resampled w, resize(x)> == <w, x> must hold for every upsampling draw
    torch.manual_seed(2)
    worst = 0.0
    for _ in range(100):
        w = torch.randn(1, 1, 8, 8, dtype=torch.float64)
        x = torch.randn(8, 8, dtype=torch.float64)
        w16 = resample_patch_kernel(w, 8, 16)
        lhs = (w16.squeeze() * resize_patch(x, 16)).sum()
        rhs = (w.squeeze() * x).sum()
        worst = max(worst, float(abs(lhs - rhs) / abs(rhs).clamp(min=1e-12)))
    assert worst < 1e-5


def test_resample_rejects_tiny_patches():
    kernel = torch.randn(2, 3, 1, 1)
    with pytest.raises(InvalidConfigError):
        resample_patch_kernel(kernel, 1, 16)
    with pytest.raises(InvalidConfigError):
        resample_patch_kernel(torch.randn(2, 3, 8, 8), 8, 0)


def test_resample_is_differentiable():
    kernel = torch.randn(2, 3, 8, 8, dtype=torch.float64, requires_grad=True)
    out = resample_patch_kernel(kernel, 8, 16)
    out.sum().backward()
    assert kernel.grad is not None
    assert torch.isfinite(kernel.grad).all()


def test_position_identity_at_full_grid():
    torch.manual_seed(3)
    table = torch.randn(12 * 12, 5)
    out = interpolate_position_grid(table, 12)
    assert torch.equal(out, table)


def test_position_target_one_samples_grid_center():
    # 2x2 grid [[a, b], [c, d]] collapsed to one point: the bilinear sample
    # at the grid center is the mean of the four corners
    table = torch.tensor([[1.0], [2.0], [3.0], [4.0]])
    out = interpolate_position_grid(table, 1)
    assert out.shape == (1, 1)
    assert torch.allclose(out, torch.tensor([[2.5]]))


def test_position_linear_ramp_is_exact():
    # bilinear interpolation reproduces affine data exactly
    g = 4
    ys, xs = torch.meshgrid(torch.arange(g, dtype=torch.float64),
                            torch.arange(g, dtype=torch.float64), indexing="ij")
    table = torch.stack([2.0 * xs + 1.0, -3.0 * ys + 0.5], dim=-1).reshape(g * g, 2)
    out = interpolate_position_grid(table, 3).reshape(3, 3, 2)
    step = (g - 1) / 2.0
    for i in range(3):
        for j in range(3):
            assert torch.allclose(out[i, j, 0], torch.tensor(2.0 * (j * step) + 1.0, dtype=torch.float64), atol=1e-12)
            assert torch.allclose(out[i, j, 1], torch.tensor(-3.0 * (i * step) + 0.5, dtype=torch.float64), atol=1e-12)


def test_position_rejects_bad_targets():
    table = torch.randn(9, 4)
    with pytest.raises(InvalidConfigError):
        interpolate_position_grid(table, 4)
    with pytest.raises(InvalidConfigError):
        interpolate_position_grid(table, 0)
