"""Per-channel bilinear resampling of feature maps with an analytic backward pass.

Out-of-range support pixels contribute zero.  Only the gradient with respect
to the sampled feature map is provided; grids are never learned.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Literal

import torch

from .geometry import (
    AffineParams,
    GridSpec,
    SampleGrid,
    build_transform,
    generate_grid,
    image_center,
    invert,
    scale_factor,
)

__all__ = [
    "BilinearSample",
    "FeatureMap",
    "LatentAug",
    "bilinear_sample",
    "bilinear_sample_backward",
    "latent_grids",
    "transform_feature_map",
]


@dataclass(frozen=True)
class FeatureMap:
    """``(n, c, h, w)`` tensor tagged with its voxel edge length in mm."""

    data: torch.Tensor
    res: float = 1.0

    def __post_init__(self) -> None:
        if self.data.dim() != 4 or min(self.data.shape) < 1:
            raise ValueError(f"feature map must be (n, c, h, w) with all dims >= 1, got {tuple(self.data.shape)}")
        if self.res <= 0:
            raise ValueError("res must be > 0")

    @property
    def extent(self) -> tuple[int, int]:
        return int(self.data.shape[2]), int(self.data.shape[3])


@dataclass(frozen=True)
class LatentAug:
    """Internal augmentation: rotation (radians), translation (inner pixels), scale jitter."""

    theta: float = 0.0
    t: tuple[float, float] = (0.0, 0.0)
    alpha: float = 0.0

    def affine(self, res_inner: float, res_native: float) -> AffineParams:
        return AffineParams(self.theta, self.t, scale_factor(res_inner, res_native, self.alpha))


def _corners(coords: torch.Tensor, h: int, w: int, weighted: bool = True):
    """Flat indices and weights of the four support pixels, zero weight when out of range.

    With ``weighted=False`` the second entry is the 0/1 validity mask instead.
    """
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx = x - x0
    wy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    out = []
    for dy, dx, wgt in (
        (0, 0, (1 - wx) * (1 - wy)),
        (0, 1, wx * (1 - wy)),
        (1, 0, (1 - wx) * wy),
        (1, 1, wx * wy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        valid = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = torch.where(valid, yi * w + xi, torch.zeros_like(xi))
        if weighted:
            out.append((idx, torch.where(valid, wgt, torch.zeros_like(wgt))))
        else:
            out.append((idx, valid.to(coords.dtype)))
    return out


def _prepare(u: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    n = u.shape[0]
    if coords.dim() == 3:
        coords = coords.unsqueeze(0).expand(n, *coords.shape)
    elif coords.shape[0] != n:
        raise ValueError(f"grid batch {coords.shape[0]} does not match feature batch {n}")
    return coords


def _forward(u: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    n, c, h, w = u.shape
    coords = _prepare(u, coords).to(torch.float64)
    ho, wo = coords.shape[1], coords.shape[2]
    flat = u.reshape(n, c, h * w).to(torch.float64)
    corners = _corners(coords, h, w, weighted=False)
    v00, v01, v10, v11 = (
        torch.gather(flat, 2, idx.reshape(n, 1, ho * wo).expand(n, c, ho * wo)) * valid.reshape(n, 1, ho * wo)
        for idx, valid in corners
    )
    # Nested linear interpolation: exact on constant and affine data.
    x = coords[..., 0] - 0.5
    y = coords[..., 1] - 0.5
    wx = (x - torch.floor(x)).reshape(n, 1, ho * wo)
    wy = (y - torch.floor(y)).reshape(n, 1, ho * wo)
    top = v00 + wx * (v01 - v00)
    bottom = v10 + wx * (v11 - v10)
    out = top + wy * (bottom - top)
    return out.reshape(n, c, ho, wo).to(u.dtype)


def _backward(upstream: torch.Tensor, coords: torch.Tensor, h: int, w: int) -> torch.Tensor:
    n, c, ho, wo = upstream.shape
    coords = _prepare(upstream, coords).to(torch.float64)
    if coords.shape[1:3] != (ho, wo):
        raise ValueError(f"upstream extent {(ho, wo)} does not match grid {tuple(coords.shape[1:3])}")
    g = upstream.reshape(n, c, ho * wo).to(torch.float64)
    grad = torch.zeros(n, c, h * w, dtype=torch.float64)
    for idx, wgt in _corners(coords, h, w):
        idx = idx.reshape(n, 1, ho * wo).expand(n, c, ho * wo)
        grad.scatter_add_(2, idx, g * wgt.reshape(n, 1, ho * wo))
    return grad.reshape(n, c, h, w).to(upstream.dtype)


class BilinearSample(torch.autograd.Function):
    """Autograd wrapper; gradient flows to the feature map only."""

    @staticmethod
    def forward(ctx, u: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
        ctx.save_for_backward(coords)
        ctx.extent = (u.shape[2], u.shape[3])
        return _forward(u, coords)

    @staticmethod
    def backward(ctx, upstream: torch.Tensor):
        (coords,) = ctx.saved_tensors
        h, w = ctx.extent
        return _backward(upstream.contiguous(), coords, h, w), None


def _coords_tensor(grid: SampleGrid | torch.Tensor) -> torch.Tensor:
    if isinstance(grid, SampleGrid):
        return torch.from_numpy(grid.coords)
    return grid


def bilinear_sample(u: FeatureMap | torch.Tensor, grid: SampleGrid | torch.Tensor):
    """Sample ``u`` at ``grid`` coordinates, identically for every channel.

    Returns the same kind it was given: a ``FeatureMap`` (keeping ``res``) or
    a bare tensor that participates in autograd.
    """
    coords = _coords_tensor(grid)
    if isinstance(u, FeatureMap):
        return FeatureMap(BilinearSample.apply(u.data, coords), u.res)
    if u.dim() != 4:
        raise ValueError("expected an (n, c, h, w) tensor")
    return BilinearSample.apply(u, coords)


def bilinear_sample_backward(
    u: FeatureMap | torch.Tensor, grid: SampleGrid | torch.Tensor, upstream: FeatureMap | torch.Tensor
):
    """Gradient of ``sum(upstream * bilinear_sample(u, grid))`` with respect to ``u``."""
    data = u.data if isinstance(u, FeatureMap) else u
    up = upstream.data if isinstance(upstream, FeatureMap) else upstream
    coords = _coords_tensor(grid)
    n, c, h, w = data.shape
    if up.shape[:2] != (n, c):
        raise ValueError(f"upstream {tuple(up.shape)} incompatible with input {tuple(data.shape)}")
    grad = _backward(up, coords, h, w)
    return FeatureMap(grad, u.res) if isinstance(u, FeatureMap) else grad


def latent_grids(
    augs: LatentAug | list[LatentAug],
    native_extent: tuple[int, int],
    res_native: float,
    res_inner: float,
    direction: Literal["forward", "inverse"] = "forward",
) -> SampleGrid:
    """Sampling grid(s) for the native-to-inner transition or its exact reverse.

    A list of augmentations yields a per-sample ``(n, h, w, 2)`` grid.
    """
    h, w = native_extent
    spec = GridSpec.from_resolutions(h, w, res_native, res_inner)
    if direction == "inverse":
        spec = spec.reversed()
    elif direction != "forward":
        raise ValueError(f"unknown direction {direction!r}")
    center = image_center(h, w)

    def one(aug: LatentAug) -> SampleGrid:
        t = build_transform(aug.affine(res_inner, res_native), center)
        return generate_grid(t if direction == "forward" else invert(t), spec)

    if isinstance(augs, LatentAug):
        return one(augs)
    return SampleGrid.stack([one(a) for a in augs])


def transform_feature_map(
    u: FeatureMap,
    params: LatentAug | list[LatentAug],
    res_inner: float,
    direction: Literal["forward", "inverse"] = "forward",
    native_extent: tuple[int, int] | None = None,
    native_res: float | None = None,
) -> FeatureMap:
    """Resample ``u`` onto the internal lattice, or undo that step.

    ``forward`` treats ``u`` as native (``u.res``) and returns a map at
    ``res_inner``.  ``inverse`` expects ``u`` on the internal lattice and needs
    the ``native_extent`` and ``native_res`` recorded on the way in.
    """
    if direction == "forward":
        grid = latent_grids(params, u.extent, u.res, res_inner, "forward")
        return FeatureMap(bilinear_sample(u.data, grid), res_inner)
    if native_extent is None or native_res is None:
        raise ValueError("inverse transform needs the native extent and resolution")
    expected = GridSpec.from_resolutions(*native_extent, native_res, res_inner)
    if u.extent != (expected.h_inner, expected.w_inner):
        raise ValueError(f"stale transform context: map {u.extent} vs recorded inner extent "
                         f"{(expected.h_inner, expected.w_inner)}")
    grid = latent_grids(params, native_extent, native_res, res_inner, "inverse")
    return replace(u, data=bilinear_sample(u.data, grid), res=native_res)

