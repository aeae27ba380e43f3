"""Planar 4-DOF transforms (rotation, 2D translation, isotropic scale) and
sampling-grid generation between a native and an internal pixel lattice.

Coordinate convention
---------------------
Pixel ``p`` covers ``[p, p + 1)`` and its center sits at ``p + 0.5``; the
origin is the corner of the first pixel.  Points are ``(x, y)`` with ``x``
running along the width (column) axis.

``AffineTransform2D.m`` is the *forward* map from the source lattice to the
target lattice about the pivot ``center``.  Grids are produced by pulling
target pixel centers back through ``m^-1``, so a translation of ``+1`` moves
content by ``+1`` in the output and every sampled source ``x`` shifts by
``-1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "AffineParams",
    "AffineTransform2D",
    "DegenerateScaleError",
    "GridSpec",
    "SampleGrid",
    "build_transform",
    "compose",
    "generate_grid",
    "image_center",
    "invert",
    "scale_factor",
]


class DegenerateScaleError(ValueError):
    """Raised when a scale factor is zero or negative."""


def _exact_cos_sin(theta: float) -> tuple[float, float]:
    # Multiples of pi/2 must land exactly on the lattice.
    quarter = theta / (math.pi / 2)
    k = round(quarter)
    if abs(quarter - k) < 1e-12:
        return ((1.0, 0.0), (0.0, 1.0), (-1.0, 0.0), (0.0, -1.0))[k % 4]
    return math.cos(theta), math.sin(theta)


@dataclass(frozen=True)
class AffineParams:
    """Rotation ``theta`` (radians), translation ``t`` (target pixels), scale ``sf``."""

    theta: float = 0.0
    t: tuple[float, float] = (0.0, 0.0)
    sf: float = 1.0

    def __post_init__(self) -> None:
        t = (float(self.t[0]), float(self.t[1]))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "theta", float(self.theta))
        object.__setattr__(self, "sf", float(self.sf))
        if not (math.isfinite(self.theta) and all(math.isfinite(v) for v in t)):
            raise ValueError("theta and t must be finite")
        if not math.isfinite(self.sf) or self.sf <= 0:
            raise DegenerateScaleError(f"scale factor must be > 0, got {self.sf}")

    @property
    def is_identity(self) -> bool:
        return self.theta == 0.0 and self.t == (0.0, 0.0) and self.sf == 1.0


@dataclass(frozen=True)
class AffineTransform2D:
    """Homogeneous 3x3 planar transform with its pivot in source pixels."""

    m: NDArray[np.float64]
    center: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got {m.shape}")
        if not np.array_equal(m[2], [0.0, 0.0, 1.0]):
            raise ValueError("bottom row must be (0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)
        object.__setattr__(self, "center", (float(self.center[0]), float(self.center[1])))

    def apply(self, pts: NDArray[np.float64]) -> NDArray[np.float64]:
        """Map an ``(..., 2)`` array of points through ``m``."""
        pts = np.asarray(pts, dtype=np.float64)
        return pts @ self.m[:2, :2].T + self.m[:2, 2]

    @classmethod
    def identity(cls, center: tuple[float, float] = (0.0, 0.0)) -> AffineTransform2D:
        return cls(np.eye(3), center)


@dataclass(frozen=True)
class GridSpec:
    """Source (``*_native``) and target (``*_inner``) lattice extents and voxel sizes."""

    h_native: int
    w_native: int
    h_inner: int
    w_inner: int
    res_native: float = 1.0
    res_inner: float = 1.0

    def __post_init__(self) -> None:
        if min(self.h_native, self.w_native, self.h_inner, self.w_inner) < 1:
            raise ValueError("grid extents must be >= 1")
        if self.res_native <= 0 or self.res_inner <= 0:
            raise ValueError("resolutions must be > 0")

    @classmethod
    def from_resolutions(
        cls, h_native: int, w_native: int, res_native: float, res_inner: float
    ) -> GridSpec:
        """Target extent from physical size alone (the scale jitter never changes shapes)."""
        if res_native <= 0 or res_inner <= 0:
            raise ValueError("resolutions must be > 0")
        ratio = res_native / res_inner
        return cls(
            h_native,
            w_native,
            max(1, round(h_native * ratio)),
            max(1, round(w_native * ratio)),
            res_native,
            res_inner,
        )

    def reversed(self) -> GridSpec:
        """Spec for the way back: inner lattice becomes the source."""
        return GridSpec(
            self.h_inner, self.w_inner, self.h_native, self.w_native,
            self.res_inner, self.res_native,
        )


@dataclass(frozen=True)
class SampleGrid:
    """Source-space pixel coordinates, shape ``(h_out, w_out, 2)`` or ``(n, h_out, w_out, 2)``."""

    coords: NDArray[np.float64] = field(repr=False)

    def __post_init__(self) -> None:
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim not in (3, 4) or c.shape[-1] != 2:
            raise ValueError(f"grid must be (h, w, 2) or (n, h, w, 2), got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise ValueError("grid coordinates must be finite")
        object.__setattr__(self, "coords", c)

    @property
    def out_shape(self) -> tuple[int, int]:
        return self.coords.shape[-3], self.coords.shape[-2]

    @classmethod
    def stack(cls, grids: list[SampleGrid]) -> SampleGrid:
        return cls(np.stack([g.coords for g in grids]))


def scale_factor(res_inner: float, res_native: float, alpha: float = 0.0) -> float:
    """``res_inner / res_native + alpha``."""
    if res_inner <= 0 or res_native <= 0:
        raise ValueError("resolutions must be > 0")
    sf = res_inner / res_native + alpha
    if sf <= 0:
        raise DegenerateScaleError(f"scale factor {sf} <= 0 (alpha={alpha})")
    return sf


def image_center(h: int, w: int) -> tuple[float, float]:
    """Geometric center ``(x, y)`` of an ``h x w`` lattice."""
    return ((w - 1) / 2 + 0.5, (h - 1) / 2 + 0.5)


def build_transform(
    params: AffineParams, center: tuple[float, float] = (0.0, 0.0)
) -> AffineTransform2D:
    """Forward matrix ``T(c) T(t) R(theta) S(1/sf) T(-c)``."""
    cx, cy = float(center[0]), float(center[1])
    cos, sin = _exact_cos_sin(params.theta)
    inv_sf = 1.0 / params.sf
    a = np.array([[cos * inv_sf, -sin * inv_sf], [sin * inv_sf, cos * inv_sf]])
    c = np.array([cx, cy])
    m = np.eye(3)
    m[:2, :2] = a
    m[:2, 2] = c + np.asarray(params.t) - a @ c
    return AffineTransform2D(m, (cx, cy))


def compose(second: AffineTransform2D, first: AffineTransform2D) -> AffineTransform2D:
    """Apply ``first`` then ``second``; keeps the pivot of ``first``."""
    m = second.m @ first.m
    m[2] = (0.0, 0.0, 1.0)
    return AffineTransform2D(m, first.center)


def invert(t: AffineTransform2D) -> AffineTransform2D:
    a = t.m[:2, :2]
    det = a[0, 0] * a[1, 1] - a[0, 1] * a[1, 0]
    if det == 0 or not math.isfinite(det):
        raise ArithmeticError("singular transform")
    m = np.eye(3)
    m[:2, :2] = np.linalg.inv(a)
    m[:2, 2] = -m[:2, :2] @ t.m[:2, 2]
    return AffineTransform2D(m, t.center)


def generate_grid(t: AffineTransform2D, spec: GridSpec) -> SampleGrid:
    """Pull every target pixel center back into source pixel coordinates.

    The target lattice is aligned so that its geometric center coincides with
    the transform pivot; the result is expressed relative to the source
    lattice, whose center is likewise aligned with the pivot.
    """
    c = np.asarray(t.center)
    c_src = np.asarray(image_center(spec.h_native, spec.w_native))
    c_tgt = np.asarray(image_center(spec.h_inner, spec.w_inner))
    xs = np.arange(spec.w_inner, dtype=np.float64) + 0.5
    ys = np.arange(spec.h_inner, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx, gy], axis=-1) - c_tgt + c
    back = invert(t)
    src = back.apply(pts) - c + c_src
    return SampleGrid(src)
