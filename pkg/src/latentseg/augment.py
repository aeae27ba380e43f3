"""External (image/label space) and internal (latent) augmentation sampling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .geometry import AffineParams, build_transform, generate_grid, GridSpec, image_center
from .sampler import LatentAug, bilinear_sample

__all__ = [
    "ExternalAugConfig",
    "ExternalParams",
    "INTENSITY_OPS",
    "IntensityAugConfig",
    "InternalAugConfig",
    "apply_external",
    "apply_intensity",
    "external_transform",
    "sample_external",
    "sample_internal",
    "sample_rng",
]

INTENSITY_OPS = ("bias", "gamma", "ghosting", "spiking", "blur", "noise")


def sample_rng(base_seed: int, epoch: int, sample_id: int) -> np.random.Generator:
    """Independent stream for one sample in one epoch."""
    return np.random.default_rng([int(base_seed), int(epoch), int(sample_id)])


def _ordered(name: str, lo_hi: tuple[float, float]) -> tuple[float, float]:
    lo, hi = float(lo_hi[0]), float(lo_hi[1])
    if lo > hi:
        raise ValueError(f"{name} range must satisfy lo <= hi, got {lo_hi}")
    return lo, hi


@dataclass(frozen=True)
class ExternalAugConfig:
    rot_range: tuple[float, float] = (-180.0, 180.0)
    trans_range: tuple[float, float] = (0.0, 15.0)
    scale_range: tuple[float, float] = (0.8, 1.15)
    rotate: bool = True
    translate: bool = True
    scale: bool = False

    def __post_init__(self) -> None:
        _ordered("rotation", self.rot_range)
        lo, _ = _ordered("translation", self.trans_range)
        if lo < 0:
            raise ValueError("translation magnitudes must be >= 0")
        lo, hi = _ordered("scale", self.scale_range)
        if lo <= 0 <= hi or lo <= 0:
            raise ValueError("scale range must exclude 0")


@dataclass(frozen=True)
class ExternalParams:
    theta_deg: float = 0.0
    t: tuple[float, float] = (0.0, 0.0)
    scale: float = 1.0


@dataclass(frozen=True)
class InternalAugConfig:
    rot_range: tuple[float, float] = (-180.0, 180.0)
    trans_range: tuple[float, float] = (0.0, 15.0)
    alpha_sigma: float = 0.1

    def __post_init__(self) -> None:
        _ordered("rotation", self.rot_range)
        lo, _ = _ordered("translation", self.trans_range)
        if lo < 0:
            raise ValueError("translation magnitudes must be >= 0")
        if self.alpha_sigma < 0:
            raise ValueError("alpha_sigma must be >= 0")


@dataclass(frozen=True)
class IntensityAugConfig:
    probability: float = 0.4
    ops: tuple[str, ...] = INTENSITY_OPS
    gamma_range: tuple[float, float] = (0.7, 1.5)
    blur_sigma: tuple[float, float] = (0.3, 1.0)
    noise_sigma: tuple[float, float] = (0.01, 0.05)
    bias_coeff: float = 0.3
    ghost_amplitude: tuple[float, float] = (0.05, 0.3)
    spike_amplitude: tuple[float, float] = (0.02, 0.1)
    spike_cycles: tuple[float, float] = (2.0, 8.0)

    def __post_init__(self) -> None:
        if not 0.0 <= self.probability <= 1.0:
            raise ValueError("probability must lie in [0, 1]")
        unknown = set(self.ops) - set(INTENSITY_OPS)
        if unknown:
            raise ValueError(f"unknown intensity ops {sorted(unknown)}")


def _magnitude_with_sign(rng: np.random.Generator, lo: float, hi: float) -> float:
    mag = rng.uniform(lo, hi)
    return float(mag if rng.random() < 0.5 else -mag)


def sample_external(cfg: ExternalAugConfig, rng: np.random.Generator) -> ExternalParams:
    """Rotation ~ U(rot_range) degrees, |t| per axis ~ U(trans_range) with random sign, scale ~ U."""
    theta = rng.uniform(*cfg.rot_range) if cfg.rotate else 0.0
    t = (
        (_magnitude_with_sign(rng, *cfg.trans_range), _magnitude_with_sign(rng, *cfg.trans_range))
        if cfg.translate
        else (0.0, 0.0)
    )
    s = rng.uniform(*cfg.scale_range) if cfg.scale else 1.0
    return ExternalParams(float(theta), t, float(s))


def sample_internal(cfg: InternalAugConfig, rng: np.random.Generator) -> LatentAug:
    """Rotation, translation (same sign rule as external) and alpha ~ N(0, alpha_sigma^2)."""
    theta = math.radians(rng.uniform(*cfg.rot_range))
    t = (_magnitude_with_sign(rng, *cfg.trans_range), _magnitude_with_sign(rng, *cfg.trans_range))
    alpha = float(rng.normal(0.0, cfg.alpha_sigma)) if cfg.alpha_sigma > 0 else 0.0
    return LatentAug(float(theta), t, alpha)


def external_transform(params: ExternalParams, h: int, w: int):
    """Forward matrix of an external augmentation about the image center."""
    affine = AffineParams(math.radians(params.theta_deg), params.t, 1.0 / params.scale)
    return build_transform(affine, image_center(h, w))


def apply_external(image: np.ndarray, labels: np.ndarray, params: ExternalParams):
    """Resample ``image`` bilinearly and ``labels`` nearest-neighbour with one shared transform.

    Both are ``(h, w)`` or ``(c, h, w)`` for the image; anything mapped from
    outside the frame becomes 0 (background).
    """
    image = np.asarray(image)
    labels = np.asarray(labels)
    h, w = labels.shape
    if image.shape[-2:] != (h, w):
        raise ValueError(f"image extent {image.shape[-2:]} differs from labels {labels.shape}")
    if params == ExternalParams():
        return image.copy(), labels.copy()
    grid = generate_grid(external_transform(params, h, w), GridSpec(h, w, h, w))

    chans = image[None] if image.ndim == 2 else image
    t = torch.from_numpy(np.ascontiguousarray(chans, dtype=np.float64))[None]
    warped = bilinear_sample(t, grid)[0].numpy().astype(image.dtype)
    warped = warped[0] if image.ndim == 2 else warped

    idx = np.floor(grid.coords).astype(np.int64)
    xi, yi = idx[..., 0], idx[..., 1]
    inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    out_labels = np.zeros_like(labels)
    out_labels[inside] = labels[yi[inside], xi[inside]]
    return warped, out_labels


def _bias(image, cfg, rng):
    h, w = image.shape[-2:]
    ys, xs = np.meshgrid(np.linspace(-1, 1, h), np.linspace(-1, 1, w), indexing="ij")
    terms = [xs, ys, xs * ys, xs * xs, ys * ys]
    c = rng.uniform(-cfg.bias_coeff, cfg.bias_coeff, size=len(terms)) / len(terms)
    field_ = 1.0 + sum(ci * t for ci, t in zip(c, terms))
    return image * field_


def _gamma(image, cfg, rng):
    g = rng.uniform(*cfg.gamma_range)
    return np.clip(image, 0.0, 1.0) ** g


def _blur(image, cfg, rng):
    s = rng.uniform(*cfg.blur_sigma)
    sig = (0,) * (image.ndim - 2) + (s, s)
    return ndimage.gaussian_filter(image, sig, mode="constant")


def _noise(image, cfg, rng):
    s = rng.uniform(*cfg.noise_sigma)
    return image + rng.normal(0.0, s, size=image.shape)


def _ghosting(image, cfg, rng):
    # Attenuated copies shifted by a fraction of the field of view along one axis.
    axis = image.ndim - 1 - int(rng.integers(2))
    n_ghosts = int(rng.integers(2, 5))
    amp = rng.uniform(*cfg.ghost_amplitude)
    shift = image.shape[axis] // n_ghosts
    return image + amp * np.roll(image, shift, axis=axis)


def _spiking(image, cfg, rng):
    # Additive plane-wave stripes, the spatial signature of a k-space spike.
    h, w = image.shape[-2:]
    amp = rng.uniform(*cfg.spike_amplitude)
    cycles = rng.uniform(*cfg.spike_cycles)
    phase = rng.uniform(0, 2 * np.pi)
    if rng.random() < 0.5:
        coord = (np.arange(h) + 0.5)[:, None] / h * np.ones((1, w))
    else:
        coord = (np.arange(w) + 0.5)[None, :] / w * np.ones((h, 1))
    return image + amp * np.cos(2 * np.pi * cycles * coord + phase)


_OPS = {
    "bias": _bias,
    "gamma": _gamma,
    "ghosting": _ghosting,
    "spiking": _spiking,
    "blur": _blur,
    "noise": _noise,
}


def apply_intensity(
    image: np.ndarray, cfg: IntensityAugConfig, rng: np.random.Generator, op: str | None = None
) -> np.ndarray:
    """With probability ``cfg.probability`` apply one enabled op, then clamp to [0, 1].

    ``op`` forces a particular operation (the probability draw is skipped).
    """
    image = np.asarray(image, dtype=np.float64)
    if op is None:
        if not cfg.ops or rng.random() >= cfg.probability:
            return image.copy()
        op = cfg.ops[int(rng.integers(len(cfg.ops)))]
    out = _OPS[op](image, cfg, rng)
    return np.clip(out, 0.0, 1.0)
