"""Weighted logistic + soft-Dice loss and its per-pixel weight map."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from scipy import ndimage

from .labels import LabelTable

__all__ = [
    "LossValue",
    "WeightConfig",
    "WeightMap",
    "build_weight_map",
    "composite_loss",
    "disk",
    "median_frequency_weights",
    "one_hot",
]

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class WeightConfig:
    radius: int = 2
    gradient_scale: float = 1.0
    w_gm: float = 2.0
    w_wm: float = 2.0


@dataclass
class WeightMap:
    omega: np.ndarray
    components: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass(frozen=True)
class LossValue:
    total: torch.Tensor
    logistic_term: torch.Tensor
    dice_term: torch.Tensor


def disk(radius: int) -> np.ndarray:
    """Euclidean disk footprint of the given pixel radius."""
    r = int(radius)
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (xx * xx + yy * yy) <= r * r


def median_frequency_weights(labels: np.ndarray) -> np.ndarray:
    """Per-pixel ``median(freq) / freq(class of pixel)`` over the classes present."""
    ids, counts = np.unique(labels, return_inverse=False, return_counts=True)
    freq = counts / labels.size
    per_class = np.median(freq) / freq
    lut = dict(zip(ids.tolist(), per_class.tolist()))
    out = np.empty(labels.shape, dtype=np.float64)
    for k, v in lut.items():
        out[labels == k] = v
    return out


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """One-hot encoding: ``(h, w) -> (C, h, w)`` and ``(n, h, w) -> (n, C, h, w)``."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= num_classes:
        raise ValueError(f"label values outside [0, {num_classes})")
    eye = np.eye(num_classes, dtype=np.float32)
    if labels.ndim not in (2, 3):
        raise ValueError("expected a 2D slice or a batch of 2D slices")
    return np.moveaxis(eye[labels], -1, labels.ndim - 2)


def build_weight_map(labels: np.ndarray, table: LabelTable, cfg: WeightConfig = WeightConfig()) -> WeightMap:
    """Four-term weight map of a 2D label slice.

    ``labels`` holds class indices into ``table``.  Terms: median-frequency
    balancing, one-hot gradient magnitude, a band around the cortex
    (``dilate - erode``), and WM pixels near cortex plus sulcal background
    enclosed by the cortex closing.
    """
    labels = np.asarray(labels)
    if labels.ndim != 2:
        raise ValueError("weight maps are computed per 2D slice")
    table.check_indices(labels)

    mf = median_frequency_weights(labels)

    present = np.unique(labels)
    grad = np.zeros(labels.shape, dtype=np.float64)
    if present.size > 1:
        for k in present:
            gy, gx = np.gradient((labels == k).astype(np.float64))
            grad += np.hypot(gx, gy)
    grad *= cfg.gradient_scale

    fp = disk(cfg.radius)
    cortex = table.class_mask(labels, "cortex")
    dil = ndimage.binary_dilation(cortex, structure=fp)
    ero = ndimage.binary_erosion(cortex, structure=fp, border_value=0)
    gm = np.where(dil & ~ero, cfg.w_gm, 0.0)

    wm = table.class_mask(labels, "wm")
    closed = ndimage.binary_closing(cortex, structure=fp)
    sulcal = (table.class_mask(labels, "background") | table.class_mask(labels, "csf")) & closed
    wm_sulci = np.where((wm & dil) | sulcal, cfg.w_wm, 0.0)

    omega = mf + grad + gm + wm_sulci
    return WeightMap(
        omega,
        {"median_freq": mf, "gradient": grad, "gm": gm, "wm_sulci": wm_sulci},
    )


def composite_loss(
    probs: torch.Tensor,
    onehot: torch.Tensor,
    weights: torch.Tensor,
    check: bool = True,
) -> LossValue:
    """Weighted logistic loss plus (negative) soft Dice, averaged over the batch.

    The logistic term is a weighted mean over pixels; the Dice term sums over
    classes.  A class absent from both prediction and reference scores a
    perfect -1.
    """
    if probs.shape != onehot.shape:
        raise ValueError(f"probabilities {tuple(probs.shape)} vs labels {tuple(onehot.shape)}")
    if weights.shape != (probs.shape[0], *probs.shape[2:]):
        raise ValueError(f"weights {tuple(weights.shape)} do not match {tuple(probs.shape)}")
    if check:
        with torch.no_grad():
            sums = probs.sum(dim=1)
            if (probs < 0).any() or not torch.allclose(sums, torch.ones_like(sums), atol=1e-4):
                raise ValueError("probabilities are not a per-pixel distribution")

    n = probs.shape[0]
    pixels = probs[0, 0].numel()
    logp = torch.log(probs.clamp_min(LOG_FLOOR))
    logistic = -(weights.unsqueeze(1) * onehot * logp).sum() / (n * pixels)

    dims = tuple(range(2, probs.dim()))
    inter = (probs * onehot).sum(dim=dims)
    denom = probs.sum(dim=dims) + onehot.sum(dim=dims)
    empty = denom == 0
    ratio = torch.where(empty, torch.ones_like(denom), 2 * inter / torch.where(empty, torch.ones_like(denom), denom))
    dice = -ratio.sum(dim=1).mean()
    return LossValue(logistic + dice, logistic, dice)
