"""2.5D inference: per-plane slice predictions merged by weighted softmax averaging."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from ..architecture import SegNet
from ..labels import DEFAULT_TABLE, LabelTable
from ..phantom import PLANE_AXIS, slice_iter

__all__ = ["ViewAggregationSpec", "aggregate", "infer", "plane_probabilities"]


@dataclass(frozen=True)
class ViewAggregationSpec:
    weights: dict[str, float] = field(default_factory=lambda: {"axial": 1.0, "coronal": 1.0, "sagittal": 0.5})
    table: LabelTable = DEFAULT_TABLE

    def __post_init__(self) -> None:
        if any(w <= 0 for w in self.weights.values()):
            raise ValueError("view weights must be > 0")

    @property
    def sagittal_unmap(self) -> dict[int, list[int]]:
        return self.table.sagittal_members()

    def only(self, *planes: str) -> ViewAggregationSpec:
        return ViewAggregationSpec({p: self.weights[p] for p in planes}, self.table)


def plane_probabilities(
    net: SegNet, image: np.ndarray, res: float, plane: str, batch: int = 32
) -> np.ndarray:
    """Softmax volume ``(classes, nz, ny, nx)`` from slice-wise prediction along ``plane``."""
    if res is None or res <= 0:
        raise ValueError("resolution metadata is required for inference")
    thickness = net.cfg.in_channels
    slices = [img for _, img, _ in slice_iter(image, plane, thickness=thickness)]
    x = np.stack([s[None] if s.ndim == 2 else s for s in slices]).astype(np.float32)
    probs = net.predict(torch.from_numpy(x), res, batch=batch).numpy()
    # probs: (n_slices, C, a, b) with the slicing axis first
    vol = np.moveaxis(probs, 0, 1)  # (C, n_slices, a, b)
    return np.moveaxis(vol, 1, 1 + PLANE_AXIS[plane])


def aggregate(prob_maps: dict[str, np.ndarray], spec: ViewAggregationSpec) -> np.ndarray:
    """Weighted mean of per-plane softmax volumes over the full label set.

    Sagittal maps (merged scheme) are expanded by copying each merged-class
    probability to every lateralized member.
    """
    if not prob_maps:
        raise ValueError("no plane predictions to aggregate")
    lut = spec.table.sagittal_lut()
    total = None
    wsum = 0.0
    for plane, p in prob_maps.items():
        w = spec.weights[plane]
        if plane == "sagittal" and p.shape[0] != spec.table.num_classes:
            p = p[lut]
        total = w * p if total is None else total + w * p
        wsum += w
    return total / wsum


def infer(
    nets: dict[str, SegNet], image: np.ndarray, res: float, spec: ViewAggregationSpec = ViewAggregationSpec()
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Aggregated label volume plus the per-plane probability volumes."""
    maps = {plane: plane_probabilities(nets[plane], image, res, plane) for plane in spec.weights if plane in nets}
    missing = set(spec.weights) - set(maps)
    if missing:
        raise ValueError(f"no checkpoint for planes {sorted(missing)}")
    agg = aggregate(maps, spec)
    return agg.argmax(axis=0).astype(np.uint16), maps


def plane_labels(prob: np.ndarray, plane: str, table: LabelTable = DEFAULT_TABLE) -> np.ndarray:
    """Argmax of one plane's probabilities in the full label scheme."""
    if plane == "sagittal" and prob.shape[0] != table.num_classes:
        prob = prob[table.sagittal_lut()]
    return prob.argmax(axis=0).astype(np.uint16)
