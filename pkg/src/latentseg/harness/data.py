"""Slice datasets rendered from a phantom manifest."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from ..labels import DEFAULT_TABLE, LabelTable
from ..loss import WeightConfig, build_weight_map
from ..phantom import Manifest, ManifestEntry, render_entry, slice_iter

__all__ = ["SliceRecord", "Volume", "batches", "load_volumes", "plane_slices", "plane_table"]


@dataclass(frozen=True)
class Volume:
    subject: str
    image: np.ndarray
    labels: np.ndarray
    res: float


@dataclass
class SliceRecord:
    subject: str
    index: int
    image: np.ndarray  # (c, h, w) float32
    labels: np.ndarray  # (h, w) int64, class indices of the plane's scheme
    res: float
    weights: np.ndarray | None = None


@lru_cache(maxsize=256)
def _render_cached(entry: ManifestEntry) -> tuple[np.ndarray, np.ndarray]:
    img, lab = render_entry(entry)
    img.setflags(write=False)
    lab.setflags(write=False)
    return img, lab


def load_volumes(entries: list[ManifestEntry]) -> list[Volume]:
    out = []
    for e in entries:
        img, lab = _render_cached(e)
        out.append(Volume(e.subject, img, lab, e.res))
    return out


def plane_table(plane: str, table: LabelTable = DEFAULT_TABLE) -> LabelTable:
    return table.sagittal_table() if plane == "sagittal" else table


def plane_slices(
    volumes: list[Volume],
    plane: str,
    thickness: int = 1,
    weight_cfg: WeightConfig | None = None,
    max_per_volume: int = 0,
    table: LabelTable = DEFAULT_TABLE,
) -> list[SliceRecord]:
    """Non-empty slices of every volume; weight maps precomputed when ``weight_cfg`` is given.

    ``max_per_volume`` keeps an evenly spaced subset (0 keeps all).
    """
    ptable = plane_table(plane, table)
    out: list[SliceRecord] = []
    for vol in volumes:
        recs = []
        for i, img, lab in slice_iter(vol.image, plane, vol.labels, drop_empty=True, table=table, thickness=thickness):
            img = img[None] if img.ndim == 2 else img
            recs.append(SliceRecord(vol.subject, i, np.ascontiguousarray(img, dtype=np.float32), lab.astype(np.int64), vol.res))
        if max_per_volume and len(recs) > max_per_volume:
            keep = np.unique(np.linspace(0, len(recs) - 1, max_per_volume).round().astype(int))
            recs = [recs[k] for k in keep]
        out.extend(recs)
    if weight_cfg is not None:
        for r in out:
            r.weights = build_weight_map(r.labels, ptable, weight_cfg).omega.astype(np.float32)
    return out


def batches(records: list[SliceRecord], batch_size: int, rng: np.random.Generator) -> list[list[int]]:
    """Shuffled batches of record indices, each drawn from a single resolution."""
    by_res: dict[float, list[int]] = {}
    for i, r in enumerate(records):
        by_res.setdefault(r.res, []).append(i)
    out = []
    for res in sorted(by_res):
        idx = np.array(by_res[res])
        idx = idx[rng.permutation(idx.size)]
        out.extend(idx[k : k + batch_size].tolist() for k in range(0, idx.size, batch_size))
    order = rng.permutation(len(out))
    return [out[k] for k in order]
