"""Lateralized label tables and label harmonization maps."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

__all__ = [
    "DEFAULT_TABLE",
    "HarmonizationMap",
    "LabelEntry",
    "LabelTable",
    "harmonize",
]

Hemisphere = Literal["left", "right", "none"]
TissueClass = Literal["cortex", "wm", "subcortical", "csf", "background"]


@dataclass(frozen=True)
class LabelEntry:
    id: int
    name: str
    hemisphere: Hemisphere = "none"
    cls: TissueClass = "background"


@dataclass(frozen=True)
class LabelTable:
    """Ordered label entries; ids double as network class indices.

    ``sagittal_map`` sends every id to its non-lateralized id in the merged
    scheme used by the sagittal view.
    """

    entries: tuple[LabelEntry, ...]
    sagittal_map: dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [e.id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("label ids must be 0..n-1 in order")
        by_name = {e.name: e for e in self.entries}
        for e in self.entries:
            if e.hemisphere != "none" and self._partner_name(e.name) not in by_name:
                raise ValueError(f"lateralized label {e.name!r} has no mirror partner")
        if self.sagittal_map:
            if set(self.sagittal_map) != set(ids):
                raise ValueError("sagittal map must cover every id")
            merged = sorted(set(self.sagittal_map.values()))
            if merged != list(range(len(merged))):
                raise ValueError("sagittal ids must be 0..k-1 and all used")

    @staticmethod
    def _partner_name(name: str) -> str:
        if name.endswith("_L"):
            return name[:-2] + "_R"
        if name.endswith("_R"):
            return name[:-2] + "_L"
        return name

    @property
    def num_classes(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.id for e in self.entries]

    @property
    def foreground_ids(self) -> list[int]:
        return [e.id for e in self.entries if e.cls != "background"]

    def by_name(self, name: str) -> LabelEntry:
        for e in self.entries:
            if e.name == name:
                return e
        raise KeyError(name)

    def partner(self, label_id: int) -> int:
        return self.by_name(self._partner_name(self.entries[label_id].name)).id

    def ids_of_class(self, cls: TissueClass) -> list[int]:
        return [e.id for e in self.entries if e.cls == cls]

    def check_indices(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            bad = np.setdiff1d(np.unique(labels), self.ids)
            raise ValueError(f"unknown label ids {bad.tolist()}")

    def class_mask(self, labels: np.ndarray, cls: TissueClass) -> np.ndarray:
        return np.isin(labels, self.ids_of_class(cls))

    # merged (sagittal) scheme -------------------------------------------------

    @property
    def num_sagittal(self) -> int:
        return len(set(self.sagittal_map.values()))

    def sagittal_lut(self) -> np.ndarray:
        lut = np.zeros(self.num_classes, dtype=np.int64)
        for k, v in self.sagittal_map.items():
            lut[k] = v
        return lut

    def to_sagittal(self, labels: np.ndarray) -> np.ndarray:
        return self.sagittal_lut()[np.asarray(labels)]

    def sagittal_members(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {}
        for k in self.ids:
            out.setdefault(self.sagittal_map[k], []).append(k)
        return out

    def sagittal_table(self) -> LabelTable:
        entries = []
        for merged, members in sorted(self.sagittal_members().items()):
            first = self.entries[members[0]]
            name = first.name[:-2] if first.hemisphere != "none" else first.name
            entries.append(LabelEntry(merged, name, "none", first.cls))
        return LabelTable(tuple(entries), {e.id: e.id for e in entries})


def _default_table() -> LabelTable:
    entries = (
        LabelEntry(0, "background", "none", "background"),
        LabelEntry(1, "csf", "none", "csf"),
        LabelEntry(2, "cortex_L", "left", "cortex"),
        LabelEntry(3, "cortex_R", "right", "cortex"),
        LabelEntry(4, "wm_L", "left", "wm"),
        LabelEntry(5, "wm_R", "right", "wm"),
        LabelEntry(6, "thalamus_L", "left", "subcortical"),
        LabelEntry(7, "thalamus_R", "right", "subcortical"),
        LabelEntry(8, "caudate_L", "left", "subcortical"),
        LabelEntry(9, "caudate_R", "right", "subcortical"),
    )
    sag = {0: 0, 1: 1, 2: 2, 3: 2, 4: 3, 5: 3, 6: 4, 7: 4, 8: 5, 9: 5}
    return LabelTable(entries, sag)


DEFAULT_TABLE = _default_table()


@dataclass(frozen=True)
class HarmonizationMap:
    """Merge, remove and mask rules reconciling two labelling protocols.

    ``merges`` maps groups of source ids onto one target id, ``removals`` are
    sent to background, and ``masks`` are voided (set to ``void``) wherever a
    reference volume carries one of those ids.
    """

    merges: tuple[tuple[frozenset[int], int], ...] = ()
    removals: frozenset[int] = frozenset()
    masks: frozenset[int] = frozenset()
    known_ids: frozenset[int] | None = None
    background: int = 0
    void: int = 0

    def __post_init__(self) -> None:
        seen: set[int] = set()
        groups = [set(src) for src, _ in self.merges] + [set(self.removals)]
        for g in groups:
            if seen & g:
                raise ValueError(f"harmonization rules overlap on ids {sorted(seen & g)}")
            seen |= g
        for src, tgt in self.merges:
            if tgt in seen and tgt not in src:
                raise ValueError(f"merge target {tgt} is remapped by another rule")

    def lut(self, max_id: int) -> np.ndarray:
        lut = np.arange(max_id + 1)
        for src, tgt in self.merges:
            for s in src:
                if s <= max_id:
                    lut[s] = tgt
        for r in self.removals:
            if r <= max_id:
                lut[r] = self.background
        return lut


def harmonize(labels: np.ndarray, hmap: HarmonizationMap, reference: np.ndarray | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    present = np.unique(labels)
    if hmap.known_ids is not None:
        unknown = set(present.tolist()) - set(hmap.known_ids)
        if unknown:
            raise ValueError(f"unmapped label ids {sorted(unknown)}")
    if present.size and present.min() < 0:
        raise ValueError("negative label ids")
    max_id = int(max(present.max(initial=0), *(t for _, t in hmap.merges), 0))
    out = hmap.lut(max_id)[labels].astype(labels.dtype)
    if hmap.masks:
        if reference is None:
            raise ValueError("mask rules need a reference volume")
        reference = np.asarray(reference)
        if reference.shape != labels.shape:
            raise ValueError("reference extent differs from labels")
        out[np.isin(reference, list(hmap.masks))] = hmap.void
    return out
