"""Segmentation overlap/distance metrics and paired significance testing.

DSC is reported on a 0-100 scale.  ASD uses voxel centers of border voxels
(mask voxels with at least one face neighbour outside the mask; the volume
boundary counts as outside).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

__all__ = [
    "BHResult",
    "PairedTestResult",
    "StructureScore",
    "WilcoxonResult",
    "asd",
    "benjamini_hochberg",
    "border",
    "dsc",
    "paired_tests",
    "wilcoxon_signed_rank",
]

EXACT_MAX_N = 25


@dataclass(frozen=True)
class StructureScore:
    label_id: int
    dsc: float
    asd: float  # nan when either mask is empty


def _check_same(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"extent mismatch {a.shape} vs {b.shape}")


def dsc(a: np.ndarray, b: np.ndarray, label: int | None = None) -> float:
    """``100 * 2|A and B| / (|A| + |B|)``; 100 when both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same(a, b)
    ma = a == label if label is not None else a.astype(bool)
    mb = b == label if label is not None else b.astype(bool)
    na, nb = int(ma.sum()), int(mb.sum())
    if na + nb == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.count_nonzero(ma & mb)) / (na + nb)


def border(mask: np.ndarray) -> np.ndarray:
    """Mask voxels with a face-adjacent non-mask neighbour."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return mask.copy()
    struct = ndimage.generate_binary_structure(mask.ndim, 1)
    return mask & ~ndimage.binary_erosion(mask, structure=struct, border_value=0)


def asd(a: np.ndarray, b: np.ndarray, label: int | None = None, spacing=1.0) -> float:
    """Average symmetric surface distance in mm (``nan`` if either mask is empty)."""
    a = np.asarray(a)
    b = np.asarray(b)
    _check_same(a, b)
    ma = a == label if label is not None else a.astype(bool)
    mb = b == label if label is not None else b.astype(bool)
    if not ma.any() or not mb.any():
        return math.nan
    ba, bb = border(ma), border(mb)
    sampling = np.broadcast_to(np.asarray(spacing, dtype=np.float64), (a.ndim,))
    # EDT of the complement gives the distance to the nearest border voxel center.
    d_to_b = ndimage.distance_transform_edt(~bb, sampling=sampling)
    d_to_a = ndimage.distance_transform_edt(~ba, sampling=sampling)
    total = d_to_b[ba].sum() + d_to_a[bb].sum()
    return float(total / (ba.sum() + bb.sum()))


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float  # sum of positive ranks
    p: float
    n: int
    method: str  # "exact", "normal" or "degenerate"

    @property
    def degenerate(self) -> bool:
        return self.method == "degenerate"


def _exact_upper_tail(ranks2: np.ndarray, w2: int) -> tuple[float, float]:
    """P(W <= w) and P(W >= w) under the sign-flip null, ranks given doubled (integers)."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2:
        r = int(r)
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    counts /= counts.sum()
    return float(counts[: w2 + 1].sum()), float(counts[w2:].sum())


def wilcoxon_signed_rank(x, y) -> WilcoxonResult:
    """Two-sided paired signed-rank test.

    Zero differences are dropped.  Exact null distribution (with mid-ranks for
    ties) for ``n <= 25``; normal approximation with tie correction above.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("paired samples must be 1D and of equal length")
    d = x - y
    d = d[d != 0]
    n = d.size
    if n == 0:
        return WilcoxonResult(math.nan, math.nan, 0, "degenerate")
    ranks = stats.rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if n <= EXACT_MAX_N:
        ranks2 = np.rint(2 * ranks).astype(np.int64)
        lo, hi = _exact_upper_tail(ranks2, int(round(2 * w_plus)))
        p = min(1.0, 2.0 * min(lo, hi))
        return WilcoxonResult(w_plus, p, n, "exact")
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_counts**3 - tie_counts).sum() / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = min(1.0, 2.0 * stats.norm.sf(abs(z)))
    return WilcoxonResult(w_plus, float(p), n, "normal")


@dataclass(frozen=True)
class BHResult:
    adjusted: np.ndarray
    rejected: np.ndarray
    alpha: float


def benjamini_hochberg(p, alpha: float = 0.05) -> BHResult:
    """Step-up FDR adjustment: ``adj_(i) = min_{j >= i} m p_(j) / j`` capped at 1.

    ``nan`` entries (degenerate tests) are carried through and never rejected.
    """
    p = np.asarray(p, dtype=np.float64)
    valid = ~np.isnan(p)
    pv = p[valid]
    if np.any((pv < 0) | (pv > 1)):
        raise ValueError("p-values must lie in [0, 1]")
    adjusted = np.full(p.shape, np.nan)
    rejected = np.zeros(p.shape, dtype=bool)
    m = pv.size
    if m:
        order = np.argsort(pv, kind="stable")
        scaled = pv[order] * m / np.arange(1, m + 1)
        adj_sorted = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
        adj = np.empty(m)
        adj[order] = adj_sorted
        below = np.nonzero(pv[order] <= alpha * np.arange(1, m + 1) / m)[0]
        rej = np.zeros(m, dtype=bool)
        if below.size:
            rej[order[: below.max() + 1]] = True
        adjusted[valid] = adj
        rejected[valid] = rej
    return BHResult(adjusted, rejected, alpha)


@dataclass(frozen=True)
class PairedTestResult:
    names: tuple[str, ...]
    raw_p: np.ndarray
    adjusted_p: np.ndarray
    rejected: np.ndarray
    alpha: float


def paired_tests(a: dict[str, np.ndarray], b: dict[str, np.ndarray], alpha: float = 0.05) -> PairedTestResult:
    """Wilcoxon per key of ``a``/``b`` followed by BH correction across keys."""
    names = tuple(a)
    raw = np.array([wilcoxon_signed_rank(a[k], b[k]).p for k in names])
    bh = benjamini_hochberg(raw, alpha)
    return PairedTestResult(names, raw, bh.adjusted, bh.rejected, alpha)
