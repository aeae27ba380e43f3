"""Per-subject, per-structure scoring and method comparison reports.

Report format (tab separated, UTF-8)::

    # latentseg-report v1
    subject  method  structure  label  group  dsc  asd_mm
    ...                                        (one row per subject x structure x method)
    # summary
    # group-mean  method  group  dsc  asd_mm
    # paired  method_a  method_b  metric  structure  n  raw_p  adjusted_p  rejected

``dsc`` is on a 0-100 scale; ``asd_mm`` is ``nan`` when a structure is empty
in either volume.  Paired rows are Wilcoxon signed-rank tests over subjects,
BH-corrected across structures within one (method pair, metric).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..labels import DEFAULT_TABLE, HarmonizationMap, LabelTable, harmonize
from ..metrics import asd, benjamini_hochberg, dsc, wilcoxon_signed_rank

__all__ = ["MetricsReport", "ScoreRow", "evaluate", "compare"]

REPORT_HEADER = "# latentseg-report v1"
REPORT_COLUMNS = ("subject", "method", "structure", "label", "group", "dsc", "asd_mm")


@dataclass(frozen=True)
class ScoreRow:
    subject: str
    method: str
    structure: str
    label: int
    group: str
    dsc: float
    asd: float


@dataclass(frozen=True)
class PairedRow:
    method_a: str
    method_b: str
    metric: str
    structure: str
    n: int
    raw_p: float
    adjusted_p: float
    rejected: bool


@dataclass
class MetricsReport:
    rows: list[ScoreRow] = field(default_factory=list)
    paired: list[PairedRow] = field(default_factory=list)

    @property
    def methods(self) -> list[str]:
        return list(dict.fromkeys(r.method for r in self.rows))

    def values(self, method: str, metric: str = "dsc", group: str | None = None) -> np.ndarray:
        """Per-subject means over the selected structures, in subject order."""
        per: dict[str, list[float]] = {}
        for r in self.rows:
            if r.method == method and (group is None or r.group == group):
                per.setdefault(r.subject, []).append(getattr(r, metric))
        return np.array([_nanmean(v) for v in per.values()])

    def structure_values(self, method: str, metric: str = "dsc") -> dict[str, np.ndarray]:
        out: dict[str, list[float]] = {}
        for r in self.rows:
            if r.method == method:
                out.setdefault(r.structure, []).append(getattr(r, metric))
        return {k: np.array(v) for k, v in out.items()}

    def group_means(self, method: str, metric: str = "dsc") -> dict[str, float]:
        groups = dict.fromkeys(r.group for r in self.rows if r.method == method)
        out = {g: _nanmean([getattr(r, metric) for r in self.rows if r.method == method and r.group == g])
               for g in groups}
        out["all"] = _nanmean([getattr(r, metric) for r in self.rows if r.method == method])
        return out

    def dumps(self) -> str:
        lines = [REPORT_HEADER, "\t".join(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append(f"{r.subject}\t{r.method}\t{r.structure}\t{r.label}\t{r.group}\t{r.dsc:.4f}\t{r.asd:.4f}")
        lines.append("# summary")
        for m in self.methods:
            gd = self.group_means(m, "dsc")
            ga = self.group_means(m, "asd")
            for g in gd:
                lines.append(f"# group-mean\t{m}\t{g}\t{gd[g]:.4f}\t{ga[g]:.4f}")
        for p in self.paired:
            lines.append(
                f"# paired\t{p.method_a}\t{p.method_b}\t{p.metric}\t{p.structure}\t{p.n}\t"
                f"{p.raw_p:.6g}\t{p.adjusted_p:.6g}\t{int(p.rejected)}"
            )
        return "\n".join(lines) + "\n"


def _nanmean(values) -> float:
    """Mean ignoring ``nan``; ``nan`` (without a warning) when nothing is left."""
    v = np.asarray(values, dtype=np.float64)
    v = v[~np.isnan(v)]
    return float(v.mean()) if v.size else float("nan")


def _group(table: LabelTable, label: int) -> str:
    return table.entries[label].cls


def evaluate(
    predictions: dict[str, np.ndarray],
    references: dict[str, np.ndarray],
    spacing: dict[str, float] | float = 1.0,
    method: str = "method",
    table: LabelTable = DEFAULT_TABLE,
    harmonization: HarmonizationMap | None = None,
    labels: list[int] | None = None,
) -> MetricsReport:
    """Score every foreground structure of every subject."""
    if set(predictions) != set(references):
        raise ValueError("prediction and reference subject lists differ")
    labels = table.foreground_ids if labels is None else labels
    rows = []
    for subject in sorted(references):
        pred, ref = predictions[subject], references[subject]
        if harmonization is not None:
            pred = harmonize(pred, harmonization, ref)
            ref = harmonize(ref, harmonization, ref)
        sp = spacing[subject] if isinstance(spacing, dict) else spacing
        for k in labels:
            rows.append(ScoreRow(subject, method, table.entries[k].name, k, _group(table, k),
                                 dsc(pred, ref, k), asd(pred, ref, k, sp)))
    return MetricsReport(rows)


def compare(report: MetricsReport, method_a: str, method_b: str, metric: str = "dsc", alpha: float = 0.05) -> list[PairedRow]:
    """Per-structure Wilcoxon tests between two methods, BH-corrected across structures.

    Structure-group means and the overall per-subject mean are appended as
    additional rows (corrected together with the structures).
    """
    va = report.structure_values(method_a, metric)
    vb = report.structure_values(method_b, metric)
    names = list(va)
    samples = [(va[k], vb[k]) for k in names]
    groups = dict.fromkeys(r.group for r in report.rows if r.method == method_a)
    for g in groups:
        names.append(f"group:{g}")
        samples.append((report.values(method_a, metric, g), report.values(method_b, metric, g)))
    names.append("all")
    samples.append((report.values(method_a, metric), report.values(method_b, metric)))
    results = []
    for a, b in samples:
        keep = ~(np.isnan(a) | np.isnan(b))
        results.append(wilcoxon_signed_rank(a[keep], b[keep]))
    raw = np.array([r.p for r in results])
    bh = benjamini_hochberg(raw, alpha)
    rows = [
        PairedRow(method_a, method_b, metric, n, r.n, r.p, float(adj), bool(rej))
        for n, r, adj, rej in zip(names, results, bh.adjusted, bh.rejected)
    ]
    report.paired.extend(rows)
    return rows
