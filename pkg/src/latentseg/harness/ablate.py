"""Four-arm comparison of external versus in-network spatial augmentation.

All arms share the manifest, seeds, widths and epoch budget; they differ only
in variant and augmentation arm.  Test phantoms are drawn with rotations
outside the training range so that pose generalization is what is measured.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path

import numpy as np

from ..phantom import Manifest, PosePolicy, generate_split
from .config import RunConfig
from .data import load_volumes
from .evaluate import MetricsReport, compare, evaluate
from .infer import ViewAggregationSpec, infer, plane_labels
from .train import load_planes, train

__all__ = ["ABLATION_ARMS", "AblationArm", "AblationResult", "ablate", "held_out_manifest"]

log = logging.getLogger(__name__)

AGGREGATE = "aggregate"


@dataclass(frozen=True)
class AblationArm:
    name: str
    variant: str
    arm: str

    @property
    def slug(self) -> str:
        return self.name.replace("*", "star").replace("+", "_").lower()


ABLATION_ARMS = (
    AblationArm("CNN*+exA", "CNN*", "exa"),
    AblationArm("VINN+exA", "VINN", "exa"),
    AblationArm("VINNA", "VINNA", "internal"),
    AblationArm("VINNA+exA", "VINNA", "internal-exa"),
)


@dataclass
class AblationResult:
    """``report`` scores the ``primary`` view of every arm; ``views`` holds every view."""

    report: MetricsReport
    views: dict[str, MetricsReport]
    primary: str
    manifest: Manifest
    seconds: float = 0.0
    train_seconds: dict[str, float] = field(default_factory=dict)

    def mean_dsc(self, arm: str, view: str | None = None) -> float:
        rep = self.views[view or self.primary]
        return rep.group_means(arm)["all"]

    def view_means(self, arm: str) -> dict[str, float]:
        return {v: rep.group_means(arm)["all"] for v, rep in self.views.items()}

    def resolution_means(self, arm: str, metric: str = "dsc") -> dict[float, dict[str, float]]:
        res_of = {e.subject: e.res for e in self.manifest.split("test")}
        out: dict[float, dict[str, float]] = {}
        for res in sorted(set(res_of.values())):
            sub = MetricsReport([r for r in self.report.rows if r.method == arm and res_of[r.subject] == res])
            out[res] = sub.group_means(arm, metric)
        return out

    def paired(self, a: str, b: str, structure: str = "all", metric: str = "dsc"):
        for p in self.report.paired:
            if {p.method_a, p.method_b} == {a, b} and p.structure == structure and p.metric == metric:
                return p
        raise KeyError(f"no paired test for {a} vs {b} ({structure}, {metric})")

    def dumps(self) -> str:
        text = self.report.dumps()
        lines = []
        for arm in self.report.methods:
            for res, groups in self.resolution_means(arm).items():
                asd = self.resolution_means(arm, "asd")[res]
                for g in groups:
                    lines.append(f"# resolution-mean\t{arm}\t{res!r}\t{g}\t{groups[g]:.4f}\t{asd[g]:.4f}")
        for arm in self.report.methods:
            for view, v in self.view_means(arm).items():
                lines.append(f"# view-mean\t{arm}\t{view}\t{v:.4f}")
        lines.append(f"# primary-view\t{self.primary}")
        return text + "\n".join(lines) + "\n"


def held_out_manifest(
    n_train: int = 12, n_val: int = 3, n_test: int = 21, seed: int = 0, pose_policy: PosePolicy = PosePolicy()
) -> Manifest:
    """Train/val poses within the training range, test poses outside it, three resolutions."""
    return generate_split(n_train, n_val, n_test, pose_policy, (0.5, 0.8, 1.0), seed)


def ablate(
    base: RunConfig,
    out_dir: str | Path,
    manifest: Manifest | None = None,
    arms: tuple[AblationArm, ...] = ABLATION_ARMS,
    primary: str = AGGREGATE,
) -> AblationResult:
    """Train every arm, evaluate every view on the test split, write ``ablation_report.tsv``."""
    start = time.perf_counter()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        path = Path(base.manifest)
        manifest = Manifest.read(path) if path.exists() else held_out_manifest(seed=base.seed)
    manifest.write(out_dir / "manifest.tsv")
    if primary != AGGREGATE and primary not in base.planes:
        raise ValueError(f"primary view {primary!r} is not among the trained planes {base.planes}")

    test = load_volumes(manifest.split("test"))
    spacing = {v.subject: v.res for v in test}
    refs = {v.subject: v.labels for v in test}
    spec = ViewAggregationSpec(dict(zip(("axial", "coronal", "sagittal"), base.view_weights))).only(*base.planes)

    views: dict[str, MetricsReport] = {}
    train_seconds = {}
    for arm in arms:
        cfg = base.with_(variant=arm.variant, arm=arm.arm)
        t0 = time.perf_counter()
        train(cfg, out_dir / arm.slug, manifest)
        train_seconds[arm.name] = time.perf_counter() - t0
        log.info("trained %s in %.1f s", arm.name, train_seconds[arm.name])
        nets = load_planes(out_dir / arm.slug, base.planes)
        preds: dict[str, dict[str, np.ndarray]] = {AGGREGATE: {}, **{p: {} for p in base.planes}}
        for vol in test:
            labels, maps = infer(nets, vol.image, vol.res, spec)
            preds[AGGREGATE][vol.subject] = labels
            for p, prob in maps.items():
                preds[p][vol.subject] = plane_labels(prob, p)
        for view, pred in preds.items():
            rep = evaluate(pred, refs, spacing, method=arm.name)
            views.setdefault(view, MetricsReport()).rows.extend(rep.rows)

    report = views[primary]
    for a, b in combinations([arm.name for arm in arms], 2):
        compare(report, a, b, "dsc")
        compare(report, a, b, "asd")
    result = AblationResult(report, views, primary, manifest, time.perf_counter() - start, train_seconds)
    (out_dir / "ablation_report.tsv").write_text(result.dumps())
    return result
