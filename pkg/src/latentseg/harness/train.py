"""Per-plane training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from ..architecture import SegNet, load_checkpoint, save_checkpoint
from ..augment import apply_external, apply_intensity, sample_external, sample_internal, sample_rng
from ..labels import DEFAULT_TABLE
from ..loss import build_weight_map, composite_loss, one_hot
from ..metrics import dsc
from ..phantom import Manifest
from .config import RunConfig, lr_at
from .data import SliceRecord, batches, load_volumes, plane_slices, plane_table
from .infer import plane_probabilities

__all__ = ["TrainResult", "train", "train_plane"]

log = logging.getLogger(__name__)

METRICS_HEADER = "# latentseg-train v1"
METRICS_COLUMNS = ("plane", "epoch", "lr", "loss", "logistic", "dice", "val_dsc")


class NonFiniteLoss(RuntimeError):
    pass


@dataclass
class TrainResult:
    plane: str
    checkpoint: Path
    best_epoch: int
    best_val_dsc: float
    rows: list[tuple]


def _validate(net: SegNet, volumes, plane: str) -> float:
    """Mean foreground DSC of one plane's predictions, in that plane's label scheme."""
    table = plane_table(plane)
    scores = []
    for vol in volumes:
        pred = plane_probabilities(net, vol.image, vol.res, plane).argmax(axis=0)
        ref = DEFAULT_TABLE.to_sagittal(vol.labels) if plane == "sagittal" else vol.labels
        for k in table.foreground_ids:
            scores.append(dsc(pred, ref, k))
    return float(np.mean(scores)) if scores else math.nan


def _augmented_batch(cfg: RunConfig, recs: list[SliceRecord], ids: list[int], epoch: int, batch_no: int, table):
    ext = cfg.external()
    internal = cfg.internal()
    images, labels, weights, augs = [], [], [], []
    for sid in ids:
        r = recs[sid]
        rng = sample_rng(cfg.seed, epoch, sid)
        img, lab, w = r.image, r.labels, r.weights
        if cfg.uses_external:
            img, lab = apply_external(img, lab, sample_external(ext, rng))
            w = build_weight_map(lab, table, cfg.weights()).omega.astype(np.float32)
        augs.append(sample_internal(internal, rng))
        images.append(img)
        labels.append(lab)
        weights.append(w)
    x = np.stack(images).astype(np.float64)
    x = apply_intensity(x, cfg.intensity(), sample_rng(cfg.seed, epoch, 10**9 + batch_no)).astype(np.float32)
    return x, np.stack(labels), np.stack(weights), augs


def train_plane(
    cfg: RunConfig,
    manifest: Manifest,
    plane: str,
    out_dir: str | Path,
) -> TrainResult:
    torch.set_num_threads(cfg.threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = plane_table(plane)
    train_vols = load_volumes(manifest.split("train"))
    val_vols = load_volumes(manifest.split("val"))
    recs = plane_slices(
        train_vols, plane, cfg.thickness, None if cfg.uses_external else cfg.weights(), cfg.max_slices_per_volume
    )
    if not recs:
        raise ValueError(f"no non-empty {plane} slices in the training split")

    net = SegNet(cfg.network(plane, table.num_classes), seed=cfg.seed)
    opt = torch.optim.AdamW(
        net.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), weight_decay=cfg.weight_decay
    )
    ckpt = out_dir / f"{plane}.ckpt"
    best = (-math.inf, -1)
    rows = []
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg.lr, cfg.t0, cfg.t_mult, cfg.eta_min)
        for group in opt.param_groups:
            group["lr"] = lr
        net.train()
        sums = np.zeros(3)
        n_seen = 0
        for b, ids in enumerate(batches(recs, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))):
            x, y, w, augs = _augmented_batch(cfg, recs, ids, epoch, b, table)
            res = recs[ids[0]].res
            onehot = torch.from_numpy(one_hot(y, table.num_classes))
            probs = net(torch.from_numpy(x), res, None if cfg.variant == "CNN*" else augs)
            value = composite_loss(probs, onehot, torch.from_numpy(w), check=False)
            if not torch.isfinite(value.total):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}, batch {b} ({plane}, res {res})")
            opt.zero_grad()
            value.total.backward()
            opt.step()
            k = len(ids)
            sums += k * np.array([value.total.item(), value.logistic_term.item(), value.dice_term.item()])
            n_seen += k
        val = _validate(net, val_vols, plane) if val_vols else math.nan
        row = (plane, epoch, lr, *(sums / n_seen), val)
        rows.append(row)
        log.info("%s epoch %d lr %.6f loss %.4f val_dsc %.2f", plane, epoch, lr, row[3], val)
        if val > best[0] or best[1] < 0:
            best = (val, epoch)
            save_checkpoint(net, ckpt, {"plane": plane, "epoch": epoch, "val_dsc": round(val, 6), "arm": cfg.arm})
    return TrainResult(plane, ckpt, best[1], best[0], rows)


def format_metrics(rows: list[tuple]) -> str:
    lines = [METRICS_HEADER, "\t".join(METRICS_COLUMNS)]
    for plane, epoch, lr, loss, logi, dice, val in rows:
        lines.append(f"{plane}\t{epoch}\t{lr!r}\t{loss:.6f}\t{logi:.6f}\t{dice:.6f}\t{val:.4f}")
    return "\n".join(lines) + "\n"


def train(cfg: RunConfig, out_dir: str | Path, manifest: Manifest | None = None) -> dict[str, TrainResult]:
    """Train one network per configured plane; writes checkpoints and ``train_metrics.tsv``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if manifest is None:
        path = Path(cfg.manifest)
        if not path.exists():
            raise FileNotFoundError(f"manifest {path} does not exist")
        manifest = Manifest.read(path)
    results = {plane: train_plane(cfg, manifest, plane, out_dir) for plane in cfg.planes}
    rows = [r for res in results.values() for r in res.rows]
    (out_dir / "train_metrics.tsv").write_text(format_metrics(rows))
    cfg.write(out_dir / "run.cfg")
    return results


def load_planes(out_dir: str | Path, planes) -> dict[str, SegNet]:
    return {p: load_checkpoint(Path(out_dir) / f"{p}.ckpt")[0] for p in planes}
