"""Command line entry point: ``latentseg <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import torch

from .harness.ablate import AGGREGATE, ablate, held_out_manifest
from .harness.config import ARMS, PLANES, ConfigError, RunConfig
from .harness.evaluate import compare, evaluate
from .harness.infer import ViewAggregationSpec, infer
from .harness.train import NonFiniteLoss, load_planes, train
from .phantom import Manifest, PosePolicy, VolumeFile, generate_split, read_volume, render_entry, write_volume

log = logging.getLogger("latentseg")


def image_path(directory: Path, subject: str) -> Path:
    return directory / f"{subject}_image.vol"


def labels_path(directory: Path, subject: str) -> Path:
    return directory / f"{subject}_labels.vol"


def _load_config(args) -> RunConfig:
    overrides = {"seed": args.seed, "threads": args.threads, "arm": getattr(args, "arm", None)}
    if getattr(args, "plane", None):
        overrides["planes"] = (args.plane,)
    if args.config:
        return RunConfig.read(args.config, **overrides)
    return RunConfig(**{k: v for k, v in overrides.items() if v is not None})


def cmd_phantom_gen(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    policy = PosePolicy((0.0, args.train_rot), (args.test_rot_min, args.test_rot_max), args.max_shift)
    manifest = generate_split(args.n_train, args.n_val, args.n_test, policy, tuple(args.res), args.seed or 0,
                              args.modality)
    manifest.write(out / "manifest.tsv")
    if args.write_volumes:
        for e in manifest.entries:
            img, lab = render_entry(e)
            write_volume(image_path(out, e.subject), VolumeFile(img, e.res, e.seed, e.pose))
            write_volume(labels_path(out, e.subject), VolumeFile(lab, e.res, e.seed, e.pose))
    print(f"wrote {len(manifest.entries)} entries to {out / 'manifest.tsv'}")


def cmd_train(args) -> None:
    cfg = _load_config(args)
    torch.set_num_threads(cfg.threads)
    results = train(cfg, args.out)
    for plane, r in results.items():
        print(f"{plane}: best epoch {r.best_epoch}, val DSC {r.best_val_dsc:.2f} -> {r.checkpoint}")


def _inputs(args) -> list[tuple[str, VolumeFile]]:
    if args.image:
        return [(Path(p).name.removesuffix(".vol").removesuffix("_image"), read_volume(p)) for p in args.image]
    manifest = Manifest.read(args.manifest)
    out = []
    for e in manifest.split(args.split):
        img, _ = render_entry(e)
        out.append((e.subject, VolumeFile(img, e.res, e.seed, e.pose)))
    return out


def cmd_infer(args) -> None:
    cfg = _load_config(args)
    torch.set_num_threads(cfg.threads)
    weights = dict(zip(PLANES, cfg.view_weights))
    spec = ViewAggregationSpec(weights).only(*cfg.planes)
    nets = load_planes(args.checkpoints, cfg.planes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for subject, vf in _inputs(args):
        labels, _ = infer(nets, vf.data, vf.voxel_size, spec)
        write_volume(labels_path(out, subject), VolumeFile(labels, vf.voxel_size, vf.seed, vf.pose))
        print(f"{subject}: {labels_path(out, subject)}")


def cmd_eval(args) -> None:
    manifest = Manifest.read(args.manifest)
    entries = manifest.split(args.split)
    refs = {e.subject: render_entry(e)[1] for e in entries}
    spacing = {e.subject: e.res for e in entries}
    report = None
    for name, directory in zip(args.method or [Path(p).name for p in args.pred], args.pred):
        preds = {s: read_volume(labels_path(Path(directory), s)).data for s in refs}
        rep = evaluate(preds, refs, spacing, method=name)
        if report is None:
            report = rep
        else:
            report.rows.extend(rep.rows)
    methods = report.methods
    for i, a in enumerate(methods):
        for b in methods[i + 1 :]:
            compare(report, a, b, "dsc")
            compare(report, a, b, "asd")
    Path(args.out).write_text(report.dumps())
    for m in methods:
        print(m, " ".join(f"{g}={v:.2f}" for g, v in report.group_means(m).items()))


def cmd_ablate(args) -> None:
    cfg = _load_config(args)
    torch.set_num_threads(cfg.threads)
    manifest = None
    if args.manifest:
        manifest = Manifest.read(args.manifest)
    elif not Path(cfg.manifest).exists():
        manifest = held_out_manifest(args.n_train, args.n_val, args.n_test, cfg.seed)
    result = ablate(cfg, args.out, manifest, primary=args.primary)
    for arm in result.report.methods:
        views = " ".join(f"{v}={d:.2f}" for v, d in result.view_means(arm).items())
        print(f"{arm:10s} mean DSC {result.mean_dsc(arm):6.2f}  ({views})")
    print(f"total {result.seconds:.0f} s; report {Path(args.out) / 'ablation_report.tsv'}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--seed", type=int, help="base random seed")
    common.add_argument("--out", required=True, help="output directory (or file for eval)")
    common.add_argument("--threads", type=int, help="torch intra-op threads (1 for reproducible runs)")

    parser = argparse.ArgumentParser(prog="latentseg", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom-gen", parents=[common], help="generate a phantom dataset manifest")
    p.add_argument("--n-train", type=int, default=12)
    p.add_argument("--n-val", type=int, default=3)
    p.add_argument("--n-test", type=int, default=21)
    p.add_argument("--res", type=float, nargs="+", default=[0.5, 0.8, 1.0])
    p.add_argument("--train-rot", type=float, default=20.0, help="max |rotation| (deg) for train/val poses")
    p.add_argument("--test-rot-min", type=float, default=60.0)
    p.add_argument("--test-rot-max", type=float, default=120.0)
    p.add_argument("--max-shift", type=float, default=1.0, help="max |shift| (mm) per axis")
    p.add_argument("--modality", choices=("t1", "t2"), default="t2")
    p.add_argument("--write-volumes", action="store_true", help="also write image and label volume files")
    p.set_defaults(func=cmd_phantom_gen)

    p = sub.add_parser("train", parents=[common], help="train one network per plane")
    p.add_argument("--plane", choices=PLANES, help="train only this plane")
    p.add_argument("--arm", choices=ARMS)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="view-aggregated inference")
    p.add_argument("--checkpoints", required=True, help="directory with <plane>.ckpt files")
    p.add_argument("--plane", choices=PLANES, help="use only this plane")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--image", nargs="+", help="intensity volume files")
    src.add_argument("--manifest", help="render the inputs of one manifest split")
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="score predictions against manifest references")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--pred", nargs="+", required=True, help="prediction directories, one per method")
    p.add_argument("--method", nargs="+", help="method names (default: directory names)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="four-arm augmentation ablation")
    p.add_argument("--manifest", help="existing held-out-pose manifest")
    p.add_argument("--n-train", type=int, default=12)
    p.add_argument("--n-val", type=int, default=3)
    p.add_argument("--n-test", type=int, default=21)
    p.add_argument("--primary", default=AGGREGATE, help="view scored in the report: aggregate or a plane")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"latentseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except NonFiniteLoss as exc:
        print(f"latentseg {args.command}: training diverged: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
