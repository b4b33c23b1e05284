"""Command-line entry point: ``dispfuse {synth,train,fuse,eval,ablate}``.

Exit status is 0 only when every requested artifact was written, 2 for
usage and configuration errors, 1 for runtime failures.
"""
from __future__ import annotations

import argparse
import dataclasses
import glob
import json
import os
import sys

import numpy as np

from . import tensor as T
from .checkpoint import CheckpointError
from .config import RunConfig, SchemaError, resolve_config
from .energy import ConfigurationError
from .imaging import FormatError, load_image, load_pfm, save_pfm
from .nets import NetConfigError
from .render import save_disparity_png, save_error_png
from . import synthbench as sb
from . import trainer as tr


class UsageError(Exception):
    pass


def _global_options(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="preset name (garden, kitti, desk) or JSON config path")
    parser.add_argument("--seed", type=int, default=d, help="overrides the configured seed")
    parser.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS if suppress else False,
                        help="single-threaded BLAS for bit-reproducible runs")
    parser.add_argument("--precision", choices=("f32", "f64"), default=d)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dispfuse", description="Unsupervised disparity fusion toolkit.")
    _global_options(p, suppress=False)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write synthetic scene bundles")
    s.add_argument("out_dir")
    s.add_argument("--count", type=int, default=None)
    s.add_argument("--height", "-H", type=int, default=None)
    s.add_argument("--width", "-W", type=int, default=None)
    s.add_argument("--layers", type=int, default=None)
    s.add_argument("--inputs", type=int, default=2, help="noisy disparity inputs written per scene")
    s.add_argument("--sigma", type=float, default=0.008, help="input noise, in units of image height")

    t = sub.add_parser("train", help="train a refiner on scene bundles")
    t.add_argument("data_dir")
    t.add_argument("out_dir")
    t.add_argument("--val-dir", default=None, help="scenes with gt.pfm used only to report MAE")
    t.add_argument("--conf", action="append", default=[], metavar="RULE", help="confidence rule (repeatable)")
    t.add_argument("--resume", default=None, metavar="CHECKPOINT")
    t.add_argument("--until-epoch", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None, help="overrides train.epochs")

    f = sub.add_parser("fuse", help="fuse disparity maps with a trained refiner")
    f.add_argument("checkpoint")
    f.add_argument("left")
    f.add_argument("right")
    f.add_argument("disps", nargs="+", metavar="DISP")
    f.add_argument("--out", "-o", required=True, help="output PFM; a PNG render is written next to it")
    f.add_argument("--conf", action="append", default=[], metavar="RULE")

    e = sub.add_parser("eval", help="mean absolute disparity error")
    e.add_argument("estimate")
    e.add_argument("reference")
    e.add_argument("--mask", default=None, help="PGM/PNG mask, nonzero = evaluate")
    e.add_argument("--json", default=None, metavar="PATH", help="also write the result as JSON")
    e.add_argument("--error-png", default=None, metavar="PATH")

    a = sub.add_parser("ablate", help="noise ablation over a sigma ladder")
    a.add_argument("out_dir")
    a.add_argument("--sigmas", type=float, nargs="*", default=None)
    a.add_argument("--inputs", type=int, nargs="*", default=None)
    a.add_argument("--epochs", type=int, default=None)

    for sp in (s, t, f, e, a):
        _global_options(sp, suppress=True)
    return p


def _run_config(args) -> RunConfig:
    rc = resolve_config(args.config)
    train = rc.train
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.deterministic:
        updates["deterministic"] = True
    if getattr(args, "epochs", None) is not None:
        updates["epochs"] = args.epochs
    if updates:
        train = dataclasses.replace(train, **updates)
    precision = args.precision or rc.precision
    return dataclasses.replace(rc, train=train, precision=precision)


# -- commands ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    rc = _run_config(args)
    sc = rc.scenes
    count = sc["count"] if args.count is None else args.count
    h = sc["height"] if args.height is None else args.height
    w = sc["width"] if args.width is None else args.width
    layers = sc["layers"] if args.layers is None else args.layers
    if count < 1:
        raise UsageError("--count must be >= 1")
    seed = rc.train.seed
    for i in range(count):
        scene = sb.generate_scene(seed + i, h, w, layers)
        d = os.path.join(args.out_dir, f"scene_{i:04d}")
        sb.save_scene(scene, d)
        noisy = sb.perturb_gt(scene.gt_disp, args.sigma, args.inputs, seed=seed * 100_003 + i)
        for k, disp in enumerate(noisy, 1):
            save_pfm(os.path.join(d, f"disp{k}.pfm"), disp)
    print(f"wrote {count} scene(s) of {h}x{w} to {args.out_dir}")
    return 0


def _scene_sample(directory: str, rules, z_expected: int | None) -> tr.FusionSample:
    disp_paths = sorted(glob.glob(os.path.join(directory, "disp*.pfm")))
    if not disp_paths:
        raise UsageError(f"{directory}: no disp*.pfm inputs")
    if z_expected is not None and len(disp_paths) != z_expected:
        raise UsageError(f"{directory}: found {len(disp_paths)} disparity inputs, config expects {z_expected}")
    left = load_image(os.path.join(directory, "left.pgm"))
    right = load_image(os.path.join(directory, "right.pgm"))
    disps = [_load_disp(pth, left.shape) for pth in disp_paths]
    gt_path = os.path.join(directory, "gt.pfm")
    gt = load_pfm(gt_path).astype(np.float64) if os.path.exists(gt_path) else None
    return tr.make_sample(left, right, disps, tr.confidence_weights(disps, rules), gt)


def _load_disp(path: str, shape) -> np.ndarray:
    d = load_pfm(path).astype(np.float64)
    if d.shape != tuple(shape):
        raise UsageError(f"{path}: disparity is {d.shape[0]}x{d.shape[1]}, images are {shape[0]}x{shape[1]}")
    return d


def cmd_train(args) -> int:
    rc = _run_config(args)
    cfg = rc.train
    dirs = sb.scene_dirs(args.data_dir) if os.path.isdir(args.data_dir) else []
    if not dirs:
        raise UsageError(f"{args.data_dir}: no scene directories found")
    with T.precision(rc.precision):
        train = [_scene_sample(d, args.conf, cfg.net.c1) for d in dirs]
        val = [_scene_sample(d, args.conf, cfg.net.c1) for d in sb.scene_dirs(args.val_dir)] if args.val_dir else None
        state = tr.load_state(args.resume, cfg) if args.resume else None
        os.makedirs(args.out_dir, exist_ok=True)
        with open(os.path.join(args.out_dir, "config.json"), "w") as fh:
            json.dump(rc.to_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        state, log = tr.fit(train, cfg, val=val, out_dir=args.out_dir, state=state, until_epoch=args.until_epoch)
    last = log[-1] if log else {}
    print(f"trained to epoch {state.epoch}: total_refiner {last.get('total_refiner', float('nan')):.4f}; "
          f"log and checkpoints in {args.out_dir}")
    return 0


def cmd_fuse(args) -> int:
    refiner = tr.load_refiner(args.checkpoint)
    z = refiner.cfg.c1
    if len(args.disps) != z:
        raise UsageError(f"checkpoint expects {z} disparity input(s), got {len(args.disps)}")
    left = load_image(args.left)
    right = load_image(args.right)
    if right.shape != left.shape:
        raise UsageError(f"{args.right}: image is {right.shape[0]}x{right.shape[1]}, "
                         f"{args.left} is {left.shape[0]}x{left.shape[1]}")
    disps = [_load_disp(p, left.shape) for p in args.disps]
    sample = tr.make_sample(left, right, disps, tr.confidence_weights(disps, args.conf))
    with T.precision("f64" if refiner.params["head.weight"].dtype == np.float64 else "f32"):
        fused = tr.fuse(refiner, sample)
    save_pfm(args.out, fused)
    png = os.path.splitext(args.out)[0] + ".png"
    save_disparity_png(png, fused, vmax=refiner.cfg.max_disparity)
    print(f"fused {len(disps)} input(s) -> {args.out} ({fused.shape[0]}x{fused.shape[1]}, "
          f"mean {fused.mean():.3f} px), render {png}")
    return 0


def cmd_eval(args) -> int:
    est = load_pfm(args.estimate).astype(np.float64)
    ref = load_pfm(args.reference).astype(np.float64)
    if est.shape != ref.shape:
        raise UsageError(f"{args.estimate} is {est.shape[0]}x{est.shape[1]} but {args.reference} "
                         f"is {ref.shape[0]}x{ref.shape[1]}")
    mask = None
    if args.mask:
        mask = load_image(args.mask) > 0
        if mask.shape != est.shape:
            raise UsageError(f"{args.mask}: mask is {mask.shape[0]}x{mask.shape[1]}, maps are {est.shape[0]}x{est.shape[1]}")
    value = sb.mae(est, ref, mask)
    result = {"mae": value, "pixels": int(est.size if mask is None else mask.sum()),
              "estimate": args.estimate, "reference": args.reference}
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(result, fh, indent=1, sort_keys=True)
            fh.write("\n")
    if args.error_png:
        save_error_png(args.error_png, est - ref)
    print(f"{value:.3f}")
    return 0


def cmd_ablate(args) -> int:
    rc = _run_config(args)
    acfg = rc.ablation
    if args.sigmas is not None:
        if not args.sigmas:
            raise UsageError("--sigmas needs at least one value")
        acfg = dataclasses.replace(acfg, sigmas=list(args.sigmas))
    if args.inputs is not None:
        if not args.inputs:
            raise UsageError("--inputs needs at least one value")
        acfg = dataclasses.replace(acfg, inputs=list(args.inputs))
    os.makedirs(args.out_dir, exist_ok=True)

    def progress(row):
        print(f"sigma={row.sigma:g} Z={row.num_inputs}: inputs "
              + " ".join(f"{v:.3f}" for v in row.input_mae) + f" fused {row.fused_mae:.3f}", file=sys.stderr)

    with T.precision(rc.precision):
        rows = sb.noise_ablation(acfg, rc.train, rc.scenes["height"], rc.scenes["width"], on_row=progress)
    with open(os.path.join(args.out_dir, "ablation.csv"), "w") as fh:
        fh.write(sb.rows_to_csv(rows))
    with open(os.path.join(args.out_dir, "ablation.json"), "w") as fh:
        fh.write(sb.rows_to_json(rows))
    print(f"wrote {len(rows)} row(s) to {args.out_dir}/ablation.csv and ablation.json")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "fuse": cmd_fuse, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name in ("config", "seed", "precision"):
        if not hasattr(args, name):
            setattr(args, name, None)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, SchemaError, ConfigurationError, NetConfigError) as exc:
        print(f"dispfuse {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, tr.TrainingDiverged, OSError, ValueError) as exc:
        print(f"dispfuse {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
