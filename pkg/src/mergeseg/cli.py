"""Command-line surface: gen, train, eval, viz-tokens, budget, gradcheck, strip.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

from .checks import PIPELINE_TOL, PRIMITIVE_TOL, primitive_checks, stage_pipeline_check
from .config import load_config, save_config
from .data import (gen_synthetic, image_from_u8, load_dataset, read_ppm,
                   save_dataset)
from .errors import ConfigurationError, DataError, NumericError
from .metrics import (budget_json, budget_table, evaluate, nominal_record,
                      report_budget)
from .model import Model, strip_boundary_head
from .train import train
from .viz import viz_tokens


def _add_common(sub):
    sub.add_argument("--config", default=None, help="INI config file")
    sub.add_argument("--seed", type=int, default=None, help="override model/train/data seeds")


def _load(args):
    run = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        if args.seed < 0:
            raise ConfigurationError("seed must be a non-negative integer")
        run.model.seed = args.seed
        run.train.seed = args.seed
        run.data.seed = args.seed
    if getattr(args, "steps", None) is not None:
        run.train.steps = args.steps
    return run


def _check_dataset(run, manifest) -> None:
    if int(manifest["num_classes"]) != run.model.num_classes:
        raise ConfigurationError(
            f"dataset has {manifest['num_classes']} classes, model expects {run.model.num_classes}")
    if int(manifest["size"]) != run.model.image_size:
        raise ConfigurationError(
            f"dataset images are {manifest['size']}px, model expects {run.model.image_size}px")


def cmd_gen(args) -> int:
    run = _load(args)
    d = run.data
    samples = gen_synthetic(d.seed, d.num_train + d.num_val, d.size, d.num_classes,
                            boundary_radius=d.boundary_radius)
    os.makedirs(args.out, exist_ok=True)
    save_dataset(os.path.join(args.out, "train"), samples[:d.num_train], d.seed,
                 d.num_classes, d.boundary_radius)
    save_dataset(os.path.join(args.out, "val"), samples[d.num_train:], d.seed,
                 d.num_classes, d.boundary_radius)
    print(f"wrote {d.num_train} train / {d.num_val} val samples to {args.out}")
    return 0


def _load_split(dataset_dir: str):
    train_dir = os.path.join(dataset_dir, "train")
    if os.path.isdir(train_dir):
        train_samples, manifest = load_dataset(train_dir)
        val_dir = os.path.join(dataset_dir, "val")
        val_samples = load_dataset(val_dir)[0] if os.path.isdir(val_dir) else []
        return train_samples, val_samples, manifest
    samples, manifest = load_dataset(dataset_dir)
    return samples, [], manifest


def cmd_train(args) -> int:
    run = _load(args)
    train_samples, val_samples, manifest = _load_split(args.dataset)
    _check_dataset(run, manifest)
    os.makedirs(args.out, exist_ok=True)
    save_config(os.path.join(args.out, "run_manifest.ini"), run)
    model = Model(run.model)
    log = train(model, train_samples, run.train, out_dir=args.out)
    record = model.forward(train_samples[0].image).record
    report = report_budget(record, run.model)
    with open(os.path.join(args.out, "budget.txt"), "w", encoding="ascii") as fh:
        fh.write(budget_table(report) + "\n")
    with open(os.path.join(args.out, "budget.json"), "w", encoding="ascii") as fh:
        fh.write(budget_json(report) + "\n")
    last = log.records[-1] if log.records else None
    if last is not None:
        print(f"trained {len(log.records)} steps; final loss {last.total:.6f}")
    if val_samples:
        m = evaluate(model, val_samples)
        print(f"val mIoU {m.miou:.4f}  F1 {m.f1:.4f}  acc {m.pixel_acc:.4f}")
    return 0


def cmd_eval(args) -> int:
    run = _load(args)
    samples, _, manifest = _load_split(args.dataset)
    _check_dataset(run, manifest)
    model = Model.load(args.ckpt, run.model)
    m = evaluate(model, samples)
    print(f"mIoU      {m.miou:.4f}")
    print(f"F1        {m.f1:.4f}")
    print(f"pixel acc {m.pixel_acc:.4f}")
    for cls, iou in sorted(m.per_class_iou.items()):
        print(f"  class {cls} IoU {iou:.4f}")
    print(f"token counts {m.token_counts}")
    return 0


def cmd_viz(args) -> int:
    run = _load(args)
    model = Model.load(args.ckpt, run.model)
    image = image_from_u8(read_ppm(args.image))
    viz_tokens(model, image, args.out)
    print(f"wrote token map to {args.out}")
    return 0


def cmd_budget(args) -> int:
    run = _load(args)
    report = report_budget(nominal_record(run.model), run.model)
    print(budget_table(report))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "budget.txt"), "w", encoding="ascii") as fh:
            fh.write(budget_table(report) + "\n")
        with open(os.path.join(args.out, "budget.json"), "w", encoding="ascii") as fh:
            fh.write(budget_json(report) + "\n")
    return 0


def cmd_gradcheck(args) -> int:
    failures = 0
    for name, err in primitive_checks().items():
        status = "ok" if err <= PRIMITIVE_TOL else "FAIL"
        if status == "FAIL":
            failures += 1
        print(f"{name:18s} {err:.3e}  {status}")
    stage_err = stage_pipeline_check()
    status = "ok" if stage_err <= PIPELINE_TOL else "FAIL"
    if status == "FAIL":
        failures += 1
    print(f"{'merge+recover':18s} {stage_err:.3e}  {status}")
    if failures:
        raise NumericError(f"{failures} gradient check(s) above tolerance")
    return 0


def cmd_strip(args) -> int:
    run = _load(args)
    model = Model.load(args.ckpt, run.model)
    stripped = strip_boundary_head(model)
    stripped.save(args.out)
    print(f"stripped {model.param_count() - stripped.param_count()} parameters; "
          f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergeseg",
                                     description="token-merging segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train on a dataset directory")
    _add_common(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--steps", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--dataset", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("viz-tokens", help="render the merged-token map for an image")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--out", required=True, help="output PPM path")
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("budget", help="token/attention budget accounting")
    _add_common(p)
    p.add_argument("--out", default=None, help="optional directory for report files")
    p.set_defaults(func=cmd_budget)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("strip", help="remove the boundary head from a checkpoint")
    _add_common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_strip)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return 2
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
