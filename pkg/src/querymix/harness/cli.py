"""Command line interface.

    querymix gen-data    --out DIR [--config PATH] [--seed INT]
    querymix train       --out DIR [--config PATH] [--seed INT]
    querymix eval        --checkpoint PATH --data PATH [--workers N] [--out DIR]
    querymix perturb     --checkpoint PATH --data PATH [--ratio R] [--trials T]
    querymix ablate      --axis NAME --values a,b,c [--config PATH] [--out DIR]
    querymix dump-coeffs --checkpoint PATH --data PATH --out DIR

Exit codes: 0 success, 2 contract violation (bad input or config), 3
numerical abort during training.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..errors import ContractError, NumericalError
from ..model import load_checkpoint
from ..scenes import (BenchmarkParams, generate_dataset, read_dataset,
                      report_to_csv, report_to_text, write_dataset)
from . import loop, studies
from .config import default_config, read_config


def _load_config(args):
    config = read_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        config.seed = args.seed
    return config


def _eval_params(model, args) -> BenchmarkParams:
    if getattr(args, "config", None):
        return read_config(args.config).benchmark_params()
    return BenchmarkParams(num_classes=model.config.num_classes,
                           image_size=model.config.image_size)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    config = _load_config(args)
    if args.seed is not None:
        config.data.data_seed = args.seed
    config.validate()
    params = config.benchmark_params()
    out = _out_dir(args)
    train = generate_dataset(params, config.data.train_scenes, config.data.data_seed)
    val = generate_dataset(params, config.data.val_scenes, config.data.data_seed + 1)
    write_dataset(train, out / "train.txt")
    write_dataset(val, out / "val.txt")
    print(f"wrote {len(train)} train / {len(val)} val scenes to {out}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args)
    out = _out_dir(args)
    _, report = loop.train(config, out_dir=out, log=print)
    print(f"final val mAP {report.final.mean_ap:.6f}")
    print(f"report hash {report.content_hash()}")
    print(f"artifacts in {out}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.data)
    params = _eval_params(model, args)
    report = loop.evaluate_model(model, scenes, params, workers=args.workers)
    print(report_to_text(report))
    if args.out:
        path = _out_dir(args) / "eval.csv"
        path.write_text(report_to_csv(report), encoding="ascii")
        print(f"wrote {path}")
    return 0


def cmd_perturb(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.data)
    params = _eval_params(model, args)
    results = studies.perturbation_study(model, scenes, params, ratio=args.ratio,
                                         trials=args.trials,
                                         seed=args.seed if args.seed is not None else 0,
                                         workers=args.workers)
    csv = studies.perturbation_csv(results)
    print(csv, end="")
    if args.out:
        path = _out_dir(args) / "perturbation.csv"
        path.write_text(csv, encoding="ascii")
        print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    values = [v for v in args.values.split(",") if v]
    if not values:
        raise ContractError("ablate needs at least one value")
    rows = studies.ablate(config, args.axis, values, log=print)
    csv = studies.ablation_csv(args.axis, rows)
    print(csv, end="")
    if args.out:
        path = _out_dir(args) / "ablation.csv"
        path.write_text(csv, encoding="ascii")
        print(f"wrote {path}")
    return 0


def cmd_dump_coeffs(args) -> int:
    model = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.data)
    params = _eval_params(model, args)
    rows, points = studies.dump_coefficients(model, scenes, params)
    out = _out_dir(args)
    (out / "coefficients.csv").write_text(studies.coefficient_csv(rows), encoding="ascii")
    (out / "pca.csv").write_text(studies.projection_csv(rows, points), encoding="ascii")
    inter, intra = studies.cluster_separation(points, [t for _, t, _ in rows])
    print(f"wrote {len(rows)} rows to {out}")
    print(f"inter-type centroid distance {inter:.6f}, mean intra-type {intra:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="querymix",
        description="Detection with input-conditioned convex query combinations.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, handler, **extra):
        p = sub.add_parser(name, help=extra.pop("help", None))
        p.add_argument("--config", help="run config file (defaults apply if omitted)")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.set_defaults(handler=handler)
        return p

    p = add("gen-data", cmd_gen_data, help="write train/val dataset files")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, help="train a detector")
    p.add_argument("--out", required=True, help="directory for checkpoint and report")

    p = add("eval", cmd_eval, help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--workers", type=int, default=1, help="parallel evaluation shards")
    p.add_argument("--out", help="also write eval.csv here")

    p = add("perturb", cmd_perturb, help="fixed-combination perturbation study")
    p.add_argument("--checkpoint", required=True, help="static-model checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--ratio", type=int, default=4)
    p.add_argument("--trials", type=int, default=6)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", help="also write perturbation.csv here")

    p = add("ablate", cmd_ablate, help="train one model per axis value")
    p.add_argument("--axis", required=True, choices=studies.ABLATION_AXES)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--out", help="also write ablation.csv here")

    p = add("dump-coeffs", cmd_dump_coeffs, help="dump combination coefficients + PCA")
    p.add_argument("--checkpoint", required=True, help="dynamic-model checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    return parser


def entrypoint(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ContractError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        # missing or unreadable files are caller mistakes, same as a bad config
        print(f"error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(entrypoint())
