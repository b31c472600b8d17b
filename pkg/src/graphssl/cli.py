"""Command-line surface: train, eval, ablate, propagate, plot, gen.

Exit codes: 0 ok, 2 usage/config/input error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import statistics
import sys

import numpy as np

from . import config as cfgmod
from . import graphbank
from .data import (
    Dataset,
    GENERATORS,
    SplitResult,
    SplitSpec,
    gen_blobs,
    gen_circles,
    gen_two_moons,
    load_csv,
    make_ssl_split,
    save_csv,
)
from .errors import (
    ConfigError,
    DegenerateInputError,
    GraphSSLError,
    ParameterError,
    ValidationError,
)
from .plots import plot_boundary, plot_curves, read_metrics
from .trainer import evaluate, load_eval_model, run_training

USAGE_ERRORS = (ConfigError, ParameterError, ValidationError, DegenerateInputError, FileNotFoundError)

# Cumulative component ablation, mirroring the toggle study.
ABLATION_CONFIGS: tuple[tuple[str, dict], ...] = (
    ("nn", {"use_nn": True, "use_ne": False, "use_ee": False, "use_en": False, "feature_norm": False}),
    ("nn+ne", {"use_nn": True, "use_ne": True, "use_ee": False, "use_en": False, "feature_norm": False}),
    ("nn+ne+ee", {"use_nn": True, "use_ne": True, "use_ee": True, "use_en": False, "feature_norm": False}),
    ("nn+ne+ee+en", {"use_nn": True, "use_ne": True, "use_ee": True, "use_en": True, "feature_norm": False}),
    ("nn+ne+ee+en+featnorm", {"use_nn": True, "use_ne": True, "use_ee": True, "use_en": True, "feature_norm": True}),
)


def build_dataset(resolved: dict) -> Dataset:
    name = resolved["dataset"]
    seed = resolved["data_seed"] if resolved["data_seed"] >= 0 else resolved["seed"]
    if name == "two_moons":
        return gen_two_moons(resolved["data_n"], resolved["data_noise"], seed)
    if name == "circles":
        return gen_circles(resolved["data_n"], resolved["data_noise"], seed)
    if name == "blobs":
        return gen_blobs(resolved["data_n"], resolved["data_classes"], resolved["data_spread"], seed)
    if name == "csv":
        if not resolved["data_csv"]:
            raise ConfigError("dataset=csv requires data_csv=<path>")
        return load_csv(resolved["data_csv"])
    raise ConfigError(f"unknown dataset {name!r} (choose from {', '.join(GENERATORS)}, csv)")


def build_split(resolved: dict) -> SplitResult:
    dataset = build_dataset(resolved)
    seed = resolved["data_seed"] if resolved["data_seed"] >= 0 else resolved["seed"]
    spec = SplitSpec(resolved["labeled_per_class"], seed, resolved["test_fraction"])
    return make_ssl_split(dataset, spec)


def _run_one(resolved: dict, out_dir: str):
    config = cfgmod.train_config(resolved)
    split = build_split(resolved)
    os.makedirs(out_dir, exist_ok=True)
    cfgmod.write_resolved(resolved, os.path.join(out_dir, "config.resolved"))
    return run_training(config, split, out_dir=out_dir)


def cmd_train(args) -> int:
    overrides = cfgmod.parse_config_file(args.config)
    if args.seed is not None:
        overrides["seed"] = args.seed
    resolved = cfgmod.resolve(overrides)
    result = _run_one(resolved, args.out)
    summary = {
        "final_validation_accuracy": result.final_validation_accuracy,
        "mean_norm_gap": result.mean_norm_gap,
        "steps": resolved["steps"],
        "seed": resolved["seed"],
        "final_loss_total": result.records[-1].loss_total if result.records else None,
    }
    with open(os.path.join(args.out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    return 0


def cmd_eval(args) -> int:
    params, feature_norm = load_eval_model(args.checkpoint)
    dataset = load_csv(args.data)
    labeled = dataset.labels >= 0
    if not np.any(labeled):
        raise ValidationError(f"{args.data}: no labeled rows to score")
    acc = evaluate(params, dataset.features[labeled], dataset.labels[labeled], feature_norm)
    print(acc)
    return 0


def cmd_ablate(args) -> int:
    overrides = cfgmod.parse_config_file(args.config)
    base = cfgmod.resolve(overrides)
    if args.seeds < 1:
        raise ParameterError("--seeds must be >= 1")
    os.makedirs(args.out, exist_ok=True)
    rows = []
    per_config: dict[str, list[float]] = {name: [] for name, _ in ABLATION_CONFIGS}
    for name, toggles in ABLATION_CONFIGS:
        for k in range(args.seeds):
            resolved = dict(base)
            resolved.update(toggles)
            resolved["seed"] = base["seed"] + k
            run_dir = os.path.join(args.out, "runs", f"{name}-s{resolved['seed']}")
            result = _run_one(resolved, run_dir)
            acc = result.final_validation_accuracy
            rows.append((name, str(resolved["seed"]), repr(acc)))
            per_config[name].append(acc)
    with open(os.path.join(args.out, "ablation.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["config", "seed", "final_accuracy"])
        writer.writerows(rows)
        for name, _ in ABLATION_CONFIGS:
            writer.writerow([name, "median", repr(statistics.median(per_config[name]))])
    return 0


def cmd_propagate(args) -> int:
    affinity = np.loadtxt(args.affinity, delimiter=",", ndmin=2, dtype=np.float64)
    labels = np.loadtxt(args.labels, delimiter=",", ndmin=2, dtype=np.float64)
    if affinity.shape[0] != affinity.shape[1]:
        raise ValidationError(f"affinity matrix must be square, got {affinity.shape}")
    if labels.shape[0] != affinity.shape[0]:
        raise ValidationError(
            f"label rows ({labels.shape[0]}) must match affinity size ({affinity.shape[0]})"
        )
    if np.any(np.diagonal(affinity) != 0.0):
        raise ValidationError("affinity matrix violates the hollow invariant (non-zero diagonal)")
    if np.any(affinity < 0.0):
        raise ValidationError("affinity matrix has negative entries")
    sums = affinity.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off >= 1e-6):
        raise ValidationError(
            f"affinity matrix violates row-stochasticity (max |row sum - 1| = {off.max():.3e})"
        )
    if np.any(off > 0.0):
        print(
            f"warning: renormalizing rows off by up to {off.max():.3e}",
            file=sys.stderr,
        )
        affinity = affinity / sums[:, None]

    if args.alpha == 0.0:
        result = labels  # exact alpha -> 0 limit: Y stays at Y0
    elif args.iters is not None:
        result = graphbank.propagate_iterative(affinity, labels, args.alpha, args.iters)
    else:
        result = graphbank.propagate_closed(affinity, labels, args.alpha)
    for row in result:
        print(",".join(repr(float(v)) for v in row))
    return 0


def cmd_plot(args) -> int:
    if args.kind == "curves":
        if not args.metrics:
            raise ConfigError("--kind curves needs at least one --metrics file")
        plot_curves(args.metrics, args.out)
        return 0
    if not args.checkpoint or not args.data:
        raise ConfigError("--kind boundary requires --checkpoint and --data")
    params, feature_norm = load_eval_model(args.checkpoint)
    dataset = load_csv(args.data)
    plot_boundary(params, feature_norm, dataset.features, dataset.labels, args.out)
    return 0


def cmd_gen(args) -> int:
    if args.dataset == "two_moons":
        dataset = gen_two_moons(args.n, args.noise, args.seed)
    elif args.dataset == "circles":
        dataset = gen_circles(args.n, args.noise, args.seed)
    elif args.dataset == "blobs":
        dataset = gen_blobs(args.n, args.classes, args.spread, args.seed)
    else:
        raise ConfigError(f"unknown dataset {args.dataset!r}")
    save_csv(dataset, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="graphssl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training job")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a CSV dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="cumulative component ablation matrix")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("propagate", help="standalone label propagation")
    p.add_argument("--affinity", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--alpha", type=float, required=True)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--iters", type=int, default=None)
    group.add_argument("--closed", action="store_true")
    p.set_defaults(func=cmd_propagate)

    p = sub.add_parser("plot", help="emit a static SVG")
    p.add_argument("--metrics", nargs="*", default=[])
    p.add_argument("--out", required=True)
    p.add_argument("--kind", choices=("curves", "boundary"), required=True)
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", default=None)
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("gen", help="materialize a synthetic dataset as CSV")
    p.add_argument("--dataset", choices=GENERATORS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--noise", type=float, default=0.15)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GraphSSLError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
