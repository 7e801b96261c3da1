"""Command-line entry point: ``vbda run | sweep | suite | prepare-digits``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from .data import SyntheticSpec, prepare_digits
from .errors import ConfigError
from .experiments import (
    METHODS,
    DigitsSpec,
    parse_config,
    print_defaults,
    run_baselines,
    run_experiment,
    run_sweep,
)


def _seeds(text: str) -> tuple[int, ...]:
    return tuple(int(s) for s in text.split(",") if s.strip())


def _apply_overrides(spec, args):
    if getattr(args, "seed", None) is not None:
        spec = replace(spec, seeds=(args.seed,))
    if getattr(args, "out", None):
        spec = replace(spec, out=args.out)
    return spec


def _print_table(rows, header):
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    for r in [header, *rows]:
        print("  ".join(str(c).ljust(w) for c, w in zip(r, widths)))


def cmd_run(args) -> int:
    spec = _apply_overrides(parse_config(args.config), args)
    summary = run_experiment(spec)
    rows = [(r["seed"], f"{r['src_acc']:.4f}", f"{r['tgt_acc']:.4f}") for r in summary.per_seed]
    _print_table(rows, ("seed", "src_acc", "tgt_acc"))
    print(f"{spec.method}: target accuracy {summary.mean:.4f} +/- {summary.std:.4f} -> {spec.out}")
    return 0


def cmd_sweep(args) -> int:
    spec = _apply_overrides(parse_config(args.config), args)
    rows = run_sweep(spec, args.param, args.values)
    _print_table([(repr(r.value), f"{r.mean:.4f}", f"{r.std:.4f}") for r in rows],
                 (args.param, "mean_tgt_acc", "std"))
    print(f"sweep table -> {Path(spec.out) / 'sweep.csv'}")
    return 0


def cmd_suite(args) -> int:
    if args.task == "digits":
        d = Path(args.digits_dir)
        task = DigitsSpec(source_images=str(d / "mnist-images.idx"), source_labels=str(d / "mnist-labels.idx"),
                          target_images=str(d / "uci16-images.idx"), target_labels=str(d / "uci16-labels.idx"))
    else:
        task = SyntheticSpec(kind="rotated_moons" if args.task == "moons" else "nuisance_correlation")
    seeds = (args.seed,) if args.seed is not None else _seeds(args.seeds)
    out = args.out or f"runs/baselines_{args.task}"
    results = run_baselines(task, out, seeds=seeds, methods=args.methods)
    _print_table([(m, f"{s.mean:.4f}", f"{s.std:.4f}") for m, s in results.items()],
                 ("method", "mean_tgt_acc", "std"))
    print(f"baseline table -> {Path(out) / 'baselines.csv'}")
    return 0


def cmd_prepare_digits(args) -> int:
    paths = prepare_digits(args.out or "data/digits", n=args.n)
    for key, path in paths.items():
        print(f"{key}: {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vbda", description=__doc__)
    parser.add_argument("--print-defaults", action="store_true", help="print every config key with its default")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    common.add_argument("--out", help="output directory (overrides the config)")

    p = sub.add_parser("run", parents=[common], help="train one experiment over its seeds")
    p.add_argument("config")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="sweep one lambda over a list of values")
    p.add_argument("config")
    p.add_argument("--param", required=True, help="lambda_s, lambda_t or lambda_ce")
    p.add_argument("--values", required=True, nargs="+", type=float)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("suite", parents=[common], help="named experiment suites")
    p.add_argument("suite", choices=["baselines"])
    p.add_argument("--task", choices=["nuisance", "moons", "digits"], default="nuisance")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=list(METHODS))
    p.add_argument("--digits-dir", default="data/digits")
    p.set_defaults(func=cmd_suite)

    p = sub.add_parser("prepare-digits", help="write the MNIST / UCI-digits proxy pair as IDX files")
    p.add_argument("--out")
    p.add_argument("--n", type=int, default=2000)
    p.set_defaults(func=cmd_prepare_digits)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.print_defaults:
        sys.stdout.write(print_defaults())
        return 0
    if not getattr(args, "func", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
