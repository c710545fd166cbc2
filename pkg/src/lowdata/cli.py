"""Command-line entry point: ``lowdata <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ExperimentConfig, load_config
from .refiner import FeatureRefinerConfig, build_feature_refiner, expected_parameter_count
from .layers import count_parameters

OUT_ENV = "LOWDATA_OUT"
DEFAULT_ABLATION = (
    "baseline",
    "fr_square_linear_only",
    "fr_reduce_only",
    "fr_no_layernorm",
    "fr_ojkd",
    "fr_no_gate",
    "fr_k2",
    "fr_k3",
)

log = logging.getLogger("lowdata")


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="YAML or JSON experiment config")
    p.add_argument("--seed", type=_seeds, help="comma-separated seeds, e.g. 0,1,2")
    p.add_argument("--out", type=Path, help=f"output root (default ${OUT_ENV} or ./runs)")
    p.add_argument("--strategy", choices=("random", "max_entropy", "core_set"))
    p.add_argument("--variant", help="head variant, e.g. baseline, fr_ojkd, fr_no_gate, fr_k2")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 for bit-reproducible runs)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lowdata", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="{train,al,ablate,report,gradcheck,paramcount}")

    p = sub.add_parser("train", help="single supervised run on the initial labelled pool")
    _common(p)
    p = sub.add_parser("al", help="full active-learning cycle experiment")
    _common(p)
    p = sub.add_parser("ablate", help="sweep head variants (comma-separated --variant)")
    _common(p)
    p = sub.add_parser("report", help="aggregate run directories into mean±std tables")
    p.add_argument("runs", nargs="*", type=Path, help="run directories or a root containing them")
    p.add_argument("--out", type=Path)
    p = sub.add_parser("gradcheck", help="finite-difference suite over all differentiable layers")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p = sub.add_parser("paramcount", help="train / inference parameter counts")
    p.add_argument("--config", type=Path)
    p.add_argument("--d-bbf", type=int, default=512)
    p.add_argument("--d-frf", type=int, default=64)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--variant", default="full", help="refiner variant (full, no_layernorm, reduce_only, ...)")
    return parser


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return args.out
    return Path(os.environ.get(OUT_ENV, "runs"))


def _config(args, **extra) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seeds=args.seed, strategy=args.strategy, **extra)


def cmd_run(args, num_cycles: int | None = None) -> int:
    from .experiment import run_experiment
    from .report import format_table, write_report

    cfg = _config(args, variant=args.variant)
    if num_cycles is not None:
        d = cfg.to_dict()
        d["al"]["num_cycles"] = num_cycles
        cfg = ExperimentConfig.from_dict(d)
    _, run_dir = run_experiment(cfg, _out_root(args))
    print(format_table(write_report(run_dir)))
    print(f"run directory: {run_dir}")
    return 0


def cmd_ablate(args) -> int:
    from .experiment import run_experiment
    from .report import format_csv, format_table, write_report

    variants = args.variant.split(",") if args.variant else list(DEFAULT_ABLATION)
    base = _config(args)
    root = _out_root(args)
    rows = []
    for v in variants:
        _, run_dir = run_experiment(base.with_overrides(variant=v), root)
        rows += write_report(run_dir)
    (root / "ablation.csv").write_text(format_csv(rows))
    print(format_table(rows))
    return 0


def cmd_report(args) -> int:
    from .report import find_run_dirs, format_csv, format_table, write_report

    roots = args.runs or [_out_root(args)]
    dirs = [d for r in roots for d in find_run_dirs(r)]
    if not dirs:
        print(f"error: no run directories found under {', '.join(map(str, roots))}", file=sys.stderr)
        return 2
    rows = []
    for d in dirs:
        rows += write_report(d)
    if len(dirs) > 1 or args.out:
        target = args.out or roots[0]
        Path(target).mkdir(parents=True, exist_ok=True)
        (Path(target) / "summary.csv").write_text(format_csv(rows))
    print(format_table(rows))
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_suite

    results = run_suite(args.instances, args.seed)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<24} instances={r.instances:<3} max_rel_err={r.max_error:.3e}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return 1 if failed else 0


def cmd_paramcount(args) -> int:
    if args.config:
        from .config import load_data
        from .experiment import parameter_counts

        cfg = load_config(args.config)
        train, _ = load_data(cfg.data)
        counts = parameter_counts(cfg, train.class_count)
    else:
        fr = FeatureRefinerConfig(args.d_bbf, args.d_frf, args.classes, args.variant)
        extra = count_parameters(build_feature_refiner(fr))
        if extra != expected_parameter_count(fr):
            print(f"error: built head has {extra} parameters, closed form says {expected_parameter_count(fr)}", file=sys.stderr)
            return 1
        inference = args.d_bbf * args.classes + args.classes
        counts = {"train": inference + extra, "inference": inference, "extra": extra}
    for k in ("train", "inference", "extra"):
        print(f"{k}_parameters: {counts[k]}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(getattr(args, "threads", 1) or 1):
            if args.command == "train":
                return cmd_run(args, num_cycles=1)
            if args.command == "al":
                return cmd_run(args)
            if args.command == "ablate":
                return cmd_ablate(args)
            if args.command == "report":
                return cmd_report(args)
            if args.command == "gradcheck":
                return cmd_gradcheck(args)
            return cmd_paramcount(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
