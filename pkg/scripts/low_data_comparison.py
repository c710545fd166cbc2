"""Baseline vs FR-OJKD at increasing label counts (supervised protocol, random acquisition).

    python3 scripts/low_data_comparison.py --config configs/img8_low_data.yaml --out runs/low_data
"""

import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from lowdata.config import ExperimentConfig, load_config
from lowdata.experiment import run_experiment
from lowdata.report import format_csv, format_table, write_report


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path, help="base experiment config (YAML or JSON)")
    parser.add_argument("--out", type=Path, default=Path("runs/low_data"))
    parser.add_argument("--variants", default="baseline,fr_ojkd")
    parser.add_argument("--initial", type=int, default=100, help="labels in the first cycle")
    parser.add_argument("--step", type=int, default=100, help="labels added per cycle")
    parser.add_argument("--cycles", type=int, default=4)
    args = parser.parse_args()

    base = load_config(args.config) if args.config else ExperimentConfig()
    d = base.to_dict()
    d["al"].update(initial_pool_size=args.initial, budget_per_cycle=args.step, num_cycles=args.cycles, strategy="random")
    base = ExperimentConfig.from_dict(d)

    rows = []
    with threadpool_limits(1):
        for variant in args.variants.split(","):
            _, run_dir = run_experiment(base.with_overrides(variant=variant), args.out)
            rows += write_report(run_dir)
    (args.out / "comparison.csv").write_text(format_csv(rows))
    print(format_table(rows))


if __name__ == "__main__":
    main()
