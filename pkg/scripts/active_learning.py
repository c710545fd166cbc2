"""Compare acquisition strategies for the baseline and FR-OJKD networks.

    python3 scripts/active_learning.py --config configs/img8_active.yaml --out runs/active
"""

import argparse
from pathlib import Path

from threadpoolctl import threadpool_limits

from lowdata.config import ExperimentConfig, load_config
from lowdata.experiment import run_experiment
from lowdata.report import format_csv, format_table, write_report


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--config", type=Path)
    parser.add_argument("--out", type=Path, default=Path("runs/active"))
    parser.add_argument("--strategies", default="random,max_entropy,core_set")
    parser.add_argument("--variants", default="baseline,fr_ojkd")
    args = parser.parse_args()

    base = load_config(args.config) if args.config else ExperimentConfig()
    rows = []
    with threadpool_limits(1):
        for variant in args.variants.split(","):
            for strategy in args.strategies.split(","):
                _, run_dir = run_experiment(base.with_overrides(variant=variant, strategy=strategy), args.out)
                rows += write_report(run_dir)
    (args.out / "strategies.csv").write_text(format_csv(rows))
    print(format_table(rows))


if __name__ == "__main__":
    main()
