"""Aggregation of per-seed run artifacts into mean/std tables.

Run directory layout written by :func:`write_run`::

    <run>/config.json           config echo (includes config_hash)
    <run>/params.json           train / inference parameter counts
    <run>/seed_<s>/cycles.csv   cycle,labeled_count,head,accuracy,init_hash,trained_hash
    <run>/seed_<s>/pools/cycle_XXX.txt
    <run>/report.csv            cycle,labeled_count,mean_acc,std_acc,head,variant,strategy,config_hash
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__

REPORT_COLUMNS = ("cycle", "labeled_count", "mean_acc", "std_acc", "head", "variant", "strategy", "config_hash")
CYCLE_COLUMNS = ("cycle", "labeled_count", "head", "accuracy", "init_hash", "trained_hash")


@dataclass
class Report:
    mean: np.ndarray
    std: np.ndarray
    n_seeds: int
    labeled_counts: list[int] = field(default_factory=list)
    head_rows: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    param_counts: dict[str, int] = field(default_factory=dict)
    provenance: dict[str, str] = field(default_factory=dict)


def aggregate(results) -> Report:
    """Column-wise mean and sample (n-1) std of a seed x cycle accuracy matrix.

    A single seed yields std 0 and a warning.
    """
    rows = [list(r) for r in results]
    if not rows or any(len(r) != len(rows[0]) for r in rows):
        raise ValueError("accuracy matrix must be rectangular and nonempty")
    m = np.asarray(rows, dtype=np.float64)
    if len(m) == 1:
        warnings.warn("single seed: standard deviation reported as 0", stacklevel=2)
        std = np.zeros(m.shape[1])
    else:
        std = m.std(axis=0, ddof=1)
    return Report(m.mean(axis=0), std, len(m))


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_seed_cycles(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CYCLE_COLUMNS)
    for rec in records:
        for head, acc in rec.accuracies.items():
            w.writerow([rec.cycle, rec.labeled_count, head, repr(float(acc)), rec.init_hash, rec.trained_hash])
    path.write_text(buf.getvalue())


def read_seed_cycles(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_run(run_dir: Path, config_dict: dict, config_hash: str, result, param_counts: dict[str, int]) -> None:
    run_dir.mkdir(parents=True, exist_ok=True)
    echo = {"config": config_dict, "config_hash": config_hash, "code_version": __version__}
    (run_dir / "config.json").write_text(json.dumps(echo, indent=2, sort_keys=True) + "\n")
    (run_dir / "params.json").write_text(json.dumps(param_counts, indent=2, sort_keys=True) + "\n")
    for seed, recs in result.records.items():
        write_seed_cycles(run_dir / f"seed_{seed}" / "cycles.csv", recs)


def build_report(run_dir: str | Path) -> tuple[list[dict], Report]:
    """Aggregate every ``seed_*/cycles.csv`` below ``run_dir`` into report rows."""
    run_dir = Path(run_dir)
    echo = json.loads((run_dir / "config.json").read_text())
    cfg, chash = echo["config"], echo["config_hash"]
    seed_files = sorted(run_dir.glob("seed_*/cycles.csv"), key=lambda p: int(p.parent.name.split("_", 1)[1]))
    if not seed_files:
        raise FileNotFoundError(f"no seed_*/cycles.csv under {run_dir}")
    per_head: dict[str, list[list[float]]] = {}
    counts: list[int] = []
    for f in seed_files:
        rows = read_seed_cycles(f)
        by_head: dict[str, list[tuple[int, int, float]]] = {}
        for r in rows:
            by_head.setdefault(r["head"], []).append((int(r["cycle"]), int(r["labeled_count"]), float(r["accuracy"])))
        for head, vals in by_head.items():
            vals.sort()
            per_head.setdefault(head, []).append([v[2] for v in vals])
            counts = [v[1] for v in vals]
    params = {}
    if (run_dir / "params.json").exists():
        params = json.loads((run_dir / "params.json").read_text())
    table: list[dict] = []
    first: Report | None = None
    head_rows = {}
    for head in sorted(per_head, key=lambda h: (h != "original", h)):
        rep = aggregate(per_head[head])
        head_rows[head] = (rep.mean, rep.std)
        first = first or rep
        for c, (mu, sd) in enumerate(zip(rep.mean, rep.std)):
            table.append(
                {
                    "cycle": c,
                    "labeled_count": counts[c],
                    "mean_acc": _fmt(mu),
                    "std_acc": _fmt(sd),
                    "head": head,
                    "variant": cfg["variant"],
                    "strategy": cfg["al"]["strategy"],
                    "config_hash": chash,
                }
            )
    report = Report(
        first.mean, first.std, first.n_seeds, counts, head_rows, params,
        {"config_hash": chash, "code_version": echo.get("code_version", __version__)},
    )
    return table, report


def format_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=REPORT_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    return buf.getvalue()


def write_report(run_dir: str | Path) -> list[dict]:
    run_dir = Path(run_dir)
    rows, _ = build_report(run_dir)
    (run_dir / "report.csv").write_text(format_csv(rows))
    return rows


def find_run_dirs(root: str | Path) -> list[Path]:
    root = Path(root)
    if (root / "config.json").exists():
        return [root]
    return sorted(p.parent for p in root.glob("*/config.json"))


def format_table(rows: list[dict]) -> str:
    lines = [f"{'variant':<24} {'strategy':<12} {'head':<9} {'cycle':>5} {'labels':>7}  mean ± std"]
    for r in rows:
        lines.append(
            f"{r['variant']:<24} {r['strategy']:<12} {r['head']:<9} {r['cycle']:>5} {r['labeled_count']:>7}  "
            f"{float(r['mean_acc']) * 100:6.2f} ± {float(r['std_acc']) * 100:5.2f}"
        )
    return "\n".join(lines)
