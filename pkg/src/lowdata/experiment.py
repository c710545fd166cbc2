"""Run an :class:`ExperimentConfig` end to end and persist its artifacts."""

from __future__ import annotations

import logging
from pathlib import Path

from .active import ALResult, run_al_experiment
from .config import ExperimentConfig, load_data, model_factory, resolve_pipeline
from .data import make_initial_splits, save_schedule
from .ojkd import inference_parameter_count, save_checkpoint
from .layers import count_parameters
from .report import write_report, write_run

log = logging.getLogger(__name__)


def parameter_counts(config: ExperimentConfig, num_classes: int) -> dict[str, int]:
    net = model_factory(config, num_classes)(0)
    train_count = count_parameters(net)
    infer_count = inference_parameter_count(net)
    return {"train": train_count, "inference": infer_count, "extra": train_count - infer_count}


def run_dir_for(config: ExperimentConfig, out_root: str | Path) -> Path:
    return Path(out_root) / f"{config.variant}__{config.al.strategy}"


def run_experiment(config: ExperimentConfig, out_root: str | Path | None = None, checkpoints: bool = True) -> tuple[ALResult, Path | None]:
    """Train every seed through every cycle; write per-seed CSVs, pools, checkpoints and report.csv."""
    train_set, test_set = load_data(config.data)
    if tuple(train_set.sample_shape) != tuple(config.backbone.input_shape):
        raise ValueError(
            f"backbone input_shape {tuple(config.backbone.input_shape)} does not match data sample shape {train_set.sample_shape}"
        )
    config.al.check_feasible(len(train_set))
    aug, norm = resolve_pipeline(config, train_set)
    schedule = make_initial_splits(
        len(train_set), config.al.initial_pool_size, config.al.num_cycles, config.al.budget_per_cycle, config.al.split_seed
    )
    run_dir = run_dir_for(config, out_root) if out_root is not None else None

    def keep_last(seed, rec, net):
        if run_dir is not None and checkpoints and rec.cycle == config.al.num_cycles - 1:
            save_checkpoint(net, run_dir / f"seed_{seed}" / "model.npz", config.to_dict())

    result = run_al_experiment(
        config.al,
        train_set,
        test_set,
        model_factory(config, train_set.class_count),
        config.optimizer,
        augment=aug,
        normalize=norm,
        out_dir=run_dir,
        schedule=schedule,
        on_cycle=keep_last,
    )
    if run_dir is not None:
        save_schedule(run_dir / "schedule", schedule)
        write_run(run_dir, config.to_dict(), config.config_hash(), result, parameter_counts(config, train_set.class_count))
        write_report(run_dir)
        log.info("wrote %s", run_dir)
    return result, run_dir
