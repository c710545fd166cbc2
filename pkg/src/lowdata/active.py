"""Cycle-based active learning: pools, acquisition scores and the retrain-from-scratch loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import tensor as T
from .data import AugmentSpec, Dataset, Normalization, make_initial_splits, write_index_list
from .ojkd import state_hash
from .optim import OptimizerConfig, TrainResult, _prepare, predict_proba, train
from .layers import Module

log = logging.getLogger(__name__)

STRATEGIES = ("random", "max_entropy", "core_set")
TIE_RTOL = 1e-9


@dataclass(frozen=True)
class Pool:
    """Disjoint labelled / unlabelled index sets, each kept in ascending order."""

    labeled: tuple[int, ...]
    unlabeled: tuple[int, ...]

    @classmethod
    def from_labeled(cls, labeled, n_total: int) -> "Pool":
        lab = sorted(int(i) for i in labeled)
        if len(set(lab)) != len(lab) or (lab and (lab[0] < 0 or lab[-1] >= n_total)):
            raise ValueError("labeled indices must be distinct and inside the dataset")
        mask = np.ones(n_total, dtype=bool)
        mask[lab] = False
        return cls(tuple(lab), tuple(int(i) for i in np.flatnonzero(mask)))

    @property
    def size(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    def add(self, indices) -> "Pool":
        new = [int(i) for i in indices]
        unl = set(self.unlabeled)
        bad = [i for i in new if i not in unl]
        if bad or len(set(new)) != len(new):
            raise ValueError(f"cannot label indices not in the unlabeled pool: {bad[:5]}")
        return Pool.from_labeled(list(self.labeled) + new, self.size)

    def check(self, n_total: int) -> None:
        lab, unl = set(self.labeled), set(self.unlabeled)
        assert not lab & unl, "labeled and unlabeled overlap"
        assert lab | unl == set(range(n_total)), "pool does not cover the dataset"


@dataclass
class ALConfig:
    initial_pool_size: int = 100
    budget_per_cycle: int = 100
    num_cycles: int = 5
    strategy: str = "random"
    seeds: list[int] = field(default_factory=lambda: [0])
    # head whose predictions drive max_entropy ("original" or "fr")
    entropy_head: str = "original"
    split_seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.initial_pool_size < 1 or self.budget_per_cycle < 0 or self.num_cycles < 1:
            raise ValueError("need initial_pool_size >= 1, budget_per_cycle >= 0, num_cycles >= 1")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ValueError("seeds must be nonempty and distinct")

    def labeled_count(self, cycle: int) -> int:
        return self.initial_pool_size + cycle * self.budget_per_cycle

    def check_feasible(self, n_train: int) -> None:
        need = self.labeled_count(self.num_cycles - 1)
        if need > n_train:
            raise ValueError(f"infeasible pool schedule: {need} labels needed, dataset has {n_train}")


# -- scores -------------------------------------------------------------------------


def entropy_score(probs: np.ndarray, atol: float = 1e-5) -> np.ndarray:
    """Shannon entropy (nats) of each row, with 0 ln 0 = 0."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError(f"expected an (N, C) matrix, got shape {p.shape}")
    if np.any(p < 0) or np.any(np.abs(p.sum(axis=1) - 1) > atol):
        raise ValueError("every row must be a probability vector (non-negative, sums to 1)")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1), 0.0, np.log(p.shape[1]))


def top_by_score(scores: np.ndarray, candidates, budget: int) -> list[int]:
    """The ``budget`` candidates with highest score; ties go to the lowest index."""
    candidates = np.asarray(candidates)
    order = np.lexsort((candidates, -np.asarray(scores)))
    return [int(c) for c in candidates[order[:budget]]]


def _sq_dist(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return (diff * diff).sum(axis=1)


def coreset_select(features_labeled: np.ndarray, features_unlabeled: np.ndarray, budget: int) -> list[int]:
    """Greedy k-center (farthest-first) selection.

    Returns positions into ``features_unlabeled`` in selection order. Each step
    takes the unselected point whose squared Euclidean distance to the nearest
    covered point (labelled or already selected) is largest, lowest position on
    ties (relative tolerance ``TIE_RTOL``). With no labelled points the feature
    centroid acts as the first cover.
    """
    u = np.asarray(features_unlabeled, dtype=np.float64)
    lab = np.asarray(features_labeled, dtype=np.float64).reshape(-1, u.shape[1] if u.ndim == 2 else 0)
    if budget > len(u):
        raise ValueError(f"budget {budget} exceeds {len(u)} unlabeled points")
    if budget <= 0:
        return []
    if len(lab):
        min_d = np.full(len(u), np.inf)
        for c in lab:
            np.minimum(min_d, _sq_dist(u, c), out=min_d)
    else:
        min_d = _sq_dist(u, u.mean(axis=0))
    chosen: list[int] = []
    taken = np.zeros(len(u), dtype=bool)
    for _ in range(budget):
        masked = np.where(taken, -np.inf, min_d)
        # distances equal up to float rounding count as tied
        best = masked.max()
        j = int(np.flatnonzero(masked >= best - TIE_RTOL * best)[0])
        chosen.append(j)
        taken[j] = True
        np.minimum(min_d, _sq_dist(u, u[j]), out=min_d)
    return chosen


# -- acquisition -------------------------------------------------------------------


def extract_features(net: Module, images: np.ndarray, normalize: Normalization | None = None, batch_size: int = 512) -> np.ndarray:
    """Eval-mode backbone features."""
    was_training = net.training
    net.eval()
    try:
        with T.no_grad():
            out = [net.backbone(T.as_tensor(_prepare(images[s : s + batch_size], normalize))).data for s in range(0, len(images), batch_size)]
    finally:
        net.train(was_training)
    return np.concatenate(out)


def acquire(
    net: Module | None,
    pool: Pool,
    dataset: Dataset,
    strategy: str,
    budget: int,
    seed: int = 0,
    normalize: Normalization | None = None,
    entropy_head: str = "original",
) -> Pool:
    """Move ``budget`` unlabelled indices chosen by ``strategy`` into the labelled set."""
    if budget > len(pool.unlabeled):
        raise ValueError(f"budget {budget} exceeds unlabeled pool of {len(pool.unlabeled)}")
    unl = np.asarray(pool.unlabeled, dtype=np.int64)
    if budget == 0:
        return pool
    if strategy == "random":
        pick = np.random.default_rng(seed).choice(unl, size=budget, replace=False)
    elif strategy == "max_entropy":
        probs = predict_proba(net, dataset.images[unl], entropy_head, normalize)
        pick = top_by_score(entropy_score(probs), unl, budget)
    elif strategy == "core_set":
        lab = np.asarray(pool.labeled, dtype=np.int64)
        feats = extract_features(net, dataset.images, normalize)
        pick = unl[coreset_select(feats[lab], feats[unl], budget)]
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    return pool.add(pick)


# -- experiment loop -----------------------------------------------------------------


@dataclass
class CycleRecord:
    cycle: int
    labeled_count: int
    accuracies: dict[str, float]
    init_hash: str
    trained_hash: str
    labeled: tuple[int, ...]


@dataclass
class ALResult:
    seeds: list[int]
    labeled_counts: list[int]
    # head -> (seed x cycle) accuracy matrix
    accuracies: dict[str, np.ndarray]
    records: dict[int, list[CycleRecord]]

    def matrix(self, head: str = "original") -> np.ndarray:
        return self.accuracies[head]


def cycle_init_seed(seed: int, cycle: int) -> int:
    """Independent init stream per (run seed, cycle)."""
    return int(np.random.SeedSequence([seed, cycle]).generate_state(1)[0])


def run_al_experiment(
    config: ALConfig,
    train_set: Dataset,
    test_set: Dataset,
    model_factory: Callable[[int], Module],
    opt_config: OptimizerConfig,
    augment: AugmentSpec | None = None,
    normalize: Normalization | None = None,
    out_dir: str | Path | None = None,
    schedule: list[np.ndarray] | None = None,
    on_cycle: Callable[[int, CycleRecord, Module], None] | None = None,
) -> ALResult:
    """Run ``num_cycles`` of reinitialise -> train -> evaluate -> acquire for each seed.

    All strategies start from ``schedule[0]``; ``random`` follows the shared
    nested schedule, so it reproduces the plain supervised protocol.
    ``model_factory(init_seed)`` must return a freshly initialised network.
    """
    n = len(train_set)
    config.check_feasible(n)
    if schedule is None:
        schedule = make_initial_splits(n, config.initial_pool_size, config.num_cycles, config.budget_per_cycle, config.split_seed)
    if len(schedule) < config.num_cycles:
        raise ValueError(f"schedule has {len(schedule)} cycles, need {config.num_cycles}")

    heads: list[str] | None = None
    acc: dict[str, list[list[float]]] = {}
    records: dict[int, list[CycleRecord]] = {}
    counts = [config.labeled_count(k) for k in range(config.num_cycles)]

    for seed in config.seeds:
        pool = Pool.from_labeled(schedule[0], n)
        recs: list[CycleRecord] = []
        rows: dict[str, list[float]] = {}
        for cycle in range(config.num_cycles):
            pool.check(n)
            if len(pool.labeled) != counts[cycle]:
                raise AssertionError(f"cycle {cycle}: {len(pool.labeled)} labels, expected {counts[cycle]}")
            net = model_factory(cycle_init_seed(seed, cycle))
            init_hash = state_hash(net)
            result: TrainResult = train(
                net,
                train_set.subset(pool.labeled),
                opt_config,
                seed=cycle_init_seed(seed, cycle),
                test=test_set,
                augment=augment,
                normalize=normalize,
            )
            rec = CycleRecord(cycle, len(pool.labeled), dict(result.head_accuracies), init_hash, state_hash(net), pool.labeled)
            recs.append(rec)
            for h, a in result.head_accuracies.items():
                rows.setdefault(h, []).append(a)
            log.info("seed %d cycle %d labels %d acc %s", seed, cycle, len(pool.labeled), result.head_accuracies)
            if out_dir is not None:
                write_index_list(Path(out_dir) / f"seed_{seed}" / "pools" / f"cycle_{cycle:03d}.txt", pool.labeled)
            if on_cycle is not None:
                on_cycle(seed, rec, net)
            if cycle + 1 < config.num_cycles:
                if config.strategy == "random":
                    have = set(pool.labeled)
                    nxt = [int(i) for i in schedule[cycle + 1] if int(i) not in have]
                    pool = pool.add(nxt)
                else:
                    pool = acquire(
                        net, pool, train_set, config.strategy, config.budget_per_cycle,
                        seed=cycle_init_seed(seed, cycle), normalize=normalize, entropy_head=config.entropy_head,
                    )
        records[seed] = recs
        if heads is None:
            heads = list(rows)
        for h in heads:
            acc.setdefault(h, []).append(rows[h])

    return ALResult(list(config.seeds), counts, {h: np.array(v) for h, v in acc.items()}, records)
