"""Acceptance gate: one test per criterion, each reported as a PASS/FAIL line in the summary."""

import json
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from lowdata import tensor as T
from lowdata.active import Pool, coreset_select, cycle_init_seed, entropy_score
from lowdata.backbone import BackboneConfig
from lowdata.cli import main
from lowdata.config import ExperimentConfig, load_data, model_factory
from lowdata.data import read_index_list
from lowdata.experiment import run_experiment
from lowdata.gradcheck import run_suite
from lowdata.layers import InitSpec, count_parameters, softmax_cross_entropy
from lowdata.ojkd import build_model, inference_parameter_count, state_hash
from lowdata.optim import OptimizerConfig, lr_at, sgd_step
from lowdata.refiner import FeatureRefinerConfig, build_feature_refiner, expected_parameter_count
from lowdata.tensor import Tensor

from test_active import brute_force_farthest_first


class Clock:
    def __init__(self, limit: float):
        self.limit = limit
        self.start = time.perf_counter()

    def check(self):
        elapsed = time.perf_counter() - self.start
        assert elapsed < self.limit, f"took {elapsed:.1f}s, limit {self.limit}s"


@pytest.mark.criterion(1, "gradient gate: bit-exact identity forward, zero backward")
def test_gradient_gate_contract():
    clock = Clock(5)
    rng = np.random.default_rng(0)
    for i in range(1000):
        shape = tuple(rng.integers(1, 6, size=rng.integers(1, 5)))
        dtype = np.float64 if i % 2 else np.float32
        x = (rng.normal(size=shape) * 10.0 ** rng.integers(-30, 30)).astype(dtype)
        if i % 10 == 0:
            x.flat[0] = [np.inf, -np.inf, np.nan, -0.0, 5e-324][i // 10 % 5]
        t = Tensor(x, requires_grad=True, dtype=dtype)
        y = T.gradient_gate(t)
        assert y.data.tobytes() == x.tobytes()
        upstream = rng.normal(size=shape) * 10.0 ** rng.integers(-5, 5)
        T.backward((y * Tensor(upstream, dtype=dtype)).sum())
        assert t.grad.shape == x.shape and not np.any(t.grad)
    clock.check()


@pytest.mark.criterion(2, "gate blocks the original head; backbone grads equal FR-only grads")
def test_gate_blocking_equivalence():
    clock = Clock(30)
    rng = np.random.default_rng(1)
    cfg = BackboneConfig("mini_conv", (1, 6, 6), [4, 8])

    def grads(net, x, y, loss_fn):
        net.zero_grad()
        T.backward(loss_fn(net.forward_train(x), y))
        return [p.grad.copy() for p in net.backbone.parameters()]

    with T.precision(np.float64):
        net = build_model("fr_ojkd", cfg, 5, 8, InitSpec(seed=1))
        assert net.gate_enabled
        for _ in range(20):
            x, y = rng.normal(size=(8, 1, 6, 6)), rng.integers(0, 5, 8)
            net.original_weight = 1.0
            total = grads(net, x, y, net.loss)
            fr_only = grads(net, x, y, lambda lg, lb: softmax_cross_entropy(lg[1], lb))
            net.original_weight = 5.0
            scaled = grads(net, x, y, net.loss)
            for a, b, c in zip(total, fr_only, scaled):
                assert np.array_equal(a, b) and np.array_equal(a, c)
            assert any(np.any(g) for g in total)
    clock.check()


@pytest.mark.criterion(3, "finite-difference suite, max rel. error < 1e-4 in 64-bit")
def test_finite_difference_suite():
    clock = Clock(120)
    results = run_suite(instances=20, seed=0)
    names = {r.name for r in results}
    for required in ("linear", "conv2d", "relu_composite", "layer_norm", "batch_norm2d_train", "softmax_cross_entropy", "max_pool2d", "avg_pool2d", "global_avg_pool"):
        assert required in names
    for r in results:
        assert r.instances >= 20
        assert r.max_error < 1e-4, f"{r.name}: {r.max_error:.3e}"
    clock.check()


@pytest.mark.criterion(4, "FR extra-parameter counts 42058 / 74826 / 289893")
def test_parameter_accounting_oracle():
    clock = Clock(1)
    for (b, f, c), expected in {(512, 64, 10): 42058, (1024, 64, 10): 74826, (512, 256, 101): 289893}.items():
        cfg = FeatureRefinerConfig(b, f, c)
        assert expected_parameter_count(cfg) == expected
        assert count_parameters(build_feature_refiner(cfg, InitSpec("zeros"))) == expected
    clock.check()


@pytest.mark.criterion(5, "inference drop: forward_infer == original branch, FR excluded from count")
def test_inference_drop_identity():
    clock = Clock(10)
    rng = np.random.default_rng(5)
    cfg = BackboneConfig("mini_conv", (3, 8, 8), [4, 8])
    net = build_model("fr_ojkd", cfg, 6, 4, InitSpec(seed=5))
    for _ in range(3):
        net.forward_train(rng.normal(size=(16, 3, 8, 8)))
    net.eval()
    for _ in range(100):
        x = rng.normal(size=(int(rng.integers(1, 6)), 3, 8, 8)).astype(np.float32)
        assert net.forward_infer(x).data.tobytes() == net.forward_train(x)[0].data.tobytes()
    baseline = build_model("baseline", cfg, 6, init=InitSpec(seed=5))
    extra = expected_parameter_count(FeatureRefinerConfig(8, 4, 6))
    assert inference_parameter_count(net) == count_parameters(baseline)
    assert count_parameters(net) - inference_parameter_count(net) == extra == count_parameters(net.fr_head)
    clock.check()


@pytest.mark.criterion(6, "core-set greedy k-center matches the brute-force oracle (500 instances)")
def test_coreset_oracle():
    clock = Clock(30)
    rng = np.random.default_rng(6)
    for i in range(500):
        u, lab, d = int(rng.integers(1, 13)), int(rng.integers(0, 6)), int(rng.integers(1, 5))
        if i % 3 == 0:
            fu, fl = rng.integers(-2, 3, (u, d)).astype(float), rng.integers(-2, 3, (lab, d)).astype(float)
        else:
            fu, fl = rng.normal(size=(u, d)), rng.normal(size=(lab, d))
        budget = int(rng.integers(1, u + 1))
        assert coreset_select(fl, fu, budget) == brute_force_farthest_first(fl, fu, budget)
    clock.check()


@pytest.mark.criterion(7, "entropy analytics to 1e-12 and range on 10^4 rows")
def test_entropy_analytics():
    clock = Clock(5)
    c = 10
    assert abs(entropy_score(np.full((1, c), 1 / c))[0] - math.log(c)) < 1e-12
    assert abs(entropy_score(np.eye(c)[3:4])[0]) < 1e-12
    two = np.zeros((1, c))
    two[0, [2, 7]] = 0.5
    assert abs(entropy_score(two)[0] - math.log(2)) < 1e-12
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.full(c, 0.5), size=10_000)
    p[::100, :] = np.eye(c)[rng.integers(0, c, 100)]
    s = entropy_score(p)
    assert np.all(s >= 0) and np.all(s <= math.log(c))
    clock.check()


@pytest.mark.criterion(8, "lr schedule boundaries and two-step momentum recurrence")
def test_schedule_and_optimizer():
    clock = Clock(1)
    cfg = OptimizerConfig(lr0=0.1, epochs=200)
    assert lr_at(159, cfg) == 0.1 and lr_at(160, cfg) == 0.01
    step_cfg = OptimizerConfig(lr0=0.1, momentum=0.9, weight_decay=0.0)
    with T.precision(np.float64):
        p = Tensor([1.0], requires_grad=True)
        state = {}
        p.grad = np.array([1.0])
        sgd_step([p], state, step_cfg, 0)
        assert p.data[0] == 0.9 and state[0][0] == 1.0
        p.grad = np.array([1.0])
        sgd_step([p], state, step_cfg, 0)
        assert state[0][0] == 1.9 and p.data[0] == 0.71
    clock.check()


# 8x8 ring images through a conv + batch-norm backbone, trained with the
# reference optimizer settings (lr 0.1, momentum 0.9, wd 5e-4, 200 epochs,
# drop at 80%, batch 128). See README for the choice of this task.
LOW_DATA_TASK = {
    "data": {"kind": "rings", "classes": 4, "image_size": 8, "noise": 0.3, "n_per_class": 100, "test_per_class": 100},
    "backbone": {"kind": "mini_conv", "input_shape": [1, 8, 8], "stage_widths": [32, 64], "d_bbf": 64},
    "d_frf": 16,
    "optimizer": {"lr0": 0.1, "momentum": 0.9, "weight_decay": 5e-4, "epochs": 200, "batch_size": 128},
    "al": {"initial_pool_size": 100, "budget_per_cycle": 0, "num_cycles": 1, "strategy": "random"},
    "seeds": [0, 1, 2, 3, 4],
}


@pytest.mark.criterion(9, "low-data benefit: FR-OJKD mean >= baseline mean, heads within 2pp (100 labels, 5 seeds)")
def test_directional_low_data_benefit():
    clock = Clock(600)
    acc = {}
    for variant in ("baseline", "fr_ojkd"):
        result, _ = run_experiment(ExperimentConfig.from_dict({**LOW_DATA_TASK, "variant": variant}))
        acc[variant] = {h: m[:, 0] for h, m in result.accuracies.items()}
    base = acc["baseline"]["original"].mean()
    fr_orig = acc["fr_ojkd"]["original"].mean()
    fr_head = acc["fr_ojkd"]["fr"].mean()
    print(f"baseline {base:.4f}  fr_ojkd original head {fr_orig:.4f}  fr head {fr_head:.4f}")
    assert fr_orig >= base
    assert abs(fr_orig - fr_head) <= 0.02
    clock.check()


DETERMINISM_TASK = {
    "data": {"kind": "rings", "classes": 3, "image_size": 8, "noise": 0.3, "n_per_class": 20, "test_per_class": 10},
    "backbone": {"kind": "mini_conv", "input_shape": [1, 8, 8], "stage_widths": [4, 8]},
    "d_frf": 4,
    "augment": {"hflip": True, "crop": 8, "padding": 1},
    "optimizer": {"lr0": 0.05, "epochs": 3, "batch_size": 16},
    "al": {"initial_pool_size": 12, "budget_per_cycle": 6, "num_cycles": 3, "strategy": "core_set"},
    "seeds": [0, 1],
}


@pytest.mark.criterion(10, "determinism: identical runs give byte-identical report CSVs")
def test_determinism(tmp_path):
    config = tmp_path / "c.json"
    config.write_text(json.dumps(DETERMINISM_TASK))
    for name in ("a", "b"):
        assert main(["al", "--config", str(config), "--out", str(tmp_path / name), "--threads", "1"]) == 0
    csv_a = (tmp_path / "a" / "fr_ojkd__core_set" / "report.csv").read_bytes()
    csv_b = (tmp_path / "b" / "fr_ojkd__core_set" / "report.csv").read_bytes()
    assert csv_a == csv_b and len(csv_a.splitlines()) == 1 + 2 * 3
    for seed in (0, 1):
        a = (tmp_path / "a" / "fr_ojkd__core_set" / f"seed_{seed}" / "cycles.csv").read_bytes()
        assert a == (tmp_path / "b" / "fr_ojkd__core_set" / f"seed_{seed}" / "cycles.csv").read_bytes()


INTEGRITY_TASK = {
    "data": {"kind": "blobs", "classes": 4, "dim": 8, "noise": 1.0, "n_per_class": 40, "test_per_class": 20},
    "backbone": {"kind": "mlp", "input_shape": [8], "stage_widths": [16], "d_bbf": 16},
    "d_frf": 8,
    "optimizer": {"lr0": 0.05, "epochs": 3, "batch_size": 16},
    "al": {"initial_pool_size": 20, "budget_per_cycle": 15, "num_cycles": 4},
    "seeds": [0, 1, 2],
}


@pytest.mark.criterion(11, "AL harness integrity: partitions, nesting, budgets, per-cycle re-init")
def test_al_harness_integrity(tmp_path):
    clock = Clock(600)
    init0 = {}
    for strategy in ("random", "max_entropy", "core_set"):
        cfg = ExperimentConfig.from_dict({**INTEGRITY_TASK, "al": {**INTEGRITY_TASK["al"], "strategy": strategy}})
        result, run_dir = run_experiment(cfg, tmp_path)
        n = len(load_data(cfg.data)[0])
        factory = model_factory(cfg, 4)
        al = cfg.al
        for seed, recs in result.records.items():
            assert [r.labeled_count for r in recs] == [al.initial_pool_size + k * al.budget_per_cycle for k in range(al.num_cycles)]
            for k, rec in enumerate(recs):
                pool = Pool.from_labeled(rec.labeled, n)
                pool.check(n)
                assert len(pool.labeled) == rec.labeled_count
                on_disk = read_index_list(run_dir / f"seed_{seed}" / "pools" / f"cycle_{k:03d}.txt")
                assert tuple(on_disk) == rec.labeled
                # fresh weights every cycle, from that cycle's own init stream
                assert rec.init_hash == state_hash(factory(cycle_init_seed(seed, k)))
                if k:
                    prev = recs[k - 1]
                    assert set(prev.labeled) < set(rec.labeled)
                    assert len(set(rec.labeled) - set(prev.labeled)) == al.budget_per_cycle
                    assert rec.init_hash != prev.init_hash
                    assert rec.init_hash != prev.trained_hash
                    assert rec.trained_hash != prev.trained_hash
            init0.setdefault(seed, set()).add(recs[0].init_hash)
            assert set(recs[0].labeled) == set(result.records[result.seeds[0]][0].labeled)
    assert all(len(h) == 1 for h in init0.values())
    assert len({next(iter(h)) for h in init0.values()}) == len(init0)
    clock.check()
