"""Central-difference checks for every differentiable primitive and layer.

Each case draws random inputs and parameters, contracts the output with a
fixed random tensor to get a scalar, and compares analytic gradients (w.r.t.
the input and each parameter) against central differences in 64-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from . import tensor as T
from .layers import InitSpec, batch_norm2d, layer_norm, linear, softmax_cross_entropy
from .refiner import FeatureRefinerConfig, build_feature_refiner
from .tensor import Tensor

TOLERANCE = 1e-4
EPSILON = 1e-6


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float

    @property
    def passed(self) -> bool:
        return self.max_error < TOLERANCE


def _contract(out: Tensor, proj: np.ndarray) -> Tensor:
    return (out * Tensor(proj)).sum()


def _wrt(arrays: dict[str, np.ndarray], forward: Callable[..., Tensor], proj: np.ndarray) -> Iterator[tuple[Callable, np.ndarray]]:
    """One scalar function per named argument, the others held fixed."""
    for key in arrays:
        def f(v, key=key):
            args = {k: (v if k == key else Tensor(a)) for k, a in arrays.items()}
            return _contract(forward(**args), proj)

        yield f, arrays[key]


def _cases(rng: np.random.Generator) -> dict[str, Callable[[], Iterator[tuple[Callable, np.ndarray]]]]:
    def lin():
        n, di, do = rng.integers(1, 5), rng.integers(1, 6), rng.integers(1, 6)
        a = {"x": rng.normal(size=(n, di)), "w": rng.normal(size=(di, do)), "b": rng.normal(size=do)}
        return _wrt(a, lambda x, w, b: linear(x, w, b), rng.normal(size=(n, do)))

    def conv():
        n, c, f = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 3)
        k, stride, pad = int(rng.integers(1, 4)), int(rng.integers(1, 3)), int(rng.integers(0, 2))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        a = {"x": rng.normal(size=(n, c, h, w)), "wt": rng.normal(size=(f, c, k, k)), "b": rng.normal(size=f)}
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        return _wrt(a, lambda x, wt, b: T.conv2d(x, wt, b, stride=stride, padding=pad), rng.normal(size=(n, f, ho, wo)))

    def relu_mlp():
        n, d = rng.integers(1, 5), rng.integers(2, 6)
        a = {"x": rng.normal(size=(n, d)), "w1": rng.normal(size=(d, d)), "w2": rng.normal(size=(d, 3))}
        return _wrt(a, lambda x, w1, w2: T.matmul(T.relu(T.matmul(x, w1)), w2), rng.normal(size=(n, 3)))

    def lnorm():
        n, d = rng.integers(1, 5), rng.integers(2, 7)
        a = {"x": rng.normal(size=(n, d)), "g": rng.normal(size=d), "b": rng.normal(size=d)}
        return _wrt(a, lambda x, g, b: layer_norm(x, g, b), rng.normal(size=(n, d)))

    def bnorm():
        n, c, h, w = rng.integers(2, 4), rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 4)
        a = {"x": rng.normal(size=(n, c, h, w)), "g": rng.normal(size=c), "b": rng.normal(size=c)}

        def fwd(x, g, b):
            return batch_norm2d(x, g, b, np.zeros(c), np.ones(c), training=True)

        return _wrt(a, fwd, rng.normal(size=(n, c, h, w)))

    def ce():
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 6))
        labels = rng.integers(0, c, size=n)
        logits = rng.normal(size=(n, c)) * 3
        return iter([(lambda z: softmax_cross_entropy(z, labels), logits)])

    def maxpool():
        n, c, k = rng.integers(1, 3), rng.integers(1, 3), int(rng.integers(2, 4))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        x = rng.normal(size=(n, c, h, w))
        proj = rng.normal(size=(n, c, (h - k) // k + 1, (w - k) // k + 1))
        return _wrt({"x": x}, lambda x: T.max_pool2d(x, k), proj)

    def avgpool():
        n, c, k = rng.integers(1, 3), rng.integers(1, 3), int(rng.integers(2, 4))
        h, w = int(rng.integers(k, 7)), int(rng.integers(k, 7))
        proj = rng.normal(size=(n, c, (h - k) // k + 1, (w - k) // k + 1))
        return _wrt({"x": rng.normal(size=(n, c, h, w))}, lambda x: T.avg_pool2d(x, k), proj)

    def gap():
        n, c, h, w = rng.integers(1, 3), rng.integers(1, 4), rng.integers(1, 5), rng.integers(1, 5)
        return _wrt({"x": rng.normal(size=(n, c, h, w))}, T.global_avg_pool, rng.normal(size=(n, c)))

    def elementwise():
        shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        a = {"x": rng.normal(size=shape), "y": rng.uniform(0.5, 2.0, size=(1, shape[1]))}
        return _wrt(a, lambda x, y: T.exp(x * 0.3) / y - x * y + T.log(y) ** 2, rng.normal(size=shape))

    def refiner():
        d_bbf, d_frf, c = int(rng.integers(4, 9)), int(rng.integers(2, 5)), int(rng.integers(2, 5))
        head = build_feature_refiner(FeatureRefinerConfig(d_bbf, d_frf, c), InitSpec("kaiming_normal", int(rng.integers(1 << 30))))
        for p in head.parameters():
            p.data = p.data + 0.1 * rng.normal(size=p.shape)
        x = rng.normal(size=(int(rng.integers(1, 4)), d_bbf))
        labels = rng.integers(0, c, size=len(x))
        return iter([(lambda f: softmax_cross_entropy(head(f), labels), x)])

    return {
        "linear": lin,
        "conv2d": conv,
        "relu_composite": relu_mlp,
        "layer_norm": lnorm,
        "batch_norm2d_train": bnorm,
        "softmax_cross_entropy": ce,
        "max_pool2d": maxpool,
        "avg_pool2d": avgpool,
        "global_avg_pool": gap,
        "elementwise": elementwise,
        "feature_refiner": refiner,
    }


def run_suite(instances: int = 20, seed: int = 0, names: list[str] | None = None) -> list[CheckResult]:
    results = []
    with T.precision(np.float64):
        rng = np.random.default_rng(seed)
        cases = _cases(rng)
        for name, make in cases.items():
            if names and name not in names:
                continue
            worst = 0.0
            for _ in range(instances):
                for f, x in make():
                    worst = max(worst, T.finite_difference_check(f, x, EPSILON))
            results.append(CheckResult(name, instances, worst))
    return results
