"""SGD with momentum and weight decay, a one-drop step schedule, and the training loop."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .data import AugmentSpec, Dataset, Normalization, augment_batch
from .layers import Module, softmax
from .tensor import Tensor


@dataclass
class OptimizerConfig:
    lr0: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 200
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 10.0
    batch_size: int = 128

    def __post_init__(self):
        if not self.lr0 >= 0:
            raise ValueError(f"lr0 must be non-negative, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0 < self.lr_drop_fraction <= 1:
            raise ValueError(f"lr_drop_fraction must be in (0, 1], got {self.lr_drop_fraction}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")


def lr_at(epoch: int, config: OptimizerConfig) -> float:
    """``lr0`` before epoch floor(fraction * epochs), ``lr0 / factor`` from then on."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < math.floor(config.lr_drop_fraction * config.epochs):
        return config.lr0
    return config.lr0 / config.lr_drop_factor


def sgd_step(params: list[Tensor], state: dict[int, np.ndarray], config: OptimizerConfig, epoch: int, lr: float | None = None) -> None:
    """In-place update ``v = m*v + g + wd*p; p = p - lr*v``.

    ``state`` maps parameter position to its velocity buffer and is created lazily.
    """
    lr = lr_at(epoch, config) if lr is None else lr
    for i, p in enumerate(params):
        if p.grad is None:
            raise ValueError(f"parameter {i} {p.shape} has no gradient")
        d = p.grad
        if config.weight_decay:
            d = d + config.weight_decay * p.data
        v = state.get(i)
        if v is None:
            v = np.zeros_like(p.data)
        v = config.momentum * v + d if config.momentum else d
        state[i] = v.astype(p.data.dtype, copy=False)
        p.data = (p.data - lr * state[i]).astype(p.data.dtype, copy=False)


class SGD:
    def __init__(self, params: list[Tensor], config: OptimizerConfig):
        self.params = list(params)
        self.config = config
        self.state: dict[int, np.ndarray] = {}

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self, epoch: int) -> None:
        sgd_step(self.params, self.state, self.config, epoch)


@dataclass
class TrainResult:
    loss_curve: list[float]
    accuracy: float | None
    seed: int
    wall_clock: float
    head_accuracies: dict[str, float] = field(default_factory=dict)


def _prepare(images: np.ndarray, normalize: Normalization | None) -> np.ndarray:
    return normalize.apply(images) if normalize is not None else images


def predict_logits(net: Module, images: np.ndarray, head: str = "original", normalize: Normalization | None = None, batch_size: int = 512) -> np.ndarray:
    """Eval-mode logits of one head; ``original`` goes through the inference path."""
    was_training = net.training
    net.eval()
    chunks = []
    try:
        with T.no_grad():
            for start in range(0, len(images), batch_size):
                x = _prepare(images[start : start + batch_size], normalize)
                if head == "original":
                    chunks.append(net.forward_infer(x).data)
                else:
                    outs = net.forward_train(x)
                    chunks.append(outs[net.head_names.index(head)].data)
    finally:
        net.train(was_training)
    return np.concatenate(chunks)


def predict_proba(net: Module, images: np.ndarray, head: str = "original", normalize: Normalization | None = None) -> np.ndarray:
    return softmax(predict_logits(net, images, head, normalize).astype(np.float64))


def evaluate(net: Module, test: Dataset, head: str = "original", normalize: Normalization | None = None) -> float:
    """Fraction of argmax-correct predictions; ties go to the lowest class index."""
    if test is None or len(test) == 0:
        raise ValueError("evaluate needs a nonempty test set")
    logits = predict_logits(net, test.images, head, normalize)
    return float(np.mean(logits.argmax(axis=1) == test.labels))


def train(
    net: Module,
    labeled: Dataset,
    config: OptimizerConfig,
    seed: int = 0,
    test: Dataset | None = None,
    augment: AugmentSpec | None = None,
    normalize: Normalization | None = None,
) -> TrainResult:
    """Full-epoch minibatch SGD over shuffled labelled data.

    All randomness (shuffling, augmentation) comes from ``seed``. ``normalize``
    is applied to every batch when ``augment`` does not already normalise, and
    always to the test set.
    """
    if labeled is None or len(labeled) == 0:
        raise ValueError("cannot train on an empty dataset")
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    opt = SGD(net.parameters(), config)
    curve: list[float] = []
    n = len(labeled)
    for epoch in range(config.epochs):
        net.train()
        lr = lr_at(epoch, config)
        order = rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            x = labeled.images[idx]
            if augment is not None and labeled.is_image:
                x = augment_batch(x, augment, rng)
                if augment.normalize is None:
                    x = _prepare(x, normalize)
            else:
                x = _prepare(x, normalize)
            y = labeled.labels[idx]
            opt.zero_grad()
            loss = net.loss(net.forward_train(x), y)
            T.backward(loss)
            sgd_step(opt.params, opt.state, config, epoch, lr=lr)
            total += float(loss.data) * len(idx)
            seen += len(idx)
        curve.append(total / seen)

    head_acc: dict[str, float] = {}
    acc = None
    if test is not None:
        for head in net.head_names:
            head_acc[head] = evaluate(net, test, head, normalize)
        acc = head_acc["original"]
    return TrainResult(curve, acc, seed, time.perf_counter() - t0, head_acc)
