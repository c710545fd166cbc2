"""Layer primitives built on the autodiff core.

A deliberately small module system: a :class:`Module` finds its parameters
(``Tensor`` attributes with ``requires_grad``) and children by walking its
attributes in definition order, which keeps parameter ordering and therefore
initialisation and checkpoints deterministic.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

LAYER_NORM_EPS = 1e-5
BATCH_NORM_EPS = 1e-5
BATCH_NORM_MOMENTUM = 0.1

INIT_SCHEMES = ("kaiming_uniform", "kaiming_normal", "zeros", "ones")


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "kaiming_uniform"
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in INIT_SCHEMES:
            raise ValueError(f"unknown init scheme {self.scheme!r}; expected one of {INIT_SCHEMES}")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def init_weight(shape: tuple[int, ...], fan_in: int, scheme: str, rng: np.random.Generator) -> np.ndarray:
    """Weight tensor for a ReLU network (gain sqrt(2))."""
    if scheme == "zeros":
        return np.zeros(shape)
    if scheme == "ones":
        return np.ones(shape)
    std = math.sqrt(2.0 / fan_in)
    if scheme == "kaiming_uniform":
        bound = math.sqrt(3.0) * std
        return rng.uniform(-bound, bound, size=shape)
    return rng.normal(0.0, std, size=shape)


class Module:
    training: bool = True

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[tuple[str, "Module"]]:
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
        for name, child in self._children():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in getattr(self, "_buffer_names", ()):
            yield prefix + name, getattr(self, name)
        for name, child in self._children():
            yield from child.named_buffers(prefix + name + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, child in self._children():
            yield from child.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        buffers = {name for name, _ in self.named_buffers()}
        expected = set(params) | buffers
        missing, unexpected = expected - set(state), set(state) - expected
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(unexpected)}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError("load_state_dict", f"{name}: expected {p.shape}, got {state[name].shape}")
            p.data = np.array(state[name], copy=True)
        for name in buffers:
            owner, attr = self._resolve(name)
            setattr(owner, attr, np.array(state[name], copy=True))

    def _resolve(self, dotted: str) -> tuple["Module", str]:
        *path, attr = dotted.split(".")
        owner = self
        i = 0
        while i < len(path):
            nxt = getattr(owner, path[i])
            if isinstance(nxt, (list, tuple)):
                nxt = nxt[int(path[i + 1])]
                i += 1
            owner = nxt
            i += 1
        return owner, attr


def count_parameters(module: Module) -> int:
    """Number of trainable scalars."""
    return sum(p.size for p in module.parameters())


def _param(values: np.ndarray) -> Tensor:
    return Tensor(values, requires_grad=True)


# -- functional forms -------------------------------------------------------


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with weight stored as (d_in, d_out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError("linear", f"input {x.shape} incompatible with weight {weight.shape}")
    y = T.matmul(x, weight)
    return y + bias if bias is not None else y


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LAYER_NORM_EPS) -> Tensor:
    """Per-row standardisation followed by an elementwise affine map."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise ShapeError("layer_norm", f"input {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def back(g):
        gxhat = g * gamma.data
        gx = inv_std * (
            gxhat - gxhat.mean(axis=1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return T._record("layer_norm", out.astype(x.data.dtype), (x, gamma, beta), back)


def batch_norm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = BATCH_NORM_MOMENTUM,
    eps: float = BATCH_NORM_EPS,
) -> Tensor:
    """Per-channel normalisation of an (N, C, H, W) batch.

    In training mode batch statistics are used and the running buffers are
    updated in place (unbiased variance, as in common frameworks).
    """
    if x.ndim != 4 or gamma.shape != (x.shape[1],):
        raise ShapeError("batch_norm2d", f"input {x.shape}, gamma {gamma.shape}")
    axes = (0, 2, 3)
    shape = (1, -1, 1, 1)
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mu = x.data.mean(axis=axes)
        centered = x.data - mu.reshape(shape)
        var = (centered * centered).mean(axis=axes)
        if count > 1:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * count / (count - 1)
    else:
        mu, var = running_mean, running_var
        centered = x.data - mu.reshape(shape).astype(x.data.dtype)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype).reshape(shape)
    xhat = centered * inv_std
    out = xhat * gamma.data.reshape(shape) + beta.data.reshape(shape)

    def back(g):
        gxhat = g * gamma.data.reshape(shape)
        if training:
            gx = inv_std * (
                gxhat - gxhat.mean(axis=axes, keepdims=True) - xhat * (gxhat * xhat).mean(axis=axes, keepdims=True)
            )
        else:
            gx = gxhat * inv_std
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return T._record("batch_norm2d", out.astype(x.data.dtype), (x, gamma, beta), back)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Batch-mean negative log-likelihood of integer labels."""
    labels = np.asarray(labels)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError("softmax_cross_entropy", f"logits {logits.shape} vs labels {labels.shape}")
    n, c = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits.data)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def back(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1
        return (grad * (g / n),)

    return T._record("softmax_cross_entropy", np.asarray(loss, dtype=logits.data.dtype), (logits,), back)


# -- layers -----------------------------------------------------------------


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, scheme: str = "kaiming_uniform"):
        self.d_in, self.d_out = d_in, d_out
        self.weight = _param(init_weight((d_in, d_out), d_in, scheme, rng))
        self.bias = _param(np.zeros(d_out))

    def forward(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(
        self,
        c_in: int,
        c_out: int,
        kernel: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        scheme: str = "kaiming_uniform",
    ):
        self.stride, self.padding = stride, padding
        fan_in = c_in * kernel * kernel
        self.weight = _param(init_weight((c_out, c_in, kernel, kernel), fan_in, scheme, rng))
        self.bias = _param(np.zeros(c_out)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = LAYER_NORM_EPS):
        self.eps = eps
        self.gamma = _param(np.ones(d))
        self.beta = _param(np.zeros(d))

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class BatchNorm2d(Module):
    _buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = BATCH_NORM_MOMENTUM, eps: float = BATCH_NORM_EPS):
        self.momentum, self.eps = momentum, eps
        self.gamma = _param(np.ones(channels))
        self.beta = _param(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=self.gamma.data.dtype)
        self.running_var = np.ones(channels, dtype=self.gamma.data.dtype)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class ReLU(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.relu(x)


class MaxPool2d(Module):
    def __init__(self, kernel: int = 2, stride: int | None = None):
        self.kernel, self.stride = kernel, stride

    def forward(self, x: Tensor) -> Tensor:
        return T.max_pool2d(x, self.kernel, self.stride)


class GlobalAvgPool(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.global_avg_pool(x)


class Flatten(Module):
    def forward(self, x: Tensor) -> Tensor:
        return T.flatten(x)


class Sequential(Module):
    def __init__(self, *layers: Module):
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, i: int) -> Module:
        return self.layers[i]
