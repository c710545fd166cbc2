"""Reverse-mode automatic differentiation over numpy arrays.

Every differentiable operation returns a new :class:`Tensor` carrying a
:class:`Node` that records its inputs and a backward rule. Calling
:func:`backward` on a scalar orders the recorded nodes topologically (the
tape) and runs each rule exactly once, accumulating gradients additively.

The gradient gate lives here as a primitive: identity forward, zero backward.
"""

from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_DTYPE: contextvars.ContextVar[type] = contextvars.ContextVar("dtype", default=np.float32)
_GRAD_ENABLED: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
# When set, gradient_gate replays frozen outputs instead of forwarding its input.
_GATE_REPLAY: contextvars.ContextVar["_GateRecorder | None"] = contextvars.ContextVar(
    "gate_replay", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""

    def __init__(self, op: str, detail: str):
        super().__init__(f"{op}: {detail}")
        self.op = op


def default_dtype() -> type:
    return _DTYPE.get()


@contextlib.contextmanager
def precision(dtype) -> Iterator[None]:
    """Set the dtype used for newly created tensors (float32 or float64)."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dtype}")
    token = _DTYPE.set(dtype)
    try:
        yield
    finally:
        _DTYPE.reset(token)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    token = _GRAD_ENABLED.set(False)
    try:
        yield
    finally:
        _GRAD_ENABLED.reset(token)


def grad_enabled() -> bool:
    return _GRAD_ENABLED.get()


@dataclass(eq=False)
class Node:
    """One recorded operation: its inputs and how to push gradients back into them."""

    op: str
    inputs: tuple["Tensor", ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        dtype = dtype or _DTYPE.get()
        arr = np.asarray(data)
        if arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, dtype=self.data.dtype.type)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self) -> None:
        backward(self)

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if dtype is None:
        dtype = _DTYPE.get()
    return Tensor(np.asarray(x, dtype=dtype), requires_grad=False, dtype=dtype)


def _record(op: str, out: np.ndarray, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and, if any input needs gradients, put it on the tape."""
    t = Tensor.__new__(Tensor)
    t.data = out
    t.grad = None
    t.name = None
    needs = _GRAD_ENABLED.get() and any(i.requires_grad for i in inputs)
    t.requires_grad = needs
    t.node = Node(op, tuple(inputs), backward_fn) if needs else None
    return t


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, f"cannot broadcast shapes {a.shape} and {b.shape}") from None


def _pair(x, y):
    if isinstance(x, Tensor) and not isinstance(y, Tensor):
        y = as_tensor(y, dtype=x.data.dtype.type)
    elif isinstance(y, Tensor) and not isinstance(x, Tensor):
        x = as_tensor(x, dtype=y.data.dtype.type)
    else:
        x, y = as_tensor(x), as_tensor(y)
    return x, y


# -- elementwise ------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)

    def back(g):
        return (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.shape),
        )

    return _record("div", a.data / b.data, (a, b), back)


def neg(a: Tensor) -> Tensor:
    return _record("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    def back(g):
        return (g * exponent * a.data ** (exponent - 1),)

    return _record("pow", a.data**exponent, (a,), back)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _record("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _record("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _record("relu", np.where(mask, a.data, 0).astype(a.data.dtype), (a,), lambda g: (g * mask,))


def gradient_gate(x: Tensor) -> Tensor:
    """Identity in the forward pass; sends an all-zero gradient back to ``x``.

    The output shares ``x``'s buffer, so forward values are bit-identical.
    """
    recorder = _GATE_REPLAY.get()
    if recorder is not None:
        data = recorder.next(x.data)
    else:
        data = x.data

    def back(g):
        return (np.zeros_like(x.data),)

    return _record("gradient_gate", data, (x,), back)


# -- reductions and shape ops -----------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record("sum", np.asarray(out, dtype=a.data.dtype), (a,), back)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = math.prod(a.shape[i] for i in axes)
    out = a.data.mean(axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, a.shape).astype(a.data.dtype),)

    return _record("mean", np.asarray(out, dtype=a.data.dtype), (a,), back)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", f"cannot reshape {a.shape} into {shape}") from None
    return _record("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    """Collapse every axis after the batch axis."""
    return reshape(a, (a.shape[0], -1))


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError("broadcast", f"cannot broadcast {a.shape} to {shape}") from None
    return _record("broadcast", out, (a,), lambda g: (_unbroadcast(g, a.shape),))


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError("matmul", f"expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", f"inner dimensions differ: {a.shape[1]} vs {b.shape[0]}")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _record("matmul", a.data @ b.data, (a, b), back)


# -- convolution and pooling ------------------------------------------------


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C, Ho, Wo, kh, kw) strided view."""
    return sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation with explicit zero padding. No dilation."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError("conv2d", f"expected 4-D input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weight.shape
    if c != wc:
        raise ShapeError("conv2d", f"input has {c} channels but kernel expects {wc}")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d", f"invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError("conv2d", f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if bias is not None and bias.shape != (f,):
        raise ShapeError("conv2d", f"bias shape {bias.shape} does not match {f} filters")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _windows(xp, kh, kw, stride)
    ho, wo = cols.shape[2], cols.shape[3]
    out = np.tensordot(cols, weight.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
        gcols = np.tensordot(g, weight.data, axes=([1], [0]))  # N, Ho, Wo, C, kh, kw
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[..., i, j].transpose(
                    0, 3, 1, 2
                )
        gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record("conv2d", out, inputs, back)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    """Max pooling; ties resolve to the first position in row-major window order."""
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("max_pool2d", f"expected 4-D input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("max_pool2d", f"window {kernel} exceeds spatial size {x.shape[2:]}")
    win = _windows(x.data, kernel, kernel, stride)
    n, c, ho, wo = win.shape[:4]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    idx = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                mask = idx == i * kernel + j
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * mask
        return (gx,)

    return _record("max_pool2d", np.ascontiguousarray(out), (x,), back)


def avg_pool2d(x: Tensor, kernel: int = 2, stride: int | None = None) -> Tensor:
    stride = stride or kernel
    if x.ndim != 4:
        raise ShapeError("avg_pool2d", f"expected 4-D input, got {x.shape}")
    if x.shape[2] < kernel or x.shape[3] < kernel:
        raise ShapeError("avg_pool2d", f"window {kernel} exceeds spatial size {x.shape[2:]}")
    win = _windows(x.data, kernel, kernel, stride)
    ho, wo = win.shape[2], win.shape[3]
    out = win.mean(axis=(4, 5))
    scale = 1.0 / (kernel * kernel)

    def back(g):
        gx = np.zeros_like(x.data)
        for i in range(kernel):
            for j in range(kernel):
                gx[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * scale
        return (gx,)

    return _record("avg_pool2d", out.astype(x.data.dtype), (x,), back)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError("global_avg_pool", f"expected 4-D input, got {x.shape}")
    return mean(x, axis=(2, 3))


# -- backward pass ----------------------------------------------------------


def build_tape(loss: Tensor) -> list[Node]:
    """Return the recorded nodes reachable from ``loss`` in topological order.

    Inputs of every node appear before it; each node appears once.
    """
    order: list[Node] = []
    seen: set[int] = set()
    if loss.node is None:
        return order
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        node = t.node
        if node is None:
            continue
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((t, True))
        for inp in reversed(node.inputs):
            if inp.node is not None and id(inp.node) not in seen:
                stack.append((inp, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every requires-grad tensor reachable from a scalar loss.

    Gradients accumulate into existing ``.grad`` buffers; reset them between steps.
    """
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    # node -> the tensor it produced, so upstream grads can be looked up
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    outputs = {id(loss.node): loss}
    for node in tape:
        for inp in node.inputs:
            if inp.node is not None:
                outputs[id(inp.node)] = inp

    for node in reversed(tape):
        out = outputs[id(node)]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        _accumulate(out, g)
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            if ig.dtype != inp.data.dtype:
                ig = ig.astype(inp.data.dtype)
            key = id(inp)
            if inp.node is None:
                _accumulate(inp, ig)
            elif key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True).reshape(t.shape)
    else:
        t.grad = t.grad + g.reshape(t.shape)


# -- finite differences -----------------------------------------------------


class _GateRecorder:
    """Captures gate outputs on a reference pass and replays them afterwards."""

    def __init__(self) -> None:
        self.frozen: list[np.ndarray] = []
        self.recording = True
        self.cursor = 0

    def next(self, data: np.ndarray) -> np.ndarray:
        if self.recording:
            self.frozen.append(data.copy())
            return data
        out = self.frozen[self.cursor]
        self.cursor += 1
        return out

    def rewind(self) -> None:
        self.recording = False
        self.cursor = 0


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor | np.ndarray,
    epsilon: float = 1e-6,
    freeze_gates: bool = True,
) -> float:
    """Compare the analytic gradient of scalar ``f`` at ``x`` with central differences.

    Returns ``max_i |analytic_i - numeric_i| / max(1, |numeric_i|)``.
    Runs in 64-bit. With ``freeze_gates`` the output of every gradient gate is
    held at its value from the unperturbed pass, so the numeric derivative sees
    gated branches as constants, matching the gate's zero backward.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    with precision(np.float64):
        recorder = _GateRecorder() if freeze_gates else None
        token = _GATE_REPLAY.set(recorder)
        try:
            xt = Tensor(base.copy(), requires_grad=True)
            out = f(xt)
            if out.size != 1:
                raise ValueError(f"finite_difference_check needs a scalar function, got shape {out.shape}")
            backward(out)
            analytic = xt.grad if xt.grad is not None else np.zeros_like(base)

            numeric = np.zeros_like(base)
            flat = numeric.reshape(-1)
            probe = base.copy()
            pflat = probe.reshape(-1)
            for i in range(pflat.size):
                orig = pflat[i]
                pflat[i] = orig + epsilon
                if recorder is not None:
                    recorder.rewind()
                fp = float(f(Tensor(probe.copy())).data.reshape(-1)[0])
                pflat[i] = orig - epsilon
                if recorder is not None:
                    recorder.rewind()
                fm = float(f(Tensor(probe.copy())).data.reshape(-1)[0])
                pflat[i] = orig
                flat[i] = (fp - fm) / (2 * epsilon)
        finally:
            _GATE_REPLAY.reset(token)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0
