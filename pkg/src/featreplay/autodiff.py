"""Reverse-mode automatic differentiation over dense float64 arrays.

The graph is rebuilt on every forward pass (define-by-run). Each recorded
node keeps its parents and a closure mapping the upstream gradient to one
gradient per parent. Only first-order derivatives are supported.

Parameters live in flat buffers owned by a :class:`ParameterSet`; each
:class:`Parameter` is a view into that buffer, so optimizers, clipping and
snapshots act on one contiguous array.
"""

from __future__ import annotations

import contextlib
from collections.abc import Callable, Iterable, Iterator, Sequence
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericFailure

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "parents", "backward_fn", "op", "grad")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, parents: tuple = (), backward_fn=None, op: str = "leaf"):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractViolation(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    # operator sugar; all of these dispatch to the module-level primitives
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p: float):
        return power(self, p)

    def __getitem__(self, index):
        return getitem(self, index)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def backward(self) -> None:
        backward(self)


class Parameter(Tensor):
    """A trainable leaf whose value and gradient are views into a flat store."""

    __slots__ = ("id",)

    def __init__(self, value_view: np.ndarray, grad_view: np.ndarray, pid: str):
        Tensor.__init__(self, value_view, requires_grad=True)
        self.data = value_view
        self.grad = grad_view
        self.id = pid

    def __repr__(self) -> str:
        return f"Parameter({self.id!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(data: np.ndarray, parents: tuple, backward_fn, op: str) -> Tensor:
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward_fn, op)
    return Tensor(data, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul"
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
        "div",
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return _record(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a) -> Tensor:
    a = as_tensor(a)
    return _record(a.data.T, (a,), lambda g: (g.T,), "transpose")


def affine(x, w, b) -> Tensor:
    """``x @ w + b`` as one node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    xd, wd = x.data, w.data
    return _record(xd @ wd + b.data, (x, w, b), lambda g: (g @ wd.T, xd.T @ g, g.sum(axis=0)), "affine")


def _one_hot(index: np.ndarray, depth: int) -> np.ndarray:
    out = np.zeros((index.shape[0], depth))
    out[np.arange(index.shape[0]), index] = 1.0
    return out


def modulate(x, scale, shift, index) -> Tensor:
    """Per-row affine modulation ``x * scale[index] + shift[index]``.

    ``scale`` and ``shift`` have shape (num_conditions, width); ``index`` is an
    int (whole batch) or an integer array with one entry per row.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    xd = x.data
    depth = scale.data.shape[0]
    if np.ndim(index) == 0:
        c = int(index)
        s, h = scale.data[c], shift.data[c]

        def backward_fn(g):
            gs = np.zeros_like(scale.data)
            gh = np.zeros_like(shift.data)
            gs[c] = (g * xd).sum(axis=0)
            gh[c] = g.sum(axis=0)
            return g * s, gs, gh

    else:
        index = np.asarray(index)
        s, h = scale.data[index], shift.data[index]

        def backward_fn(g):
            onehot_t = _one_hot(index, depth).T
            return g * s, onehot_t @ (g * xd), onehot_t @ g

    return _record(xd * s + h, (x, scale, shift), backward_fn, "modulate")


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x, slope: float = 0.2) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return _record(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _record(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _record(out, (x,), lambda g: (g * out,), "exp")


def log(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(np.log(xd), (x,), lambda g: (g / xd,), "log")


def power(x, p: float) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd**p, (x,), lambda g: (g * p * xd ** (p - 1),), "power")


def square(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return _record(xd * xd, (x,), lambda g: (2.0 * g * xd,), "square")


def sqrt(x) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    return _record(out, (x,), lambda g: (g / (2.0 * out),), "sqrt")


def _expand_reduced(g: np.ndarray, shape: tuple[int, ...], axis, keepdims: bool) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    return _record(
        np.sum(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g, shape, axis, keepdims),),
        "sum",
    )


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    shape = x.data.shape
    count = x.data.size if axis is None else np.prod([shape[a] for a in np.atleast_1d(axis)])
    return _record(
        np.mean(x.data, axis=axis, keepdims=keepdims),
        (x,),
        lambda g: (_expand_reduced(g / count, shape, axis, keepdims),),
        "mean",
    )


def norm(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the gradient at a zero vector is taken as 0."""
    x = as_tensor(x)
    xd = x.data
    out = np.sqrt(np.sum(xd * xd, axis=axis, keepdims=True))

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g * xd / safe, 0.0),)

    return _record(out if keepdims else np.squeeze(out, axis=axis), (x,), backward_fn, "norm")


def logsumexp(x, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    peak = np.max(xd, axis=axis, keepdims=True)
    shifted = np.exp(xd - peak)
    total = np.sum(shifted, axis=axis, keepdims=True)
    out = np.log(total) + peak

    def backward_fn(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * shifted / total,)

    return _record(out if keepdims else np.squeeze(out, axis=axis), (x,), backward_fn, "logsumexp")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]
    return _record(
        np.concatenate([t.data for t in tensors], axis=axis),
        tensors,
        lambda g: tuple(np.split(g, bounds, axis=axis)),
        "concat",
    )


def getitem(x, index) -> Tensor:
    """Basic slicing/indexing; integer-array indices are scatter-added on the way back."""
    x = as_tensor(x)
    shape = x.data.shape

    def backward_fn(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return _record(x.data[index], (x,), backward_fn, "slice")


# ---------------------------------------------------------------- backward


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    Raises:
        ContractViolation: if ``loss`` holds more than one value.
        NumericFailure: if the loss or any leaf gradient is not finite; the
            error carries the first offending node.
    """
    if loss.data.size != 1:
        raise ContractViolation(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise NumericFailure("loss is not finite", node=_first_nonfinite_forward(loss) or loss)
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    leaves = _propagate(order, loss, check=False)
    for leaf in leaves:
        if not np.isfinite(leaf.grad).all():
            culprit = _first_nonfinite_forward(loss)
            if culprit is None:
                culprit = _first_nonfinite_backward(order, loss)
            raise NumericFailure(f"non-finite gradient produced at node {culprit!r}", node=culprit)


def _propagate(order: list[Tensor], loss: Tensor, check: bool):
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = []
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if check and not np.isfinite(g).all():
            return node
        if node.backward_fn is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g
            leaves.append(node)
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    return None if check else leaves


def _first_nonfinite_forward(root: Tensor) -> Tensor | None:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        stack.extend(node.parents)
    for node in reversed(order):
        if not np.isfinite(node.data).all():
            return node
    return None


def _first_nonfinite_backward(order: list[Tensor], loss: Tensor) -> Tensor:
    # leaf grads are already polluted; probe on a throwaway copy of the graph state
    saved = [(n, None if n.grad is None else n.grad.copy()) for n in order if n.backward_fn is None]
    culprit = _propagate(order, loss, check=True)
    for node, grad in saved:
        if grad is not None:
            node.grad[...] = grad
    return culprit if culprit is not None else loss


# ---------------------------------------------------------------- parameters


class ParameterSet:
    """Named parameters backed by one flat value buffer and one flat gradient buffer."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], prefix: str = ""):
        self.prefix = prefix
        self.shapes = {name: tuple(shape) for name, shape in shapes.items()}
        total = int(sum(np.prod(s) for s in self.shapes.values()))
        self.values = np.zeros(total)
        self.grads = np.zeros(total)
        self.params: dict[str, Parameter] = {}
        self.offsets: dict[str, tuple[int, int]] = {}
        start = 0
        for name, shape in self.shapes.items():
            size = int(np.prod(shape))
            self.offsets[name] = (start, start + size)
            pid = f"{prefix}.{name}" if prefix else name
            self.params[name] = Parameter(
                self.values[start : start + size].reshape(shape),
                self.grads[start : start + size].reshape(shape),
                pid,
            )
            start += size
        self.frozen = False

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], prefix: str = "") -> ParameterSet:
        out = cls({k: np.shape(v) for k, v in arrays.items()}, prefix)
        for k, v in arrays.items():
            out[k].data[...] = v
        return out

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grads.fill(0.0)

    def freeze(self) -> None:
        self.frozen = True
        for p in self.params.values():
            p.requires_grad = False

    def copy(self, frozen: bool = False) -> ParameterSet:
        out = ParameterSet(self.shapes, self.prefix)
        out.values[...] = self.values
        if frozen:
            out.freeze()
        return out

    def load(self, other: ParameterSet) -> None:
        if other.shapes != self.shapes:
            raise ContractViolation("parameter layouts differ")
        self.values[...] = other.values

    def clip_(self, bound: float) -> None:
        np.clip(self.values, -bound, bound, out=self.values)

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {p.id: p.data for p in self.params.values()}


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    """First/second moment buffers (flat, aligned with a ParameterSet) and the step count."""

    first_moment: np.ndarray
    second_moment: np.ndarray
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: ParameterSet, **hyper) -> AdamState:
        return cls(np.zeros(params.size), np.zeros(params.size), **hyper)

    def moment_views(self, params: ParameterSet) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        return {
            name: (self.first_moment[a:b].reshape(params.shapes[name]), self.second_moment[a:b].reshape(params.shapes[name]))
            for name, (a, b) in params.offsets.items()
        }


def adam_step(params: ParameterSet, state: AdamState) -> None:
    """Apply one bias-corrected Adam update in place; gradients are left untouched."""
    if state.first_moment.shape != params.values.shape or state.second_moment.shape != params.values.shape:
        raise ContractViolation("optimizer state does not match the parameter layout")
    if params.frozen:
        raise ContractViolation("cannot update a frozen parameter set")
    state.step += 1
    g = params.grads
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * g
    v *= state.beta2
    v += (1.0 - state.beta2) * (g * g)
    m_hat = m / (1.0 - state.beta1**state.step)
    v_hat = v / (1.0 - state.beta2**state.step)
    params.values -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


# ---------------------------------------------------------------- gradient check


def grad_check(build_loss: Callable[[], Tensor], params: Iterable[Parameter], eps: float = 1e-5) -> float:
    """Largest relative gap between analytic and central-difference gradients.

    The relative gap per entry is ``|analytic - numeric| / max(1, |analytic|)``.
    Parameters with ``requires_grad`` off are skipped, so a fully frozen set
    returns 0.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    params = [p for p in params if p.requires_grad]
    first = build_loss()
    second = build_loss()
    if not np.array_equal(first.data, second.data):
        raise ContractViolation("build_loss is not deterministic")
    if not params:
        return 0.0

    saved = [p.grad.copy() for p in params]
    for p in params:
        p.grad[...] = 0.0
    backward(build_loss())
    analytic = [p.grad.copy() for p in params]
    for p, g in zip(params, saved):
        p.grad[...] = g

    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            a_flat = a.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                up = float(build_loss().data)
                flat[k] = orig - eps
                down = float(build_loss().data)
                flat[k] = orig
                numeric = (up - down) / (2.0 * eps)
                worst = max(worst, abs(a_flat[k] - numeric) / max(1.0, abs(a_flat[k])))
    return worst
