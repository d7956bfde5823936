"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations record themselves on the active :class:`Graph` (entered with a
``with`` block) whenever one of their inputs requires a gradient. Outside a
graph nothing is recorded, which is the fast path for inference and for the
finite-difference evaluations in :func:`grad_check`.

All array operations act on the trailing axes and broadcast over leading
(batch) axes, so a ``[B, T, D]`` activation and a ``[D, E]`` weight combine
through :func:`matmul` the same way a single ``[T, D]`` matrix does.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, ParameterError, ShapeError

_SQRT_HALF = np.sqrt(0.5)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """A float64 array with an optional gradient buffer."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_node")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._node: Node | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


@dataclass(eq=False)
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    vjp: Callable[[np.ndarray], Sequence]


@dataclass(eq=False)
class Graph:
    """Append-only tape of operation records.

    Inputs of a node always precede it because a node is appended only after
    its inputs exist.
    """

    nodes: list[Node] = field(default_factory=list)

    def __enter__(self) -> "Graph":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.nodes)


_local = threading.local()


def _stack() -> list[Graph]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _stack()
    return stack[-1] if stack else None


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(op: str, inputs: tuple[Tensor, ...], out: np.ndarray, vjp) -> Tensor:
    result = Tensor(out)
    graph = active_graph()
    if graph is not None and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        node = Node(op, inputs, result, vjp)
        result._node = node
        graph.nodes.append(node)
    return result


class _SliceGrad:
    """Gradient that is nonzero only on ``data[idx]``; avoids dense buffers."""

    __slots__ = ("idx", "value", "shape")

    def __init__(self, idx, value, shape):
        self.idx = idx
        self.value = value
        self.shape = shape

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        out[self.idx] = self.value
        return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _record("add", (a, b), a.data + b.data, vjp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _record("sub", (a, b), a.data - b.data, vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _record("mul", (a, b), a.data * b.data, vjp)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _record("scale", (x,), x.data * c, lambda g: (g * c,))


def square(x) -> Tensor:
    x = as_tensor(x)
    return _record("square", (x,), x.data * x.data, lambda g: (2.0 * g * x.data,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # tanh form is stable for large |x|
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _record("sigmoid", (x,), y, lambda g: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return _record("tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def gelu(x) -> Tensor:
    """Exact (erf-based) Gaussian error linear unit."""
    x = as_tensor(x)
    cdf = 0.5 * (1.0 + erf(x.data * _SQRT_HALF))
    y = x.data * cdf

    def vjp(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return _record("gelu", (x,), y, vjp)


_ELEMENTWISE = {
    "add": add,
    "mul": mul,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "gelu": gelu,
    "scale": scale,
}


def elementwise(kind: str, x, other=None) -> Tensor:
    """Dispatch one of ``add, mul, sigmoid, tanh, gelu, scale`` by name.

    ``other`` is the second operand for ``add``/``mul`` and the factor for
    ``scale``.
    """
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ParameterError(f"unknown elementwise kind {kind!r}") from None
    if kind in ("add", "mul", "scale"):
        if other is None:
            raise ContractError(f"{kind} needs a second operand")
        if kind != "scale":
            a, b = as_tensor(x), as_tensor(other)
            if a.shape != b.shape:
                raise ShapeError(f"{kind}: shapes differ, {a.shape} vs {b.shape}")
        return fn(x, other)
    return fn(x)


# ---------------------------------------------------------------------------
# linear algebra and reductions


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, broadcasting leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs ≥2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # activations times a weight matrix: fold leading axes into rows
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def vjp(g):
            g2 = g.reshape(-1, n)
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _record("matmul", (a, b), out, vjp)

    def vjp(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        gb = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _record("matmul", (a, b), a.data @ b.data, vjp)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _record("sum", (x,), out, vjp)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _record("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inverse = np.argsort(axes)
    return _record("transpose", (x,), x.data.transpose(axes), lambda g: (g.transpose(inverse),))


def swapaxes(x, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    return _record("swapaxes", (x,), np.swapaxes(x.data, a, b), lambda g: (np.swapaxes(g, a, b),))


def getitem(x, idx) -> Tensor:
    x = as_tensor(x)
    return _record("getitem", (x,), x.data[idx], lambda g: (_SliceGrad(idx, g, x.shape),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape)
    return _record("broadcast_to", (x,), out, lambda g: (_unbroadcast(g, x.shape),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _record("concat", tensors, out, vjp)


# ---------------------------------------------------------------------------
# normalisation and probability


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    x = as_tensor(x)
    y = x.data - x.data.max(axis=-1, keepdims=True)
    np.exp(y, out=y)
    y /= y.sum(axis=-1, keepdims=True)

    def vjp(g):
        gy = g * y
        gy -= y * gy.sum(axis=-1, keepdims=True)
        return (gy,)

    return _record("softmax", (x,), y, vjp)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    y = shifted - lse

    def vjp(g):
        return (g - np.exp(y) * g.sum(axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), y, vjp)


def layer_norm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance, then scale/shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ShapeError(f"layer_norm: affine shapes {gamma.shape}, {beta.shape} vs width {n}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def vjp(g):
        reduce_axes = tuple(range(g.ndim - 1))
        dgamma = (g * xhat).sum(axis=reduce_axes)
        dbeta = g.sum(axis=reduce_axes)
        dxhat = g * gamma.data
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, vjp)


def dropout(x, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity (the same object) in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ContractError("training-mode dropout needs a random generator")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _record("dropout", (x,), x.data * keep, lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# differentiation


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every grad-requiring leaf.

    Gradients add onto whatever is already stored; call :func:`zero_grad`
    between optimisation steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    if loss.is_leaf:
        _accumulate_leaf(loss, np.ones_like(loss.data))
        return

    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    # buffers created here may be updated in place; vjp outputs may be views
    owned: set[int] = set()
    for node in reversed(graph.nodes):
        key = id(node.output)
        g = pending.pop(key, None)
        owned.discard(key)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp.is_leaf:
                _accumulate_leaf(inp, gi)
                continue
            key = id(inp)
            current = pending.get(key)
            if isinstance(gi, _SliceGrad):
                if current is None:
                    current = np.zeros(gi.shape)
                elif key not in owned:
                    current = np.array(current)
                pending[key] = current
                owned.add(key)
                current[gi.idx] += gi.value
            elif current is None:
                pending[key] = gi
            else:
                pending[key] = current + gi
                owned.add(key)


def _accumulate_leaf(t: Tensor, g) -> None:
    if isinstance(g, _SliceGrad):
        if t.grad is None:
            t.grad = np.zeros(t.shape)
        t.grad[g.idx] += g.value
        return
    if t.grad is None:
        t.grad = np.array(np.broadcast_to(g, t.shape), dtype=np.float64)
    else:
        t.grad += g


def zero_grad(params) -> None:
    for p in _iter_params(params):
        p.grad = None


def _iter_params(params):
    return params.values() if isinstance(params, dict) else params


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tol: float

    @property
    def passed(self) -> bool:
        return all(err < self.tol for err in self.max_rel_error.values())

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)


def grad_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-5,
    tol: float = 1e-4,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare reverse-mode gradients with central finite differences.

    ``f`` takes no arguments and reads the current ``params`` data; it must be
    deterministic. ``params`` is a list of tensors or a name→tensor mapping.
    Per-element relative error is ``|a - n| / max(|a| + |n|, floor)``. The
    floor keeps gradients near zero from being scored on finite-difference
    roundoff (about ``eps * |loss| / h``, i.e. 1e-11 at ``h = 1e-5``); below it
    the check is effectively absolute at ``tol * floor``.
    """
    if isinstance(params, dict):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]

    saved_flags = [p.requires_grad for _, p in named]
    for _, p in named:
        p.requires_grad = True
        p.grad = None
    try:
        with Graph() as graph:
            loss = f()
        first = float(loss.data)
        if float(f().data) != first:
            raise ContractError("grad_check: f is not deterministic (two evaluations differ)")
        backward(graph, loss)
        analytic = {name: (p.grad if p.grad is not None else np.zeros(p.shape)) for name, p in named}

        errors: dict[str, float] = {}
        for name, p in named:
            flat = p.data.reshape(-1)
            numeric = np.empty(flat.size)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                up = float(f().data)
                flat[i] = orig - h
                down = float(f().data)
                flat[i] = orig
                numeric[i] = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)
            rel = np.abs(a - numeric) / np.maximum(np.abs(a) + np.abs(numeric), floor)
            errors[name] = float(rel.max()) if rel.size else 0.0
    finally:
        for (_, p), flag in zip(named, saved_flags):
            p.requires_grad = flag
            p.grad = None
    return GradCheckReport(errors, tol)
