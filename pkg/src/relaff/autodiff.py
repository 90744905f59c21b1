"""Dense float64 arrays with tape-free reverse-mode differentiation.

Every operation returns a new :class:`Value` that remembers its parents and a
closure computing the parents' gradient contributions.  ``backward`` walks the
graph once in reverse topological order; afterwards the graph is spent and a
fresh forward pass is required.

Implicit broadcasting is not supported.  Shapes must match exactly, except for
the explicit :func:`expand` op and for ``matmul`` against a rank-2 right
operand (the shared-weight linear layer case).
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_grad_enabled = True


class DimensionError(ValueError):
    pass


class GraphError(RuntimeError):
    pass


class NaNError(FloatingPointError):
    pass


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording backward edges."""
    global _grad_enabled
    previous = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Value:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_spent", "_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if self.requires_grad else None
        self._parents: tuple[Value, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._spent = False
        self._leaf = True
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Value(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar, all routed through the functional ops below
    def __add__(self, other):
        return add(self, _as_value(other))

    def __sub__(self, other):
        return sub(self, _as_value(other))

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_value(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if np.isscalar(other):
            return scale(self, 1.0 / float(other))
        return div(self, _as_value(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    @property
    def T(self):
        return transpose(self)

    def backward(self) -> None:
        backward(self)


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def constant(data) -> Value:
    return Value(data, requires_grad=False)


def parameter(data, name: str | None = None) -> Value:
    return Value(data, requires_grad=True, name=name)


def _make(data: np.ndarray, parents: tuple[Value, ...], backward_fn) -> Value:
    out = Value.__new__(Value)
    out.data = data
    out.grad = None
    out._spent = False
    out._leaf = False
    out.name = None
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_same(a: Value, b: Value, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------- elementwise


def add(a: Value, b: Value) -> Value:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Value, b: Value) -> Value:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a: Value, b: Value) -> Value:
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a: Value, c: float) -> Value:
    return _make(a.data * c, (a,), lambda g: (g * c,))


def add_scalar(a: Value, c: float) -> Value:
    return _make(a.data + c, (a,), lambda g: (g,))


def relu(a: Value) -> Value:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tanh(a: Value) -> Value:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def exp(a: Value) -> Value:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Value) -> Value:
    ad = a.data
    return _make(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Value) -> Value:
    """Square root; the gradient at exactly 0 is taken as 0."""
    out = np.sqrt(a.data)
    safe = np.where(out > 0, out, 1.0)
    return _make(out, (a,), lambda g: (np.where(out > 0, g * 0.5 / safe, 0.0),))


def square(a: Value) -> Value:
    ad = a.data
    return _make(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def abs_(a: Value) -> Value:
    sign = np.sign(a.data)
    return _make(np.abs(a.data), (a,), lambda g: (g * sign,))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "scale": scale}


def elementwise(op: str, *operands, **kwargs) -> Value:
    """Dispatch by name; ``scale`` takes ``(x, c)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*operands, **kwargs)


# -------------------------------------------------------------- linear algebra


def matmul(a: Value, b: Value) -> Value:
    """``a (..., m, k) @ b (k, n)`` or batched ``a (..., m, k) @ b (..., k, n)``."""
    if a.ndim < 1 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and (a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2]):
        raise DimensionError(f"matmul: batch dims differ {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd

    def backward_fn(g):
        if ad.ndim == 1:
            return bd @ g, np.outer(ad, g)
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(out, (a, b), backward_fn)


def transpose(a: Value, axes: Sequence[int] | None = None) -> Value:
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs rank >= 2, got {a.shape}")
        axes = list(range(a.ndim - 2)) + [a.ndim - 1, a.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def reshape(a: Value, shape: Sequence[int]) -> Value:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


# ---------------------------------------------------------------- reductions


def sum_(a: Value, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Value:
    original = a.shape

    def backward_fn(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, original).copy(),)

    return _make(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward_fn)


def mean(a: Value, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Value:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([a.shape[ax] for ax in axes]))
    if count == 0:
        raise DimensionError(f"mean over empty axis of shape {a.shape}")
    return scale(sum_(a, axis=axis, keepdims=keepdims), 1.0 / count)


def mean_pool(x: Value, axis: int = -2) -> Value:
    """Average over the temporal axis (rows of a ``T x D`` block by default)."""
    if x.shape[axis] == 0:
        raise DimensionError("mean_pool over zero frames")
    return mean(x, axis=axis)


def expand(a: Value, shape: Sequence[int]) -> Value:
    """Explicit broadcast of ``a`` to ``shape`` (numpy rules); backward sums."""
    shape = tuple(shape)
    original = a.shape
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise DimensionError(f"expand: cannot broadcast {original} to {shape}") from None
    lead = len(shape) - len(original)
    summed = tuple(range(lead)) + tuple(
        lead + i for i, n in enumerate(original) if n == 1 and shape[lead + i] != 1
    )

    def backward_fn(g):
        r = g.sum(axis=summed, keepdims=True) if summed else g
        return (r.reshape(original),)

    return _make(out, (a,), backward_fn)


def add_bias(x: Value, b: Value) -> Value:
    """``x + b`` with ``b`` of shape ``x.shape[-1:]`` repeated over leading axes."""
    if b.shape != x.shape[-1:]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match {x.shape}")
    lead = tuple(range(x.ndim - 1))
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if lead else g))


# ----------------------------------------------------------- structural ops


def concat(values: Sequence[Value], axis: int = 0) -> Value:
    values = list(values)
    if not values:
        raise DimensionError("concat of nothing")
    ndim = values[0].ndim
    for v in values:
        if v.ndim != ndim:
            raise DimensionError(
                f"concat: rank mismatch {[v.shape for v in values]}"
            )
    try:
        out = np.concatenate([v.data for v in values], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: {[v.shape for v in values]}: {exc}") from None
    sizes = np.cumsum([v.shape[axis] for v in values])[:-1]
    return _make(out, tuple(values), lambda g: tuple(np.split(g, sizes, axis=axis)))


def stack(values: Sequence[Value], axis: int = 0) -> Value:
    values = list(values)
    for v in values[1:]:
        _check_same(values[0], v, "stack")
    out = np.stack([v.data for v in values], axis=axis)
    n = len(values)
    return _make(
        out,
        tuple(values),
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def take(a: Value, index) -> Value:
    """Basic or integer-array indexing; backward scatters with accumulation."""
    original = a.shape

    def backward_fn(g):
        full = np.zeros(original, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index], dtype=DTYPE), (a,), backward_fn)


def detach(x: Value) -> Value:
    """Same data, no backward edge."""
    return Value(x.data.copy(), requires_grad=False)


# ------------------------------------------------------- fused numerics ops


def softmax(x: Value, axis: int = -1) -> Value:
    if np.isnan(x.data).any():
        raise NaNError("softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), backward_fn)


def log_softmax(x: Value, axis: int = -1) -> Value:
    if np.isnan(x.data).any():
        raise NaNError("log_softmax received NaN input")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def backward_fn(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), backward_fn)


def layer_norm(x: Value, gain: Value, bias: Value, eps: float = 1e-5) -> Value:
    """Normalise over the last axis, then apply per-channel gain and bias."""
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm: gain/bias {gain.shape} vs input {x.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    centred = x.data - mu
    inv = 1.0 / np.sqrt((centred * centred).mean(axis=-1, keepdims=True) + eps)
    xhat = centred * inv
    out = xhat * gain.data + bias.data
    lead = tuple(range(x.ndim - 1))
    n = x.shape[-1]

    def backward_fn(g):
        gx_hat = g * gain.data
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), backward_fn)


def l2_normalize_rows(x: Value, eps: float = 1e-12) -> Value:
    """Divide each row (last axis) by its Euclidean norm.

    Rows with norm at or below ``eps`` raise :class:`DegenerateVectorError`.
    """
    norms = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    bad = np.flatnonzero(norms.reshape(-1) <= eps)
    if bad.size:
        raise DegenerateVectorError(int(bad[0]))
    out = x.data / norms

    def backward_fn(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _make(out, (x,), backward_fn)


class DegenerateVectorError(ValueError):
    def __init__(self, row: int):
        super().__init__(f"row {row} has (near) zero norm; cosine similarity undefined")
        self.row = row


def dropout(x: Value, rate: float, rng: np.random.Generator | None, train: bool) -> Value:
    if not train or rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---------------------------------------------------------------- backward


def _topological(loss: Value) -> list[Value]:
    order: list[Value] = []
    seen: set[int] = set()
    stack_: list[tuple[Value, bool]] = [(loss, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack_.append((p, False))
    return order


def backward(loss: Value) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable ``requires_grad`` leaf.

    The graph is consumed: a second call without a fresh forward pass raises.
    """
    if loss.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._spent:
        raise GraphError("graph already consumed by a previous backward; rerun forward")
    if not loss.requires_grad:
        loss._spent = True
        return
    order = _topological(loss)
    for node in order:
        if node._spent and not node._leaf:
            raise GraphError("graph already consumed by a previous backward; rerun forward")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None and node.requires_grad:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._leaf:
            continue
        node._spent = True
        if node._backward is not None:
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------- parameters


class ParameterStore:
    """Named trainable leaves plus a frozen subset excluded from updates."""

    def __init__(self):
        self._params: dict[str, Value] = {}
        self.frozen: set[str] = set()

    def add(self, name: str, data, frozen: bool = False) -> Value:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        # frozen leaves never require grad, so no backward edge reaches them
        v = Value(data, requires_grad=not frozen, name=name)
        self._params[name] = v
        if frozen:
            self.frozen.add(name)
        return v

    def __getitem__(self, name: str) -> Value:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def trainable(self) -> dict[str, Value]:
        return {k: v for k, v in self._params.items() if k not in self.frozen}

    def freeze(self, names: Iterable[str]) -> None:
        for n in names:
            self._params[n].requires_grad = False
            self._params[n].grad = None
            self.frozen.add(n)

    def unfreeze(self, names: Iterable[str]) -> None:
        for n in names:
            self.frozen.discard(n)
            self._params[n].requires_grad = True
            self._params[n].grad = np.zeros_like(self._params[n].data)

    def zero_grad(self) -> None:
        for v in self._params.values():
            v.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, arr in arrays.items():
            if k not in self._params:
                raise KeyError(f"unknown parameter {k!r}")
            if self._params[k].shape != arr.shape:
                raise DimensionError(
                    f"parameter {k!r}: stored shape {arr.shape} vs model {self._params[k].shape}"
                )
            self._params[k].data[...] = arr

    def count(self, include_frozen: bool = True) -> int:
        return sum(
            v.size for k, v in self._params.items() if include_frozen or k not in self.frozen
        )


# ------------------------------------------------------------- verification


def grad_check(f: Callable[[], Value], theta: Value, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must rebuild its graph from current parameter data on every call.
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not eps > 0:
        raise ValueError(f"grad_check needs eps > 0, got {eps}")
    if not theta.requires_grad:
        raise ValueError("grad_check target must require grad")
    theta.zero_grad()
    loss = f()
    backward(loss)
    analytic = theta.grad.copy()
    flat = theta.data.reshape(-1)
    numeric = np.empty(flat.size)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            hi = float(f().data)
            flat[i] = old - eps
            lo = float(f().data)
            flat[i] = old
            numeric[i] = (hi - lo) / (2.0 * eps)
    numeric = numeric.reshape(theta.shape)
    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    return float(err.max()) if err.size else 0.0


def is_finite(x: Value) -> bool:
    return bool(np.isfinite(x.data).all())


def scalar(x: Value) -> float:
    return float(x.data.reshape(-1)[0]) if x.size == 1 else math.nan
