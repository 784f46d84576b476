"""Dense tensors with reverse-mode differentiation, backed by numpy.

Each op builds its output eagerly and, when any input tracks gradients,
records a closure that maps the output gradient to input gradients.
:meth:`Tensor.backward` walks the graph in reverse topological order,
accumulates into leaf ``.grad`` buffers and then frees the graph.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

_state = {"grad": True, "checked": False, "dtype": np.float32}

GELU_C = math.sqrt(2.0 / math.pi)


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise FloatingPointError whenever an op produces NaN or Inf."""
    prev = _state["checked"]
    _state["checked"] = enabled
    try:
        yield
    finally:
        _state["checked"] = prev


def is_checked() -> bool:
    return _state["checked"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the working dtype (float32 by default).

    Only finite-difference harnesses should need float64.
    """
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


def default_dtype():
    return _state["dtype"]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False):
        # always a private copy: leaves are updated in place by the optimizer
        self.data = np.array(data, dtype=_state["dtype"], order="C")
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    # -- basics ---------------------------------------------------------------
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
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ------------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    # -- differentiation --------------------------------------------------------
    def backward(self) -> None:
        """Populate ``.grad`` of every gradient-tracking leaf, then free the graph."""
        if self.size != 1 or self.ndim > 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("loss does not depend on any tensor that requires grad")
        order = _topological(self)
        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g if node.grad is None else node.grad + g
                continue
            in_grads = node._backward(g)
            for parent, pg in zip(node._parents, in_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg
        for node in order:
            if not node.is_leaf:
                node._parents = ()
                node._backward = None


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=_state["dtype"])
    out.grad = None
    out.op = op
    if _state["checked"] and not np.all(np.isfinite(out.data)):
        raise FloatingPointError(f"{op} produced non-finite values")
    track = _state["grad"] and any(p.requires_grad for p in parents)
    out.requires_grad = track
    out._parents = tuple(parents) if track else ()
    out._backward = backward if track else None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise ----------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("add", a, b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("sub", a, b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("mul", a, b)

    def backward(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)
    return _result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_check("div", a, b)
    out = a.data / b.data

    def backward(g):
        return (_unbroadcast(g / b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None)
    return _result(out, (a, b), backward, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    out = a.data ** exponent
    return _result(out, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),), "tanh")


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    t = np.tanh(GELU_C * (x + 0.044715 * x ** 3))
    out = 0.5 * x * (1 + t)

    def backward(g):
        dt = (1 - t * t) * GELU_C * (1 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1 + t) + 0.5 * x * dt),)
    return _result(out, (a,), backward, "gelu")


# -- linear algebra ---------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ValueError(f"matmul: incompatible batch shapes {a.shape} and {b.shape}") from None

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb
    return _result(a.data @ b.data, (a, b), backward, "matmul")


# -- reductions and normalizations -------------------------------------------------

def _expand_reduced(g: np.ndarray, shape, axis, keepdims) -> np.ndarray:
    if axis is not None and not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return _result(a.data.sum(axis=axis, keepdims=keepdims), (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims).copy(),), "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.mean(axis=axis, keepdims=keepdims)
    n = a.size / max(out.size, 1)
    return _result(out, (a,),
                   lambda g: (_expand_reduced(g, a.shape, axis, keepdims) / n,), "mean")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)
    return _result(out, (a,), backward, "softmax")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    _check_axis("log_softmax", a, axis)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)
    return _result(out, (a,), backward, "log_softmax")


def _check_axis(op: str, a: Tensor, axis: int) -> None:
    if not -a.ndim <= axis < a.ndim:
        raise ValueError(f"{op}: axis {axis} out of range for shape {a.shape}")


def layer_norm(a: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Normalize to zero mean and unit variance along ``axis``, then scale and shift."""
    _check_axis("layer_norm", a, axis)
    x = a.data
    mu = x.mean(axis=axis, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    parents = [a]
    if weight is not None:
        out = out * weight.data
        parents.append(weight)
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = g * weight.data if weight is not None else g
        da = rstd * (gx - gx.mean(axis=axis, keepdims=True)
                     - xhat * (gx * xhat).mean(axis=axis, keepdims=True))
        grads = [da]
        if weight is not None:
            grads.append(_unbroadcast(g * xhat, weight.shape))
        if bias is not None:
            grads.append(_unbroadcast(g, bias.shape))
        return grads
    return _result(out, parents, backward, "layer_norm")


# -- indexing and shape ops --------------------------------------------------------

def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding ids must lie in [0, {table.shape[0]})")

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        return (gt,)
    return _result(table.data[ids], (table,), backward, "embedding")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather entries of ``a`` along ``axis`` (repeated indices allowed)."""
    indices = np.asarray(indices, dtype=np.int64)
    _check_axis("take", a, axis)
    n = a.shape[axis]
    if indices.size and (indices.min() < -n or indices.max() >= n):
        raise IndexError(f"take: index out of range for axis {axis} of size {n}")

    def backward(g):
        ga = np.zeros_like(a.data)
        idx = [slice(None)] * a.ndim
        idx[axis] = indices
        np.add.at(ga, tuple(idx), g)
        return (ga,)
    return _result(np.take(a.data, indices, axis=axis), (a,), backward, "take")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis
               for i in items)


def slice_(a: Tensor, index) -> Tensor:
    basic = _is_basic(index)

    def backward(g):
        ga = np.zeros_like(a.data)
        if basic:
            ga[index] = g
        else:
            np.add.at(ga, index, g)
        return (ga,)
    return _result(a.data[index], (a,), backward, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ValueError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return _result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    inv = None if axes is None else np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),), "transpose")


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _result(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def segment_sum(a: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` (shape ``(..., N, d)``) into ``num_segments`` buckets.

    ``segment_ids`` has shape ``(..., N)``; entries of -1 are dropped.
    """
    seg = np.asarray(segment_ids, dtype=np.int64)
    if a.ndim < 2 or seg.shape != a.shape[:-1]:
        raise ValueError(f"segment_sum: ids of shape {seg.shape} do not index rows of {a.shape}")
    if seg.size and seg.max() >= num_segments:
        raise IndexError(f"segment id {seg.max()} >= num_segments {num_segments}")
    lead = a.shape[:-2]
    flat_a = a.data.reshape(-1, a.shape[-2], a.shape[-1])
    flat_s = seg.reshape(-1, seg.shape[-1])
    b_idx, n_idx = np.nonzero(flat_s >= 0)
    out = np.zeros((flat_a.shape[0], num_segments, a.shape[-1]), dtype=a.data.dtype)
    np.add.at(out, (b_idx, flat_s[b_idx, n_idx]), flat_a[b_idx, n_idx])

    def backward(g):
        g3 = g.reshape(out.shape)
        ga = np.zeros_like(flat_a)
        ga[b_idx, n_idx] = g3[b_idx, flat_s[b_idx, n_idx]]
        return (ga.reshape(a.shape),)
    return _result(out.reshape(lead + (num_segments, a.shape[-1])), (a,), backward, "segment_sum")


def dropout(a: Tensor, p: float = 0.1, train: bool = True,
            rng: np.random.Generator | None = None) -> Tensor:
    if not train or p == 0.0:
        return a
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    rng = rng if rng is not None else np.random.default_rng()
    keep = (rng.random(a.shape) >= p).astype(a.data.dtype) / (1.0 - p)
    return _result(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


# -- finite-difference harness -------------------------------------------------------

def numerical_gradient(fn: Callable[[], Tensor], x: Tensor, step: float = 1e-3,
                       coords: np.ndarray | None = None) -> np.ndarray:
    """Central differences of scalar ``fn()`` with respect to entries of ``x``.

    ``x.data`` is perturbed in place and restored. Only ``coords`` (flat
    indices) are evaluated when given; other entries are left as NaN.
    """
    flat = x.data.reshape(-1)
    out = np.full(flat.shape, np.nan)
    coords = np.arange(flat.size) if coords is None else coords
    with no_grad():
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            hi = fn().item()
            flat[i] = orig - step
            lo = fn().item()
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return out.reshape(x.shape)


def gradient_check(fn: Callable[[], Tensor], inputs: Sequence[Tensor], step: float = 1e-3,
                   rtol: float = 1e-3, atol: float = 1e-6, max_coords: int | None = 200,
                   rng: np.random.Generator | None = None) -> float:
    """Fraction of sampled coordinates whose analytic gradient agrees with central differences.

    A coordinate passes when ``|a - n| <= atol + rtol * max(|a|, |n|)``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    fn().backward()
    passed = total = 0
    for t in inputs:
        analytic = t.grad.reshape(-1) if t.grad is not None else np.zeros(t.size)
        coords = np.arange(t.size)
        if max_coords is not None and t.size > max_coords:
            coords = rng.choice(t.size, size=max_coords, replace=False)
        numeric = numerical_gradient(fn, t, step, coords).reshape(-1)[coords]
        a = analytic[coords]
        ok = np.abs(a - numeric) <= atol + rtol * np.maximum(np.abs(a), np.abs(numeric))
        passed += int(ok.sum())
        total += len(coords)
    return passed / max(total, 1)
