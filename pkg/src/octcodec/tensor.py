"""Dense NCHW arrays with tape-based reverse-mode differentiation.

Every differentiable operation executed while gradient recording is enabled
appends a node to the thread's tape.  ``backward`` replays the nodes that the
loss depends on in reverse creation order, calling each one exactly once.
"""

from __future__ import annotations

import contextlib
import itertools
import threading
import weakref
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import special

_state = threading.local()
_seq = itertools.count()

# Hard error on NaN/Inf in any op output or gradient.
CHECK_FINITE = True


def _local(name, default):
    if not hasattr(_state, name):
        setattr(_state, name, default() if callable(default) else default)
    return getattr(_state, name)


def default_dtype() -> np.dtype:
    return _local("dtype", lambda: np.dtype(np.float32))


def set_default_dtype(dtype) -> None:
    _state.dtype = np.dtype(dtype)


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default scalar type (float64 for gradient checks)."""
    old = default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(old)


@contextlib.contextmanager
def record_branches():
    """Collect the branch masks chosen by piecewise ops (leaky ReLU, clamps) while active."""
    old = _local("branches", None)
    _state.branches = masks = []
    try:
        yield masks
    finally:
        _state.branches = old


def note_branch(mask: np.ndarray) -> None:
    masks = _local("branches", None)
    if masks is not None:
        masks.append(mask)


def grad_enabled() -> bool:
    return _local("grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    old = grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = old


class Node:
    """One recorded operation: inputs plus a closure mapping output grad to input grads."""

    __slots__ = ("op", "inputs", "backward_fn", "seq", "calls", "__weakref__")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.seq = next(_seq)
        self.calls = 0

    def __repr__(self):
        return f"Node({self.op}, seq={self.seq})"


class Tape:
    """Ordered record of executed differentiable operations (weakly held)."""

    def __init__(self):
        self._nodes: list[weakref.ref] = []
        self.backward_calls = 0

    def record(self, node: Node) -> None:
        self._nodes.append(weakref.ref(node))

    @property
    def nodes(self) -> list[Node]:
        return [n for n in (r() for r in self._nodes) if n is not None]

    def clear(self) -> None:
        self._nodes.clear()

    def __len__(self):
        return len(self.nodes)


def current_tape() -> Tape:
    return _local("tape", Tape)


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype.kind != "f":
        arr = arr.astype(default_dtype())
    return arr


class Tensor:
    """An n-dimensional array that can take part in reverse-mode autodiff."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = np.zeros_like(self.data) if requires_grad else None
        self._node: Node | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
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

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.size != 1:
            raise ValueError(f"only single-element tensors convert to a scalar, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self):
        tag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self):
        return self.shape[0]

    # -- operators --------------------------------------------------------
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

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def backward(self):
        backward(self)


def tensor(data, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def zeros(shape, requires_grad=False, dtype=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype or default_dtype()), requires_grad=requires_grad)


def zeros_like(x: Tensor) -> Tensor:
    return Tensor(np.zeros_like(x.data))


def ones_like(x: Tensor) -> Tensor:
    return Tensor(np.ones_like(x.data))


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


def make(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: Callable, op: str) -> Tensor:
    """Create an op output, recording a tape node when any input needs a gradient.

    ``backward_fn(grad)`` returns one gradient array (or None) per input.
    """
    if CHECK_FINITE and data.dtype.kind == "f" and not np.isfinite(data).all():
        raise FloatingPointError(f"non-finite values produced by '{op}'")
    out = Tensor(data)
    if grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        node = Node(op, tuple(inputs), backward_fn)
        out._node = node
        current_tape().record(node)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise binary ---------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("add", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("sub", a, b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("mul", a, b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _wrap(a, b if isinstance(b, Tensor) else None), _wrap(b, a if isinstance(a, Tensor) else None)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def bw(g):
        return _unbroadcast(g / b.data, a.shape), _unbroadcast(-g * out / b.data, b.shape)

    return make(out, (a, b), bw, "div")


def tensor_binary(op: str, a, b) -> Tensor:
    """Dispatch ``add``/``sub``/``mul`` by name."""
    try:
        fn = {"add": add, "sub": sub, "mul": mul}[op]
    except KeyError:
        raise ValueError(f"unknown binary op {op!r}") from None
    return fn(a, b)


# -- elementwise unary ----------------------------------------------------
def neg(a: Tensor) -> Tensor:
    return make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)
    out = a.data ** p
    return make(out, (a,), lambda g: (g * p * a.data ** (p - 1),), "pow")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return make(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def tabs(a: Tensor) -> Tensor:
    sign = np.sign(a.data)
    note_branch(sign)
    return make(np.abs(a.data), (a,), lambda g: (g * sign,), "abs")


def softplus(a: Tensor) -> Tensor:
    out = np.logaddexp(0.0, a.data).astype(a.dtype, copy=False)
    return make(out, (a,), lambda g: (g * special.expit(a.data),), "softplus")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data > 0
    note_branch(pos)
    out = np.where(pos, a.data, slope * a.data).astype(a.dtype, copy=False)
    return make(out, (a,), lambda g: (np.where(pos, g, slope * g),), "leaky_relu")


def relu(a: Tensor) -> Tensor:
    return leaky_relu(a, 0.0)


def clamp_min(a: Tensor, lo: float) -> Tensor:
    """max(a, lo); gradient is zero where the bound is active."""
    keep = a.data >= lo
    note_branch(keep)
    out = np.where(keep, a.data, lo).astype(a.dtype, copy=False)
    return make(out, (a,), lambda g: (np.where(keep, g, 0.0),), "clamp_min")


def normal_cdf(a: Tensor) -> Tensor:
    """Standard normal CDF."""
    out = special.ndtr(a.data).astype(a.dtype, copy=False)

    def bw(g):
        return (g * np.exp(-0.5 * a.data ** 2) / np.sqrt(2 * np.pi),)

    return make(out, (a,), bw, "normal_cdf")


def stop_gradient(a: Tensor) -> Tensor:
    return Tensor(a.data)


def straight_through(a: Tensor, value: np.ndarray) -> Tensor:
    """Forward ``value`` (same shape as ``a``) with the identity gradient to ``a``."""
    if value.shape != a.shape:
        raise ValueError(f"straight_through: shape {value.shape} differs from {a.shape}")
    return make(value.astype(a.dtype, copy=False), (a,), lambda g: (g,), "straight_through")


def round_half_away(a: np.ndarray) -> np.ndarray:
    """Nearest integer, ties away from zero."""
    return np.where(a >= 0, np.floor(a + 0.5), -np.floor(-a + 0.5)).astype(a.dtype, copy=False)


# -- reductions and shape ops ---------------------------------------------
def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = np.asarray(a.data.sum(axis=axis, keepdims=keepdims))

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make(out, (a,), bw, "sum")


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    return make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def getitem(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def bw(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return make(np.array(out), (a,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}") from None
    bounds = np.cumsum([0] + sizes)

    def bw(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make(out, tensors, bw, "concat")


# -- backward -------------------------------------------------------------
def _ancestors(root: Node) -> list[Node]:
    seen: set[int] = set()
    order: list[Node] = []
    stack = [root]
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        order.append(node)
        for t in node.inputs:
            if t._node is not None and id(t._node) not in seen:
                stack.append(t._node)
    order.sort(key=lambda n: n.seq, reverse=True)
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf that requires grad."""
    if loss.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._node is None:
        if loss.requires_grad:
            loss.grad = loss.grad + np.ones_like(loss.data)
        return
    tape = current_tape()
    pending: dict[int, np.ndarray] = {id(loss._node): np.ones_like(loss.data)}
    for node in _ancestors(loss._node):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        node.calls += 1
        tape.backward_calls += 1
        grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, grads):
            if gi is None or not t.requires_grad:
                continue
            gi = np.asarray(gi, dtype=t.dtype)
            if CHECK_FINITE and not np.isfinite(gi).all():
                raise FloatingPointError(f"non-finite gradient flowing out of '{node.op}'")
            if t._node is None:
                t.grad = gi.copy() if t.grad is None else t.grad + gi
            else:
                key = id(t._node)
                pending[key] = gi if key not in pending else pending[key] + gi
    tape.clear()


# -- finite differences ---------------------------------------------------
def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, eps: float = 1e-4,
                     indices: Iterable[int] | None = None) -> Tensor:
    """Central-difference gradient of scalar ``f`` at ``x``.

    ``indices`` restricts the probe to selected flat positions; the rest of the
    returned gradient is left at zero.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x.data = np.ascontiguousarray(x.data)
    base = x.data.copy()
    grad = np.zeros_like(base, dtype=np.float64)
    flat = x.data.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    with no_grad():
        for i in positions:
            old = flat[i]
            flat[i] = old + eps
            fp = _scalar(f(x))
            flat[i] = old - eps
            fm = _scalar(f(x))
            flat[i] = old
            grad.reshape(-1)[i] = (fp - fm) / (2 * eps)
    x.data[...] = base
    return Tensor(grad, dtype=np.float64)


def _scalar(v) -> float:
    return v.item() if isinstance(v, Tensor) else float(v)


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Normwise relative discrepancy ||a-b|| / max(||a||, ||b||)."""
    a = np.asarray(a, np.float64).ravel()
    b = np.asarray(b, np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    if scale == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / scale)


def _same_branches(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradcheck(f: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-4,
              max_probes: int | None = 64, seed: int = 0, joint: bool = False, skip_kinks: bool = False,
              stats: dict | None = None) -> float:
    """Compare autodiff gradients of ``f()`` wrt ``params`` with central differences.

    At most ``max_probes`` randomly chosen coordinates are probed per tensor.
    Returns the worst normwise relative error over all tensors, or with
    ``joint`` the error of the whole probed gradient vector at once (for
    models whose smallest gradient blocks sit below finite-difference noise).

    With ``skip_kinks`` a probe is dropped when either shifted evaluation takes
    a different branch of some piecewise op than the unshifted one: the central
    difference then spans a kink and measures no derivative.  ``stats``, when
    given, receives the number of probes made and dropped.
    """
    for p in params:
        p.zero_grad()
    with record_branches() as base_branches:
        backward(f())
    rng = np.random.default_rng(seed)
    worst = 0.0
    analytic, numeric = [], []
    probes = dropped = 0
    for p in params:
        n = p.size
        if max_probes is None or n <= max_probes:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_probes, replace=False))
        if skip_kinks:
            kept, values = [], []
            for i in idx:
                with record_branches() as seen:
                    g = finite_diff_grad(lambda _: f(), p, eps, [i]).data.reshape(-1)[i]
                half = len(seen) // 2
                if _same_branches(seen[:half], base_branches) and _same_branches(seen[half:], base_branches):
                    kept.append(i)
                    values.append(g)
            dropped += len(idx) - len(kept)
            probes += len(idx)
            idx = np.asarray(kept, dtype=np.int64)
            numeric.append(np.asarray(values, dtype=np.float64))
        else:
            probes += len(idx)
            numeric.append(finite_diff_grad(lambda _: f(), p, eps, idx).data.reshape(-1)[idx])
        analytic.append(p.grad.reshape(-1)[idx])
        worst = max(worst, relative_error(analytic[-1], numeric[-1]))
    if stats is not None:
        stats.update(probes=probes, dropped=dropped)
    if joint:
        return relative_error(np.concatenate(analytic), np.concatenate(numeric))
    return worst
