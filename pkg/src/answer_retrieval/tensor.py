"""Dense arrays with define-by-run reverse-mode differentiation.

Every differentiable primitive records itself on a thread-local
:class:`Tape` when at least one input requires a gradient.  ``backward``
walks the tape in reverse recording order, which is always a valid
topological order, and clears it afterwards.

Arrays are numpy arrays underneath; the tensor layer only adds gradient
bookkeeping.  Double precision is the default so finite-difference checks
stay meaningful.
"""
from __future__ import annotations

import math
import threading
from contextlib import contextmanager
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float64
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    dtype = np.dtype(dtype)
    if dtype not in (np.float32, np.float64):
        raise ValueError(f"unsupported dtype {dtype}; use float32 or float64")
    _DEFAULT_DTYPE = dtype.type


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextmanager
def default_dtype(dtype):
    previous = _DEFAULT_DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(previous)


class Tape:
    """Ordered record of the primitive operations of one forward pass."""

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.generation = 0

    def record(self, node: "Tensor") -> None:
        node._tape = self
        node._generation = self.generation
        self.nodes.append(node)

    def clear(self) -> None:
        for node in self.nodes:
            node._parents = ()
            node._backward = None
        self.nodes = []
        self.generation += 1

    def __len__(self) -> int:
        return len(self.nodes)


def current_tape() -> Tape:
    tape = getattr(_local, "tape", None)
    if tape is None:
        tape = _local.tape = Tape()
    return tape


def is_grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextmanager
def no_grad():
    previous = is_grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = previous


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_tape", "_generation")
    # make numpy defer to Tensor operators in mixed expressions
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        self.data = np.array(data, dtype=dtype or _DEFAULT_DTYPE)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._backward: Optional[Callable] = None
        self._tape: Optional[Tape] = None
        self._generation = -1

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
        return self._tape is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators ----------------------------------------------------------
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

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._tape = None
    out._generation = -1
    needs = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
        current_tape().record(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every leaf that requires a gradient.

    Gradients accumulate into existing leaf buffers, so callers zero them
    between optimizer steps.  The tape is consumed: a second call without a
    new forward pass raises ``RuntimeError``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise RuntimeError("loss does not depend on any tensor that requires grad")
    tape = loss._tape
    if tape is None:
        loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + 1.0
        return
    if loss._generation != tape.generation:
        raise RuntimeError("graph already consumed by backward(); run a new forward pass")
    pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = pending.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent._tape is tape and parent._generation == tape.generation:
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg
            elif parent._tape is None:
                pg = np.asarray(pg, dtype=parent.data.dtype).reshape(parent.shape)
                parent.grad = pg.copy() if parent.grad is None else parent.grad + pg
        node._parents = ()
        node._backward = None
    tape.clear()


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return _make(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return _make(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make(out, (a, b), bw)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)
    return _make(a.data * factor, (a,), lambda g: (g * factor,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a: Tensor) -> Tensor:
    out = 0.5 * (np.tanh(0.5 * a.data) + 1.0)
    return _make(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    """max(0, x); the subgradient at exactly 0 is taken as 0."""
    positive = a.data > 0
    return _make(np.where(positive, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * positive,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a: Tensor) -> Tensor:
    x = a.data
    inner = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return _make(out, (a,), bw)


# ---------------------------------------------------------------------------
# shape and reductions
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, leading axes broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make(out, (a, b), bw)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2) if a.ndim >= 2 else (0,)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),))


def reshape(a: Tensor, shape) -> Tensor:
    original = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(original),))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return _make(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[i] for i in axes]))
    return scale(sum_(a, axis, keepdims), 1.0 / count)


def index(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing, e.g. the CLS row ``h[:, 0, :]``."""
    out = a.data[key]

    def bw(g):
        full = np.zeros_like(a.data)
        np.add.at(full, key, g)
        return (full,)

    return _make(np.array(out), (a,), bw)


def select_row(a: Tensor, row: int = 0) -> Tensor:
    """Row ``row`` along the second-to-last axis (CLS pooling at row 0)."""
    return index(a, (Ellipsis, row, slice(None)))


def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table with {table.shape[0]} rows")
    out = table.data[ids]

    def bw(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    return _make(out, (table,), bw)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


# ---------------------------------------------------------------------------
# normalisation and probability
# ---------------------------------------------------------------------------

def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Row-max stabilised softmax.  NaN inputs propagate to NaN outputs."""
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (a,), bw)


def softmax_rows(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _make(out, (a,), bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then apply the affine ``gamma``/``beta``."""
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, x.shape[-1]).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, x.shape[-1]).sum(axis=0)
        return gx, gg, gb

    return _make(out, (x, gamma, beta), bw)


def l2_normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale vectors along the last axis to unit length.

    Norms below ``eps`` are clamped to ``eps`` so zero vectors stay zero;
    all other vectors are normalised exactly.
    """
    raw = np.sqrt((x.data * x.data).sum(axis=-1, keepdims=True))
    clamped = raw < eps
    norm = np.where(clamped, eps, raw)
    out = x.data / norm

    def bw(g):
        # clamped rows are a plain division by the constant eps
        return (np.where(clamped, g, g - out * (g * out).sum(axis=-1, keepdims=True)) / norm,)

    return _make(out, (x,), bw)


def cross_entropy_rows(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean over rows of ``-log softmax(logits)[row, target]``.

    ``targets`` is a one-hot matrix of the same shape as ``logits``.
    ``mask`` (optional, boolean, True = keep) removes columns from a row's
    softmax; the target column of a row must be kept.
    """
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy_rows expects a matrix, got shape {logits.shape}")
    targets = np.asarray(targets)
    if targets.shape != logits.shape:
        raise ValueError(f"targets shape {targets.shape} does not match logits {logits.shape}")
    hits = targets > 0
    per_row = hits.sum(axis=1)
    if np.any(per_row != 1):
        bad = int(np.flatnonzero(per_row != 1)[0])
        raise ValueError(f"row {bad} must have exactly one target, has {int(per_row[bad])}")
    keep = np.ones(logits.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if np.any(hits & ~keep):
        raise ValueError("a target column is masked out of its row")
    n = logits.shape[0]
    z = np.where(keep, logits.data, -np.inf)
    shifted = z - z.max(axis=1, keepdims=True)
    e = np.where(keep, np.exp(shifted), 0.0)
    denom = e.sum(axis=1, keepdims=True)
    logp = shifted - np.log(denom)
    loss = -logp[hits].sum() / n
    probs = e / denom

    def bw(g):
        return ((probs - hits) * (g / n),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), bw)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, eps: float = 1e-5,
                   coords: Optional[Iterable[tuple]] = None) -> dict:
    """Central differences of the scalar ``fn()`` w.r.t. entries of ``tensor``.

    Returns a mapping from coordinate tuple to derivative estimate.
    """
    if coords is None:
        coords = list(np.ndindex(*tensor.shape))
    result = {}
    with no_grad():
        for c in coords:
            original = tensor.data[c]
            tensor.data[c] = original + eps
            up = float(fn().data)
            tensor.data[c] = original - eps
            down = float(fn().data)
            tensor.data[c] = original
            result[c] = (up - down) / (2 * eps)
    return result


def analytic_grads(fn: Callable[[], Tensor], tensors: Sequence[Tensor]) -> list:
    for t in tensors:
        t.grad = None
    out = fn()
    backward(out)
    return [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]


def grad_close(analytic: float, numeric: float, rtol: float = 1e-4, atol: float = 1e-8) -> bool:
    return abs(analytic - numeric) <= atol + rtol * max(abs(analytic), abs(numeric))


def check_gradients(fn: Callable[[], Tensor], tensors: Sequence[Tensor], eps: float = 1e-5,
                    rtol: float = 1e-4, atol: float = 1e-8, max_coords: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare backprop gradients with central differences coordinate-wise.

    ``max_coords`` limits the number of coordinates probed per tensor (chosen
    with ``rng``).  Raises ``AssertionError`` on the first mismatch and
    returns the largest relative error otherwise.
    """
    grads = analytic_grads(fn, tensors)
    worst = 0.0
    for t, g in zip(tensors, grads):
        coords = list(np.ndindex(*t.shape))
        if max_coords is not None and len(coords) > max_coords:
            rng = rng or np.random.default_rng(0)
            picks = rng.choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]
        numeric = numerical_grad(fn, t, eps, coords)
        for c, n in numeric.items():
            a = float(g[c])
            if not grad_close(a, n, rtol, atol):
                raise AssertionError(f"gradient mismatch at {t.shape}{c}: analytic={a!r} numeric={n!r}")
            worst = max(worst, abs(a - n) / max(abs(a), abs(n), 1e-12))
    return worst


def check_directional(fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                      rng: np.random.Generator, eps: float = 1e-5, rtol: float = 1e-4,
                      atol: float = 1e-8) -> tuple[float, float]:
    """Check ``<grad, v>`` against a central difference along a random direction ``v``.

    One probe covers every entry of every tensor at once.
    """
    grads = analytic_grads(fn, tensors)
    directions = [rng.standard_normal(t.shape) for t in tensors]
    analytic = float(sum((g * v).sum() for g, v in zip(grads, directions)))
    originals = [t.data.copy() for t in tensors]
    with no_grad():
        for t, v, o in zip(tensors, directions, originals):
            t.data[...] = o + eps * v
        up = float(fn().data)
        for t, v, o in zip(tensors, directions, originals):
            t.data[...] = o - eps * v
        down = float(fn().data)
        for t, o in zip(tensors, originals):
            t.data[...] = o
    numeric = (up - down) / (2 * eps)
    if not grad_close(analytic, numeric, rtol, atol):
        raise AssertionError(f"directional derivative mismatch: analytic={analytic!r} numeric={numeric!r}")
    return analytic, numeric
