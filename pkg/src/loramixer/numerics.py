"""Dense tensors with a dynamic reverse-mode tape.

Every operation records its parents and a closure that maps the upstream
gradient to parent gradients. ``Tensor.backward`` topologically sorts the
record, walks it once in reverse, and then drops it. Data lives in numpy
arrays; the engine adds only the differentiation bookkeeping.
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, NonFiniteError

_state = threading.local()
_default_dtype = np.float64


def set_default_dtype(dtype) -> None:
    """Engine-wide float type for freshly created tensors (float64 or float32)."""
    global _default_dtype
    dtype = np.dtype(dtype)
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype}")
    _default_dtype = dtype.type


def get_default_dtype():
    return _default_dtype


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording on this thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _default_dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

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

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"

    def __len__(self) -> int:
        return len(self.data)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    # -- differentiation --------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable ``t`` that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError(f"backward() needs an explicit gradient for shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise DimensionError(f"gradient shape {grad.shape} does not match tensor shape {self.shape}")

        order = _toposort(self)
        pending: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is not None:
                for parent, pg in zip(node._parents, node._backward(g)):
                    if pg is None or not parent.requires_grad:
                        continue
                    key = id(parent)
                    pending[key] = pg if key not in pending else pending[key] + pg
        for node in order:
            if node._backward is not None:
                node._parents = ()
                node._backward = None

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

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)


def _raise_item(t: Tensor):
    raise DimensionError(f"item() requires a single element, got shape {t.shape}")


def _toposort(root: Tensor) -> list[Tensor]:
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
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    track = is_grad_enabled() and any(p.requires_grad for p in parents)
    out.requires_grad = track
    if track:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


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


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None)

    return _make(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def power(a, exponent: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(exponent)
    return _make(ad ** p, (a,), lambda g: (g * p * ad ** (p - 1.0),), "pow")


def exp(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(ad)
    return _make(out, (a,), lambda g: (g / ad,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,), "relu")


def tanh(a) -> Tensor:
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _make(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axis=axes, keepdims=keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {src} into {tuple(shape)}") from None
    return _make(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a, axes=None) -> Tensor:
    """Permute axes; the default swaps the last two."""
    a = as_tensor(a)
    if axes is None:
        if a.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 dims, got shape {a.shape}")
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inverse),), "transpose")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    parts = index if isinstance(index, tuple) else (index,)
    basic = all(isinstance(p, (slice, int, type(None), type(Ellipsis))) for p in parts)

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(a.data[index]), (a,), backward, "getitem")


def take_rows(a, rows) -> Tensor:
    """Gather rows (first axis) by integer index; repeated indices accumulate in backward."""
    a = as_tensor(a)
    rows = np.asarray(rows, dtype=np.intp)
    shape = a.shape

    def backward(g):
        full = np.zeros(shape, dtype=g.dtype)
        np.add.at(full, rows, g)
        return (full,)

    return _make(a.data[rows], (a,), backward, "take_rows")


def place_rows(values, rows, n_rows: int) -> Tensor:
    """Inverse of ``take_rows`` for distinct indices: zeros of ``n_rows`` rows with ``values`` scattered in."""
    values = as_tensor(values)
    rows = np.asarray(rows, dtype=np.intp)
    out = np.zeros((n_rows,) + values.shape[1:], dtype=values.dtype)
    out[rows] = values.data
    return _make(out, (values,), lambda g: (g[rows],), "place_rows")


def embedding(table, ids) -> Tensor:
    """Look up rows of ``table`` for an integer array of any shape."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.intp)
    flat = take_rows(table, ids.reshape(-1))
    return reshape(flat, ids.shape + table.shape[1:])


def pick(a, index) -> Tensor:
    """``a[i, index[i]]`` for a 2-D tensor; used for label log-likelihoods."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.intp)
    rows = np.arange(a.shape[0])
    return getitem(a, (rows, index))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return _make(out, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra and normalisers
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes, with batch broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise DimensionError(f"softmax over an empty axis (shape {logits.shape})")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        # (diag(p) - p p^T) g, row by row
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _make(p, (logits,), backward, "softmax")


def log_softmax(logits, axis: int = -1) -> Tensor:
    logits = as_tensor(logits)
    if logits.ndim == 0 or logits.shape[axis] == 0:
        raise DimensionError(f"log_softmax over an empty axis (shape {logits.shape})")
    shifted = logits.data - logits.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _make(out, (logits,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),), "log_softmax")


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Parameter-free normalisation over the last axis."""
    x = as_tensor(x)
    centered = x - mean(x, axis=-1, keepdims=True)
    var = mean(centered * centered, axis=-1, keepdims=True)
    return centered * power(var + eps, -0.5)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as (d_out, d_in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.shape[-1] != weight.shape[-1]:
        raise DimensionError(f"linear: input shape {x.shape} incompatible with weight shape {weight.shape}")
    y = matmul(x, transpose(weight))
    return y if bias is None else y + bias


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits)."""
    logp = log_softmax(logits, axis=-1)
    return -mean(pick(logp, labels))


# ---------------------------------------------------------------------------
# gradient certification
# ---------------------------------------------------------------------------

def grad_check(f: Callable[..., Tensor], inputs: Iterable, eps: float = 1e-6) -> float:
    """Largest |g_ad - g_fd| / max(1, |g_fd|) over every input coordinate.

    ``f`` receives fresh tensors (one per input) and must return a scalar.
    Central differences use step ``eps`` on a copy of each coordinate.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(as_tensor(x).data, dtype=np.float64) for x in inputs]

    leaves = [Tensor(arr.copy(), requires_grad=True) for arr in base]
    out = f(*leaves)
    if out.size != 1:
        raise DimensionError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(arrays):
        with no_grad():
            try:
                val = f(*[Tensor(a) for a in arrays])
            except NonFiniteError as exc:
                raise NonFiniteError(f"objective not finite at perturbed point: {exc}") from exc
        v = float(val.data.reshape(-1)[0])
        if not np.isfinite(v):
            raise NonFiniteError("objective not finite at perturbed point")
        return v

    worst = 0.0
    for k, arr in enumerate(base):
        flat = arr.reshape(-1)
        for i in range(flat.size):
            probe = [a.copy() for a in base]
            pf = probe[k].reshape(-1)
            pf[i] = flat[i] + eps
            up = evaluate(probe)
            pf[i] = flat[i] - eps
            down = evaluate(probe)
            fd = (up - down) / (2.0 * eps)
            ad = float(analytic[k].reshape(-1)[i])
            worst = max(worst, abs(ad - fd) / max(1.0, abs(fd)))
    return worst
