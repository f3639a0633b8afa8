"""Dense float64 arrays with reverse-mode gradients.

Every learnable piece of the model is expressed with the operations in this
module. A :class:`Tensor` records its parents and a backward closure; calling
:meth:`Tensor.backward` on a scalar walks the recorded graph in reverse
topological order and accumulates ``.grad`` on every tensor that requires it.

Plain ``numpy.ndarray`` values play the role of immutable matrices; the
helpers :func:`matmul` and :func:`softmax_rows` operate on those directly.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DeterminismError, FormatError, ShapeError

DTYPE = np.float64


# ---------------------------------------------------------------------------
# plain-array helpers
# ---------------------------------------------------------------------------


def as_matrix(values, rows: int | None = None, cols: int | None = None) -> np.ndarray:
    m = np.array(values, dtype=DTYPE)
    if m.ndim == 1 and rows is not None and cols is not None:
        m = m.reshape(rows, cols)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-d matrices, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=DTYPE)
    return a @ b


def softmax_rows(m: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.asarray(m, dtype=DTYPE)
    shifted = m - m.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
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
# Tensor
# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents if self.requires_grad else ()
        self._backward = _backward if self.requires_grad else None

    # -- introspection -----------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph traversal ---------------------------------------------------
    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = grads[key] + pg if key in grads else pg

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_t(other)))

    def __rsub__(self, other):
        return add(_t(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return tmatmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)


def _t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(values) -> Tensor:
    return Tensor(np.array(values, dtype=DTYPE), requires_grad=True)


# ---------------------------------------------------------------------------
# differentiable operations
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    sa, sb = a.shape, b.shape
    return Tensor(a.data + b.data, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, _parents=(a,), _backward=lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = _t(a), _t(b)
    ad, bd = a.data, b.data
    return Tensor(ad * bd, _parents=(a, b),
                  _backward=lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def tmatmul(a, b) -> Tensor:
    """Batched matrix product with numpy ``@`` semantics (ndim >= 2)."""
    a, b = _t(a), _t(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul expects ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor(ad @ bd, _parents=(a, b), _backward=backward)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return Tensor(out, _parents=(a,), _backward=lambda g: (g * (1.0 - out * out),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, _parents=(a,), _backward=lambda g: (g * mask,))


def identity(a: Tensor) -> Tensor:
    return a


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "tanh": tanh,
    "relu": relu,
    "linear": identity,
}


def activation(tag: str) -> Callable[[Tensor], Tensor]:
    try:
        return ACTIVATIONS[tag]
    except KeyError:
        raise ValueError(f"unknown activation {tag!r}; expected one of {sorted(ACTIVATIONS)}") from None


def log(a: Tensor) -> Tensor:
    d = a.data
    return Tensor(np.log(d), _parents=(a,), _backward=lambda g: (g / d,))


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return Tensor(np.clip(a.data, lo, hi), _parents=(a,), _backward=lambda g: (g * inside,))


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    out = softmax_rows(a.data, axis=axis)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor(out, _parents=(a,), _backward=backward)


def layer_norm(a: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis; no learnable gain or bias."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    y = xc * inv
    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gy = (g * y).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - y * gy),)

    return Tensor(y, _parents=(a,), _backward=backward)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), _parents=(a,), _backward=backward)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(tsum(a, axis, keepdims), 1.0 / max(n, 1))


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    return Tensor(a.data.reshape(shape), _parents=(a,), _backward=lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim - 2)) + (a.ndim - 1, a.ndim - 2)
    inv = np.argsort(axes)
    return Tensor(np.transpose(a.data, axes), _parents=(a,),
                  _backward=lambda g: (np.transpose(g, inv),))


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape

    def backward(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], _parents=(a,), _backward=backward)


def take_rows(table: Tensor, ids: np.ndarray) -> Tensor:
    """Embedding lookup: ``table[ids]`` with scatter-add backward."""
    ids = np.asarray(ids, dtype=np.int64)
    def backward(g):
        out = np.zeros(table.shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, table.shape[-1]))
        return (out,)

    return Tensor(table.data[ids], _parents=(table,), _backward=backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [_t(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([p.data for p in parts], axis=axis),
                  _parents=tuple(parts), _backward=backward)


# ---------------------------------------------------------------------------
# parameters and optimizer state
# ---------------------------------------------------------------------------


CHECKPOINT_VERSION = 1


class ParamStore:
    """Named trainable tensors plus Adam moment state.

    Gradients live on each tensor's ``.grad``; :meth:`grad` returns zeros for
    a parameter that did not receive one so shapes always match.
    """

    def __init__(self, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self._params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.betas = betas
        self.eps = eps

    def add(self, name: str, values) -> Tensor:
        if name in self._params:
            raise KeyError(f"parameter {name!r} already registered")
        t = param(values)
        self._params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
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

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def grad(self, name: str) -> np.ndarray:
        t = self._params[name]
        return np.zeros_like(t.data) if t.grad is None else t.grad

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def adam_step(self, lr: float, names: Iterable[str] | None = None) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name in (self._params if names is None else names):
            p = self._params[name]
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            p.data = p.data - lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self._params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray], strict: bool = True) -> None:
        for name, t in self._params.items():
            if name not in arrays:
                if strict:
                    raise FormatError(f"checkpoint lacks parameter {name!r}")
                continue
            a = np.asarray(arrays[name], dtype=DTYPE)
            if a.shape != t.shape:
                raise FormatError(f"parameter {name!r}: checkpoint shape {a.shape} != model shape {t.shape}")
            t.data = a.copy()


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Write named arrays plus a JSON metadata blob to an ``.npz`` file."""
    payload = {f"param/{k}": np.asarray(v) for k, v in arrays.items()}
    meta = dict(meta, format_version=CHECKPOINT_VERSION, shapes={k: list(np.shape(v)) for k, v in arrays.items()})
    payload["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        if "__meta__" not in z.files:
            raise FormatError(f"{path}: not a checkpoint (no metadata block)")
        meta = json.loads(bytes(z["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {meta.get('format_version')}")
        arrays = {k[len("param/"):]: z[k].copy() for k in z.files if k.startswith("param/")}
    for k, shape in meta["shapes"].items():
        if list(arrays[k].shape) != shape:
            raise FormatError(f"{path}: array {k!r} has shape {arrays[k].shape}, header says {shape}")
    return arrays, meta


# ---------------------------------------------------------------------------
# finite-difference gradient check
# ---------------------------------------------------------------------------


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor keeps near-zero entries from blowing up."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check_report(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore,
                      epsilon: float = 1e-5, names: Iterable[str] | None = None,
                      analytic_hook: Callable[[str, np.ndarray], np.ndarray] | None = None) -> dict[str, float]:
    """Per-parameter maximum relative error between backprop and central differences.

    ``analytic_hook`` lets tests corrupt the analytic gradient to prove the
    harness notices.
    """
    names = list(params.names() if names is None else names)
    if not names:
        return {}
    first = loss_fn(params)
    second = loss_fn(params)
    if first.data.tobytes() != second.data.tobytes():
        raise DeterminismError(
            f"loss function is not deterministic: {first.item()!r} vs {second.item()!r}; "
            "fix all noise and disable dropout before checking gradients")
    params.zero_grad()
    first.backward()
    report: dict[str, float] = {}
    for name in names:
        p = params[name]
        analytic = params.grad(name).copy()
        if analytic_hook is not None:
            analytic = analytic_hook(name, analytic)
        numeric = np.zeros_like(p.data)
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = loss_fn(params).item()
            flat[i] = orig - epsilon
            fm = loss_fn(params).item()
            flat[i] = orig
            nflat[i] = (fp - fm) / (2.0 * epsilon)
        report[name] = float(relative_error(analytic, numeric).max()) if numeric.size else 0.0
    params.zero_grad()
    return report


def grad_check(loss_fn: Callable[[ParamStore], Tensor], params: ParamStore, epsilon: float = 1e-5) -> float:
    report = grad_check_report(loss_fn, params, epsilon)
    return max(report.values(), default=0.0)
