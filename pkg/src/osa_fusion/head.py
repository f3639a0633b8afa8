"""MLP severity head and the two training objectives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import LabelError, ParameterError, ShapeError
from .tensor import Tensor, activation, clamp, log, mul, softmax, tmatmul, tmean

N_CLASSES = 4
LOG_CLAMP = 1e-12


@dataclass
class MlpHead:
    """Layer ``l`` holds ``{prefix}.w{l}`` (in x out) and ``{prefix}.b{l}``."""

    store: object
    n_layers: int
    hidden_activation: str = "tanh"
    dropout: float = 0.4
    prefix: str = "head"

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ParameterError(f"dropout must lie in [0, 1), got {self.dropout}")
        activation(self.hidden_activation)
        for l in range(1, self.n_layers):
            if self.weight(l).shape[1] != self.weight(l + 1).shape[0]:
                raise ShapeError(f"layer {l} output {self.weight(l).shape[1]} != layer {l + 1} input "
                                 f"{self.weight(l + 1).shape[0]}")

    def weight(self, l: int) -> Tensor:
        return self.store[f"{self.prefix}.w{l}"]

    def bias(self, l: int) -> Tensor:
        return self.store[f"{self.prefix}.b{l}"]

    @property
    def n_classes(self) -> int:
        return self.weight(self.n_layers).shape[1]


def init_head(store, d_in: int, hidden: Sequence[int], rng: np.random.Generator, n_classes: int = N_CLASSES,
              prefix: str = "head") -> int:
    dims = [d_in, *hidden, n_classes]
    for l, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        store.add(f"{prefix}.w{l}", rng.normal(0.0, 1.0 / np.sqrt(a), size=(a, b)))
        store.add(f"{prefix}.b{l}", np.zeros(b))
    return len(dims) - 1


def dropout_mask(shape: tuple, rate: float, rng: np.random.Generator) -> np.ndarray:
    """Inverted dropout: kept units are scaled by 1/(1-rate)."""
    return (rng.random(shape) >= rate) / (1.0 - rate)


def head_logits(x, head: MlpHead, train_mode: bool = False, seed=0) -> Tensor:
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    squeeze = x.ndim == 1
    a = x.reshape(1, -1) if squeeze else x
    if a.shape[1] != head.weight(1).shape[0]:
        raise ShapeError(f"head expects {head.weight(1).shape[0]} inputs, got {a.shape[1]}")
    act = activation(head.hidden_activation)
    rng = np.random.default_rng(seed) if train_mode and head.dropout > 0 else None
    for l in range(1, head.n_layers + 1):
        z = tmatmul(a, head.weight(l)) + head.bias(l)
        if l == head.n_layers:
            return z.reshape(z.shape[-1]) if squeeze else z
        a = act(z)
        if rng is not None:
            a = mul(a, dropout_mask(a.shape, head.dropout, rng))
    raise AssertionError("unreachable")


def mlp_forward(x, head: MlpHead, train_mode: bool = False, seed=0) -> Tensor:
    """Class distribution(s) from the fused representation; softmax output layer."""
    return softmax(head_logits(x, head, train_mode, seed), axis=-1)


def _prefix_matrix(c: int) -> np.ndarray:
    return np.triu(np.ones((c, c)))


def cumulative_probs(dist) -> Tensor:
    """P(y <= j) for j = 1..C as prefix sums over the class axis."""
    p = dist if isinstance(dist, Tensor) else Tensor(np.asarray(dist, dtype=np.float64))
    return tmatmul(p.reshape(1, -1) if p.ndim == 1 else p, _prefix_matrix(p.shape[-1])).reshape(p.shape)


def _labels(y, batch: int, c: int) -> np.ndarray:
    y = np.atleast_1d(np.asarray(y))
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise LabelError(f"labels must be integers in 1..{c}, got {y}")
        y = y.astype(np.int64)
    if y.shape != (batch,):
        raise ShapeError(f"{y.shape[0]} labels for {batch} distributions")
    if y.min() < 1 or y.max() > c:
        raise LabelError(f"labels must lie in 1..{c}, got {sorted(set(y.tolist()))}")
    return y


def ordinal_loss(dist, y, reduce: bool = True) -> Tensor:
    """Cumulative-link loss over thresholds j = 1..C-1.

    Per example: ``-sum_j [1(y<=j) log P(y<=j) + 1(y>j) log P(y>j)]``, with
    both probabilities taken as prefix/suffix sums of the class distribution
    and clamped to [1e-12, 1 - 1e-12].
    """
    p = dist if isinstance(dist, Tensor) else Tensor(np.asarray(dist, dtype=np.float64))
    p2 = p.reshape(1, -1) if p.ndim == 1 else p
    b, c = p2.shape
    y = _labels(y, b, c)
    below = tmatmul(p2, _prefix_matrix(c)[:, :-1])            # P(y <= j), j < C
    above = tmatmul(p2, np.tril(np.ones((c, c)), -1)[:, :-1])  # P(y > j)
    j = np.arange(1, c)
    le = (y[:, None] <= j[None, :]).astype(np.float64)
    terms = mul(log(clamp(below, LOG_CLAMP, 1 - LOG_CLAMP)), le) + mul(log(clamp(above, LOG_CLAMP, 1 - LOG_CLAMP)), 1 - le)
    per = -terms.sum(axis=1)
    if p.ndim == 1:
        return per.reshape(())
    return tmean(per) if reduce else per


def cross_entropy_loss(dist, y, reduce: bool = True) -> Tensor:
    p = dist if isinstance(dist, Tensor) else Tensor(np.asarray(dist, dtype=np.float64))
    p2 = p.reshape(1, -1) if p.ndim == 1 else p
    b, c = p2.shape
    y = _labels(y, b, c)
    onehot = np.eye(c)[y - 1]
    per = -mul(log(clamp(p2, LOG_CLAMP, 1 - LOG_CLAMP)), onehot).sum(axis=1)
    if p.ndim == 1:
        return per.reshape(())
    return tmean(per) if reduce else per


LOSSES = {"ordinal": ordinal_loss, "cross_entropy": cross_entropy_loss}
