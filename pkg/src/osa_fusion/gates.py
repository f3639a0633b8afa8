"""Stochastic feature gates with a Gumbel-softmax relaxation.

Each neuron owns a row of gate logits (log G) over the input features. A
sample perturbs the row with Gumbel noise and pushes it through a softmax at
temperature ``tau``, so every row is a distribution over features. The gated
layer then computes ``act(sum_j P[i, j] * w[i, j] * x[j])`` per neuron.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, activation, mul, softmax, tmatmul


@dataclass
class GateBank:
    logits: Tensor
    temperature: float = 0.5
    rng_seed: int = 0

    def __post_init__(self):
        if not isinstance(self.logits, Tensor):
            self.logits = Tensor(np.asarray(self.logits, dtype=np.float64), requires_grad=True)
        if self.logits.ndim != 2:
            raise ShapeError(f"gate logits must be n_neurons x m_features, got {self.logits.shape}")
        if not np.all(np.isfinite(self.logits.data)):
            raise ParameterError("gate logits must be finite")
        _check_tau(self.temperature)

    @property
    def shape(self) -> tuple[int, int]:
        return self.logits.shape


@dataclass
class GateSample:
    probs: Tensor
    noise: np.ndarray


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise ParameterError(f"gate temperature must be positive, got {tau}")


def gumbel_noise(shape: tuple, seed: int, step: int = 0) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log U)``, deterministic in ``(seed, step)``."""
    rng = np.random.default_rng([int(seed), int(step)])
    u = rng.uniform(np.finfo(np.float64).tiny, 1.0, size=shape)
    return -np.log(-np.log(u))


def sample_gates(bank: GateBank, step: int = 0, noise: np.ndarray | None = None,
                 temperature: float | None = None) -> GateSample:
    """Relaxed gate probabilities for one training step.

    Pass ``noise=np.zeros(...)`` for the deterministic (noise-free) gates used
    at evaluation time and in gradient checks.
    """
    tau = bank.temperature if temperature is None else temperature
    _check_tau(tau)
    if noise is None:
        noise = gumbel_noise(bank.shape, bank.rng_seed, step)
    elif noise.shape != bank.shape:
        raise ShapeError(f"noise shape {noise.shape} != gate shape {bank.shape}")
    probs = softmax((bank.logits + Tensor(noise)) * (1.0 / tau), axis=-1)
    return GateSample(probs, noise)


def deterministic_gates(bank: GateBank, temperature: float | None = None) -> GateSample:
    return sample_gates(bank, noise=np.zeros(bank.shape), temperature=temperature)


def gated_forward(x, weights, sample: GateSample | Tensor, act: str = "tanh") -> Tensor:
    """Gated dense layer without bias.

    ``x`` is (batch, m) or (m,); ``weights`` and the gate probabilities are
    (n_neurons, m). Returns (batch, n_neurons) or (n_neurons,).
    """
    x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    w = weights if isinstance(weights, Tensor) else Tensor(np.asarray(weights, dtype=np.float64))
    p = sample.probs if isinstance(sample, GateSample) else sample
    p = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    if w.shape != p.shape:
        raise ShapeError(f"weights {w.shape} and gate probabilities {p.shape} differ")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"input has {x.shape[1]} features, weights expect {w.shape[1]}")
    out = activation(act)(tmatmul(x, mul(p, w).transpose()))
    return out.reshape(w.shape[0]) if squeeze else out


def feature_scores(bank: GateBank) -> np.ndarray:
    """Per-feature gate score: logits summed over neurons."""
    return bank.logits.data.sum(axis=0)


def harden_gates(bank: GateBank, k: int) -> list[int]:
    """Indices of the ``k`` highest-scoring features; ties go to the lower index."""
    m = bank.shape[1]
    if not 0 <= k <= m:
        raise ParameterError(f"cannot select {k} of {m} features")
    scores = feature_scores(bank)
    order = np.lexsort((np.arange(m), -scores))
    return [int(i) for i in order[:k]]


def hardened_probs(bank: GateBank, selected: Sequence[int], temperature: float | None = None) -> Tensor:
    """Noise-free gate rows restricted (and renormalised) to ``selected`` features."""
    tau = bank.temperature if temperature is None else temperature
    _check_tau(tau)
    keep = np.zeros(bank.shape, dtype=bool)
    keep[:, list(selected)] = True
    z = np.where(keep, bank.logits.data / tau, -np.inf)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return Tensor(e / e.sum(axis=1, keepdims=True))


def write_feature_report(path, bank: GateBank, selected: Sequence[int], labels: Sequence[str] | None = None) -> None:
    scores = feature_scores(bank)
    lines = []
    for rank, idx in enumerate(selected, start=1):
        name = labels[idx] if labels is not None else str(idx)
        lines.append(f"{rank}\t{idx}\t{name}\t{scores[idx]:.6f}")
    Path(path).write_text("rank\tfeature_index\tfeature\tgate_score\n" + "\n".join(lines) + "\n")
