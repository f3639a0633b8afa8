"""Severity labelling, class rebalancing and stratified splitting."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DomainError, ResamplingError, SplitError
from .text import SEVERITIES

# Lower AHI bound (events/hour) of each severity class, in label order 1..4.
AHI_CUTS = (0.0, 5.0, 15.0, 30.0)


def label_from_ahi(ahi: float) -> str:
    if not ahi >= 0 or math.isnan(ahi):
        raise DomainError(f"AHI must be a non-negative number, got {ahi}")
    if ahi < 5:
        return "Normal"
    if ahi < 15:
        return "Mild"
    if ahi < 30:
        return "Moderate"
    return "Severe"


def severity_index(severity: str) -> int:
    """1-based ordinal code."""
    return SEVERITIES.index(severity) + 1


@dataclass
class LabeledDataset:
    """Numeric feature rows with 1-based ordinal labels.

    ``ids`` identify the source subject of every row, so duplicated or
    synthetic rows keep pointing at the subject they were derived from.
    ``nominal`` flags columns that SMOTE copies instead of interpolating.
    """

    ids: list
    X: np.ndarray
    y: np.ndarray
    n_classes: int = 4
    nominal: np.ndarray | None = None
    synthetic: np.ndarray = field(default=None)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.ids = list(self.ids)
        if self.X.ndim != 2:
            self.X = self.X.reshape(len(self.y), -1)
        if not (len(self.ids) == len(self.y) == self.X.shape[0]):
            raise ValueError(f"ids/X/y lengths differ: {len(self.ids)}, {self.X.shape[0]}, {len(self.y)}")
        if len(self.y) and (self.y.min() < 1 or self.y.max() > self.n_classes):
            raise ValueError(f"labels must lie in 1..{self.n_classes}")
        if self.synthetic is None:
            self.synthetic = np.zeros(len(self.y), dtype=bool)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y - 1, minlength=self.n_classes)

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset([self.ids[i] for i in idx], self.X[idx], self.y[idx], self.n_classes,
                              self.nominal, self.synthetic[idx])

    def extend(self, ids, X, y, synthetic: bool) -> "LabeledDataset":
        X = np.asarray(X, dtype=np.float64).reshape(len(y), self.X.shape[1])
        return LabeledDataset(self.ids + list(ids), np.vstack([self.X, X]),
                              np.concatenate([self.y, np.asarray(y, dtype=np.int64)]), self.n_classes,
                              self.nominal, np.concatenate([self.synthetic, np.full(len(y), synthetic)]))


def _require_nonempty(d: LabeledDataset) -> np.ndarray:
    counts = d.class_counts
    empty = [SEVERITIES[c] if d.n_classes == 4 else str(c + 1) for c in np.flatnonzero(counts == 0)]
    if empty:
        raise ResamplingError(f"cannot oversample: class(es) {', '.join(empty)} have no examples")
    return counts


def random_oversample(d: LabeledDataset, seed=0) -> LabeledDataset:
    """Duplicate minority rows (uniformly, with replacement) up to the majority count."""
    counts = _require_nonempty(d)
    target = int(counts.max())
    rng = np.random.default_rng(seed)
    picks = []
    for c in range(1, d.n_classes + 1):
        need = target - counts[c - 1]
        if need:
            members = np.flatnonzero(d.y == c)
            picks.append(rng.choice(members, size=need, replace=True))
    if not picks:
        return d
    idx = np.concatenate(picks)
    return d.extend([d.ids[i] for i in idx], d.X[idx], d.y[idx], synthetic=False)


def smote_oversample(d: LabeledDataset, k_neighbors: int = 5, seed=0, u: np.ndarray | None = None) -> LabeledDataset:
    """Interpolate towards same-class nearest neighbours until classes balance.

    Each synthetic row is ``x + u * (x_nn - x)`` on numeric columns; nominal
    columns are copied from ``x``. ``u`` may be supplied (one value per
    synthetic row, in class order) to pin the interpolation weights. A class
    with a single example is duplicated instead, with a warning.
    """
    counts = _require_nonempty(d)
    target = int(counts.max())
    rng = np.random.default_rng(seed)
    nominal = np.zeros(d.X.shape[1], dtype=bool) if d.nominal is None else np.asarray(d.nominal, dtype=bool)
    new_ids, new_X, new_y = [], [], []
    u_pos = 0
    for c in range(1, d.n_classes + 1):
        need = target - counts[c - 1]
        if not need:
            continue
        members = np.flatnonzero(d.y == c)
        if len(members) == 1:
            warnings.warn(f"class {c} has a single example; SMOTE falls back to duplication", stacklevel=2)
            new_ids += [d.ids[members[0]]] * need
            new_X.append(np.repeat(d.X[members], need, axis=0))
            new_y += [c] * need
            continue
        Xc = d.X[members]
        k = min(k_neighbors, len(members) - 1)
        dist = ((Xc[:, None, :] - Xc[None, :, :]) ** 2).sum(-1)
        np.fill_diagonal(dist, np.inf)
        order = np.argsort(dist, axis=1, kind="stable")[:, :k]
        base = rng.integers(0, len(members), size=need)
        nb = order[base, rng.integers(0, k, size=need)]
        if u is None:
            w = rng.random(need)
        else:
            w = np.asarray(u, dtype=np.float64)[u_pos:u_pos + need]
            u_pos += need
        x0, x1 = Xc[base], Xc[nb]
        syn = x0 + w[:, None] * (x1 - x0)
        syn[:, nominal] = x0[:, nominal]
        new_ids += [d.ids[members[i]] for i in base]
        new_X.append(syn)
        new_y += [c] * need
    if not new_y:
        return d
    return d.extend(new_ids, np.vstack(new_X), new_y, synthetic=True)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list[int]:
    raw = [n * f for f in fractions]
    alloc = [int(math.floor(r + 1e-9)) for r in raw]
    rest = n - sum(alloc)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - alloc[i]), i))
    for i in order[:rest]:
        alloc[i] += 1
    return alloc


def stratified_split(d: LabeledDataset, fractions: Sequence[float] = (0.8, 0.1, 0.1), seed=0
                     ) -> tuple[LabeledDataset, ...]:
    """Per-class proportional split with largest-remainder rounding."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"split fractions must sum to 1, got {fractions}")
    rng = np.random.default_rng(seed)
    parts: list[list[int]] = [[] for _ in fractions]
    for c in range(1, d.n_classes + 1):
        members = np.flatnonzero(d.y == c)
        if len(members) == 0:
            continue
        if len(members) < len(fractions):
            raise SplitError(f"class {c} has {len(members)} examples; need at least {len(fractions)} to split")
        members = rng.permutation(members)
        start = 0
        for p, n in zip(parts, _largest_remainder(len(members), fractions)):
            p.extend(members[start:start + n].tolist())
            start += n
    return tuple(d.subset(sorted(p)) for p in parts)
