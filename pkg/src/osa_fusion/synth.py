"""Synthetic patients with a planted, ordinal, two-modality severity signal."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .mesh import DEFAULT_KEYPOINTS, N_LANDMARKS, FaceMesh, KeypointSelection, write_meshes
from .sampling import label_from_ahi
from .text import SEVERITIES, PatientRecord, write_patients

# Clinical cohort composition and per-class means (Normal, Mild, Moderate, Severe).
COHORT_COUNTS = (58, 76, 76, 290)
BMI_MEANS = (24.0, 25.1, 26.6, 28.6)
AGE_MEANS = (32.1, 39.1, 43.2, 41.4)
AHI_RANGES = ((0.0, 5.0), (5.0, 15.0), (15.0, 30.0), (30.0, 90.0))

# Chin and lower-jaw landmarks that carry the planted displacement.
PLANTED_LANDMARKS = (152, 148, 377, 176, 400, 175)

_BASE_FACE_SEED = 20250415


@dataclass(frozen=True)
class SynthConfig:
    n_subjects: int = 800
    proportions: tuple[float, ...] = COHORT_COUNTS
    signal: float = 1.0
    noise: float = 0.01
    seed: int = 0
    displacement: float = 0.02
    planted: tuple[int, ...] = PLANTED_LANDMARKS

    def __post_init__(self):
        if self.n_subjects <= 0:
            raise ValueError("n_subjects must be positive")
        if len(self.proportions) != 4 or min(self.proportions) <= 0:
            raise ValueError(f"need four positive class proportions, got {self.proportions}")
        if not 0.0 <= self.signal <= 1.0:
            raise ValueError(f"signal strength must lie in [0, 1], got {self.signal}")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")

    @property
    def class_probs(self) -> np.ndarray:
        p = np.asarray(self.proportions, dtype=np.float64)
        return p / p.sum()


def base_face() -> np.ndarray:
    """Fixed reference geometry shared by every synthetic subject."""
    rng = np.random.default_rng(_BASE_FACE_SEED)
    xy = rng.uniform(0.2, 0.8, size=(N_LANDMARKS, 2))
    z = rng.normal(0.0, 0.03, size=(N_LANDMARKS, 1))
    return np.hstack([xy, z])


def planted_directions(planted: Sequence[int]) -> np.ndarray:
    """Unit displacement direction per planted landmark; every axis non-trivial."""
    rng = np.random.default_rng(_BASE_FACE_SEED + 1)
    d = rng.uniform(0.5, 1.0, size=(len(planted), 3)) * rng.choice([-1.0, 1.0], size=(len(planted), 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _shifted(anchors: Sequence[float], weights: np.ndarray, signal: float) -> np.ndarray:
    """Blend per-class anchors towards their pooled mean as the signal fades."""
    a = np.asarray(anchors, dtype=np.float64)
    pooled = float(weights @ a)
    return pooled + signal * (a - pooled)


def generate(cfg: SynthConfig) -> tuple[list[PatientRecord], list[FaceMesh]]:
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects
    probs = cfg.class_probs
    level = rng.choice(4, size=n, p=probs)  # 0..3

    bmi_mu = _shifted(BMI_MEANS, probs, cfg.signal)
    age_mu = _shifted(AGE_MEANS, probs, cfg.signal)
    neck_mu = _shifted((35.0, 36.5, 38.0, 40.0), probs, cfg.signal)
    whr_mu = _shifted((0.86, 0.88, 0.90, 0.93), probs, cfg.signal)
    comorb_p = _shifted((0.08, 0.14, 0.20, 0.30), probs, cfg.signal)

    base = base_face()
    dirs = planted_directions(cfg.planted)
    planted = list(cfg.planted)

    records, meshes = [], []
    for i in range(n):
        c = level[i]
        lo, hi = AHI_RANGES[c]
        ahi = float(rng.uniform(lo, hi))
        rec = PatientRecord(
            id=f"S{i:05d}",
            gender="male" if rng.random() < 0.72 else "female",
            age=float(np.clip(np.rint(rng.normal(age_mu[c], 9.0)), 18, 85)),
            neck_circumference=float(np.clip(np.rint(rng.normal(neck_mu[c], 2.5)), 26, 55)),
            bmi=float(np.clip(np.rint(rng.normal(bmi_mu[c], 3.0)), 15, 50)),
            whr=float(np.clip(np.round(rng.normal(whr_mu[c], 0.05), 2), 0.65, 1.3)),
            hypertension=bool(rng.random() < comorb_p[c]),
            diabetes=bool(rng.random() < comorb_p[c]),
            heart_disease=bool(rng.random() < comorb_p[c]),
            hyperlipidemia=bool(rng.random() < comorb_p[c]),
            ahi=ahi,
            severity=label_from_ahi(ahi),
        )
        lm = base + rng.normal(0.0, cfg.noise, size=base.shape)
        lm[planted] += cfg.signal * cfg.displacement * c * dirs
        lm[:, :2] = np.clip(lm[:, :2], 0.0, 1.0)
        records.append(rec)
        meshes.append(FaceMesh(lm, rec.id))
    return records, meshes


def write_dataset(cfg: SynthConfig, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records, meshes = generate(cfg)
    pp, mp = out / "patients.csv", out / "meshes.csv"
    write_patients(pp, records)
    write_meshes(mp, meshes)
    return pp, mp


def planted_feature_indices(cfg: SynthConfig, selection: Sequence[int] = DEFAULT_KEYPOINTS) -> list[int]:
    return KeypointSelection(selection).feature_indices(cfg.planted)


def threshold_oracle_accuracy(records: Sequence[PatientRecord], meshes: Sequence[FaceMesh],
                              cfg: SynthConfig) -> float:
    """Per-feature threshold classifier on the planted coordinates.

    Each planted coordinate is projected onto its known displacement sign,
    thresholded at midpoints between consecutive class means, and the
    per-feature votes are combined by their median.
    """
    y = np.array([SEVERITIES.index(r.severity) for r in records])
    feats = np.stack([m.landmarks[list(cfg.planted)].reshape(-1) for m in meshes])
    signs = np.sign(planted_directions(cfg.planted)).reshape(-1)
    feats = feats * signs
    votes = np.zeros_like(feats, dtype=np.int64)
    for j in range(feats.shape[1]):
        means = np.array([feats[y == c, j].mean() if np.any(y == c) else np.nan for c in range(4)])
        cuts = (means[:-1] + means[1:]) / 2.0
        votes[:, j] = np.searchsorted(np.sort(cuts), feats[:, j])
    pred = np.rint(np.median(votes, axis=1)).astype(np.int64)
    return float(np.mean(pred == y))


__all__ = ["SynthConfig", "generate", "write_dataset", "planted_feature_indices", "threshold_oracle_accuracy",
           "PLANTED_LANDMARKS", "BMI_MEANS", "COHORT_COUNTS"]
