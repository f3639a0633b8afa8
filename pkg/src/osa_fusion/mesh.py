"""Facial mesh ingestion, affine normalisation, keypoint selection and image tokens."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, SelectionError, ShapeError
from .tensor import Tensor, concat, tmatmul, tmean

log = logging.getLogger(__name__)

N_LANDMARKS = 468

# Canonical 468-point topology indices.
JAWLINE = (58, 172, 136, 150, 149, 176, 148, 152, 377, 400, 378, 379, 365, 397, 288)
CHIN = (175, 199, 200)
NOSE_BRIDGE = (168, 6, 197, 195, 5, 4)
DEFAULT_KEYPOINTS = JAWLINE + CHIN + NOSE_BRIDGE

MESH_HEADER = ["subject_id", "landmark_index", "x", "y", "z"]
THETA_HEADER = ["subject_id", "sx", "shx", "tx", "shy", "sy", "ty"]


@dataclass(frozen=True)
class AffineTheta:
    """2x3 affine map ``[[sx, shx, tx], [shy, sy, ty]]`` acting on (x, y, 1)."""

    sx: float = 1.0
    shx: float = 0.0
    tx: float = 0.0
    shy: float = 0.0
    sy: float = 1.0
    ty: float = 0.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.matrix())):
            raise ValueError(f"affine parameters must be finite: {self}")

    def matrix(self) -> np.ndarray:
        return np.array([[self.sx, self.shx, self.tx], [self.shy, self.sy, self.ty]], dtype=np.float64)

    @classmethod
    def from_matrix(cls, m) -> "AffineTheta":
        m = np.asarray(m, dtype=np.float64)
        if m.shape != (2, 3):
            raise ShapeError(f"affine matrix must be 2x3, got {m.shape}")
        return cls(m[0, 0], m[0, 1], m[0, 2], m[1, 0], m[1, 1], m[1, 2])

    def then(self, other: "AffineTheta") -> "AffineTheta":
        """Composition applying ``self`` first, then ``other``."""
        a = np.vstack([self.matrix(), [0.0, 0.0, 1.0]])
        b = np.vstack([other.matrix(), [0.0, 0.0, 1.0]])
        return AffineTheta.from_matrix((b @ a)[:2])

    def is_identity(self) -> bool:
        return self == AffineTheta()


@dataclass(frozen=True)
class FaceMesh:
    landmarks: np.ndarray
    subject_id: str = ""
    theta: AffineTheta = field(default_factory=AffineTheta)

    def __post_init__(self):
        lm = np.asarray(self.landmarks, dtype=np.float64)
        if lm.shape != (N_LANDMARKS, 3):
            raise FormatError(f"subject {self.subject_id!r}: expected {N_LANDMARKS}x3 landmarks, got {lm.shape}")
        if not np.all(np.isfinite(lm)):
            raise FormatError(f"subject {self.subject_id!r}: non-finite landmark coordinate")
        lm.setflags(write=False)
        object.__setattr__(self, "landmarks", lm)


class KeypointSelection(tuple):
    """Ordered, duplicate-free landmark indices in ``[0, 468)``."""

    def __new__(cls, indices: Sequence[int] = DEFAULT_KEYPOINTS):
        idx = tuple(int(i) for i in indices)
        if len(set(idx)) != len(idx):
            dupes = sorted({i for i in idx if idx.count(i) > 1})
            raise SelectionError(f"duplicate landmark indices in selection: {dupes}")
        bad = [i for i in idx if not 0 <= i < N_LANDMARKS]
        if bad:
            raise SelectionError(f"landmark indices out of range [0, {N_LANDMARKS}): {bad}")
        return super().__new__(cls, idx)

    def feature_indices(self, landmarks: Sequence[int]) -> list[int]:
        """Positions in the selected feature vector that belong to ``landmarks``."""
        pos = {lm: k for k, lm in enumerate(self)}
        out = []
        for lm in landmarks:
            if lm not in pos:
                raise SelectionError(f"landmark {lm} is not part of the selection")
            out.extend(3 * pos[lm] + c for c in range(3))
        return out


# ---------------------------------------------------------------------------
# file io
# ---------------------------------------------------------------------------


def normalize_coordinates(xyz: np.ndarray) -> np.ndarray:
    """Min-max rescale x and y jointly into [0, 1]; z is scaled by the same factor.

    Coordinates already inside [0, 1] are returned unchanged.
    """
    xyz = np.array(xyz, dtype=np.float64)
    xy = xyz[:, :2]
    if xy.min() >= 0.0 and xy.max() <= 1.0:
        return xyz
    lo, hi = xy.min(), xy.max()
    span = hi - lo
    if span == 0:
        raise FormatError("cannot normalise a mesh whose x/y coordinates are all equal")
    xyz[:, :2] = (xy - lo) / span
    xyz[:, 2] = xyz[:, 2] / span
    return xyz


def _float(value: str, path, line: int, column: str) -> float:
    try:
        v = float(value)
    except (TypeError, ValueError):
        raise FormatError(f"{path}:{line}: non-numeric {column} value {value!r}") from None
    if not np.isfinite(v):
        raise FormatError(f"{path}:{line}: non-finite {column} value {value!r}")
    return v


def load_thetas(path) -> dict[str, AffineTheta]:
    path = Path(path)
    out: dict[str, AffineTheta] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != THETA_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(THETA_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(THETA_HEADER):
                raise FormatError(f"{path}:{line}: expected {len(THETA_HEADER)} fields, got {len(row)}")
            vals = [_float(v, path, line, THETA_HEADER[k + 1]) for k, v in enumerate(row[1:])]
            out[row[0].strip()] = AffineTheta(*vals)
    return out


def load_meshes(path, theta_path=None) -> list[FaceMesh]:
    """Read the landmark CSV (and optional affine sidecar) into meshes.

    Subjects are returned in first-appearance order. Each subject must list
    every landmark index 0..467 exactly once.
    """
    path = Path(path)
    rows: dict[str, dict[int, tuple[float, float, float]]] = {}
    first_line: dict[str, int] = {}
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != MESH_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(MESH_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 5:
                raise FormatError(f"{path}:{line}: expected 5 fields, got {len(row)}")
            sid = row[0].strip()
            try:
                idx = int(row[1])
            except ValueError:
                raise FormatError(f"{path}:{line}: non-integer landmark_index {row[1]!r}") from None
            if not 0 <= idx < N_LANDMARKS:
                raise FormatError(f"{path}:{line}: landmark_index {idx} outside 0..{N_LANDMARKS - 1}")
            xyz = tuple(_float(v, path, line, c) for v, c in zip(row[2:], "xyz"))
            lms = rows.setdefault(sid, {})
            first_line.setdefault(sid, line)
            if idx in lms:
                raise FormatError(f"{path}:{line}: subject {sid!r} repeats landmark_index {idx}")
            lms[idx] = xyz
    thetas = load_thetas(theta_path) if theta_path is not None else {}
    meshes = []
    for sid, lms in rows.items():
        if len(lms) != N_LANDMARKS:
            raise FormatError(
                f"{path}:{first_line[sid]}: subject {sid!r} has {len(lms)} landmarks, expected {N_LANDMARKS}")
        arr = np.array([lms[i] for i in range(N_LANDMARKS)], dtype=np.float64)
        meshes.append(FaceMesh(normalize_coordinates(arr), sid, thetas.get(sid, AffineTheta())))
    unknown = set(thetas) - set(rows)
    if unknown:
        log.warning("affine sidecar lists %d subjects without meshes: %s", len(unknown), sorted(unknown)[:5])
    return meshes


def write_meshes(path, meshes: Sequence[FaceMesh], theta_path=None) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(MESH_HEADER)
        for m in meshes:
            for i, (x, y, z) in enumerate(m.landmarks):
                w.writerow([m.subject_id, i, repr(float(x)), repr(float(y)), repr(float(z))])
    if theta_path is not None:
        with Path(theta_path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(THETA_HEADER)
            for m in meshes:
                t = m.theta
                w.writerow([m.subject_id] + [repr(float(v)) for v in (t.sx, t.shx, t.tx, t.shy, t.sy, t.ty)])


# ---------------------------------------------------------------------------
# geometry and features
# ---------------------------------------------------------------------------


def apply_affine(mesh: FaceMesh, theta: AffineTheta | None = None, clamp: bool = True) -> FaceMesh:
    """Map every (x, y) through ``theta``; z is untouched, x/y clamped to [0, 1]."""
    theta = mesh.theta if theta is None else theta
    lm = mesh.landmarks
    if theta.is_identity():
        return FaceMesh(lm, mesh.subject_id)
    homo = np.column_stack([lm[:, :2], np.ones(len(lm))])
    xy = homo @ theta.matrix().T
    if clamp:
        xy = np.clip(xy, 0.0, 1.0)
    return FaceMesh(np.column_stack([xy, lm[:, 2]]), mesh.subject_id)


def select_keypoints(mesh: FaceMesh, sel: Sequence[int]) -> np.ndarray:
    if not isinstance(sel, KeypointSelection):
        sel = KeypointSelection(sel)
    return mesh.landmarks[list(sel)].reshape(-1).copy()


def mesh_features(mesh: FaceMesh, sel: Sequence[int] = DEFAULT_KEYPOINTS) -> np.ndarray:
    """Transform by the mesh's own theta, then select keypoints."""
    return select_keypoints(apply_affine(mesh), sel)


# ---------------------------------------------------------------------------
# image tokens
# ---------------------------------------------------------------------------


def block_layout(n_features: int, n_tokens: int) -> tuple[int, int]:
    """Block width and zero padding needed to split features into equal blocks."""
    if n_tokens <= 0:
        raise ValueError("n_tokens must be positive")
    width = -(-n_features // n_tokens)
    return width, width * n_tokens - n_features


def init_image_tokenizer(store, n_features: int, n_tokens: int, d_model: int, rng: np.random.Generator,
                         prefix: str = "image") -> None:
    width, _ = block_layout(n_features, n_tokens)
    store.add(f"{prefix}.block_proj", rng.normal(0.0, 1.0 / np.sqrt(width), size=(n_tokens, width, d_model)))
    store.add(f"{prefix}.cls", rng.normal(0.0, 0.02, size=(d_model,)))


def tokenize_image(features, embed, n_tokens: int, d_model: int, prefix: str = "image") -> Tensor:
    """Split features into contiguous blocks and project each to ``d_model``.

    ``features`` is a vector or a (batch, n_features) array/Tensor. Block ``k``
    has its own projection matrix. The CLS row is the learnable token plus the
    mean of the block tokens, so it summarises the sequence without any
    self-attention. Returns (n_tokens + 1, d_model) or (batch, n_tokens + 1, d_model).
    """
    x = features if isinstance(features, Tensor) else Tensor(np.asarray(features, dtype=np.float64))
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    proj = embed[f"{prefix}.block_proj"]
    width, pad = block_layout(x.shape[1], n_tokens)
    if proj.shape != (n_tokens, width, d_model):
        raise ShapeError(f"block projection has shape {proj.shape}, expected {(n_tokens, width, d_model)}")
    if pad:
        x = concat([x, Tensor(np.zeros((x.shape[0], pad)))], axis=1)
    blocks = x.reshape(x.shape[0], n_tokens, 1, width)
    tokens = tmatmul(blocks, proj).reshape(x.shape[0], n_tokens, d_model)
    cls = embed[f"{prefix}.cls"] + tmean(tokens, axis=1)
    seq = concat([cls.reshape(x.shape[0], 1, d_model), tokens], axis=1)
    return seq.reshape(n_tokens + 1, d_model) if squeeze else seq


__all__ = [
    "AffineTheta", "FaceMesh", "KeypointSelection", "DEFAULT_KEYPOINTS", "N_LANDMARKS",
    "load_meshes", "write_meshes", "load_thetas", "normalize_coordinates",
    "apply_affine", "select_keypoints", "mesh_features", "tokenize_image", "init_image_tokenizer",
    "block_layout",
]
