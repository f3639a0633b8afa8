"""Patient records, clinical sentence templating, word tokenizer and text tokens."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import FormatError, InputError, MissingSubjectError, ShapeError
from .tensor import Tensor, concat, take_rows, tmean

SEVERITIES = ("Normal", "Mild", "Moderate", "Severe")
COMORBIDITIES = ("hypertension", "diabetes", "heart disease", "hyperlipidemia")
PATIENT_HEADER = ["id", "gender", "age", "neck_cm", "bmi", "whr", "htn", "dm", "hd", "hld", "ahi", "severity"]

PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1


@dataclass(frozen=True)
class PatientRecord:
    id: str
    gender: str
    age: float
    neck_circumference: float
    bmi: float
    whr: float
    hypertension: bool = False
    diabetes: bool = False
    heart_disease: bool = False
    hyperlipidemia: bool = False
    ahi: float | None = None
    severity: str | None = None

    def __post_init__(self):
        if self.gender not in ("male", "female"):
            raise ValueError(f"{self.id}: gender must be 'male' or 'female', got {self.gender!r}")
        if not self.age > 0:
            raise ValueError(f"{self.id}: age must be positive, got {self.age}")
        if not 20 < self.neck_circumference < 60:
            raise ValueError(f"{self.id}: neck circumference {self.neck_circumference} outside (20, 60) cm")
        if not 10 < self.bmi < 60:
            raise ValueError(f"{self.id}: BMI {self.bmi} outside (10, 60)")
        if not 0.5 < self.whr < 1.5:
            raise ValueError(f"{self.id}: waist-to-hip ratio {self.whr} outside (0.5, 1.5)")
        if self.severity is not None and self.severity not in SEVERITIES:
            raise ValueError(f"{self.id}: unknown severity {self.severity!r}")

    @property
    def comorbidities(self) -> tuple[bool, bool, bool, bool]:
        return (self.hypertension, self.diabetes, self.heart_disease, self.hyperlipidemia)


# ---------------------------------------------------------------------------
# sentences
# ---------------------------------------------------------------------------


def bmi_category(bmi: float) -> str:
    if bmi < 18.5:
        return "underweight"
    if bmi < 25:
        return "normal weight"
    if bmi < 30:
        return "overweight"
    return "obesity"


def _num(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else f"{x:.1f}"


def _series(items: Sequence[str]) -> str:
    if len(items) == 1:
        return items[0]
    if len(items) == 2:
        return f"{items[0]} and {items[1]}"
    return ", ".join(items[:-1]) + f", and {items[-1]}"


def comorbidity_clause(rec: PatientRecord) -> str:
    present = [name for name, flag in zip(COMORBIDITIES, rec.comorbidities) if flag]
    if not present:
        return "not history of " + _series(COMORBIDITIES)
    return "history of " + _series(present)


def templatize(rec: PatientRecord) -> str:
    pronoun = "he" if rec.gender == "male" else "she"
    return (
        f"This {_num(rec.age)}-year-old {rec.gender} has a neck circumference of "
        f"{_num(rec.neck_circumference)}cm, a waist to hip ratio of {rec.whr:.1f}, "
        f"a body mass index of {_num(rec.bmi)}, indicating that {pronoun} is {bmi_category(rec.bmi)}, "
        f"and {comorbidity_clause(rec)}."
    )


# ---------------------------------------------------------------------------
# tokenizer
# ---------------------------------------------------------------------------

_TOKEN = re.compile(r"\d+(?:\.\d+)?|[a-z]+|[^\sa-z\d]")


def split_words(text: str) -> list[str]:
    """Lowercase; numbers, letter runs and single punctuation marks become tokens."""
    words = _TOKEN.findall(text.lower())
    if not words:
        raise InputError("cannot tokenize empty text")
    return words


def detokenize(words: Sequence[str]) -> str:
    return " ".join(words)


class Vocabulary:
    """Word to id map; ids 0 and 1 are reserved for padding and unknown words."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = [PAD, UNK]
        self.stoi: dict[str, int] = {PAD: PAD_ID, UNK: UNK_ID}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        vocab = cls()
        for t in texts:
            for w in split_words(t):
                vocab.add(w)
        return vocab

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    return [vocab.stoi.get(w, UNK_ID) for w in split_words(text)]


# ---------------------------------------------------------------------------
# embedded token sequences
# ---------------------------------------------------------------------------


def init_text_embedder(store, vocab_size: int, max_len: int, d_model: int, rng: np.random.Generator,
                       prefix: str = "text") -> None:
    store.add(f"{prefix}.embed", rng.normal(0.0, 1.0, size=(vocab_size, d_model)) / np.sqrt(d_model))
    store.add(f"{prefix}.pos", rng.normal(0.0, 0.02, size=(max_len, d_model)))
    store.add(f"{prefix}.cls", rng.normal(0.0, 0.02, size=(d_model,)))


def pad_ids(id_lists: Sequence[Sequence[int]], length: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Right-pad id lists; returns (ids, mask) with mask 1 on real tokens."""
    length = max(len(x) for x in id_lists) if length is None else length
    ids = np.full((len(id_lists), length), PAD_ID, dtype=np.int64)
    mask = np.zeros((len(id_lists), length))
    for r, x in enumerate(id_lists):
        if len(x) > length:
            raise ShapeError(f"sequence of {len(x)} tokens exceeds maximum length {length}")
        ids[r, :len(x)] = x
        mask[r, :len(x)] = 1.0
    return ids, mask


def with_cls(tokens: Tensor, cls: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Prepend a CLS row = learnable token + (masked) mean of the content rows."""
    b, n, d = tokens.shape
    if mask is None:
        pooled = tmean(tokens, axis=1)
    else:
        w = mask / np.maximum(mask.sum(axis=1, keepdims=True), 1.0)
        pooled = (tokens * Tensor(w[:, :, None])).sum(axis=1)
    return concat([(cls + pooled).reshape(b, 1, d), tokens], axis=1)


def tokenize_text(ids, embed, d_model: int, mask: np.ndarray | None = None, prefix: str = "text") -> Tensor:
    """Embedding lookup plus learned positions, with a CLS row prepended.

    ``ids`` is one id list or a padded (batch, length) array with ``mask``.
    Padded positions are zeroed so they never leak into the CLS summary.
    """
    table = embed[f"{prefix}.embed"]
    ids = np.asarray(ids, dtype=np.int64)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        bad = int(ids.max() if ids.max() >= table.shape[0] else ids.min())
        raise IndexError(f"token id {bad} outside vocabulary of size {table.shape[0]}")
    if table.shape[1] != d_model:
        raise ShapeError(f"embedding width {table.shape[1]} != d_model {d_model}")
    pos = embed[f"{prefix}.pos"]
    n = ids.shape[1]
    if n > pos.shape[0]:
        raise ShapeError(f"sequence of {n} tokens exceeds maximum length {pos.shape[0]}")
    tokens = take_rows(table, ids) + pos[:n]
    if mask is not None:
        tokens = tokens * Tensor(mask[:, :, None])
    seq = with_cls(tokens, embed[f"{prefix}.cls"], mask)
    return seq.reshape(n + 1, d_model) if squeeze else seq


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def _flag(value: str, path, line: int, col: str) -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "y"):
        return True
    if v in ("0", "false", "no", "n", ""):
        return False
    raise FormatError(f"{path}:{line}: column {col!r} expects 0/1, got {value!r}")


def _real(value: str, path, line: int, col: str) -> float:
    try:
        v = float(value)
    except ValueError:
        raise FormatError(f"{path}:{line}: column {col!r} expects a number, got {value!r}") from None
    if not np.isfinite(v):
        raise FormatError(f"{path}:{line}: column {col!r} is not finite")
    return v


def load_patients(path) -> list[PatientRecord]:
    path = Path(path)
    out = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PATIENT_HEADER:
            raise FormatError(f"{path}:1: expected header {','.join(PATIENT_HEADER)}")
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(PATIENT_HEADER):
                raise FormatError(f"{path}:{line}: expected {len(PATIENT_HEADER)} fields, got {len(row)}")
            f = dict(zip(PATIENT_HEADER, (c.strip() for c in row)))
            try:
                rec = PatientRecord(
                    id=f["id"],
                    gender=f["gender"].lower(),
                    age=_real(f["age"], path, line, "age"),
                    neck_circumference=_real(f["neck_cm"], path, line, "neck_cm"),
                    bmi=_real(f["bmi"], path, line, "bmi"),
                    whr=_real(f["whr"], path, line, "whr"),
                    hypertension=_flag(f["htn"], path, line, "htn"),
                    diabetes=_flag(f["dm"], path, line, "dm"),
                    heart_disease=_flag(f["hd"], path, line, "hd"),
                    hyperlipidemia=_flag(f["hld"], path, line, "hld"),
                    ahi=_real(f["ahi"], path, line, "ahi") if f["ahi"] else None,
                    severity=f["severity"] or None,
                )
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"{path}:{line}: {exc}") from None
            out.append(rec)
    return out


def _fmt(x: float) -> str:
    return str(int(x)) if float(x).is_integer() else repr(float(x))


def write_patients(path, records: Sequence[PatientRecord]) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(PATIENT_HEADER)
        for r in records:
            w.writerow([r.id, r.gender, _fmt(r.age), _fmt(r.neck_circumference), _fmt(r.bmi), _fmt(r.whr),
                        *(int(c) for c in r.comorbidities),
                        "" if r.ahi is None else _fmt(r.ahi), r.severity or ""])


def import_embeddings(path) -> dict[str, np.ndarray]:
    """Read externally computed token embeddings, one (n_tokens, d_model) block per subject."""
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty embedding file")
    head = lines[0].split()
    if len(head) != 2:
        raise FormatError(f"{path}:1: header must be 'd_model n_tokens'")
    try:
        d_model, n_tokens = int(head[0]), int(head[1])
    except ValueError:
        raise FormatError(f"{path}:1: header must hold two integers") from None
    out: dict[str, np.ndarray] = {}
    i = 1
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        sid = lines[i].strip()
        block_start = i + 1
        rows = []
        for k in range(n_tokens):
            ln = block_start + k
            if ln >= len(lines):
                raise FormatError(f"{path}:{ln + 1}: subject {sid!r} has {k} token rows, expected {n_tokens}")
            parts = lines[ln].split()
            if len(parts) != d_model:
                raise FormatError(
                    f"{path}:{ln + 1}: subject {sid!r} row has dimension {len(parts)}, header says {d_model}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise FormatError(f"{path}:{ln + 1}: non-numeric embedding value") from None
        if sid in out:
            raise FormatError(f"{path}:{i + 1}: subject {sid!r} listed twice")
        out[sid] = np.array(rows, dtype=np.float64)
        i = block_start + n_tokens
    return out


def write_embeddings(path, embeddings: Mapping[str, np.ndarray]) -> None:
    items = list(embeddings.items())
    if not items:
        raise InputError("no embeddings to write")
    n, d = items[0][1].shape
    out = [f"{d} {n}"]
    for sid, m in items:
        if m.shape != (n, d):
            raise ShapeError(f"subject {sid!r} embedding shape {m.shape} != {(n, d)}")
        out.append(sid)
        out.extend(" ".join(repr(float(v)) for v in row) for row in m)
    Path(path).write_text("\n".join(out) + "\n")


def lookup_embeddings(embeddings: Mapping[str, np.ndarray], ids: Sequence[str]) -> np.ndarray:
    missing = [i for i in ids if i not in embeddings]
    if missing:
        raise MissingSubjectError(f"no imported text embedding for subject(s): {', '.join(map(str, missing))}")
    return np.stack([embeddings[i] for i in ids])
