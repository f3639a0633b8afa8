"""The dual-encoder severity classifier assembled from the building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .config import RunConfig
from .errors import CompatibilityError, ShapeError
from .fusion import TokenSequence, autoencoder_fuse, cross_attend, init_autoencoder, init_fusion, FusionParams
from .gates import GateBank, gated_forward, hardened_probs, harden_gates, sample_gates, deterministic_gates
from .head import LOSSES, MlpHead, init_head, mlp_forward
from .mesh import init_image_tokenizer, tokenize_image
from .tensor import ParamStore, Tensor, load_arrays, save_arrays, tmatmul
from .text import (PatientRecord, Vocabulary, init_text_embedder, lookup_embeddings, pad_ids, templatize,
                   tokenize, tokenize_text, with_cls)

TABULAR = ("age", "neck_circumference", "bmi", "whr")
NOMINAL = ("male", "hypertension", "diabetes", "heart_disease", "hyperlipidemia")


def encode_row(rec: PatientRecord, image_features: np.ndarray) -> np.ndarray:
    """Flat numeric row: image features, continuous tabular fields, then 0/1 flags."""
    tab = [getattr(rec, k) for k in TABULAR]
    flags = [rec.gender == "male", *rec.comorbidities]
    return np.concatenate([image_features, tab, np.asarray(flags, dtype=np.float64)])


def nominal_mask(n_image: int) -> np.ndarray:
    return np.r_[np.zeros(n_image + len(TABULAR), dtype=bool), np.ones(len(NOMINAL), dtype=bool)]


def decode_record(row: np.ndarray, n_image: int, sid: str, synthetic: bool = False) -> PatientRecord:
    """Rebuild the tabular record carried by a numeric row.

    Interpolated (synthetic) rows are snapped back to the source precision:
    whole years, centimetres and BMI units, two-decimal waist-to-hip ratio.
    """
    age, neck, bmi, whr = row[n_image:n_image + 4]
    flags = row[n_image + 4:] > 0.5
    if synthetic:
        age, neck, bmi, whr = np.rint(age), np.rint(neck), np.rint(bmi), np.round(whr, 2)
    return PatientRecord(sid, "male" if flags[0] else "female", float(age), float(neck), float(bmi), float(whr),
                         *(bool(f) for f in flags[1:]))


@dataclass
class Batch:
    X: np.ndarray
    ids: list
    synthetic: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)


class DualEncoder:
    """Gated landmark encoder + sentence encoder + fusion + MLP head."""

    def __init__(self, cfg: RunConfig, n_image_features: int, vocab: Vocabulary,
                 feature_mean: np.ndarray, feature_std: np.ndarray, seed: int = 0,
                 text_embeddings: Mapping[str, np.ndarray] | None = None, external_dim: int | None = None):
        self.cfg = cfg
        self.n_image = n_image_features
        self.vocab = vocab
        self.feature_mean = np.asarray(feature_mean, dtype=np.float64)
        self.feature_std = np.asarray(feature_std, dtype=np.float64)
        self.text_embeddings = text_embeddings
        self.external_dim = external_dim
        if text_embeddings is not None and external_dim is None:
            self.external_dim = next(iter(text_embeddings.values())).shape[1]
        self.temperature = cfg.gate_temperature
        self._token_cache: dict[tuple, list[int]] = {}

        rng = np.random.default_rng(seed)
        d = cfg.d_model
        s = ParamStore(betas=(cfg.beta1, cfg.beta2), eps=cfg.adam_eps)
        if self.uses_image:
            s.add("gates.logits", np.zeros((cfg.gate_neurons, n_image_features)))
            s.add("gates.weight", rng.normal(0.0, 1.0, size=(cfg.gate_neurons, n_image_features)))
            init_image_tokenizer(s, cfg.gate_neurons, cfg.n_image_tokens, d, rng)
        if self.uses_text:
            init_text_embedder(s, len(vocab), cfg.max_text_len, d, rng)
            if self.external_dim is not None and self.external_dim != d:
                s.add("text.adapter", rng.normal(0.0, 1.0 / np.sqrt(self.external_dim), size=(self.external_dim, d)))
        head_in = d
        if cfg.modality == "multimodal":
            if cfg.fusion == "cross_attention":
                init_fusion(s, d, cfg.d_k, rng)
            else:
                init_autoencoder(s, d, cfg.ae_bottleneck, rng)
                head_in = 2 * d
        n_layers = init_head(s, head_in, cfg.hidden, rng)
        self.store = s
        self.head = MlpHead(s, n_layers, cfg.activation, cfg.dropout)
        self.gates = GateBank(s["gates.logits"], cfg.gate_temperature, seed) if self.uses_image else None

    @property
    def uses_image(self) -> bool:
        return self.cfg.modality in ("visual", "multimodal")

    @property
    def uses_text(self) -> bool:
        return self.cfg.modality in ("text", "multimodal")

    # -- encoders -----------------------------------------------------------
    def image_sequence(self, X: np.ndarray, train: bool, step: int, hard_k: int | None = None) -> Tensor:
        x = (X[:, :self.n_image] - self.feature_mean) / self.feature_std
        self.gates.temperature = self.temperature
        if hard_k is not None:
            probs = hardened_probs(self.gates, harden_gates(self.gates, hard_k))
        elif train:
            probs = sample_gates(self.gates, step=step).probs
        else:
            probs = deterministic_gates(self.gates).probs
        h = gated_forward(Tensor(x), self.store["gates.weight"], probs, "tanh")
        return tokenize_image(h, self.store, self.cfg.n_image_tokens, self.cfg.d_model)

    def token_ids(self, batch: Batch) -> list[list[int]]:
        out = []
        for row, sid, syn in zip(batch.X, batch.ids, batch.synthetic):
            key = tuple(row[self.n_image:])
            ids = self._token_cache.get(key)
            if ids is None:
                ids = tokenize(templatize(decode_record(row, self.n_image, sid, bool(syn))), self.vocab)
                self._token_cache[key] = ids
            out.append(ids)
        return out

    def text_sequence(self, batch: Batch) -> TokenSequence:
        d = self.cfg.d_model
        if self.text_embeddings is not None:
            ext = Tensor(lookup_embeddings(self.text_embeddings, batch.ids))
            if ext.shape[-1] != self.external_dim:
                raise CompatibilityError(f"imported embeddings have width {ext.shape[-1]}, model expects "
                                         f"{self.external_dim}")
            if "text.adapter" in self.store:
                ext = tmatmul(ext, self.store["text.adapter"])
            seq = with_cls(ext, self.store["text.cls"])
            mask = np.ones((len(batch), seq.shape[1]))
            return TokenSequence(seq, "text", mask)
        ids, mask = pad_ids(self.token_ids(batch))
        seq = tokenize_text(ids, self.store, d, mask=mask)
        return TokenSequence(seq, "text", np.hstack([np.ones((len(batch), 1)), mask]))

    # -- full model ---------------------------------------------------------
    def forward(self, batch: Batch, train: bool = False, step: int = 0, seed=0,
                hard_k: int | None = None) -> tuple[Tensor, Tensor | None]:
        """Class probabilities and the auxiliary (reconstruction) loss, if any."""
        aux = None
        image = self.image_sequence(batch.X, train, step, hard_k) if self.uses_image else None
        text = self.text_sequence(batch) if self.uses_text else None
        if self.cfg.modality == "visual":
            rep = image[:, 0, :]
        elif self.cfg.modality == "text":
            rep = text.tokens[:, 0, :]
        elif self.cfg.fusion == "cross_attention":
            fused = cross_attend(TokenSequence(image, "image"), text, FusionParams.from_store(self.store))
            rep = fused.tokens[:, 0, :]
        else:
            out = autoencoder_fuse(image, text, self.store, self.cfg.ae_bottleneck)
            rep = out.fused.tokens[:, 0, :]
            aux = out.reconstruction_loss
        probs = mlp_forward(rep, self.head, train_mode=train, seed=seed)
        return probs, aux

    def loss(self, batch: Batch, y: np.ndarray, step: int, seed) -> tuple[Tensor, Tensor]:
        probs, aux = self.forward(batch, train=True, step=step, seed=seed)
        total = LOSSES[self.cfg.loss](probs, y)
        if aux is not None:
            total = total + aux * self.cfg.ae_weight
        return total, probs

    def attention(self, batch: Batch) -> np.ndarray:
        """Cross-attention weights (batch, image tokens, text tokens)."""
        if self.cfg.modality != "multimodal" or self.cfg.fusion != "cross_attention":
            raise CompatibilityError("attention weights exist only for multimodal cross-attention models")
        image = self.image_sequence(batch.X, False, 0)
        _, w = cross_attend(TokenSequence(image, "image"), self.text_sequence(batch),
                            FusionParams.from_store(self.store), return_weights=True)
        return w

    def predict_proba(self, batch: Batch, chunk: int = 512, hard_k: int | None = None) -> np.ndarray:
        out = []
        for s in range(0, len(batch), chunk):
            sub = Batch(batch.X[s:s + chunk], batch.ids[s:s + chunk], batch.synthetic[s:s + chunk])
            out.append(self.forward(sub, train=False, hard_k=hard_k)[0].data)
        return np.vstack(out) if out else np.zeros((0, self.head.n_classes))

    def selected_features(self, k: int) -> list[int]:
        if self.gates is None:
            raise CompatibilityError("text-only models have no image gates")
        return harden_gates(self.gates, k)

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra: dict | None = None) -> None:
        arrays = self.store.state_arrays()
        arrays["__feature_mean"] = self.feature_mean
        arrays["__feature_std"] = self.feature_std
        meta = {
            "config": self.cfg.to_dict(),
            "n_image": self.n_image,
            "vocab": self.vocab.itos,
            "external_dim": self.external_dim,
            "temperature": self.temperature,
            **(extra or {}),
        }
        save_arrays(path, arrays, meta)

    @classmethod
    def load(cls, path, text_embeddings: Mapping[str, np.ndarray] | None = None) -> tuple["DualEncoder", dict]:
        arrays, meta = load_arrays(path)
        cfg = RunConfig.from_dict(meta["config"])
        vocab = Vocabulary()
        for w in meta["vocab"][2:]:
            vocab.add(w)
        if meta.get("external_dim") is not None and text_embeddings is None:
            raise CompatibilityError("checkpoint was trained on imported text embeddings; supply them to load it")
        model = cls(cfg, meta["n_image"], vocab, arrays.pop("__feature_mean"), arrays.pop("__feature_std"),
                    text_embeddings=text_embeddings, external_dim=meta.get("external_dim"))
        model.store.load_arrays(arrays)
        model.temperature = meta["temperature"]
        return model, meta

    def check_inputs(self, n_columns: int) -> None:
        expected = self.n_image + len(TABULAR) + len(NOMINAL)
        if n_columns != expected:
            raise CompatibilityError(f"input rows have {n_columns} columns; checkpoint expects {expected} "
                                     f"({self.n_image} image features)")


def feature_scaler(X_image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = X_image.mean(axis=0)
    std = X_image.std(axis=0)
    return mean, np.where(std > 1e-12, std, 1.0)


def check_shapes(X: np.ndarray, ids: Sequence) -> None:
    if X.ndim != 2 or X.shape[0] != len(ids):
        raise ShapeError(f"{X.shape} rows for {len(ids)} ids")
