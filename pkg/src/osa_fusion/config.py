"""Run configuration: JSON file plus command-line overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .mesh import DEFAULT_KEYPOINTS

FUSION_MODES = ("cross_attention", "autoencoder")
MODALITIES = ("text", "visual", "multimodal")
LOSS_MODES = ("ordinal", "cross_entropy")
OVERSAMPLE_MODES = ("none", "ros", "smote")

# Short CLI spellings.
ALIASES = {
    "loss": {"ce": "cross_entropy"},
    "fusion": {"xattn": "cross_attention", "ae": "autoencoder"},
}


@dataclass
class RunConfig:
    patients: str | None = None
    meshes: str | None = None
    thetas: str | None = None
    embeddings: str | None = None

    d_model: int = 32
    d_k: int | None = None
    n_image_tokens: int = 8
    gate_neurons: int = 32
    gate_temperature: float = 1.0
    gate_temperature_final: float | None = None
    keypoints: tuple[int, ...] = DEFAULT_KEYPOINTS
    hidden: tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    dropout: float = 0.4
    max_text_len: int = 64

    fusion: str = "cross_attention"
    modality: str = "multimodal"
    loss: str = "ordinal"
    oversample: str = "ros"
    smote_k: int = 5
    ae_bottleneck: int = 16
    ae_weight: float = 1.0

    lr: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr_patience: int = 5
    lr_factor: float = 0.5
    epochs: int = 100
    batch_size: int = 32
    patience: int = 10
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def __post_init__(self):
        self.fusion = ALIASES["fusion"].get(self.fusion, self.fusion)
        self.loss = ALIASES["loss"].get(self.loss, self.loss)
        for name in ("keypoints", "hidden", "split", "seeds"):
            setattr(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        for name, allowed in (("fusion", FUSION_MODES), ("modality", MODALITIES),
                              ("loss", LOSS_MODES), ("oversample", OVERSAMPLE_MODES)):
            if getattr(self, name) not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        for name in ("epochs", "batch_size", "d_model", "n_image_tokens", "gate_neurons", "patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.gate_temperature <= 0 or (self.gate_temperature_final is not None and self.gate_temperature_final <= 0):
            raise ValueError("gate temperatures must be positive")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        if self.fusion == "autoencoder" and not 0 < self.ae_bottleneck < 2 * self.d_model:
            raise ValueError(f"ae_bottleneck must lie in [1, {2 * self.d_model - 1}] for d_model {self.d_model}")

    def with_overrides(self, **kw) -> "RunConfig":
        kw = {k: v for k, v in kw.items() if v is not None}
        return replace(self, **kw)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        cfg = cls.from_dict(json.loads(path.read_text()))
        # data paths in the file are relative to the file itself
        for name in ("patients", "meshes", "thetas", "embeddings"):
            v = getattr(cfg, name)
            if v is not None and not Path(v).is_absolute():
                setattr(cfg, name, str((path.parent / v).resolve()))
        return cfg

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


__all__ = ["RunConfig", "FUSION_MODES", "MODALITIES", "LOSS_MODES", "OVERSAMPLE_MODES"]
