"""Image-text fusion: single-head cross-attention and the autoencoder baseline."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParameterError, ShapeError
from .tensor import Tensor, concat, layer_norm, softmax, tanh, tmatmul, tmean

MASKED = -1e30


@dataclass
class TokenSequence:
    """Token matrix whose row 0 is the CLS position.

    ``tokens`` is (n + 1, d) or batched (batch, n + 1, d). ``mask`` marks real
    rows (1) against padding (0) and only matters for key/value sequences.
    """

    tokens: Tensor
    modality: str
    mask: np.ndarray | None = None

    @property
    def d_model(self) -> int:
        return self.tokens.shape[-1]

    @property
    def cls(self) -> Tensor:
        return self.tokens[..., 0, :]


@dataclass
class FusionParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor | None = None

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v", "w_o"):
            v = getattr(self, name)
            if v is not None and not isinstance(v, Tensor):
                setattr(self, name, Tensor(np.asarray(v, dtype=np.float64)))
        shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
        if len(shapes) != 1:
            raise ShapeError(f"W_q, W_k, W_v must share a shape, got {sorted(shapes)}")
        d_model, d_k = self.w_q.shape
        if d_k != d_model and self.w_o is None:
            raise ShapeError("d_k != d_model needs an output projection w_o")

    @property
    def d_k(self) -> int:
        return self.w_q.shape[1]

    @classmethod
    def from_store(cls, store, prefix: str = "fusion") -> "FusionParams":
        w_o = store[f"{prefix}.w_o"] if f"{prefix}.w_o" in store else None
        return cls(store[f"{prefix}.w_q"], store[f"{prefix}.w_k"], store[f"{prefix}.w_v"], w_o)


def init_fusion(store, d_model: int, d_k: int | None, rng: np.random.Generator, prefix: str = "fusion") -> None:
    d_k = d_model if d_k is None else d_k
    for name in ("w_q", "w_k", "w_v"):
        store.add(f"{prefix}.{name}", rng.normal(0.0, 1.0 / np.sqrt(d_model), size=(d_model, d_k)))
    if d_k != d_model:
        store.add(f"{prefix}.w_o", rng.normal(0.0, 1.0 / np.sqrt(d_k), size=(d_k, d_model)))


def _unwrap(seq) -> tuple[Tensor, np.ndarray | None]:
    if isinstance(seq, TokenSequence):
        return seq.tokens, seq.mask
    return (seq if isinstance(seq, Tensor) else Tensor(np.asarray(seq, dtype=np.float64))), None


def _scores(image: Tensor, text: Tensor, params: FusionParams, mask: np.ndarray | None):
    if image.shape[-1] != text.shape[-1]:
        raise ShapeError(f"image d_model {image.shape[-1]} != text d_model {text.shape[-1]}")
    if image.shape[-1] != params.w_q.shape[0]:
        raise ShapeError(f"token width {image.shape[-1]} != projection input {params.w_q.shape[0]}")
    q = tmatmul(image, params.w_q)
    k = tmatmul(text, params.w_k)
    logits = tmatmul(q, k.transpose()) * (1.0 / np.sqrt(params.d_k))
    if mask is not None:
        logits = logits + Tensor(np.where(mask > 0, 0.0, MASKED)[..., None, :])
    return logits


def attention_weights(image, text, params: FusionParams) -> np.ndarray:
    """softmax(Q K^T / sqrt(d_k)) with Q from image tokens and K from text tokens."""
    img, _ = _unwrap(image)
    txt, mask = _unwrap(text)
    return softmax(_scores(img, txt, params, mask), axis=-1).data


def cross_attend(image, text, params: FusionParams, residual: bool = True, norm: bool = True,
                 return_weights: bool = False):
    """Image tokens attend over text tokens; output keeps the image row count.

    With ``residual`` the image tokens (through ``w_o`` when d_k != d_model)
    are added to the attention output, then optionally layer-normalised.
    """
    img, _ = _unwrap(image)
    txt, mask = _unwrap(text)
    weights = softmax(_scores(img, txt, params, mask), axis=-1)
    out = tmatmul(weights, tmatmul(txt, params.w_v))
    if params.w_o is not None:
        out = tmatmul(out, params.w_o)
    if residual:
        out = out + img
    if norm:
        out = layer_norm(out)
    fused = TokenSequence(out, "fused")
    return (fused, weights.data) if return_weights else fused


def write_attention_csv(path, weights: np.ndarray) -> None:
    """One example's weights: rows are image tokens, columns text tokens."""
    w = np.asarray(weights)
    if w.ndim != 2:
        raise ShapeError(f"expected a 2-d weight matrix, got {w.shape}")
    header = "image_token," + ",".join(f"text_{j}" for j in range(w.shape[1]))
    body = "\n".join(f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(w))
    Path(path).write_text(header + "\n" + body + "\n")


# ---------------------------------------------------------------------------
# autoencoder baseline
# ---------------------------------------------------------------------------


def init_autoencoder(store, d_model: int, bottleneck: int, rng: np.random.Generator, prefix: str = "ae") -> None:
    check_bottleneck(d_model, bottleneck)
    d_in = 2 * d_model
    store.add(f"{prefix}.enc_w", rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, bottleneck)))
    store.add(f"{prefix}.enc_b", np.zeros(bottleneck))
    store.add(f"{prefix}.dec_w", rng.normal(0.0, 1.0 / np.sqrt(bottleneck), size=(bottleneck, d_in)))
    store.add(f"{prefix}.dec_b", np.zeros(d_in))


def check_bottleneck(d_model: int, bottleneck: int) -> None:
    if not 0 < bottleneck < 2 * d_model:
        raise ParameterError(f"bottleneck {bottleneck} must lie in [1, {2 * d_model - 1}] to compress 2*d_model")


@dataclass
class AutoencoderOutput:
    fused: TokenSequence
    code: Tensor
    reconstruction_loss: Tensor


def autoencoder_fuse(image, text, store, bottleneck: int, prefix: str = "ae") -> AutoencoderOutput:
    """Concatenate both CLS rows, encode through tanh, decode linearly.

    The decoder output is the single fused row. The reconstruction loss is
    an ordinary differentiable term, so it also reaches both encoders.
    """
    img, _ = _unwrap(image)
    txt, _ = _unwrap(text)
    if img.shape[-1] != txt.shape[-1]:
        raise ShapeError(f"image d_model {img.shape[-1]} != text d_model {txt.shape[-1]}")
    check_bottleneck(img.shape[-1], bottleneck)
    joint = concat([img[..., 0, :], txt[..., 0, :]], axis=-1)
    code = tanh(tmatmul(_2d(joint), store[f"{prefix}.enc_w"]) + store[f"{prefix}.enc_b"])
    recon = tmatmul(code, store[f"{prefix}.dec_w"]) + store[f"{prefix}.dec_b"]
    diff = recon - _2d(joint)
    loss = tmean(diff * diff)
    fused = recon.reshape(*joint.shape[:-1], 1, joint.shape[-1])
    return AutoencoderOutput(TokenSequence(fused, "fused"), code, loss)


def _2d(t: Tensor) -> Tensor:
    return t.reshape(1, -1) if t.ndim == 1 else t
