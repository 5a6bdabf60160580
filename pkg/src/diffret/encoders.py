"""Toy two-layer modality encoders, cosine similarity and the symmetric contrastive loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError, NumericError
from .numerics import Tensor


@dataclass
class Embedding:
    values: np.ndarray
    modality: str = ""
    item_id: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise NumericError(f"embedding {self.item_id} has non-finite values")


def stack_embeddings(items) -> tuple[np.ndarray, np.ndarray]:
    """Stack embeddings (or raw vectors) into an (n, D) array plus their ids."""
    vals, ids = [], []
    for i, e in enumerate(items):
        if isinstance(e, Embedding):
            vals.append(e.values)
            ids.append(e.item_id)
        else:
            vals.append(np.asarray(e, dtype=np.float64))
            ids.append(i)
    return np.stack(vals).astype(np.float64), np.asarray(ids, dtype=np.int64)


@dataclass
class EncoderParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    modality: str

    @property
    def input_dim(self) -> int:
        return self.W1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())


@dataclass
class EncoderPair:
    text: EncoderParams
    audio: EncoderParams


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def init_encoder(input_dim: int, D: int, modality: str, rng: np.random.Generator) -> EncoderParams:
    return EncoderParams(
        W1=_uniform(rng, input_dim, (input_dim, D)),
        b1=_uniform(rng, input_dim, (D,)),
        W2=_uniform(rng, D, (D, D)),
        b2=_uniform(rng, D, (D,)),
        modality=modality,
    )


def init_encoder_pair(text_dim: int, audio_dim: int, D: int, seed: int) -> EncoderPair:
    rng = np.random.default_rng([seed, 1])
    return EncoderPair(init_encoder(text_dim, D, "text", rng), init_encoder(audio_dim, D, "audio", rng))


def encoder_forward(raw, params: EncoderParams) -> Tensor:
    raw = nx.as_tensor(raw)
    if raw.shape[-1] != params.input_dim:
        raise DimensionError(
            f"{params.modality} encoder expects input dim {params.input_dim}, got {raw.shape[-1]}")
    hidden = nx.relu(raw @ params.W1 + params.b1)
    return hidden @ params.W2 + params.b2


def encode(raw, params: EncoderParams, item_id: int = 0) -> Embedding:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 1:
        raise DimensionError(f"encode takes a single input vector, got shape {raw.shape}")
    out = encoder_forward(raw[None, :], params).data[0]
    return Embedding(out, params.modality, item_id)


def encode_batch(raw, params: EncoderParams) -> np.ndarray:
    """Encode an (n, input_dim) array without recording gradients."""
    return encoder_forward(np.asarray(raw, dtype=np.float64), params).data


def cosine_similarity(t, a) -> float:
    t = t.values if isinstance(t, Embedding) else np.asarray(t, dtype=np.float64)
    a = a.values if isinstance(a, Embedding) else np.asarray(a, dtype=np.float64)
    nt, na = np.linalg.norm(t), np.linalg.norm(a)
    if nt == 0 or na == 0:
        raise NumericError("cosine similarity is undefined for a zero-norm vector")
    return float(np.clip(t @ a / (nt * na), -1.0, 1.0))


def unit_rows(x: np.ndarray) -> np.ndarray:
    """Scale every row to unit L2 norm."""
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise NumericError("cannot normalize a zero-norm embedding")
    return x / norms


def rms_rows(x: np.ndarray) -> np.ndarray:
    """Scale every row to unit root-mean-square entry, i.e. L2 norm sqrt(D)."""
    x = unit_rows(x)
    return x * np.sqrt(x.shape[-1])


def cosine_matrix(queries: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    qn = np.linalg.norm(queries, axis=1, keepdims=True)
    cn = np.linalg.norm(candidates, axis=1, keepdims=True)
    if np.any(qn == 0) or np.any(cn == 0):
        raise NumericError("cosine similarity is undefined for a zero-norm vector")
    return (queries / qn) @ (candidates / cn).T


def similarity_matrix(text, audio) -> Tensor:
    """Differentiable (B, B) cosine similarities, rows = texts, columns = audios."""
    text, audio = nx.as_tensor(text), nx.as_tensor(audio)
    tn = text / nx.l2norm(text, axis=-1, keepdims=True)
    an = audio / nx.l2norm(audio, axis=-1, keepdims=True)
    return tn @ nx.transpose(an)


def contrastive_loss_from_similarity(sim, tau: float) -> Tensor:
    sim = nx.as_tensor(sim)
    B = sim.shape[0]
    if sim.ndim != 2 or sim.shape[1] != B:
        raise DimensionError(f"similarity matrix must be square, got {sim.shape}")
    if B < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 pairs")
    if tau <= 0:
        raise ContractError(f"temperature must be positive, got {tau}")
    logits = nx.scale(sim, 1.0 / tau)
    eye = np.eye(B)
    over_audio = nx.sum_(nx.log_softmax(logits, axis=1) * eye)
    over_text = nx.sum_(nx.log_softmax(logits, axis=0) * eye)
    return nx.scale(over_audio + over_text, -0.5 / B)


def contrastive_loss(text_batch, audio_batch, tau: float = 0.07) -> Tensor:
    """Symmetric in-batch contrastive loss; row i of each batch forms a pair."""
    if isinstance(text_batch, (list, tuple)):
        text_batch = stack_embeddings(text_batch)[0]
    if isinstance(audio_batch, (list, tuple)):
        audio_batch = stack_embeddings(audio_batch)[0]
    text_batch, audio_batch = nx.as_tensor(text_batch), nx.as_tensor(audio_batch)
    if text_batch.shape != audio_batch.shape:
        raise DimensionError(f"batches differ in shape: {text_batch.shape} vs {audio_batch.shape}")
    if text_batch.shape[0] < 2:
        raise ContractError("contrastive loss needs a batch of at least 2 pairs")
    return contrastive_loss_from_similarity(similarity_matrix(text_batch, audio_batch), tau)


def posterior(query, candidates: Sequence, tau: float = 0.07) -> np.ndarray:
    """Dot-product posterior p(candidate | query) at temperature ``tau``, no normalization."""
    q = query.values if isinstance(query, Embedding) else np.asarray(query, dtype=np.float64)
    c, _ = stack_embeddings(candidates)
    logits = c @ q / tau
    e = np.exp(logits - logits.max())
    return e / e.sum()
