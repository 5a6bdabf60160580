"""Attention-based denoiser predicting the clean relevance distribution.

One query attends over N candidates. The attention logits are biased by the
current noisy distribution ``x_k`` so that candidates favoured at the previous
noise level receive more weight. The attended summary is concatenated to each
candidate and a two-layer MLP turns every (candidate, summary) row into a
logit; a softmax over candidates yields the clean estimate.

Row-vector convention throughout: a projection is ``x @ W``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import ContractError, DimensionError
from .numerics import Tensor

DIRECTIONS = ("t2a", "a2t")


@dataclass
class DenoiserParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    direction: str = "t2a"
    scaled: bool = False

    @property
    def D(self) -> int:
        return self.W_Q.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    def tensors(self) -> dict[str, Tensor]:
        return {"W_Q": self.W_Q, "W_K": self.W_K, "W_V": self.W_V,
                "W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def parameters(self) -> list[Tensor]:
        return list(self.tensors().values())


@dataclass
class DenoiserPair:
    t2a: DenoiserParams
    a2t: DenoiserParams

    def for_direction(self, direction: str) -> DenoiserParams:
        if direction not in DIRECTIONS:
            raise ContractError(f"unknown direction {direction!r}")
        return getattr(self, direction)


def init_denoiser(D: int, direction: str, rng: np.random.Generator, hidden: int | None = None,
                  scaled: bool = False, qk_scale: float = 1.0) -> DenoiserParams:
    """Seeded uniform(+-1/sqrt(fan_in)) init; ``qk_scale`` shrinks W_Q and W_K.

    Small query/key weights start the attention near uniform, so x_k is what
    moves it early in training and the model learns to read the noisy state.
    """
    H = D if hidden is None else hidden
    if H < 1:
        raise ContractError(f"decoder hidden width must be >= 1, got {H}")

    def uniform(fan_in, shape, scale=1.0):
        bound = 1.0 / np.sqrt(fan_in)
        return Tensor(scale * rng.uniform(-bound, bound, size=shape), requires_grad=True)

    return DenoiserParams(
        W_Q=uniform(D, (D, D), qk_scale), W_K=uniform(D, (D, D), qk_scale), W_V=uniform(D, (D, D)),
        W1=uniform(2 * D, (2 * D, H)), b1=uniform(2 * D, (H,)),
        W2=uniform(H, (H, 1)), b2=uniform(H, (1,)),
        direction=direction, scaled=scaled,
    )


def init_denoiser_pair(D: int, seed: int, hidden: int | None = None, scaled: bool = False,
                       qk_scale: float = 1.0) -> DenoiserPair:
    rng = np.random.default_rng([seed, 2])
    return DenoiserPair(init_denoiser(D, "t2a", rng, hidden, scaled, qk_scale),
                        init_denoiser(D, "a2t", rng, hidden, scaled, qk_scale))


def noise_embedding(k, D: int) -> np.ndarray:
    """Sinusoidal embedding of noise level(s) ``k``, interleaved as [sin, cos, sin, cos, ...]."""
    if D % 2:
        raise ContractError(f"noise embedding width must be even, got {D}")
    ks = np.asarray(k, dtype=np.float64)
    if np.any(ks < 0):
        raise ContractError("noise level must be non-negative")
    freqs = 10000.0 ** (-np.arange(0, D, 2, dtype=np.float64) / D)
    phase = ks[..., None] * freqs
    out = np.empty(ks.shape + (D,))
    out[..., 0::2] = np.sin(phase)
    out[..., 1::2] = np.cos(phase)
    return out


def _prepare(query_reps, cand_reps, x_k, k, params: DenoiserParams):
    q = np.asarray(query_reps.data if isinstance(query_reps, Tensor) else query_reps, dtype=np.float64)
    single = q.ndim == 1
    q = q[None, :] if single else q
    cands = nx.as_tensor(cand_reps)
    xk = np.asarray(x_k, dtype=np.float64)
    xk = xk[None, :] if xk.ndim == 1 else xk
    B, D = q.shape
    if cands.ndim != 2 or cands.shape[0] == 0:
        raise ContractError(f"need a non-empty (N, D) candidate matrix, got shape {cands.shape}")
    N = cands.shape[0]
    if cands.shape[1] != D or D != params.D:
        raise DimensionError(f"query dim {D}, candidate dim {cands.shape[1]}, denoiser dim {params.D} must agree")
    if xk.shape != (B, N):
        raise DimensionError(f"x_k must have shape {(B, N)}, got {xk.shape}")
    ks = np.broadcast_to(np.asarray(k), (B,))
    return q, cands, xk, ks, single


def _attend(q, cands: Tensor, xk, ks, params: DenoiserParams):
    # (c + pj) W = c W + pj W: candidate projections are shared by every query
    B, D = q.shape
    pj = noise_embedding(ks, D)
    Q = (q + pj) @ params.W_Q
    cand_keys = cands @ params.W_K
    shift = nx.sum_(Q * (pj @ params.W_K), axis=-1, keepdims=True)
    logits = nx.add(Q @ nx.transpose(cand_keys), shift)
    if params.scaled:
        logits = nx.scale(logits, 1.0 / np.sqrt(D))
    return nx.softmax(logits + xk, axis=-1), pj


def attention_weights(query_rep, cand_reps, x_k, k, params: DenoiserParams) -> np.ndarray:
    q, cands, xk, ks, single = _prepare(query_reps=query_rep, cand_reps=cand_reps, x_k=x_k, k=k, params=params)
    w = _attend(q, cands, xk, ks, params)[0].data
    return w[0] if single else w


def denoise_forward(query_reps, cand_reps, x_k, k, params: DenoiserParams) -> Tensor:
    """Clean-distribution estimate, shape (N,) for one query or (B, N) for a batch.

    ``cand_reps`` is shared by all queries of the batch; ``k`` is a scalar or one
    level per query.
    """
    q, cands, xk, ks, single = _prepare(query_reps, cand_reps, x_k, k, params)
    B, D = q.shape
    N = cands.shape[0]
    weights, pj = _attend(q, cands, xk, ks, params)
    # weights sum to one, so the pj(k) share of the values passes through unweighted;
    # the candidate sum is order-independent, which keeps the output equivariant
    cand_values = nx.reshape(cands @ params.W_V, (1, N, D))
    summary = nx.add(nx.sum_(cand_values * nx.reshape(weights, (B, N, 1)), axis=1), pj @ params.W_V)
    # decoder on concat(c_i, E), split into its candidate and summary halves
    hidden = nx.relu(nx.reshape(cands @ params.W1[:D], (1, N, -1)) +
                     nx.reshape(summary @ params.W1[D:], (B, 1, -1)) + params.b1)
    logits = nx.reshape(hidden @ params.W2 + params.b2, (B, N))
    out = nx.softmax(logits, axis=-1)
    return nx.reshape(out, (N,)) if single else out
