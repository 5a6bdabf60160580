"""Noise schedule, closed-form forward corruption and deterministic DDIM sampling.

The diffused object is a length-N relevance vector over candidates: one-hot at
the matching candidate for clean data, Gaussian noise at the top of the chain.
Noise levels run 1..K; ``alpha_bar(0)`` is defined as 1.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Callable

import numpy as np

from .errors import ConfigError, ContractError, NumericError

if TYPE_CHECKING:
    from .denoiser import DenoiserParams


@dataclass(frozen=True)
class DiffusionSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    @property
    def K(self) -> int:
        return len(self.beta)

    def abar(self, k: int) -> float:
        """Cumulative signal fraction at noise level ``k`` (0 <= k <= K)."""
        if not 0 <= k <= self.K:
            raise ContractError(f"noise level {k} outside [0, {self.K}]")
        return 1.0 if k == 0 else float(self.alpha_bar[k - 1])


def make_schedule(K: int = 50, beta_start: float = 1e-4, beta_end: float = 0.02) -> DiffusionSchedule:
    if int(K) != K or K < 1:
        raise ConfigError(f"step count K must be a positive integer, got {K}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, int(K), dtype=np.float64)
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def schedule_from_betas(beta) -> DiffusionSchedule:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.ndim != 1 or beta.size == 0 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigError("betas must be a non-empty vector in (0, 1)")
    alpha = 1.0 - beta
    return DiffusionSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


@dataclass
class DistributionState:
    values: np.ndarray
    noise_level: int


def q_sample(x0, k: int, noise, schedule: DiffusionSchedule) -> DistributionState:
    """Jump straight to level ``k``: sqrt(abar_k) x0 + sqrt(1 - abar_k) noise.

    ``x0`` and ``noise`` may carry leading batch axes; ``k`` may then be an
    array broadcastable against the leading axes.
    """
    x0 = x0.values if isinstance(x0, DistributionState) else np.asarray(x0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    ks = np.asarray(k)
    if np.any(ks < 1) or np.any(ks > schedule.K):
        raise ContractError(f"noise level must lie in [1, {schedule.K}]")
    abar = schedule.alpha_bar[ks - 1]
    if abar.ndim:
        abar = abar.reshape(abar.shape + (1,) * (x0.ndim - abar.ndim))
    values = np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * noise
    return DistributionState(values, int(k) if ks.ndim == 0 else -1)


def q_step(x_prev, k: int, noise, schedule: DiffusionSchedule) -> np.ndarray:
    """One Markov transition from level k-1 to k."""
    b = schedule.beta[k - 1]
    return np.sqrt(1.0 - b) * np.asarray(x_prev) + np.sqrt(b) * np.asarray(noise)


def ddim_step(x_k, x0_hat, k: int, schedule: DiffusionSchedule) -> DistributionState:
    """Deterministic (eta = 0) move from level k to k-1 given a clean estimate."""
    if not 1 <= k <= schedule.K:
        raise ContractError(f"ddim_step level {k} outside [1, {schedule.K}]")
    x_k = x_k.values if isinstance(x_k, DistributionState) else np.asarray(x_k, dtype=np.float64)
    x0_hat = np.asarray(x0_hat, dtype=np.float64)
    ab_k, ab_prev = schedule.abar(k), schedule.abar(k - 1)
    residual = x_k - np.sqrt(ab_k) * x0_hat
    if ab_k >= 1.0:
        if np.any(residual != 0):
            raise NumericError("alpha_bar is 1 at this level but the state carries noise")
        eps_hat = np.zeros_like(residual)
    else:
        eps_hat = residual / np.sqrt(1.0 - ab_k)
    return DistributionState(np.sqrt(ab_prev) * x0_hat + np.sqrt(1.0 - ab_prev) * eps_hat, k - 1)


_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix64(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def keyed_normal(seed: int, query_ids, candidate_ids) -> np.ndarray:
    """Standard normal draws indexed by (seed, query id, candidate id).

    Each entry depends only on its own key, so permuting candidates permutes
    the noise with them. Returns shape (len(query_ids), len(candidate_ids)).
    """
    q = np.asarray(query_ids, dtype=np.int64).astype(np.uint64)[:, None]
    c = np.asarray(candidate_ids, dtype=np.int64).astype(np.uint64)[None, :]
    with np.errstate(over="ignore"):
        base = _mix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) * _GOLD + _GOLD)
        h = _mix64(base ^ _mix64(q * _GOLD + np.uint64(1)))
        h = _mix64(h ^ _mix64(c * _M1 + np.uint64(2)))
        h2 = _mix64(h + _GOLD)
    u1 = ((h >> np.uint64(11)).astype(np.float64) + 0.5) / 2.0**53
    u2 = (h2 >> np.uint64(11)).astype(np.float64) / 2.0**53
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


Predictor = Callable[[np.ndarray, np.ndarray], np.ndarray]


def run_reverse_chain(
    predict: Predictor, x_K: np.ndarray, schedule: DiffusionSchedule, stride: int = 1
) -> tuple[np.ndarray, list[tuple[int, np.ndarray, np.ndarray]]]:
    """Walk from level K down to 0 with DDIM.

    ``predict(x_k, k_vector)`` returns the clean estimate for a (B, N) state.
    Returns the last clean estimate and the trajectory as (k, x_k, x0_hat) rows.
    """
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    levels = list(range(schedule.K, 0, -stride))
    x = np.array(x_K, dtype=np.float64)
    trajectory = []
    x0_hat = None
    for i, k in enumerate(levels):
        x0_hat = predict(x, np.full(x.shape[0], k))
        trajectory.append((k, x, x0_hat))
        k_next = levels[i + 1] if i + 1 < len(levels) else 0
        x = _ddim_jump(x, x0_hat, k, k_next, schedule)
    trajectory.append((0, x, x0_hat))
    return x0_hat, trajectory


def _ddim_jump(x, x0_hat, k: int, k_next: int, schedule: DiffusionSchedule) -> np.ndarray:
    if k_next == k - 1:
        return ddim_step(x, x0_hat, k, schedule).values
    ab_k, ab_next = schedule.abar(k), schedule.abar(k_next)
    eps_hat = (x - np.sqrt(ab_k) * x0_hat) / np.sqrt(1.0 - ab_k)
    return np.sqrt(ab_next) * x0_hat + np.sqrt(1.0 - ab_next) * eps_hat


def generate(query, candidates, denoiser: "DenoiserParams", schedule: DiffusionSchedule, seed: int,
             stride: int = 1, return_trajectory: bool = False):
    """Generate the relevance distribution of one query over its candidates.

    ``query`` is an :class:`~diffret.encoders.Embedding` and ``candidates`` a
    list of them; plain arrays are accepted too, with ids taken as positions.
    """
    from .encoders import stack_embeddings

    if len(candidates) == 0:
        raise ContractError("generate needs at least one candidate")
    q_vals, q_ids = stack_embeddings([query])
    c_vals, c_ids = stack_embeddings(candidates)
    out, traj = generate_batch(q_vals, c_vals, denoiser, schedule, seed, q_ids, c_ids, stride)
    if return_trajectory:
        return DistributionState(out[0], 0), [(k, x[0], x0[0]) for k, x, x0 in traj]
    return DistributionState(out[0], 0)


def generate_batch(query_reps, cand_reps, denoiser: "DenoiserParams", schedule: DiffusionSchedule, seed: int,
                   query_ids=None, cand_ids=None, stride: int = 1):
    """Batched :func:`generate`: every query is scored against the same candidates.

    Returns the (B, N) final distributions and the full trajectory.
    """
    from .denoiser import denoise_forward

    query_reps = np.asarray(query_reps, dtype=np.float64)
    cand_reps = np.asarray(cand_reps, dtype=np.float64)
    if cand_reps.shape[0] == 0:
        raise ContractError("generate needs at least one candidate")
    query_ids = np.arange(len(query_reps)) if query_ids is None else query_ids
    cand_ids = np.arange(len(cand_reps)) if cand_ids is None else cand_ids
    x_K = keyed_normal(seed, query_ids, cand_ids)

    def predict(x, ks):
        return denoise_forward(query_reps, cand_reps, x, ks, denoiser).data

    return run_reverse_chain(predict, x_K, schedule, stride)
