"""Two-phase training and the binary checkpoint format.

Phase 1 fits the two encoders with the contrastive loss. Phase 2 freezes them
and fits one denoiser per retrieval direction with the KL generation loss on
in-batch candidate sets.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .datagen import DatasetSplit
from .denoiser import DenoiserPair, DenoiserParams, denoise_forward, init_denoiser_pair
from .diffusion import DiffusionSchedule, make_schedule, q_sample
from .encoders import (EncoderPair, EncoderParams, contrastive_loss, encode_batch, encoder_forward,
                       init_encoder_pair, rms_rows)
from .errors import ConfigError, ContractError, FormatError, IOFailure, NumericError, TruncatedError, VersionError
from .numerics import Adam, GradTape, Tensor

log = logging.getLogger(__name__)

KL_FLOOR = 1e-12


@dataclass
class TrainConfig:
    D: int = 512
    K: int = 50
    batch_size: int = 24
    epochs_phase1: int = 30
    epochs_phase2: int = 50
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-3
    tau: float = 0.07
    seed: int = 0
    beta_start: float | None = None
    beta_end: float | None = None
    label_smoothing: float = 0.0
    hidden: int | None = None
    attention_scaling: bool = False
    attention_init_scale: float = 1.0
    normalize_embeddings: bool = True

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if self.K < 1:
            raise ConfigError(f"K must be >= 1, got {self.K}")
        if not 0 <= self.label_smoothing < 1:
            raise ConfigError(f"label_smoothing must lie in [0, 1), got {self.label_smoothing}")
        if self.D < 2 or self.D % 2:
            raise ConfigError(f"D must be a positive even integer, got {self.D}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        for name in ("epochs_phase1", "epochs_phase2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("lr_phase1", "lr_phase2"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.attention_init_scale <= 0:
            raise ConfigError(f"attention_init_scale must be positive, got {self.attention_init_scale}")
        if self.hidden is not None and self.hidden < 1:
            raise ConfigError(f"hidden width must be >= 1, got {self.hidden}")
        self.schedule()

    def betas(self) -> tuple[float, float]:
        """Resolved (beta_start, beta_end).

        Unset ends follow the usual 1e-4..0.02 range quoted for 1000 steps,
        rescaled by 1000/K so that x_K is close to pure noise for any K; the
        upper end is capped at 0.5.
        """
        end = min(20.0 / self.K, 0.5) if self.beta_end is None else self.beta_end
        start = min(0.1 / self.K, end) if self.beta_start is None else self.beta_start
        return start, end

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.K, *self.betas())

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


@dataclass
class KLStats:
    clamped: int = 0


kl_stats = KLStats()


def kl_loss(x0_hat, x0, eps_ls: float = 0.0) -> Tensor:
    """KL(smoothed target || prediction), averaged over any leading batch axes.

    With ``eps_ls = 0`` this is the cross-entropy -log x0_hat[target]. Predicted
    probabilities below 1e-12 are floored and counted in ``kl_stats``.
    """
    x0_hat = nx.as_tensor(x0_hat)
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.shape != x0_hat.shape:
        raise ContractError(f"target shape {x0.shape} does not match prediction {x0_hat.shape}")
    N = x0.shape[-1]
    target = (1.0 - eps_ls) * x0 + eps_ls / N
    small = (x0_hat.data < KL_FLOOR) & (target > 0)
    if np.any(small):
        kl_stats.clamped += int(small.sum())
        log.warning("kl_loss: %d predicted probabilities floored at %g", int(small.sum()), KL_FLOOR)
    safe_t = np.where(target > 0, target, 1.0)
    entropy_term = float(_exact_sum(target * np.log(safe_t)))
    cross = nx.sum_(nx.log(nx.clamp_min(x0_hat, KL_FLOOR)) * target)
    rows = x0.size // N
    return nx.scale(nx.add(cross, -entropy_term), -1.0 / rows)


def _exact_sum(x: np.ndarray) -> float:
    return float(np.sort(x, axis=None).sum())


def _checksum(tensors) -> str:
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t.data).tobytes())
    return h.hexdigest()


def encoder_checksum(encoders: EncoderPair) -> str:
    return _checksum(encoders.text.parameters() + encoders.audio.parameters())


@dataclass
class PhaseResult:
    params: object
    losses: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        if len(idx) >= 2:
            yield idx


def _require_pairs(dataset: DatasetSplit, config: TrainConfig) -> None:
    if dataset.n_pairs < config.batch_size:
        raise ConfigError(f"dataset has {dataset.n_pairs} pairs, fewer than batch_size={config.batch_size}")


def train_phase1(dataset: DatasetSplit, config: TrainConfig, encoders: EncoderPair | None = None) -> PhaseResult:
    """Contrastive training of both encoders. Returns the encoders and per-epoch mean losses."""
    _require_pairs(dataset, config)
    if dataset.encoded:
        raise ConfigError("phase 1 needs raw inputs; pre-encoded datasets skip it")
    if encoders is None:
        encoders = init_encoder_pair(dataset.text.shape[1], dataset.audio.shape[1], config.D, config.seed)
    rng = np.random.default_rng([config.seed, 10])
    params = encoders.text.parameters() + encoders.audio.parameters()
    opt = Adam(params, lr=config.lr_phase1)
    texts, audios = dataset.text, dataset.audio[dataset.text_to_audio]
    losses = []
    for epoch in range(config.epochs_phase1):
        total, count = 0.0, 0
        for idx in _batches(dataset.n_pairs, config.batch_size, rng):
            opt.zero_grad()
            try:
                with GradTape() as tape:
                    t = encoder_forward(texts[idx], encoders.text)
                    a = encoder_forward(audios[idx], encoders.audio)
                    loss = contrastive_loss(t, a, config.tau)
            except NumericError as exc:
                raise NumericError(f"phase 1 diverged at epoch {epoch + 1}: {exc}") from exc
            nx.backward(loss, tape)
            opt.step()
            total += loss.item()
            count += 1
        losses.append(total / count)
        log.info("phase1 epoch %d loss %.5f", epoch + 1, losses[-1])
    return PhaseResult(encoders, losses)


def embed_dataset(dataset: DatasetSplit, encoders: EncoderPair | None) -> tuple[np.ndarray, np.ndarray]:
    """(text embeddings, audio embeddings) of a split; pre-encoded splits pass through."""
    if dataset.encoded or encoders is None:
        if not dataset.encoded:
            raise ConfigError("raw dataset given but the checkpoint carries no encoders")
        return dataset.text, dataset.audio
    return encode_batch(dataset.text, encoders.text), encode_batch(dataset.audio, encoders.audio)


def denoiser_step_loss(query_reps, cand_reps, k, noise, params: DenoiserParams, schedule: DiffusionSchedule,
                       eps_ls: float, targets=None) -> Tensor:
    """KL loss of one direction on a batch whose i-th query matches candidate ``targets[i]``."""
    B, N = len(query_reps), len(cand_reps)
    x0 = np.eye(N)[np.arange(B) if targets is None else np.asarray(targets)]
    x_k = q_sample(x0, k, noise, schedule).values
    return kl_loss(denoise_forward(query_reps, cand_reps, x_k, k, params), x0, eps_ls)


def train_phase2(dataset: DatasetSplit, frozen_encoders: EncoderPair | None, config: TrainConfig,
                 denoisers: DenoiserPair | None = None) -> PhaseResult:
    """Fit both denoisers on in-batch candidate sets with the encoders frozen."""
    _require_pairs(dataset, config)
    before = encoder_checksum(frozen_encoders) if frozen_encoders is not None else None
    text_emb, audio_emb = embed_dataset(dataset, frozen_encoders)
    if config.normalize_embeddings:
        text_emb, audio_emb = rms_rows(text_emb), rms_rows(audio_emb)
    audio_emb = audio_emb[dataset.text_to_audio]
    if denoisers is None:
        denoisers = init_denoiser_pair(config.D, config.seed, config.hidden, config.attention_scaling,
                                       config.attention_init_scale)
    if denoisers.t2a.D != text_emb.shape[1]:
        raise ConfigError(f"embedding dim {text_emb.shape[1]} differs from denoiser dim {denoisers.t2a.D}")
    schedule = config.schedule()
    rng = np.random.default_rng([config.seed, 20])
    opt = Adam(denoisers.t2a.parameters() + denoisers.a2t.parameters(), lr=config.lr_phase2)
    losses = []
    for epoch in range(config.epochs_phase2):
        total, count = 0.0, 0
        for idx in _batches(dataset.n_pairs, config.batch_size, rng):
            B = len(idx)
            k_t, k_a = rng.integers(1, config.K + 1, size=(2, B))
            eps_t, eps_a = rng.standard_normal((2, B, B))
            opt.zero_grad()
            try:
                with GradTape() as tape:
                    loss = nx.add(
                        denoiser_step_loss(text_emb[idx], audio_emb[idx], k_t, eps_t, denoisers.t2a,
                                           schedule, config.label_smoothing),
                        denoiser_step_loss(audio_emb[idx], text_emb[idx], k_a, eps_a, denoisers.a2t,
                                           schedule, config.label_smoothing),
                    )
            except NumericError as exc:
                raise NumericError(f"phase 2 diverged at epoch {epoch + 1}: {exc}") from exc
            nx.backward(loss, tape)
            opt.step()
            total += loss.item()
            count += 1
        losses.append(total / count)
        log.info("phase2 epoch %d loss %.5f", epoch + 1, losses[-1])
    if frozen_encoders is not None and encoder_checksum(frozen_encoders) != before:
        raise ContractError("encoder parameters changed during phase 2")
    return PhaseResult(denoisers, losses)


def fit_denoiser(query_reps, cand_reps, targets, params: DenoiserParams, schedule: DiffusionSchedule,
                 steps: int, lr: float = 1e-3, seed: int = 0, eps_ls: float = 0.0,
                 callback: Callable[[int, float], None] | None = None) -> list[float]:
    """Train one denoiser on a fixed query/candidate set for ``steps`` Adam steps."""
    rng = np.random.default_rng([seed, 30])
    opt = Adam(params.parameters(), lr=lr)
    B, N = len(query_reps), len(cand_reps)
    losses = []
    for step in range(steps):
        k = rng.integers(1, schedule.K + 1, size=B)
        noise = rng.standard_normal((B, N))
        opt.zero_grad()
        with GradTape() as tape:
            loss = denoiser_step_loss(query_reps, cand_reps, k, noise, params, schedule, eps_ls, targets)
        nx.backward(loss, tape)
        opt.step()
        losses.append(loss.item())
        if callback:
            callback(step, losses[-1])
    return losses


def write_loss_csv(path, rows) -> None:
    """Append (epoch, phase, loss) rows; a header is written for a new file."""
    path = Path(path)
    new = not path.exists()
    try:
        with path.open("a", newline="") as fh:
            w = csv.writer(fh)
            if new:
                w.writerow(["epoch", "phase", "loss"])
            for epoch, phase, loss in rows:
                w.writerow([epoch, phase, repr(float(loss))])
    except OSError as exc:
        raise IOFailure(f"cannot write loss curve to {path}: {exc}") from exc


# checkpoint file

MAGIC = b"DFAT"
FORMAT_VERSION = 1
_ARRAY, _JSON = 0, 1


@dataclass
class Checkpoint:
    config: TrainConfig
    schedule: DiffusionSchedule
    encoders: EncoderPair | None = None
    denoisers: DenoiserPair | None = None


def _sections(ckpt: Checkpoint):
    meta = {
        "config": asdict(ckpt.config),
        "has_encoders": ckpt.encoders is not None,
        "has_denoisers": ckpt.denoisers is not None,
    }
    if ckpt.denoisers is not None:
        meta["attention_scaling"] = ckpt.denoisers.t2a.scaled
    yield "meta", _JSON, json.dumps(meta, sort_keys=True).encode()
    yield "schedule.beta", _ARRAY, ckpt.schedule.beta
    yield "schedule.alpha", _ARRAY, ckpt.schedule.alpha
    yield "schedule.alpha_bar", _ARRAY, ckpt.schedule.alpha_bar
    if ckpt.encoders is not None:
        for enc in (ckpt.encoders.text, ckpt.encoders.audio):
            for name, t in enc.tensors().items():
                yield f"encoder.{enc.modality}.{name}", _ARRAY, t.data
    if ckpt.denoisers is not None:
        for den in (ckpt.denoisers.t2a, ckpt.denoisers.a2t):
            for name, t in den.tensors().items():
                yield f"denoiser.{den.direction}.{name}", _ARRAY, t.data


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    sections = list(_sections(ckpt))
    out = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(sections))]
    for name, kind, payload in sections:
        raw_name = name.encode()
        out.append(struct.pack("<I", len(raw_name)) + raw_name + struct.pack("<B", kind))
        if kind == _JSON:
            out.append(struct.pack("<Q", len(payload)) + payload)
        else:
            arr = np.ascontiguousarray(payload, dtype="<f8")
            out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
            out.append(struct.pack("<Q", arr.nbytes) + arr.tobytes())
    return b"".join(out)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    try:
        Path(path).write_bytes(checkpoint_bytes(ckpt))
    except OSError as exc:
        raise IOFailure(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def parse_checkpoint(buf: bytes) -> Checkpoint:
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic bytes)")
    r.take(4)
    version, count = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    sections: dict[str, object] = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I")
        try:
            name = r.take(name_len).decode()
        except UnicodeDecodeError as exc:
            raise FormatError("corrupt section name") from exc
        (kind,) = r.unpack("<B")
        if kind == _JSON:
            (n,) = r.unpack("<Q")
            sections[name] = r.take(n)
        elif kind == _ARRAY:
            (ndim,) = r.unpack("<I")
            shape = r.unpack(f"<{ndim}I")
            (nbytes,) = r.unpack("<Q")
            if nbytes != 8 * int(np.prod(shape, dtype=np.int64)):
                raise FormatError(f"section {name}: byte count does not match shape {shape}")
            sections[name] = np.frombuffer(r.take(nbytes), dtype="<f8").astype(np.float64).reshape(shape)
        else:
            raise FormatError(f"section {name}: unknown kind {kind}")
    if r.pos != len(buf):
        raise FormatError(f"{len(buf) - r.pos} trailing bytes after the last section")
    try:
        meta = json.loads(sections["meta"])
        config = TrainConfig.from_dict(meta["config"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"checkpoint metadata unreadable: {exc}") from exc

    def arr(name):
        if name not in sections:
            raise FormatError(f"checkpoint lacks section {name}")
        return sections[name]

    schedule = DiffusionSchedule(arr("schedule.beta"), arr("schedule.alpha"), arr("schedule.alpha_bar"))
    encoders = denoisers = None
    if meta["has_encoders"]:
        def enc(modality):
            return EncoderParams(*(Tensor(arr(f"encoder.{modality}.{n}"), requires_grad=True)
                                   for n in ("W1", "b1", "W2", "b2")), modality=modality)
        encoders = EncoderPair(enc("text"), enc("audio"))
    if meta["has_denoisers"]:
        def den(direction):
            names = ("W_Q", "W_K", "W_V", "W1", "b1", "W2", "b2")
            return DenoiserParams(*(Tensor(arr(f"denoiser.{direction}.{n}"), requires_grad=True) for n in names),
                                  direction=direction, scaled=bool(meta.get("attention_scaling", False)))
        denoisers = DenoiserPair(den("t2a"), den("a2t"))
    return Checkpoint(config, schedule, encoders, denoisers)


def load_checkpoint(path) -> Checkpoint:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IOFailure(f"cannot read checkpoint {path}: {exc}") from exc
    return parse_checkpoint(buf)


def train(dataset: DatasetSplit, config: TrainConfig, phase1: bool = True, phase2: bool = True,
          loss_csv=None) -> Checkpoint:
    """Run the configured phases and bundle the result into a checkpoint.

    Without phase 1 the encoders keep their seeded random initialization
    (pre-encoded datasets carry no encoders at all).
    """
    encoders = None
    rows = []
    if not dataset.encoded:
        if phase1:
            res = train_phase1(dataset, config)
            encoders = res.params
            rows += [(i + 1, 1, v) for i, v in enumerate(res.losses)]
        else:
            encoders = init_encoder_pair(dataset.text.shape[1], dataset.audio.shape[1], config.D, config.seed)
    denoisers = None
    if phase2:
        res = train_phase2(dataset, encoders, config)
        denoisers = res.params
        rows += [(i + 1, 2, v) for i, v in enumerate(res.losses)]
    if loss_csv is not None:
        write_loss_csv(loss_csv, rows)
    return Checkpoint(config, config.schedule(), encoders, denoisers)


__all__ = [
    "TrainConfig", "Checkpoint", "PhaseResult", "kl_loss", "kl_stats", "train_phase1", "train_phase2",
    "fit_denoiser", "train", "save_checkpoint", "load_checkpoint", "parse_checkpoint", "checkpoint_bytes",
    "write_loss_csv", "encoder_checksum", "embed_dataset",
]
