"""Synthetic paired-modality data with a controllable domain shift, and embedding files.

Both modalities are noisy linear images of a shared latent vector. The
out-of-domain variant rotates each modality's mixing matrix by a fixed angle in
a set of random planes, so a shift of 0 degrees reproduces the source exactly.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IOFailure, TruncatedError, VersionError


@dataclass
class SyntheticSpec:
    n_pairs: int = 512
    n_val: int = 0
    n_test: int = 128
    latent_dim: int = 16
    text_dim: int = 48
    audio_dim: int = 64
    noise_std: float = 0.5
    shift_degrees: float = 0.0
    target_noise_std: float | None = None
    captions_per_audio: int = 1
    test_captions_per_audio: int = 1
    mixing_scale: float = 1.0

    def validate(self) -> None:
        if self.n_pairs < 4:
            raise ConfigError(f"n_pairs must be >= 4, got {self.n_pairs}")
        if self.noise_std < 0 or (self.target_noise_std is not None and self.target_noise_std < 0):
            raise ConfigError("noise_std must be non-negative")
        if min(self.latent_dim, self.text_dim, self.audio_dim) < 1:
            raise ConfigError("latent and input dimensions must be positive")
        if self.captions_per_audio < 1 or self.test_captions_per_audio < 1:
            raise ConfigError("captions per audio must be >= 1")


@dataclass
class DatasetSplit:
    """Texts and audios of one split; ``text_to_audio[m]`` is the audio row paired with text ``m``."""

    text: np.ndarray
    audio: np.ndarray
    text_ids: np.ndarray
    audio_ids: np.ndarray
    text_to_audio: np.ndarray
    split: str = "train"
    domain: str = "source"
    encoded: bool = False

    @property
    def n_pairs(self) -> int:
        return len(self.text)

    @property
    def pairs(self) -> list[tuple[np.ndarray, np.ndarray, int]]:
        return [(self.text[m], self.audio[self.text_to_audio[m]], int(self.text_ids[m]))
                for m in range(self.n_pairs)]

    def relevant_audio(self) -> list[set[int]]:
        """For each text, the ids of its matching audio items."""
        return [{int(self.audio_ids[j])} for j in self.text_to_audio]

    def relevant_text(self) -> list[set[int]]:
        """For each audio, the ids of all its captions."""
        out: list[set[int]] = [set() for _ in range(len(self.audio))]
        for m, j in enumerate(self.text_to_audio):
            out[j].add(int(self.text_ids[m]))
        return out

    def head(self, n: int) -> "DatasetSplit":
        """First ``n`` audio items with all of their captions."""
        keep = np.flatnonzero(self.text_to_audio < n)
        return DatasetSplit(self.text[keep], self.audio[:n], self.text_ids[keep], self.audio_ids[:n],
                            self.text_to_audio[keep], self.split, self.domain, self.encoded)


@dataclass
class Mixing:
    text: np.ndarray
    audio: np.ndarray


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    source: Mixing
    target: Mixing
    splits: dict[str, DatasetSplit] = field(default_factory=dict)

    def __getitem__(self, name: str) -> DatasetSplit:
        return self.splits[name]


def plane_rotation(dim: int, degrees: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal map rotating by ``degrees`` in floor(dim/2) random orthogonal planes."""
    basis, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    block = np.eye(dim)
    for i in range(0, dim - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return basis @ block @ basis.T


def _mixing(rng, out_dim, latent_dim, scale) -> np.ndarray:
    m = rng.standard_normal((out_dim, latent_dim)) * (scale / np.sqrt(latent_dim))
    if np.linalg.matrix_rank(m) == 0:
        raise ConfigError("mixing matrix is degenerate (rank 0)")
    return m


def _make_split(rng, n_audio, captions, mix: Mixing, noise_std, latent_dim, first_text_id, first_audio_id,
                split, domain) -> DatasetSplit:
    z = rng.standard_normal((n_audio, latent_dim))
    audio = z @ mix.audio.T + noise_std * rng.standard_normal((n_audio, mix.audio.shape[0]))
    text_to_audio = np.repeat(np.arange(n_audio), captions)
    zt = z[text_to_audio]
    text = zt @ mix.text.T + noise_std * rng.standard_normal((len(zt), mix.text.shape[0]))
    return DatasetSplit(
        text=text, audio=audio,
        text_ids=np.arange(first_text_id, first_text_id + len(text)),
        audio_ids=np.arange(first_audio_id, first_audio_id + n_audio),
        text_to_audio=text_to_audio, split=split, domain=domain,
    )


def generate_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticData:
    """Source-domain train/val/test splits plus a shifted target-domain test split.

    Splits are keyed ``train``, ``val`` (when ``n_val > 0``), ``test`` and
    ``target_test``. Ids never repeat across splits.
    """
    spec.validate()
    rng = np.random.default_rng([seed, 100])
    source = Mixing(_mixing(rng, spec.text_dim, spec.latent_dim, spec.mixing_scale),
                    _mixing(rng, spec.audio_dim, spec.latent_dim, spec.mixing_scale))
    rot_rng = np.random.default_rng([seed, 101])
    if spec.shift_degrees == 0:
        target = Mixing(source.text.copy(), source.audio.copy())
    else:
        target = Mixing(plane_rotation(spec.text_dim, spec.shift_degrees, rot_rng) @ source.text,
                        plane_rotation(spec.audio_dim, spec.shift_degrees, rot_rng) @ source.audio)
    target_noise = spec.noise_std if spec.target_noise_std is None else spec.target_noise_std
    plan = [("train", spec.n_pairs, spec.captions_per_audio, source, spec.noise_std, "source"),
            ("val", spec.n_val, spec.test_captions_per_audio, source, spec.noise_std, "source"),
            ("test", spec.n_test, spec.test_captions_per_audio, source, spec.noise_std, "source"),
            ("target_test", spec.n_test, spec.test_captions_per_audio, target, target_noise, "target")]
    data = SyntheticData(spec, source, target)
    next_text = next_audio = 0
    for i, (name, n, caps, mix, noise, domain) in enumerate(plan):
        if n == 0:
            continue
        split_rng = np.random.default_rng([seed, 200 + i])
        split = _make_split(split_rng, n, caps, mix, noise, spec.latent_dim, next_text, next_audio,
                            name.replace("target_", ""), domain)
        next_text += len(split.text)
        next_audio += n
        data.splits[name] = split
    return data


# embedding files

EMB_MAGIC = b"DFEM"
EMB_VERSION = 1


def save_embeddings(path, split: DatasetSplit) -> None:
    """Write aligned (text i, audio i) embedding pairs, binary or ``.csv`` by suffix."""
    path = Path(path)
    text, audio = split.text, split.audio[split.text_to_audio]
    n, D = text.shape
    try:
        if path.suffix == ".csv":
            with path.open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["pair_id", "modality"] + [f"e{i}" for i in range(D)])
                for modality, block in (("text", text), ("audio", audio)):
                    for pid, row in zip(split.text_ids, block):
                        w.writerow([int(pid), modality] + [repr(float(v)) for v in row])
        else:
            header = EMB_MAGIC + struct.pack("<III", EMB_VERSION, n, D)
            body = np.ascontiguousarray(np.concatenate([text, audio]), dtype="<f8").tobytes()
            path.write_bytes(header + body)
    except OSError as exc:
        raise IOFailure(f"cannot write embeddings to {path}: {exc}") from exc


def _from_pairs(text, audio, ids, split, domain) -> DatasetSplit:
    if not (np.all(np.isfinite(text)) and np.all(np.isfinite(audio))):
        raise FormatError("embedding file contains non-finite values")
    n = len(text)
    return DatasetSplit(text=text, audio=audio, text_ids=np.asarray(ids), audio_ids=np.asarray(ids),
                        text_to_audio=np.arange(n), split=split, domain=domain, encoded=True)


def _load_binary(buf: bytes, split, domain) -> DatasetSplit:
    if len(buf) < 16 or buf[:4] != EMB_MAGIC:
        raise FormatError("not an embedding file (bad magic bytes)")
    version, n, D = struct.unpack("<III", buf[4:16])
    if version != EMB_VERSION:
        raise VersionError(f"embedding format version {version}, this build reads {EMB_VERSION}")
    if n == 0 or D == 0:
        raise FormatError("embedding file declares zero pairs or zero width")
    expected = 16 + 2 * n * D * 8
    if len(buf) < expected:
        raise TruncatedError(f"embedding file has {len(buf)} bytes, header promises {expected}")
    if len(buf) > expected:
        raise FormatError(f"{len(buf) - expected} trailing bytes in embedding file")
    block = np.frombuffer(buf, dtype="<f8", offset=16).astype(np.float64).reshape(2 * n, D)
    return _from_pairs(block[:n], block[n:], np.arange(n), split, domain)


def _load_csv(path: Path, split, domain) -> DatasetSplit:
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:2] != ["pair_id", "modality"]:
        raise FormatError("embedding CSV needs a 'pair_id,modality,e0,...' header")
    D = len(rows[0]) - 2
    blocks: dict[str, dict[int, np.ndarray]] = {"text": {}, "audio": {}}
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != D + 2 or row[1] not in blocks:
            raise FormatError(f"embedding CSV line {line} is malformed")
        try:
            blocks[row[1]][int(row[0])] = np.array([float(v) for v in row[2:]])
        except ValueError as exc:
            raise FormatError(f"embedding CSV line {line}: {exc}") from exc
    ids = sorted(blocks["text"])
    if not ids or ids != sorted(blocks["audio"]):
        raise FormatError("embedding CSV must hold one text and one audio row per pair id")
    text = np.stack([blocks["text"][i] for i in ids])
    audio = np.stack([blocks["audio"][i] for i in ids])
    return _from_pairs(text, audio, ids, split, domain)


def load_embeddings(path, expected_dim: int | None = None, split: str = "test",
                    domain: str = "source") -> DatasetSplit:
    """Read a pre-encoded pair file; the result bypasses the toy encoders."""
    path = Path(path)
    try:
        data = _load_csv(path, split, domain) if path.suffix == ".csv" else \
            _load_binary(path.read_bytes(), split, domain)
    except OSError as exc:
        raise IOFailure(f"cannot read embeddings {path}: {exc}") from exc
    D = data.text.shape[1]
    if expected_dim is not None and D != expected_dim:
        raise ConfigError(f"embedding file has dimension {D} but the config expects D={expected_dim}")
    return data


# raw split bundles

_SPLIT_FIELDS = ("text", "audio", "text_ids", "audio_ids", "text_to_audio")


def save_splits(path, splits: dict[str, DatasetSplit]) -> None:
    """Store raw splits in one ``.npz`` archive keyed ``<split>.<field>``."""
    arrays = {}
    for name, sp in splits.items():
        for f in _SPLIT_FIELDS:
            arrays[f"{name}.{f}"] = getattr(sp, f)
        arrays[f"{name}.tags"] = np.array([sp.split, sp.domain, "encoded" if sp.encoded else "raw"])
    try:
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
    except OSError as exc:
        raise IOFailure(f"cannot write dataset {path}: {exc}") from exc


def load_splits(path) -> dict[str, DatasetSplit]:
    try:
        archive = np.load(path, allow_pickle=False)
    except OSError as exc:
        raise IOFailure(f"cannot read dataset {path}: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path} is not a dataset archive: {exc}") from exc
    with archive:
        names = sorted({k.split(".", 1)[0] for k in archive.files})
        out = {}
        for name in names:
            try:
                split, domain, kind = (str(t) for t in archive[f"{name}.tags"])
                out[name] = DatasetSplit(*(archive[f"{name}.{f}"] for f in _SPLIT_FIELDS),
                                         split=split, domain=domain, encoded=kind == "encoded")
            except KeyError as exc:
                raise FormatError(f"dataset archive {path} lacks {exc}") from exc
    if not out:
        raise FormatError(f"dataset archive {path} holds no splits")
    return out
