"""Experiment configuration, dataset resolution and the ablation harness.

An experiment config is a flat JSON object. It holds every training field, the
synthetic data spec (or paths to prepared data), evaluation settings and the
ablation grids. Unknown keys are rejected by name.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datagen import DatasetSplit, SyntheticSpec, generate_synthetic, load_embeddings, load_splits
from .errors import ConfigError, IOFailure
from .retrieval import EvalReport, evaluate, recall_at_k, refuse, score_batch
from .trainer import Checkpoint, TrainConfig, embed_dataset, train

log = logging.getLogger(__name__)

STRATEGIES = ("dis", "gen", "gen+dis")
# strategy -> (phase 1, phase 2, scoring mode)
STRATEGY_PLAN = {"dis": (True, False, "dis"), "gen": (False, True, "gen"), "gen+dis": (True, True, "fused")}
GRIDS = ("strategy", "K", "batch")


@dataclass
class ExperimentConfig:
    # training
    D: int = 32
    K: int = 50
    batch_size: int = 24
    epochs_phase1: int = 30
    epochs_phase2: int = 400
    lr_phase1: float = 1e-3
    lr_phase2: float = 3e-3
    tau: float = 0.07
    seed: int = 0
    beta_start: float | None = None
    beta_end: float | None = None
    label_smoothing: float = 0.0
    hidden: int | None = 128
    attention_scaling: bool = True
    attention_init_scale: float = 0.03
    normalize_embeddings: bool = True
    # data
    data_seed: int = 0
    n_pairs: int = 512
    n_val: int = 128
    n_test: int = 128
    latent_dim: int = 16
    text_dim: int = 48
    audio_dim: int = 64
    noise_std: float = 0.5
    shift_degrees: float = 30.0
    target_noise_std: float | None = None
    captions_per_audio: int = 1
    test_captions_per_audio: int = 1
    dataset_path: str | None = None
    eval_path: str | None = None
    eval_split: str = "test"
    # evaluation
    mode: str = "fused"
    eval_seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    fusion_weight: float | None = None
    fusion_grid: list[float] = field(default_factory=lambda: [0.03, 0.1, 0.3, 1.0])
    val_split: str = "val"
    stride: int = 1
    # ablations
    strategy_grid: list[str] = field(default_factory=lambda: list(STRATEGIES))
    k_grid: list[int] = field(default_factory=lambda: [10, 50, 100, 200])
    batch_grid: list[int] = field(default_factory=lambda: [16, 24, 32])
    # visualization
    query_id: int | None = None
    direction: str = "t2a"
    out_dir: str = "runs"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        self.train_config()
        self.synthetic_spec().validate()
        if self.mode not in ("dis", "gen", "fused"):
            raise ConfigError(f"mode must be dis, gen or fused, got {self.mode!r}")
        if self.direction not in ("t2a", "a2t"):
            raise ConfigError(f"direction must be t2a or a2t, got {self.direction!r}")
        if not self.eval_seeds:
            raise ConfigError("eval_seeds must list at least one seed")
        if self.fusion_weight is not None and self.fusion_weight < 0:
            raise ConfigError(f"fusion_weight must be >= 0, got {self.fusion_weight}")
        if self.fusion_weight is None and (not self.fusion_grid or min(self.fusion_grid) < 0):
            raise ConfigError("fusion_grid must list non-negative weights when fusion_weight is null")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        bad = [s for s in self.strategy_grid if s not in STRATEGIES]
        if bad:
            raise ConfigError(f"unknown strategies {bad}; choose from {list(STRATEGIES)}")

    def train_config(self, **overrides) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{**{k: v for k, v in asdict(self).items() if k in names}, **overrides})

    def synthetic_spec(self) -> SyntheticSpec:
        names = {f.name for f in fields(SyntheticSpec)}
        return SyntheticSpec(**{k: v for k, v in asdict(self).items() if k in names})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**d)
        except TypeError as exc:
            raise ConfigError(f"invalid config: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IOFailure(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return ExperimentConfig.from_dict(data)


def coerce_value(cfg: ExperimentConfig, key: str, raw: str):
    """Parse a ``--set key=value`` string against the type of the default."""
    known = {f.name: f for f in fields(cfg)}
    if key not in known:
        raise ConfigError(f"unknown config keys: {key}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    current = getattr(cfg, key)
    if isinstance(current, float) and isinstance(value, int) and not isinstance(value, bool):
        value = float(value)
    return value


def write_resolved(cfg: ExperimentConfig, out_dir: Path) -> Path:
    path = out_dir / "config.json"
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        path.write_text(cfg.to_json() + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write resolved config to {path}: {exc}") from exc
    return path


def _existing(path: str, name: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"{name}: no such file {path}")
    return p


def _read_data_file(path: Path, cfg: ExperimentConfig, split: str) -> dict[str, DatasetSplit]:
    if path.suffix == ".npz":
        return load_splits(path)
    return {split: load_embeddings(path, expected_dim=cfg.D, split=split)}


def training_split(cfg: ExperimentConfig) -> DatasetSplit:
    if cfg.dataset_path is None:
        return generate_synthetic(cfg.synthetic_spec(), cfg.data_seed)["train"]
    splits = _read_data_file(_existing(cfg.dataset_path, "dataset_path"), cfg, "train")
    if "train" not in splits:
        raise ConfigError(f"dataset_path {cfg.dataset_path} holds no train split")
    return splits["train"]


def _splits(cfg: ExperimentConfig, default_name: str) -> dict[str, DatasetSplit]:
    if cfg.eval_path is not None:
        return _read_data_file(_existing(cfg.eval_path, "eval_path"), cfg, default_name)
    if cfg.dataset_path is not None:
        return _read_data_file(_existing(cfg.dataset_path, "dataset_path"), cfg, default_name)
    return generate_synthetic(cfg.synthetic_spec(), cfg.data_seed).splits


def evaluation_split(cfg: ExperimentConfig) -> DatasetSplit:
    splits = _splits(cfg, cfg.eval_split)
    if cfg.eval_split not in splits:
        raise ConfigError(f"eval_split {cfg.eval_split!r} not found; available: {sorted(splits)}")
    return splits[cfg.eval_split]


def validation_split(cfg: ExperimentConfig) -> DatasetSplit | None:
    return _splits(cfg, cfg.eval_split).get(cfg.val_split)


def check_compatible(ckpt: Checkpoint, split: DatasetSplit) -> None:
    """Raise a config error when the split cannot feed the checkpoint."""
    if split.encoded:
        if split.text.shape[1] != ckpt.config.D:
            raise ConfigError(f"embedding dimension {split.text.shape[1]} does not match checkpoint D={ckpt.config.D}")
        return
    if ckpt.encoders is None:
        raise ConfigError("checkpoint carries no encoders, so it needs pre-encoded embeddings")
    for raw, enc in ((split.text, ckpt.encoders.text), (split.audio, ckpt.encoders.audio)):
        if raw.shape[1] != enc.input_dim:
            raise ConfigError(f"{enc.modality} inputs have dimension {raw.shape[1]} "
                              f"but the checkpoint encoder expects {enc.input_dim}")


def run_eval(ckpt: Checkpoint, split: DatasetSplit, mode: str, seeds, weight: float = 1.0,
             stride: int = 1) -> list[EvalReport]:
    check_compatible(ckpt, split)
    reports = evaluate(ckpt, split, mode, seeds=tuple(seeds), weight=weight, stride=stride)
    return [reports["t2a"], reports["a2t"]]


def select_fusion_weight(ckpt: Checkpoint, split: DatasetSplit, grid, seeds=(0,),
                         stride: int = 1) -> tuple[float, dict]:
    """Fusion weight from ``grid`` with the best R@1 on ``split``, averaged over directions and seeds.

    Ties go to the smaller weight. Returns the weight and the mean R@1 per grid value.
    """
    check_compatible(ckpt, split)
    text, audio = embed_dataset(split, ckpt.encoders)
    setups = [("t2a", text, split.text_ids, audio, split.audio_ids, split.relevant_audio()),
              ("a2t", audio, split.audio_ids, text, split.text_ids, split.relevant_text())]
    grid = sorted(float(w) for w in grid)
    totals = dict.fromkeys(grid, 0.0)
    for seed in seeds:
        for direction, q, qid, c, cid, truths in setups:
            gen = score_batch(q, qid, c, cid, "gen", ckpt, direction, seed=seed, stride=stride)
            for w in grid:
                totals[w] += recall_at_k(refuse(gen, w), truths, 1)
    means = {w: v / (2 * len(seeds)) for w, v in totals.items()}
    best = max(grid, key=lambda w: (means[w], -w))
    return best, means


def fusion_weight_for(cfg: ExperimentConfig, ckpt: Checkpoint, seeds) -> float:
    """The configured weight, or one selected on the validation split when the config leaves it null."""
    if cfg.fusion_weight is not None:
        return cfg.fusion_weight
    val = validation_split(cfg)
    if val is None or ckpt.denoisers is None:
        log.warning("no %r split to select the fusion weight on; using 1.0", cfg.val_split)
        return 1.0
    w, means = select_fusion_weight(ckpt, val, cfg.fusion_grid, seeds, cfg.stride)
    log.info("fusion weight %.3g selected on %s (R@1 by weight: %s)", w, cfg.val_split, means)
    return w


def _row(report: EvalReport, **extra) -> dict:
    return {**extra, **report.row()}


def ablate(cfg: ExperimentConfig, grids=GRIDS, split: DatasetSplit | None = None,
           train_split: DatasetSplit | None = None) -> list[dict]:
    """One row per grid point and direction, each averaged over ``cfg.eval_seeds``.

    Every seed retrains from scratch with that training seed and evaluates with
    the same seed for the generation noise.
    """
    grids = list(grids)
    for g in grids:
        if g not in GRIDS:
            raise ConfigError(f"unknown grid {g!r}; choose from {list(GRIDS)}")
    points = []
    if "strategy" in grids:
        points += [("strategy", s, {}, s) for s in cfg.strategy_grid]
    if "K" in grids:
        points += [("K", k, {"K": k}, "gen+dis") for k in cfg.k_grid]
    if "batch" in grids:
        points += [("batch_size", b, {"batch_size": b}, "gen+dis") for b in cfg.batch_grid]
    if not points:
        raise ConfigError("ablation grid is empty")
    train_split = training_split(cfg) if train_split is None else train_split
    split = evaluation_split(cfg) if split is None else split
    rows = []
    for grid, value, overrides, strategy in points:
        phase1, phase2, mode = STRATEGY_PLAN[strategy]
        if train_split.encoded:
            phase1 = False
        started = time.perf_counter()
        per_dir: dict[str, EvalReport] = {}
        weights = []
        for seed in cfg.eval_seeds:
            tc = cfg.train_config(seed=seed, **overrides)
            ckpt = train(train_split, tc, phase1=phase1, phase2=phase2)
            weight = fusion_weight_for(cfg, ckpt, [seed]) if mode == "fused" else 0.0
            weights.append(weight)
            for rep in run_eval(ckpt, split, mode, [seed], weight, cfg.stride):
                merged = per_dir.setdefault(rep.direction, EvalReport(rep.direction, mode))
                merged.add(seed, {k: v[0] for k, v in rep.per_seed.items()})
        elapsed = time.perf_counter() - started
        log.info("ablation %s=%s done in %.1fs", grid, value, elapsed)
        for direction in ("t2a", "a2t"):
            rows.append(_row(per_dir[direction], grid=grid, value=value, strategy=strategy,
                             fusion_weights=";".join(f"{w:g}" for w in weights) if mode == "fused" else ""))
    return rows


__all__ = ["ExperimentConfig", "STRATEGIES", "load_config", "write_resolved", "training_split",
           "evaluation_split", "validation_split", "check_compatible", "run_eval", "ablate", "coerce_value",
           "select_fusion_weight", "fusion_weight_for"]
