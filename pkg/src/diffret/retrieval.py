"""Discriminative, generative and fused scoring; recall@k; trajectory export."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .datagen import DatasetSplit
from .diffusion import generate_batch
from .encoders import Embedding, cosine_matrix, stack_embeddings, rms_rows
from .errors import ConfigError, ContractError, IOFailure
from .trainer import Checkpoint, embed_dataset

MODES = ("dis", "gen", "fused")
RECALL_KS = (1, 5, 10)


@dataclass
class RetrievalResult:
    query_id: int
    candidate_ids: np.ndarray
    cosine: np.ndarray
    dis: np.ndarray
    gen: np.ndarray | None
    fused: np.ndarray | None
    mode: str

    @property
    def ranking_score(self) -> np.ndarray:
        return {"dis": self.dis, "gen": self.gen, "fused": self.fused}[self.mode]

    @property
    def order(self) -> np.ndarray:
        """Candidate positions by descending score, ties by ascending candidate id."""
        return np.lexsort((self.candidate_ids, -self.ranking_score))

    @property
    def ranked_ids(self) -> np.ndarray:
        return self.candidate_ids[self.order]

    def rows(self):
        gen = self.gen if self.gen is not None else np.full(len(self.cosine), np.nan)
        fused = self.fused if self.fused is not None else np.full(len(self.cosine), np.nan)
        return [(int(self.candidate_ids[i]), self.cosine[i], gen[i], fused[i]) for i in self.order]


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_mode(mode: str, weight: float, checkpoint: Checkpoint) -> None:
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    if weight < 0:
        raise ConfigError(f"fusion weight must be >= 0, got {weight}")
    if mode != "dis" and checkpoint.denoisers is None:
        raise ConfigError(f"mode {mode!r} needs a checkpoint with trained denoisers")


def score_batch(query_reps, query_ids, cand_reps, cand_ids, mode: str, checkpoint: Checkpoint,
                direction: str = "t2a", weight: float = 1.0, seed: int = 0, stride: int = 1,
                chunk: int = 256) -> list[RetrievalResult]:
    """Score every query against one shared candidate set."""
    _check_mode(mode, weight, checkpoint)
    query_reps = np.asarray(query_reps, dtype=np.float64)
    cand_reps = np.asarray(cand_reps, dtype=np.float64)
    query_ids, cand_ids = np.asarray(query_ids), np.asarray(cand_ids)
    if len(cand_reps) == 0:
        raise ContractError("no candidates to score")
    cos = cosine_matrix(query_reps, cand_reps)
    dis = _softmax_rows(cos / checkpoint.config.tau)
    gen = None
    if mode != "dis":
        den = checkpoint.denoisers.for_direction(direction)
        if checkpoint.config.normalize_embeddings:
            query_reps, cand_reps = rms_rows(query_reps), rms_rows(cand_reps)
        parts = []
        for s in range(0, len(query_reps), chunk):
            out, _ = generate_batch(query_reps[s:s + chunk], cand_reps, den, checkpoint.schedule, seed,
                                    query_ids[s:s + chunk], cand_ids, stride)
            parts.append(out)
        gen = np.concatenate(parts)
    fused = dis + weight * gen if gen is not None else None
    return [RetrievalResult(int(query_ids[i]), cand_ids, cos[i], dis[i],
                            None if gen is None else gen[i], None if fused is None else fused[i], mode)
            for i in range(len(query_reps))]


def refuse(results: list[RetrievalResult], weight: float) -> list[RetrievalResult]:
    """Re-rank already generated results in fused mode with another weight."""
    if weight < 0:
        raise ConfigError(f"fusion weight must be >= 0, got {weight}")
    out = []
    for r in results:
        if r.gen is None:
            raise ConfigError("results carry no generative scores to fuse")
        out.append(replace(r, fused=r.dis + weight * r.gen, mode="fused"))
    return out


def score(query: Embedding, candidates, mode: str, checkpoint: Checkpoint, weight: float = 1.0,
          seed: int = 0, direction: str | None = None, stride: int = 1) -> RetrievalResult:
    """Rank ``candidates`` for one encoded ``query``.

    The direction follows the query's modality unless given: audio queries use
    the a2t denoiser, everything else t2a.
    """
    if direction is None:
        direction = "a2t" if getattr(query, "modality", "") == "audio" else "t2a"
    q, qid = stack_embeddings([query])
    c, cid = stack_embeddings(candidates)
    return score_batch(q, qid, c, cid, mode, checkpoint, direction, weight, seed, stride)[0]


def _truth_set(t) -> set[int]:
    return {int(x) for x in t} if isinstance(t, (set, frozenset, list, tuple, np.ndarray)) else {int(t)}


def recall_at_k(results: list[RetrievalResult], truths, k: int) -> float:
    """Percentage of queries with at least one relevant candidate in the top ``k``."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if len(results) != len(truths):
        raise ContractError("one truth set per result is required")
    if not results:
        raise ContractError("no results to evaluate")
    hits = 0
    for res, truth in zip(results, truths):
        if k > len(res.candidate_ids):
            raise ContractError(f"k={k} exceeds the {len(res.candidate_ids)} candidates")
        relevant = _truth_set(truth)
        if not relevant:
            raise ContractError(f"query {res.query_id} has no relevant target")
        if relevant.intersection(res.ranked_ids[:k].tolist()):
            hits += 1
    return 100.0 * hits / len(results)


@dataclass
class EvalReport:
    direction: str
    mode: str
    per_seed: dict[int, list[float]] = field(default_factory=dict)
    seeds: list[int] = field(default_factory=list)

    def add(self, seed: int, recalls: dict[int, float]) -> None:
        """Record one seed's recalls; a non-monotone row is rejected before it is stored."""
        vals = [recalls[k] for k in sorted(recalls)]
        if any(a > b for a, b in zip(vals, vals[1:])) or vals[-1] > 100.0:
            raise ContractError(f"recall not monotone in k for seed {seed}: {vals}")
        self.seeds.append(seed)
        for k, v in recalls.items():
            self.per_seed.setdefault(k, []).append(v)
        self.check()

    def mean(self, k: int) -> float:
        return float(np.mean(self.per_seed[k]))

    def std(self, k: int) -> float:
        return float(np.std(self.per_seed[k]))

    def check(self) -> None:
        ks = sorted(self.per_seed)
        for i in range(len(self.seeds)):
            vals = [self.per_seed[k][i] for k in ks]
            if any(a > b for a, b in zip(vals, vals[1:])) or vals[-1] > 100.0:
                raise ContractError(f"recall not monotone in k for seed {self.seeds[i]}: {vals}")

    def row(self) -> dict:
        out = {"direction": self.direction, "mode": self.mode, "n_seeds": len(self.seeds)}
        for k in sorted(self.per_seed):
            out[f"R@{k}"] = round(self.mean(k), 4)
            out[f"R@{k}_std"] = round(self.std(k), 4)
        return out


def evaluate(checkpoint: Checkpoint, split: DatasetSplit, mode: str = "fused", seeds=(0,),
             weight: float = 1.0, stride: int = 1, ks=RECALL_KS,
             directions=("t2a", "a2t")) -> dict[str, EvalReport]:
    """R@k of both directions on ``split``; each seed re-draws the generation noise."""
    _check_mode(mode, weight, checkpoint)
    text_emb, audio_emb = embed_dataset(split, checkpoint.encoders)
    setups = {
        "t2a": (text_emb, split.text_ids, audio_emb, split.audio_ids, split.relevant_audio()),
        "a2t": (audio_emb, split.audio_ids, text_emb, split.text_ids, split.relevant_text()),
    }
    reports = {}
    for direction in directions:
        q, qid, c, cid, truths = setups[direction]
        report = EvalReport(direction, mode)
        for seed in seeds:
            results = score_batch(q, qid, c, cid, mode, checkpoint, direction, weight, seed, stride)
            report.add(seed, {k: recall_at_k(results, truths, k) for k in ks})
        reports[direction] = report
    return reports


def merge_reports(reports: list[EvalReport], seeds) -> EvalReport:
    """Combine single-seed reports from independently trained runs."""
    merged = EvalReport(reports[0].direction, reports[0].mode)
    for seed, rep in zip(seeds, reports):
        merged.add(seed, {k: v[0] for k, v in rep.per_seed.items()})
    return merged


def reports_csv(reports, path=None, extra: dict | None = None) -> str:
    rows = [{**(extra or {}), **r.row()} for r in reports]
    buf = io.StringIO()
    if rows:
        w = csv.DictWriter(buf, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    text = buf.getvalue()
    if path is not None:
        try:
            Path(path).write_text(text)
        except OSError as exc:
            raise IOFailure(f"cannot write report {path}: {exc}") from exc
    return text


def format_table(rows: list[dict]) -> str:
    if not rows:
        return ""
    cols = list(rows[0])
    cells = [[str(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(cols)]
    line = lambda vals: "  ".join(v.rjust(w) for v, w in zip(vals, widths))
    return "\n".join([line(cols), line(["-" * w for w in widths])] + [line(r) for r in cells])


# trajectory export


def entropy(p: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


@dataclass
class Trajectory:
    candidate_ids: np.ndarray
    levels: list[int]
    states: np.ndarray
    predictions: np.ndarray

    @property
    def entropies(self) -> np.ndarray:
        return np.array([entropy(p) for p in self.predictions])


def trajectory(query_rep, query_id, cand_reps, cand_ids, checkpoint: Checkpoint, seed: int,
               direction: str = "t2a", stride: int = 1) -> Trajectory:
    if checkpoint.denoisers is None:
        raise ConfigError("trajectory export needs a checkpoint with trained denoisers")
    den = checkpoint.denoisers.for_direction(direction)
    query_rep = np.asarray(query_rep, dtype=np.float64)[None, :]
    if checkpoint.config.normalize_embeddings:
        query_rep, cand_reps = rms_rows(query_rep), rms_rows(cand_reps)
    _, traj = generate_batch(query_rep, cand_reps, den, checkpoint.schedule, seed,
                             [query_id], cand_ids, stride)
    return Trajectory(np.asarray(cand_ids), [k for k, _, _ in traj],
                      np.stack([x[0] for _, x, _ in traj]), np.stack([p[0] for _, _, p in traj]))


def export_trajectory(query: Embedding, candidates, checkpoint: Checkpoint, seed: int, path,
                      direction: str | None = None, stride: int = 1) -> Trajectory:
    """Write one CSV row per noise level, K down to 0: x_k, the clean estimate, its entropy."""
    if direction is None:
        direction = "a2t" if query.modality == "audio" else "t2a"
    c, cid = stack_embeddings(candidates)
    traj = trajectory(query.values, query.item_id, c, cid, checkpoint, seed, direction, stride)
    write_trajectory_csv(traj, path)
    return traj


def write_trajectory_csv(traj: Trajectory, path) -> None:
    header = ["k"] + [f"x_{c}" for c in traj.candidate_ids] + [f"x0hat_{c}" for c in traj.candidate_ids] + \
        ["entropy_x0hat"]
    try:
        with Path(path).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k, x, p, h in zip(traj.levels, traj.states, traj.predictions, traj.entropies):
                w.writerow([k] + [repr(float(v)) for v in x] + [repr(float(v)) for v in p] + [repr(h)])
    except OSError as exc:
        raise IOFailure(f"cannot write trajectory {path}: {exc}") from exc


_PALETTE = ["#4c72b0", "#55a868", "#8172b2", "#ccb974", "#64b5cd", "#8c8c8c", "#937860", "#da8bc3"]


def render_trajectory_svg(traj: Trajectory, path, truth_id: int | None = None, title: str = "") -> None:
    """Per-candidate predicted probability against noise level, from K (left) to 0 (right)."""
    W, H, pad = 640, 400, 50
    levels = np.asarray(traj.levels, dtype=float)
    top = max(levels.max(), 1.0)
    sx = lambda k: pad + (top - k) / top * (W - 2 * pad)
    sy = lambda p: H - pad - p * (H - 2 * pad)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
             f'<rect width="{W}" height="{H}" fill="white"/>',
             f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>',
             f'<text x="{W / 2}" y="{H - 12}" text-anchor="middle" font-size="12">noise level k</text>',
             f'<text x="14" y="{H / 2}" font-size="12" transform="rotate(-90 14 {H / 2})" '
             f'text-anchor="middle">predicted probability</text>']
    if title:
        parts.append(f'<text x="{W / 2}" y="24" text-anchor="middle" font-size="14">{escape(title)}</text>')
    for tick in (0.0, 0.5, 1.0):
        parts.append(f'<text x="{pad - 6}" y="{sy(tick) + 4:.1f}" text-anchor="end" font-size="10">{tick}</text>')
    for k in (top, top / 2, 0):
        parts.append(f'<text x="{sx(k):.1f}" y="{H - pad + 14}" text-anchor="middle" font-size="10">{int(k)}</text>')
    for j, cid in enumerate(traj.candidate_ids):
        is_truth = truth_id is not None and int(cid) == truth_id
        colour = "#c44e52" if is_truth else _PALETTE[j % len(_PALETTE)]
        width = 2.5 if is_truth else 1.0
        pts = " ".join(f"{sx(k):.2f},{sy(p):.2f}" for k, p in zip(levels, traj.predictions[:, j]))
        parts.append(f'<polyline fill="none" stroke="{colour}" stroke-width="{width}" points="{pts}">'
                     f'<title>candidate {int(cid)}</title></polyline>')
    parts.append("</svg>")
    try:
        Path(path).write_text("\n".join(parts) + "\n")
    except OSError as exc:
        raise IOFailure(f"cannot write plot {path}: {exc}") from exc
