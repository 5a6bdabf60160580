"""Command-line entry point: ``diffret {train,eval,ablate,visualize,gen-data,defaults}``.

Every command reads a flat JSON experiment config (``--config``); flags and
``--set key=value`` pairs override file values, and the resolved config is
written into the output directory next to the results.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .datagen import generate_synthetic, save_embeddings, save_splits
from .errors import ConfigError, DiffRetError, IOFailure, LookupFailure
from .experiments import (ExperimentConfig, ablate, check_compatible, coerce_value, evaluation_split,
                          fusion_weight_for, load_config, run_eval, training_split, write_resolved)
from .retrieval import format_table, render_trajectory_svg, reports_csv, trajectory, write_trajectory_csv
from .trainer import embed_dataset, load_checkpoint, save_checkpoint, train

log = logging.getLogger("diffret")


def _resolve(args) -> ExperimentConfig:
    base = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    values = asdict(base)
    for item in getattr(args, "set", None) or []:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        values[key.strip()] = coerce_value(base, key.strip(), raw)
    flag_map = {"mode": "mode", "seeds": "eval_seeds", "out_dir": "out_dir", "fusion_weight": "fusion_weight",
                "steps": "K", "stride": "stride", "query_id": "query_id", "direction": "direction"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            values[key] = value
    return ExperimentConfig.from_dict(values)


def _seeds(text: str) -> list[int]:
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--seeds takes comma-separated integers, got {text!r}") from exc


def cmd_defaults(args) -> int:
    print(ExperimentConfig().to_json())
    return 0


def cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    data = generate_synthetic(cfg.synthetic_spec(), cfg.data_seed)
    save_splits(out / "dataset.npz", data.splits)
    print(f"wrote {out / 'dataset.npz'} with splits {', '.join(data.splits)}")
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        for name, split in data.splits.items():
            check_compatible(ckpt, split)
            text, audio = embed_dataset(split, ckpt.encoders)
            encoded = type(split)(text, audio, split.text_ids, split.audio_ids, split.text_to_audio,
                                  split.split, split.domain, encoded=True)
            save_embeddings(out / f"{name}.dfem", encoded)
            print(f"wrote {out / f'{name}.dfem'}")
    return 0


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    split = training_split(cfg)
    write_resolved(cfg, out)
    loss_csv = out / "losses.csv"
    if loss_csv.exists():
        loss_csv.unlink()
    ckpt = train(split, cfg.train_config(), loss_csv=loss_csv)
    save_checkpoint(out / "checkpoint.dfat", ckpt)
    print(f"wrote {out / 'checkpoint.dfat'} and {loss_csv}")
    return 0


def _checkpoint_path(args, cfg) -> Path:
    return Path(args.checkpoint) if args.checkpoint else Path(cfg.out_dir) / "checkpoint.dfat"


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    split = evaluation_split(cfg)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    weight = fusion_weight_for(cfg, ckpt, cfg.eval_seeds) if cfg.mode == "fused" else 0.0
    reports = run_eval(ckpt, split, cfg.mode, cfg.eval_seeds, weight, cfg.stride)
    path = out / f"report_{cfg.mode}_{cfg.eval_split}.csv"
    reports_csv(reports, path, extra={"split": cfg.eval_split, "fusion_weight": weight})
    if cfg.mode == "fused":
        print(f"fusion weight {weight:g}")
    print(format_table([r.row() for r in reports]))
    print(f"wrote {path}")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    grids = args.grid.split(",") if args.grid != "all" else ["strategy", "K", "batch"]
    rows = ablate(cfg, grids)
    path = out / "ablation.csv"
    try:
        with path.open("w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc}") from exc
    print(format_table(rows))
    print(f"wrote {path}")
    return 0


def cmd_visualize(args) -> int:
    cfg = _resolve(args)
    ckpt = load_checkpoint(_checkpoint_path(args, cfg))
    split = evaluation_split(cfg)
    check_compatible(ckpt, split)
    text, audio = embed_dataset(split, ckpt.encoders)
    if cfg.direction == "t2a":
        q_all, q_ids, c, c_ids, truths = text, split.text_ids, audio, split.audio_ids, split.relevant_audio()
    else:
        q_all, q_ids, c, c_ids, truths = audio, split.audio_ids, text, split.text_ids, split.relevant_text()
    qid = int(q_ids[0]) if cfg.query_id is None else cfg.query_id
    hits = np.flatnonzero(q_ids == qid)
    if len(hits) == 0:
        raise LookupFailure(f"query id {qid} is not in split {cfg.eval_split!r} "
                            f"(ids {int(q_ids.min())}..{int(q_ids.max())})")
    row = int(hits[0])
    seed = cfg.eval_seeds[0]
    traj = trajectory(q_all[row], qid, c, c_ids, ckpt, seed, cfg.direction, cfg.stride)
    out = Path(cfg.out_dir)
    write_resolved(cfg, out)
    csv_path, svg_path = out / f"trajectory_{qid}.csv", out / f"trajectory_{qid}.svg"
    write_trajectory_csv(traj, csv_path)
    truth = min(truths[row])
    render_trajectory_svg(traj, svg_path, truth_id=truth,
                          title=f"{cfg.direction} query {qid}, seed {seed}")
    final = traj.predictions[-1]
    mass = float(final[np.flatnonzero(c_ids == truth)[0]])
    print(f"wrote {csv_path} and {svg_path}; final mass on true candidate {truth}: {mass:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffret", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat JSON experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out-dir", dest="out_dir")
        p.add_argument("--steps", type=int, help="diffusion steps K")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file (default: <out-dir>/checkpoint.dfat)")
        return p

    sub.add_parser("defaults", help="print the default config").set_defaults(func=cmd_defaults)
    p = common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    p.add_argument("--checkpoint", help="also write encoded .dfem embedding files with this checkpoint")
    p.set_defaults(func=cmd_gen_data)
    common(sub.add_parser("train", help="two-phase training")).set_defaults(func=cmd_train)
    for name, func, helptext in (("eval", cmd_eval, "recall report"), ("visualize", cmd_visualize,
                                                                         "trajectory CSV and SVG plot")):
        p = common(sub.add_parser(name, help=helptext), checkpoint=True)
        p.add_argument("--mode", choices=["dis", "gen", "fused"])
        p.add_argument("--seeds", type=_seeds, help="comma-separated evaluation seeds")
        p.add_argument("--fusion-weight", dest="fusion_weight", type=float)
        p.add_argument("--stride", type=int, help="DDIM step stride")
        p.add_argument("--direction", choices=["t2a", "a2t"])
        if name == "visualize":
            p.add_argument("--query-id", dest="query_id", type=int)
        p.set_defaults(func=func)
    p = common(sub.add_parser("ablate", help="strategy, K and batch-size grids"))
    p.add_argument("--grid", default="all", help="comma list of strategy,K,batch or 'all'")
    p.add_argument("--seeds", type=_seeds, help="comma-separated training/evaluation seeds")
    p.add_argument("--fusion-weight", dest="fusion_weight", type=float)
    p.add_argument("--stride", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DiffRetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
