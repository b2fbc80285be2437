"""Command line entry point: synth, train, infer, track, eval, gradcheck."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..data import load_stack, save_frames, save_label_stack
from ..metrics import EvalReport, evaluate_video
from ..track import LineageForest, read_track_table, write_track_table
from .config import PRESETS, RunConfig, merge, preset

log = logging.getLogger("embtrack")


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    cfg = preset(args.profile) if args.profile else RunConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError("config_not_found", f"no such config file: {path}")
        loaded = RunConfig.load(path)
        cfg = loaded if not args.profile else merge(cfg, loaded.to_dict())
    if args.seed is not None:
        cfg = merge(cfg, {"seed": args.seed})
    return cfg


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def load_video_dir(path):
    """Read frames (t*.tif), labels (mask*.tif) and an optional man_track.txt."""
    from .train import Video

    path = Path(path)
    frames = load_stack(path, "t").astype(np.float64)
    labels = None
    forest = None
    if any(path.glob("mask*.tif")):
        labels = load_stack(path, "mask").astype(np.int32)
        parents = {}
        if (path / "man_track.txt").exists():
            parents = {t.id: t.parent_id for t in read_track_table(path / "man_track.txt")}
        forest = LineageForest(labels, parents)
    return Video(frames, labels, forest)


def _video_dirs(root, pattern: str = "t*.tif") -> list[Path]:
    root = Path(root)
    if not root.is_dir():
        raise CliError("data_not_found", f"no such directory: {root}")
    subs = sorted(p for p in root.iterdir() if p.is_dir() and any(p.glob(pattern)))
    if subs:
        return subs
    if any(root.glob(pattern)):
        return [root]
    raise CliError("data_not_found", f"no {pattern} images under {root}")


# ------------------------------------------------------------------ subcommands

def cmd_synth(args) -> int:
    from .train import synthetic_videos

    cfg = _config(args)
    out = _out(args)
    vids = synthetic_videos(cfg.scenario, args.n, cfg.seed, n_splits=args.splits, hide=args.hide)
    for k, v in enumerate(vids):
        d = out / f"video{k:02d}"
        save_frames(d, np.clip(v.frames, 0.0, 1.0))
        save_label_stack(d, v.labels)
        write_track_table(v.forest, d / "man_track.txt")
    cfg.save(out / "config.yaml")
    print(f"wrote {len(vids)} videos to {out}")
    return 0


def cmd_train(args) -> int:
    from .train import synthetic_videos, train

    cfg = _config(args)
    out = _out(args)
    if args.data:
        vids = [load_video_dir(d) for d in _video_dirs(args.data)]
        if any(v.labels is None for v in vids):
            raise CliError("labels_missing", "training videos need mask*.tif label images")
        if cfg.mode == "semantic":
            for v in vids:
                v.labels = (v.labels > 0).astype(np.int32)
    else:
        vids = synthetic_videos(cfg.scenario, cfg.n_train_videos, cfg.seed,
                                hide=2 if cfg.mode == "semantic" else 0, semantic=cfg.mode == "semantic")
    res = train(cfg, vids, iterations=args.iterations, out_dir=out, resume=args.resume,
                progress=lambda it, v: print(f"iter {it} loss {v:.6f}", flush=True))
    cfg.save(out / "config.yaml")
    print(f"trained {res.iteration} iterations in {res.seconds:.1f}s; checkpoint {out / 'checkpoint.embt'}")
    return 0


def cmd_infer(args) -> int:
    from .infer import infer_video
    from .train import load_checkpoint

    cfg = _config(args)
    out = _out(args)
    if not args.checkpoint or not Path(args.checkpoint).exists():
        raise CliError("checkpoint_not_found", f"no checkpoint at {args.checkpoint}")
    try:
        net, _, _ = load_checkpoint(args.checkpoint, cfg)
    except (KeyError, ValueError) as e:
        raise CliError("checkpoint_incompatible", str(e)) from e
    dirs = _video_dirs(args.frames)
    for d in dirs:
        v = load_video_dir(d)
        target = out / d.name if len(dirs) > 1 or d != Path(args.frames) else out
        forest = infer_video(cfg, net, v.frames, out_dir=target)
        print(f"{d.name}: {len(forest.ids())} instances -> {target}")
    return 0


def cmd_track(args) -> int:
    from .infer import export, track_embeddings

    cfg = _config(args)
    out = _out(args)
    files = sorted(Path(args.embeddings).glob("*.npy"))
    if not files:
        raise CliError("data_not_found", f"no *.npy embeddings in {args.embeddings}")
    emb = [np.load(f) for f in files]
    forest = track_embeddings(emb, cfg.cluster, cfg.lookback)
    export(forest, out)
    print(f"{len(forest.ids())} instances -> {out}")
    return 0


def cmd_eval(args) -> int:
    pred_dirs = _video_dirs(args.pred, "mask*.tif")
    gt_dirs = _video_dirs(args.gt, "mask*.tif")
    if [p.name for p in pred_dirs] != [g.name for g in gt_dirs] and len(pred_dirs) > 1:
        raise CliError("layout_mismatch", "prediction and ground-truth video directories differ")
    report = EvalReport()
    for p, g in zip(pred_dirs, gt_dirs):
        pf, gf = _forest(p, "res_track.txt"), _forest(g, "man_track.txt")
        if pf.labels.shape != gf.labels.shape:
            raise CliError("extent_mismatch", f"{p} and {g} differ in shape")
        report.extend(evaluate_video(pf, gf))
    print(report.format())
    if args.out:
        report.to_csv(_out(args) / "report.csv")
    return 0


def _forest(d: Path, table: str) -> LineageForest:
    files = sorted(d.glob("mask*.tif"))
    if not files:
        raise CliError("labels_missing", f"no mask*.tif in {d}")
    labels = load_stack(d, "mask").astype(np.int32)
    parents = {}
    for name in (table, "res_track.txt", "man_track.txt"):
        if (d / name).exists():
            parents = {t.id: t.parent_id for t in read_track_table(d / name)}
            break
    return LineageForest(labels, parents)


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(instances=args.instances, seed=args.seed or 0)
    print(format_results(results))
    failed = [r.name for r in results if not r.passed]
    if failed:
        raise CliError("gradcheck_failed", f"gradient mismatch in: {', '.join(failed)}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--profile", choices=sorted(PRESETS), help="named dataset preset")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="embtrack", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate synthetic videos")
    s.add_argument("--n", type=int, default=4, help="number of videos")
    s.add_argument("--splits", type=int, default=1, help="mitoses per video")
    s.add_argument("--hide", type=int, default=0, help="frames during which blob 1 is not drawn")
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a network")
    s.add_argument("--data", help="directory of video folders (default: synthetic from the config)")
    s.add_argument("--iterations", type=int, default=None)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("infer", parents=[common], help="segment and track videos")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--frames", required=True, help="video folder or folder of video folders")
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("track", parents=[common], help="cluster and track precomputed embeddings")
    s.add_argument("--embeddings", required=True, help="folder of per-frame (d, H, W) .npy files")
    s.set_defaults(fn=cmd_track)

    s = sub.add_parser("eval", parents=[common], help="compare predictions with ground truth")
    s.add_argument("--pred", required=True)
    s.add_argument("--gt", required=True)
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--instances", type=int, default=5)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except CliError as e:
        print("error: " + json.dumps({"code": e.code, "message": str(e)}), file=sys.stderr)
        return 1
    except (KeyError, ValueError, FileNotFoundError) as e:
        print("error: " + json.dumps({"code": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
