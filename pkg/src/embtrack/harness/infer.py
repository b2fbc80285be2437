"""Inference: embeddings -> per-pair clusters -> tracked lineage forest."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from ..cluster import ClusterParams, cluster_frames
from ..core.tensor import Tensor, precision
from ..data import save_label_stack
from ..net import RecurrentHourglassNet
from ..track import LineageForest, build_forest, upsample_labels, write_track_table
from .config import RunConfig
from .train import preprocess


def embed_video(net: RecurrentHourglassNet, config: RunConfig, frames: np.ndarray) -> list[np.ndarray]:
    """Last-stack head output (C, h, w) of every frame, state threaded over the whole video."""
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("frames must be (T, H, W)")
    x = preprocess(frames, config)
    with precision(config.dtype):
        ts = [Tensor(f[None, None].astype(config.dtype)) for f in x]
        outs, _ = net.run_sequence(ts)
    return [o[-1].data[0].astype(np.float64) for o in outs]


def track_embeddings(embeddings: list[np.ndarray], params: ClusterParams, lookback: int = 1,
                     original_extent=None, tree_dir=None) -> LineageForest:
    """Cluster consecutive overlapping pairs and link them into a forest."""
    if not embeddings:
        raise ValueError("no frames")
    shape = embeddings[0].shape
    if any(e.shape != shape for e in embeddings):
        raise ValueError("embedding maps differ in shape")
    if len(embeddings) == 1:
        pairs = [tuple(cluster_frames(embeddings[:1], params))]
    else:
        pairs = []
        for k in range(len(embeddings) - 1):
            dump = None if tree_dir is None else Path(tree_dir) / f"tree{k:03d}.csv"
            pairs.append(tuple(cluster_frames(embeddings[k:k + 2], params, tree_dump=dump)))
    return build_forest(pairs, lookback, original_extent)


def infer_video(config: RunConfig, net: RecurrentHourglassNet, frames: np.ndarray, out_dir=None) -> LineageForest:
    frames = np.asarray(frames)
    if frames.ndim != 3:
        raise ValueError("frames must be (T, H, W) with a consistent frame size")
    extent = frames.shape[1:]
    emb = embed_video(net, config, frames)
    if config.mode == "semantic":
        labels = np.stack([np.argmax(e, axis=0) for e in emb]).astype(np.int32)
        forest = LineageForest(upsample_labels(labels, extent), {}, tuple(extent))
    else:
        forest = track_embeddings(emb, config.cluster, config.lookback, extent)
    if out_dir is not None:
        export(forest, out_dir)
    return forest


def segment_semantic(config: RunConfig, net: RecurrentHourglassNet, frames: np.ndarray) -> np.ndarray:
    return infer_video(config, net, frames).labels


def export(forest: LineageForest, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_label_stack(out, forest.labels)
    write_track_table(forest, out / "res_track.txt")


def oracle_embeddings(labels: np.ndarray, dim: int = 8, seed: int = 0, noise: float = 0.0) -> list[np.ndarray]:
    """Embeddings that are constant per ground-truth id, background included,
    for exercising the pipeline without a network.

    Directions are mutually orthogonal while there are at most ``dim`` ids,
    random unit vectors otherwise.
    """
    rng = np.random.default_rng(seed)
    n = int(np.max(labels)) + 1
    if n <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        dirs = q[:n]
    else:
        dirs = rng.standard_normal((n, dim))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    out = []
    for lab in labels:
        e = dirs[lab].transpose(2, 0, 1)
        if noise:
            e = e + noise * rng.standard_normal(e.shape)
        out.append(e)
    return out
