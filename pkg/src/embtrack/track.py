"""Video-long instance identities and lineage from per-pair clusterings.

A :class:`LineageForest` keeps the tracked masks as one label stack
(frames x H x W, 0 = background), so per-frame disjointness holds by
construction, plus a parent table.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


@dataclass
class TrackedInstance:
    id: int
    first_frame: int
    last_frame: int
    parent_id: int = 0


@dataclass
class LineageForest:
    labels: np.ndarray  # (T, H, W) int32
    parents: dict = field(default_factory=dict)  # id -> parent id (0 = none)
    original_extent: tuple | None = None

    @property
    def n_frames(self) -> int:
        return self.labels.shape[0]

    def ids(self) -> list[int]:
        ids = np.unique(self.labels)
        return [int(i) for i in ids if i != 0]

    def frame_ranges(self) -> dict[int, tuple[int, int]]:
        out = {}
        for t in range(self.n_frames):
            for i in np.unique(self.labels[t]):
                if i == 0:
                    continue
                i = int(i)
                out[i] = (out[i][0], t) if i in out else (t, t)
        return out

    def instances(self) -> list[TrackedInstance]:
        return [TrackedInstance(i, a, b, int(self.parents.get(i, 0)))
                for i, (a, b) in sorted(self.frame_ranges().items())]

    def mask(self, instance_id: int, frame: int) -> np.ndarray:
        return self.labels[frame] == instance_id

    def validate(self) -> None:
        """Raise if frame coverage or acyclicity is violated."""
        ranges = self.frame_ranges()
        for i, (a, b) in ranges.items():
            for t in range(a, b + 1):
                if not (self.labels[t] == i).any():
                    raise ValueError(f"instance {i} has a gap at frame {t}")
        for i in ranges:
            seen = {i}
            p = self.parents.get(i, 0)
            while p:
                if p in seen:
                    raise ValueError(f"cycle in parent links through {i}")
                seen.add(p)
                p = self.parents.get(p, 0)

    def copy(self) -> "LineageForest":
        return LineageForest(self.labels.copy(), dict(self.parents), self.original_extent)


def iou(mask_a: np.ndarray, mask_b: np.ndarray) -> float:
    if mask_a.shape != mask_b.shape:
        raise ValueError("masks differ in extent")
    union = np.logical_or(mask_a, mask_b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(mask_a, mask_b).sum() / union)


def iou_table(labels_a: np.ndarray, labels_b: np.ndarray):
    """IoU of every nonzero id in ``labels_a`` against every one in ``labels_b``.

    Returns (ids_a, ids_b, table).
    """
    a = labels_a.ravel().astype(np.int64)
    b = labels_b.ravel().astype(np.int64)
    ids_a = np.unique(a[a > 0])
    ids_b = np.unique(b[b > 0])
    ia = np.searchsorted(ids_a, a)
    ib = np.searchsorted(ids_b, b)
    sel = (a > 0) & (b > 0)
    inter = np.zeros((len(ids_a), len(ids_b)))
    np.add.at(inter, (ia[sel], ib[sel]), 1)
    area_a = np.array([(a == i).sum() for i in ids_a], dtype=float)
    area_b = np.array([(b == i).sum() for i in ids_b], dtype=float)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        table = np.where(union > 0, inter / union, 0.0)
    return ids_a, ids_b, table


def match_pair_overlap(prev_labels: np.ndarray, next_labels: np.ndarray) -> dict[int, int]:
    """Greedy descending-IoU matching of ``next_labels`` ids onto ``prev_labels`` ids.

    Both maps show the shared frame. Each id is matched at most once and
    only with IoU > 0; ties favour the lower previous id, then the lower
    next id. Unmatched next ids are absent from the result.
    """
    ids_p, ids_n, table = iou_table(prev_labels, next_labels)
    pairs = [(-table[i, j], int(ids_p[i]), int(ids_n[j]))
             for i in range(len(ids_p)) for j in range(len(ids_n)) if table[i, j] > 0]
    pairs.sort()
    used_p, mapping = set(), {}
    for _, p, q in pairs:
        if p in used_p or q in mapping:
            continue
        mapping[q] = p
        used_p.add(p)
    return mapping


def link_pairs(pair_labels: list[tuple[np.ndarray, ...]]) -> np.ndarray:
    """Merge per-pair clusterings into one globally labelled stack.

    ``pair_labels[k]`` holds the label maps of frames k and k+1 (cluster ids
    shared within the pair). A single-element tuple stands for a one-frame
    video. Frame k takes its labels from pair k, where it is the earlier
    frame, and the last frame from the last pair. Pair k is aligned to the
    accumulated ids through the two views of frame k it shares with pair k-1.

    Using the earlier frame matters at divisions: in the pair that ends on
    the division frame the parent mask still bridges both daughters, while
    the pair that starts there sees the daughters in both frames.
    """
    if not pair_labels:
        raise ValueError("no clusterings given")
    if len(pair_labels[0]) == 1:
        return _relabel_fresh(pair_labels[0][0][None], 1)[0]
    T = len(pair_labels) + 1
    H, W = pair_labels[0][0].shape
    out = np.zeros((T, H, W), dtype=np.int32)
    first, next_id = _relabel_fresh(np.stack(pair_labels[0]), 1)
    out[0], shared = first
    for k in range(1, len(pair_labels)):
        a, b = pair_labels[k]
        mapping = match_pair_overlap(shared, a)
        for cid in np.unique(np.concatenate([a[a > 0], b[b > 0]])):
            cid = int(cid)
            if cid not in mapping:
                mapping[cid] = next_id
                next_id += 1
        lut = np.zeros(max([int(a.max()), int(b.max()), *mapping]) + 1, dtype=np.int32)
        for q, p in mapping.items():
            lut[q] = p
        out[k] = lut[a]
        shared = lut[b]
    out[T - 1] = shared
    return out


def _relabel_fresh(stack: np.ndarray, start: int):
    ids = [int(i) for i in np.unique(stack) if i != 0]
    lut = np.zeros(max(ids, default=0) + 1, dtype=np.int32)
    for n, i in enumerate(ids):
        lut[i] = start + n
    return lut[stack], start + len(ids)


def assign_parents(forest: LineageForest, lookback: int = 1) -> LineageForest:
    """Parent of each instance born after frame 0 = highest-IoU instance in the
    ``lookback`` preceding frames (compared against the newborn's first mask)."""
    forest = forest.copy()
    ranges = forest.frame_ranges()
    parents = {}
    for i, (first, _) in sorted(ranges.items()):
        parents[i] = 0
        if first == 0:
            continue
        born = forest.labels[first] == i
        best, best_id = 0.0, 0
        for t in range(first - 1, max(first - lookback, 0) - 1, -1):
            for j in np.unique(forest.labels[t][born]):
                j = int(j)
                if j == 0 or j == i:
                    continue
                v = iou(born, forest.labels[t] == j)
                if v > best or (v == best and v > 0 and j < best_id):
                    best, best_id = v, j
        parents[i] = best_id
    forest.parents = parents
    return forest


def postprocess_lineage(forest: LineageForest) -> LineageForest:
    """Enforce that an id is never used after it has split.

    If instance P has children born at frame k while P itself still has
    masks at frames >= k, those masks are moved to a fresh id that becomes
    an additional child of P. Children of P born later are re-attached to
    that fresh id.
    """
    forest = forest.copy()
    parents = forest.parents
    next_id = max(forest.ids() + list(parents), default=0) + 1
    queue = sorted(forest.ids())
    while queue:
        p = queue.pop(0)
        ranges = forest.frame_ranges()
        if p not in ranges:
            continue
        kids = [c for c, q in parents.items() if q == p and c in ranges]
        if not kids:
            continue
        split = min(ranges[c][0] for c in kids)
        if ranges[p][1] < split:
            continue
        cont = next_id
        next_id += 1
        forest.labels[split:][forest.labels[split:] == p] = cont
        parents[cont] = p
        for c in kids:
            if ranges[c][0] > split:
                parents[c] = cont
        queue.append(cont)
    forest.parents = {i: parents.get(i, 0) for i in forest.ids()}
    forest.validate()
    return forest


def upsample_labels(labels: np.ndarray, extent: tuple[int, int]) -> np.ndarray:
    """Nearest-neighbour resize of (..., h, w) label maps to ``extent``."""
    h, w = labels.shape[-2:]
    H, W = extent
    rows = np.minimum(np.floor((np.arange(H) + 0.5) * h / H).astype(int), h - 1)
    cols = np.minimum(np.floor((np.arange(W) + 0.5) * w / W).astype(int), w - 1)
    return labels[..., rows[:, None], cols[None, :]]


def upsample_to_original(forest: LineageForest, original_extent: tuple[int, int]) -> LineageForest:
    out = forest.copy()
    out.labels = upsample_labels(forest.labels, tuple(original_extent))
    out.original_extent = tuple(original_extent)
    return out


def build_forest(pair_labels, lookback: int = 1, original_extent=None) -> LineageForest:
    labels = link_pairs(pair_labels)
    forest = LineageForest(labels)
    forest = postprocess_lineage(assign_parents(forest, lookback))
    if original_extent is not None and tuple(original_extent) != labels.shape[1:]:
        forest = upsample_to_original(forest, original_extent)
    return forest


def write_track_table(forest: LineageForest, path) -> None:
    lines = [f"{t.id} {t.first_frame} {t.last_frame} {t.parent_id}" for t in forest.instances()]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_track_table(path) -> list[TrackedInstance]:
    out = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            i, a, b, p = (int(v) for v in line.split())
            out.append(TrackedInstance(i, a, b, p))
    return out
