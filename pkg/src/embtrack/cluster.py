"""HDBSCAN over embedding + scaled-coordinate points.

Exact O(n^2) implementation: blocked k-NN for core distances, Prim's
algorithm on the implicit mutual-reachability graph, single-linkage
hierarchy, condensed tree and excess-of-mass cluster selection.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

NOISE = -1
_LAMBDA_MAX = 1e12
_BLOCK = 1024


@dataclass
class ClusterParams:
    m_pts: int = 50
    m_cl_size: int | None = None
    t_size: float | None = None
    c: float = 0.001
    normalize: bool = True
    background: str = "largest"  # or "none"

    def __post_init__(self):
        if self.m_cl_size is None:
            self.m_cl_size = self.m_pts
        if self.t_size is None:
            self.t_size = self.m_pts / 2
        if self.m_pts < 1 or self.m_cl_size < 1 or self.t_size < 0:
            raise ValueError("need m_pts >= 1, m_cl_size >= 1, t_size >= 0")
        if self.background not in ("largest", "none"):
            raise ValueError(f"unknown background rule {self.background!r}")


def _sq_dists(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    d = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * (A @ B.T)
    np.maximum(d, 0.0, out=d)
    return d


def core_distances(points: np.ndarray, m_pts: int) -> np.ndarray | None:
    """Distance of each point to its m_pts-th nearest neighbour (itself first).

    Returns None when there are fewer than ``m_pts`` points.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < m_pts:
        return None
    if m_pts == 1:
        return np.zeros(n)
    X = X - X.mean(axis=0)
    core = np.empty(n)
    for s in range(0, n, _BLOCK):
        d = _sq_dists(X[s:s + _BLOCK], X)
        rows = np.arange(d.shape[0])
        d[rows, rows + s] = 0.0
        core[s:s + _BLOCK] = np.partition(d, m_pts - 1, axis=1)[:, m_pts - 1]
    return np.sqrt(core)


def mutual_reachability(a, b, core_a: float, core_b: float) -> float:
    dist = float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float)))
    return max(core_a, core_b, dist)


def build_mst(points: np.ndarray, core: np.ndarray) -> np.ndarray:
    """Prim's MST of the complete mutual-reachability graph.

    Returns an (n-1, 3) array of (a, b, weight) rows in insertion order.
    Ties go to the lowest point index, and an edge source is only replaced
    by a strictly shorter one.
    """
    X = np.asarray(points, dtype=np.float64)
    n = len(X)
    if n < 2:
        return np.zeros((0, 3))
    X = X - X.mean(axis=0)
    sq = (X * X).sum(1)
    # candidate arrays stay sorted by point index; in-tree slots hold inf
    idx = np.arange(n)
    best = np.full(n, np.inf)
    src = np.zeros(n, dtype=np.int64)
    alive = np.ones(n, dtype=bool)
    edges = np.empty((n - 1, 3))
    cur, pos, n_alive = 0, 0, n
    for k in range(n - 1):
        alive[pos] = False
        best[pos] = np.inf
        n_alive -= 1
        if n_alive * 2 < len(idx):
            keep = alive
            idx, best, src, alive = idx[keep], best[keep], src[keep], alive[keep]
        d2 = sq[idx] + sq[cur] - 2.0 * (X[idx] @ X[cur])
        np.maximum(d2, 0.0, out=d2)
        mr = np.maximum(np.sqrt(d2), np.maximum(core[idx], core[cur]))
        better = (mr < best) & alive
        best[better] = mr[better]
        src[better] = cur
        pos = int(np.argmin(best))
        nxt = int(idx[pos])
        edges[k] = (src[pos], nxt, best[pos])
        cur = nxt
    return edges


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n)

    def find(self, x):
        p = self.parent
        root = x
        while p[root] != root:
            root = p[root]
        while p[x] != root:
            p[x], x = root, p[x]
        return root


def single_linkage(edges: np.ndarray, n: int) -> np.ndarray:
    """Merge hierarchy (scipy linkage layout) from MST edges."""
    order = np.argsort(edges[:, 2])
    uf = _UnionFind(2 * n - 1)
    size = np.ones(2 * n - 1, dtype=np.int64)
    Z = np.empty((n - 1, 4))
    for k, e in enumerate(order):
        a, b, w = int(edges[e, 0]), int(edges[e, 1]), edges[e, 2]
        ra, rb = uf.find(a), uf.find(b)
        node = n + k
        uf.parent[ra] = node
        uf.parent[rb] = node
        size[node] = size[ra] + size[rb]
        Z[k] = (ra, rb, w, size[node])
    return Z


def _leaves(Z, n, node):
    out, stack = [], [node]
    while stack:
        x = stack.pop()
        if x < n:
            out.append(x)
        else:
            r = Z[x - n]
            stack.extend((int(r[0]), int(r[1])))
    return out


def condense_tree(Z: np.ndarray, n: int, min_cluster_size: int) -> np.ndarray:
    """Condensed tree rows (parent, child, lambda, child_size).

    Clusters are numbered from ``n`` (the root) upwards; points keep their
    index.
    """
    root = 2 * n - 2
    relabel = {root: n}
    next_label = n + 1
    rows = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node < n:
            continue
        left, right, dist = int(Z[node - n, 0]), int(Z[node - n, 1]), Z[node - n, 2]
        lam = 1.0 / dist if dist > 0 else _LAMBDA_MAX
        lam = min(lam, _LAMBDA_MAX)
        sizes = [Z[c - n, 3] if c >= n else 1 for c in (left, right)]
        parent = relabel[node]
        big = [s >= min_cluster_size for s in sizes]
        if big[0] and big[1]:
            for c, s in zip((left, right), sizes):
                relabel[c] = next_label
                rows.append((parent, next_label, lam, s))
                next_label += 1
                stack.append(c)
        else:
            for c, s, keep in zip((left, right), sizes, big):
                if keep:
                    relabel[c] = parent
                    stack.append(c)
                else:
                    for p in _leaves(Z, n, c):
                        rows.append((parent, p, lam, 1))
    tree = np.array(rows, dtype=float).reshape(-1, 4)
    return tree


def _stabilities(tree: np.ndarray, n: int) -> dict:
    parents = tree[:, 0].astype(np.int64)
    children = tree[:, 1].astype(np.int64)
    birth = {n: 0.0}
    for p, c, lam in zip(parents, children, tree[:, 2]):
        if c >= n:
            birth[int(c)] = lam
    stab = {c: 0.0 for c in birth}
    for p, lam, sz in zip(parents, tree[:, 2], tree[:, 3]):
        stab[int(p)] += (lam - birth[int(p)]) * sz
    return stab


def select_clusters(tree: np.ndarray, n: int, allow_single_cluster: bool = False) -> list[int]:
    """Excess-of-mass selection; returns the selected cluster ids."""
    stab = _stabilities(tree, n)
    cl_rows = tree[tree[:, 1] >= n]
    kids: dict[int, list[int]] = {}
    for p, c in zip(cl_rows[:, 0].astype(int), cl_rows[:, 1].astype(int)):
        kids.setdefault(p, []).append(c)
    nodes = sorted(stab, reverse=True)
    if not allow_single_cluster:
        nodes = [c for c in nodes if c != n]
    selected = {c: True for c in nodes}
    for node in nodes:
        sub = sum(stab[c] for c in kids.get(node, []))
        if sub > stab[node]:
            selected[node] = False
            stab[node] = sub
        else:
            stack = list(kids.get(node, []))
            while stack:
                c = stack.pop()
                selected[c] = False
                stack.extend(kids.get(c, []))
    return sorted(c for c, s in selected.items() if s)


def label_points(tree: np.ndarray, n: int, clusters: list[int]) -> np.ndarray:
    chosen = set(clusters)
    uf = _UnionFind(int(tree[:, :2].max()) + 1 if len(tree) else n + 1)
    for p, c in zip(tree[:, 0].astype(int), tree[:, 1].astype(int)):
        if c not in chosen:
            uf.parent[c] = p
    index = {c: k for k, c in enumerate(sorted(chosen))}
    labels = np.full(n, NOISE, dtype=np.int64)
    for i in range(n):
        r = uf.find(i)
        if r in index:
            labels[i] = index[r]
    return labels


def extract_clusters(mst: np.ndarray, n: int, m_cl_size: int, return_tree: bool = False):
    """Cluster labels (NOISE = -1) from MST edges of ``n`` points."""
    if n < max(m_cl_size, 2):
        labels = np.full(n, NOISE, dtype=np.int64)
        return (labels, np.zeros((0, 4))) if return_tree else labels
    Z = single_linkage(mst, n)
    tree = condense_tree(Z, n, m_cl_size)
    labels = label_points(tree, n, select_clusters(tree, n))
    return (labels, tree) if return_tree else labels


def hdbscan(points: np.ndarray, m_pts: int, m_cl_size: int | None = None, return_tree: bool = False):
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    m_cl_size = m_pts if m_cl_size is None else m_cl_size
    core = core_distances(points, m_pts)
    if core is None or n < 2:
        labels = np.full(n, NOISE, dtype=np.int64)
        return (labels, np.zeros((0, 4))) if return_tree else labels
    return extract_clusters(build_mst(points, core), n, m_cl_size, return_tree)


def canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters by order of first appearance; NOISE stays."""
    out = np.full_like(labels, NOISE)
    mapping = {}
    for i, l in enumerate(labels):
        if l == NOISE:
            continue
        if l not in mapping:
            mapping[l] = len(mapping)
        out[i] = mapping[l]
    return out


def dump_condensed_tree(tree: np.ndarray, path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["parent", "child", "lambda", "size"])
        for p, c, lam, s in tree:
            w.writerow([int(p), int(c), repr(float(lam)), int(s)])


def frame_points(embeddings: list[np.ndarray], params: ClusterParams) -> np.ndarray:
    """Stack (embedding, c*x, c*y[, c*t]) rows for one frame or a frame pair."""
    rows = []
    pair = len(embeddings) > 1
    for t, emb in enumerate(embeddings):
        d, H, W = emb.shape
        E = emb.reshape(d, -1).T.astype(np.float64)
        if params.normalize:
            nrm = np.linalg.norm(E, axis=1, keepdims=True)
            E = E / np.where(nrm > 0, nrm, 1.0)
        yy, xx = np.mgrid[0:H, 0:W]
        coords = [xx.ravel(), yy.ravel()]
        if pair:
            coords.append(np.full(H * W, t))
        rows.append(np.hstack([E, params.c * np.stack(coords, axis=1).astype(np.float64)]))
    return np.vstack(rows)


def cluster_frames(embeddings: list[np.ndarray], params: ClusterParams, tree_dump=None) -> list[np.ndarray]:
    """Cluster one frame or a pair of consecutive frames.

    ``embeddings`` holds one or two (d, H, W) maps. Returns one label map per
    frame; instance ids (>= 1) are shared across the pair, 0 is background.
    Clusters with fewer than ``t_size`` pixels and noise become background;
    with ``background="largest"`` the largest cluster is background as well.
    """
    if not 1 <= len(embeddings) <= 2:
        raise ValueError("expected one or two embedding maps")
    shape = embeddings[0].shape
    if any(e.shape != shape for e in embeddings):
        raise ValueError("embedding maps differ in shape")
    _, H, W = shape
    X = frame_points(embeddings, params)
    labels, tree = hdbscan(X, params.m_pts, params.m_cl_size, return_tree=True)
    if tree_dump is not None:
        dump_condensed_tree(tree, tree_dump)
    labels = canonical_labels(labels)
    ids, counts = np.unique(labels[labels != NOISE], return_counts=True)
    drop = set(ids[counts < params.t_size].tolist())
    if params.background == "largest" and len(ids):
        keep = [(c, i) for i, c in zip(ids, counts) if i not in drop]
        if keep:
            # ties go to the lower cluster id
            drop.add(min(keep, key=lambda ci: (-ci[0], ci[1]))[1])
    out = np.zeros(len(labels), dtype=np.int32)
    next_id = 1
    for i in ids:
        if i in drop:
            continue
        out[labels == i] = next_id
        next_id += 1
    return [m.reshape(H, W) for m in np.split(out, len(embeddings))]
