"""Cosine embedding loss with neighbourhood relaxation, and masked softmax
cross-entropy.

For each instance ``i`` (background included) with pixels ``S_i``, mean
embedding ``m_i`` and neighbour pixels ``N_i``::

    L_i = (1 - mean_{p in S_i} cos(m_i, e_p)) + mean_{q in N_i} cos(m_i, e_q)**2

and the loss is the mean of ``L_i`` over instances. ``N_i`` is the union of
the other instances lying within ``radius`` pixels of ``i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .core.tensor import Tensor, record

ZERO_NORM_EPS = 1e-12

# incremented whenever a zero-length embedding is met; similarity is then 0
diagnostics = {"zero_norm": 0}


@dataclass
class InstanceLabelMap:
    labels: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ValueError("labels must be 2-d")
        if np.any(self.labels < 0):
            raise ValueError("instance ids must be >= 0")
        if self.valid is None:
            self.valid = np.ones(self.labels.shape, dtype=bool)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.labels.shape:
                raise ValueError("valid mask and labels differ in shape")

    def instance_ids(self) -> np.ndarray:
        return np.unique(self.labels[self.valid])


@dataclass
class NeighborhoodSpec:
    radius: float = 50.0
    max_instances: int = 32

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError("radius must be positive")
        if self.max_instances < 1:
            raise ValueError("max_instances must be >= 1")


def cosine_similarity(e1, e2) -> float:
    e1 = np.asarray(e1, dtype=float)
    e2 = np.asarray(e2, dtype=float)
    n1, n2 = np.linalg.norm(e1), np.linalg.norm(e2)
    if n1 < ZERO_NORM_EPS or n2 < ZERO_NORM_EPS:
        diagnostics["zero_norm"] += 1
        return 0.0
    return float(np.dot(e1, e2) / (n1 * n2))


def mean_embedding(embeddings: np.ndarray, pixels: np.ndarray) -> np.ndarray:
    """Mean over a boolean pixel mask of a (d, H, W) embedding map."""
    pixels = np.asarray(pixels, dtype=bool)
    if not pixels.any():
        raise ValueError("empty pixel set")
    return embeddings[:, pixels].mean(axis=1)


def _masks(lm: InstanceLabelMap, ids) -> dict:
    return {int(i): (lm.labels == i) & lm.valid for i in ids}


def neighbor_set(labels: InstanceLabelMap, i: int, spec: NeighborhoodSpec, ids=None) -> np.ndarray:
    """Boolean mask of pixels of the instances within ``spec.radius`` of ``i``.

    Distances are Euclidean between the nearest pixels of the two masks.
    """
    ids = labels.instance_ids() if ids is None else ids
    masks = _masks(labels, ids)
    if int(i) not in masks:
        raise KeyError(f"instance {i} not present")
    return _neighbors_from_masks(masks, int(i), spec.radius)


def _neighbors_from_masks(masks: dict, i: int, radius: float) -> np.ndarray:
    own = masks[i]
    out = np.zeros_like(own)
    others = [j for j in masks if j != i and masks[j].any()]
    if not others:
        return out
    if math.isinf(radius):
        for j in others:
            out |= masks[j]
        return out
    dist = ndimage.distance_transform_edt(~own)
    for j in others:
        if dist[masks[j]].min() <= radius:
            out |= masks[j]
    return out


@dataclass
class PreparedInstances:
    """Per-frame pixel bookkeeping for :func:`cosine_embedding_loss`.

    ``member`` maps each flattened pixel to an instance column (or -1);
    ``neighbor`` is a (K, P) boolean matrix of neighbour pixels.
    """
    ids: np.ndarray
    member: np.ndarray
    neighbor: np.ndarray
    shape: tuple


def prepare_instances(labels: InstanceLabelMap, spec: NeighborhoodSpec,
                      rng: np.random.Generator | None = None) -> PreparedInstances:
    """Resolve instance and neighbour sets once per label map.

    With ``rng`` given and more than ``spec.max_instances`` instances, a
    uniform random subset of that size is kept; dropped instances take no
    part in any term.
    """
    ids = labels.instance_ids()
    if len(ids) == 0:
        raise ValueError("no instances in label map")
    if rng is not None and len(ids) > spec.max_instances:
        ids = np.sort(rng.choice(ids, size=spec.max_instances, replace=False))
    masks = _masks(labels, ids)
    P = labels.labels.size
    member = np.full(P, -1, dtype=np.int64)
    neighbor = np.zeros((len(ids), P), dtype=bool)
    for k, i in enumerate(ids):
        member[masks[int(i)].ravel()] = k
        neighbor[k] = _neighbors_from_masks(masks, int(i), spec.radius).ravel()
    return PreparedInstances(np.asarray(ids), member, neighbor, labels.labels.shape)


def _normalize_rows(E):
    norms = np.linalg.norm(E, axis=1)
    bad = norms < ZERO_NORM_EPS
    if bad.any():
        diagnostics["zero_norm"] += int(bad.sum())
    safe = np.where(bad, 1.0, norms)
    unit = E / safe[:, None]
    unit[bad] = 0.0
    return unit, safe, bad


def _frame_loss_and_grad(E: np.ndarray, prep: PreparedInstances, need_grad: bool):
    """Loss of one frame, E shaped (P, d). Returns (loss, dL/dE or None)."""
    K = len(prep.ids)
    P, d = E.shape
    member = prep.member
    inside = member >= 0
    onehot = np.zeros((P, K), dtype=E.dtype)
    onehot[np.nonzero(inside)[0], member[inside]] = 1.0
    counts = onehot.sum(axis=0)
    means = (onehot.T @ E) / counts[:, None]
    e_hat, e_norm, e_bad = _normalize_rows(E)
    m_hat, m_norm, m_bad = _normalize_rows(means)
    cos = e_hat @ m_hat.T  # (P, K)

    nb = prep.neighbor.T.astype(E.dtype)  # (P, K)
    n_counts = nb.sum(axis=0)
    has_nb = n_counts > 0
    inv_n = np.where(has_nb, 1.0 / np.where(has_nb, n_counts, 1.0), 0.0)

    term1 = 1.0 - (onehot * cos).sum(axis=0) / counts
    term2 = (nb * cos * cos).sum(axis=0) * inv_n
    loss = float((term1 + term2).sum() / K)
    if need_grad is None:
        return term1 + term2, None
    if not need_grad:
        return loss, None

    # dL/dcos for every (pixel, instance) pair
    G = (-onehot / counts + 2.0 * nb * cos * inv_n) / K
    GC = G * cos
    # direct dependence through e_p
    gE = (G @ m_hat - GC.sum(axis=1, keepdims=True) * e_hat) / e_norm[:, None]
    gE[e_bad] = 0.0
    # dependence through the means
    gM = (G.T @ e_hat - GC.sum(axis=0)[:, None] * m_hat) / m_norm[:, None]
    gM[m_bad] = 0.0
    gE += onehot @ (gM / counts[:, None])
    return loss, gE


def cosine_embedding_loss(embeddings: Tensor, prepared: list[PreparedInstances]) -> Tensor:
    """Mean cosine embedding loss over a batch.

    ``embeddings`` is (B, d, H, W); ``prepared`` holds one
    :class:`PreparedInstances` per batch item.
    """
    B, d, H, W = embeddings.shape
    if d < 2:
        raise ValueError("embedding dimension must be >= 2")
    if len(prepared) != B:
        raise ValueError(f"{len(prepared)} label maps for batch of {B}")
    total = 0.0
    grads = np.zeros((B, d, H * W), dtype=embeddings.data.dtype)
    need = embeddings.requires_grad
    for b, prep in enumerate(prepared):
        if prep.shape != (H, W):
            raise ValueError(f"labels {prep.shape} vs embeddings {(H, W)}")
        E = embeddings.data[b].reshape(d, -1).T
        loss, g = _frame_loss_and_grad(E, prep, need)
        total += loss
        if need:
            grads[b] = g.T
    out = Tensor(np.asarray(total / B), dtype=embeddings.data.dtype)
    shape = embeddings.shape
    return record(out, (embeddings,), lambda go: ((go / B) * grads.reshape(shape),), "cosine_loss")


def per_instance_loss(embeddings: np.ndarray, prep: PreparedInstances) -> np.ndarray:
    """Contribution (term1 + term2) of every instance in ``prep.ids`` for one (d, H, W) frame."""
    d = embeddings.shape[0]
    if embeddings.shape[1:] != prep.shape:
        raise ValueError(f"labels {prep.shape} vs embeddings {embeddings.shape[1:]}")
    terms, _ = _frame_loss_and_grad(embeddings.reshape(d, -1).T, prep, None)
    return terms


def instance_loss_terms(embeddings: np.ndarray, labels: InstanceLabelMap, spec: NeighborhoodSpec) -> dict:
    """Per-instance (term1, term2) for a single (d, H, W) frame; diagnostic use."""
    prep = prepare_instances(labels, spec)
    E = embeddings.reshape(embeddings.shape[0], -1).T
    out = {}
    for k, i in enumerate(prep.ids):
        s = prep.member == k
        m = E[s].mean(axis=0)
        t1 = 1.0 - np.mean([cosine_similarity(m, e) for e in E[s]])
        nb = prep.neighbor[k]
        t2 = float(np.mean([cosine_similarity(m, e) ** 2 for e in E[nb]])) if nb.any() else 0.0
        out[int(i)] = (t1, t2)
    return out


def softmax_cross_entropy(logits: Tensor, classes: np.ndarray, valid: np.ndarray | None = None) -> Tensor:
    """Mean over valid pixels of -log softmax(logits)[true class]."""
    B, K, H, W = logits.shape
    classes = np.asarray(classes).reshape(B, H, W)
    if classes.min() < 0 or classes.max() >= K:
        raise ValueError(f"class ids must lie in [0, {K})")
    valid = np.ones((B, H, W), bool) if valid is None else np.asarray(valid, bool).reshape(B, H, W)
    n = int(valid.sum())
    if n == 0:
        raise ValueError("all pixels masked")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    picked = np.take_along_axis(logp, classes[:, None], axis=1)[:, 0]
    loss = -(picked * valid).sum() / n
    out = Tensor(np.asarray(loss), dtype=logits.data.dtype)

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(p, classes[:, None], np.take_along_axis(p, classes[:, None], axis=1) - 1.0, axis=1)
        return (g * p * valid[:, None] / n,)

    return record(out, (logits,), bw, "softmax_xent")
