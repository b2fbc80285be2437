import numpy as np
import pytest

from embtrack.metrics import (
    EvalReport, abs_diff_count, best_dice, count_instances, evaluate_video, label_iou, lineage_accuracy,
    symmetric_best_dice,
)
from embtrack.track import LineageForest


def two_split_forests():
    """Two parents that each divide once; returns the ground truth forest."""
    T = 6
    lab = np.zeros((T, 12, 24), np.int32)
    for t in range(T):
        if t < 3:
            lab[t, 2:10, 1:11] = 1
            lab[t, 2:10, 13:23] = 2
        else:
            lab[t, 2:10, 1:5] = 3
            lab[t, 2:10, 7:11] = 4
            lab[t, 2:10, 13:17] = 5
            lab[t, 2:10, 19:23] = 6
    return LineageForest(lab, {1: 0, 2: 0, 3: 1, 4: 1, 5: 2, 6: 2})


# ---------------------------------------------------------------- IoU

def test_label_iou_examples():
    gt = np.zeros((4, 8), int)
    gt[:, 0:4] = 1
    assert label_iou(gt, gt, 1) == 1.0
    assert label_iou(np.zeros_like(gt), gt, 1) == 0.0
    half = np.zeros_like(gt)
    half[:, 2:6] = 1  # shares half of each rectangle
    assert label_iou(half, gt, 1) == 1 / 3
    assert label_iou(gt, gt, 7) == 1.0  # absent from both
    with pytest.raises(ValueError):
        label_iou(gt, gt[:, :4], 1)


# ---------------------------------------------------------------- SBD

def test_sbd_examples():
    gt = np.zeros((4, 8), int)
    gt[:, :4] = 1
    gt[:, 4:] = 2
    assert symmetric_best_dice(gt, gt) == 1.0
    merged = (gt > 0).astype(int)
    # each gt instance: dice = 2*16 / (16 + 32) = 2/3
    assert best_dice(gt, merged) == pytest.approx(2 / 3, abs=1e-15)
    assert symmetric_best_dice(merged, gt) == pytest.approx(2 / 3, abs=1e-15)
    a = np.zeros((4, 8), int)
    a[:, :4] = 1
    b = np.zeros((4, 8), int)
    b[:, 4:] = 1
    assert symmetric_best_dice(a, b) == 0.0
    assert symmetric_best_dice(np.zeros_like(gt), gt) == 0.0
    with pytest.raises(ValueError):
        symmetric_best_dice(np.zeros_like(gt), np.zeros_like(gt))


def brute_sbd(a, b):
    def bd(x, y):
        ix = [i for i in np.unique(x) if i]
        iy = [j for j in np.unique(y) if j]
        if not ix or not iy:
            return 0.0
        best = []
        for i in ix:
            m = x == i
            best.append(max(2 * (m & (y == j)).sum() / (m.sum() + (y == j).sum()) for j in iy))
        return float(np.mean(best))
    return min(bd(a, b), bd(b, a))


def test_sbd_symmetry_permutation_and_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a = rng.integers(0, 5, (12, 12))
        b = rng.integers(0, 6, (12, 12))
        s = symmetric_best_dice(a, b)
        assert 0.0 <= s <= 1.0
        assert s == symmetric_best_dice(b, a)
        assert s == pytest.approx(brute_sbd(a, b), abs=1e-12)
        perm = np.r_[0, rng.permutation(np.arange(1, 6)) + 10]
        assert symmetric_best_dice(perm[a], b) == pytest.approx(s, abs=1e-15)
        assert symmetric_best_dice(a, perm[b]) == pytest.approx(s, abs=1e-15)


# ---------------------------------------------------------------- counts

def test_count_examples():
    rng = np.random.default_rng(1)
    a = np.zeros((6, 6), int)
    a.flat[:5] = [1, 2, 3, 4, 5]
    b = np.zeros((6, 6), int)
    b.flat[:3] = [7, 8, 9]
    assert abs_diff_count(a, b) == 2
    assert abs_diff_count(b, b) == 0
    for _ in range(50):
        x, y = rng.integers(0, 9, (8, 8)), rng.integers(0, 4, (8, 8))
        ref = abs(len(set(x.ravel()) - {0}) - len(set(y.ravel()) - {0}))
        assert abs_diff_count(x, y) == ref
        assert isinstance(count_instances(x), int)


# ---------------------------------------------------------------- lineage

def test_lineage_accuracy_examples():
    gt = two_split_forests()
    assert lineage_accuracy(gt, gt) == 1.0
    orphan = LineageForest(gt.labels.copy(), {i: 0 for i in gt.parents})
    assert lineage_accuracy(orphan, gt) == 0.0
    half = LineageForest(gt.labels.copy(), {1: 0, 2: 0, 3: 1, 4: 1, 5: 0, 6: 0})
    assert lineage_accuracy(half, gt) == 0.5
    # relabelled prediction still scores perfectly
    lut = np.array([0, 11, 12, 13, 14, 15, 16])
    renamed = LineageForest(lut[gt.labels], {11: 0, 12: 0, 13: 11, 14: 11, 15: 12, 16: 12})
    assert lineage_accuracy(renamed, gt) == 1.0
    with pytest.raises(ValueError):
        lineage_accuracy(LineageForest(gt.labels[:3], {1: 0, 2: 0}), gt)


def test_evaluate_video_identity_and_report(tmp_path):
    gt = two_split_forests()
    rep = evaluate_video(gt, gt)
    assert rep.mean("sbd") == 1.0 and rep.mean("abs_dic") == 0.0 and rep.mean("lineage_accuracy") == 1.0
    total = EvalReport()
    total.extend(rep)
    total.extend(rep)
    assert len(total.values["sbd"]) == 2 * gt.n_frames
    total.to_csv(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,mean,std"
