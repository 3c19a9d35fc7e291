import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brainseg.metrics import (CSV_COLUMNS, UndefinedMetricError, avd, evaluate_volume,
                              hard_dsc, hausdorff, mean_record)
from brainseg.volume import LabelVolume


def brute_hausdorff(a, b, spacing):
    pa = np.argwhere(a) * np.asarray(spacing, dtype=float)
    pb = np.argwhere(b) * np.asarray(spacing, dtype=float)
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    return max(d.min(axis=1).max(), d.min(axis=0).max())


def test_dsc_identical_and_disjoint():
    a = np.zeros((4, 4, 4), np.uint8)
    a[:2] = 1
    b = np.zeros_like(a)
    b[2:] = 1
    assert hard_dsc(a, a, 1) == 1.0
    assert hard_dsc(a, b, 1) == 0.0


def test_dsc_half_overlap():
    a = np.zeros((1, 4, 4), np.uint8)
    a[0, 0:2, 0:2] = 2
    b = np.zeros_like(a)
    b[0, 1:3, 0:2] = 2
    assert hard_dsc(a, b, 2) == 0.5


def test_dsc_both_empty_is_one():
    z = np.zeros((2, 2, 2), np.uint8)
    assert hard_dsc(z, z, 3) == 1.0


def test_dsc_shape_mismatch():
    with pytest.raises(ValueError, match="dims"):
        hard_dsc(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)), 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_dsc_and_hausdorff_symmetric(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 4, (5, 5, 5)).astype(np.uint8)
    b = rng.integers(0, 4, (5, 5, 5)).astype(np.uint8)
    for c in (1, 2, 3):
        assert hard_dsc(a, b, c) == hard_dsc(b, a, c)
        assert hausdorff(a, b, c) == hausdorff(b, a, c)
        assert hausdorff(a, a, c) == 0.0


def test_hausdorff_345():
    a = np.zeros((4, 5, 1), np.uint8)
    b = np.zeros_like(a)
    a[0, 0, 0] = 1
    b[3, 4, 0] = 1
    assert hausdorff(a, b, 1) == 5.0


@pytest.mark.parametrize("seed", range(20))
def test_hausdorff_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.3)
    b = rng.random((8, 8, 8)) < rng.uniform(0.02, 0.3)
    a[0, 0, 0] = b[7, 7, 7] = True
    assert hausdorff(a.astype(np.uint8), b.astype(np.uint8), 1) == brute_hausdorff(a, b, (1, 1, 1))


def test_hausdorff_anisotropic_spacing_matches_brute_force():
    rng = np.random.default_rng(99)
    a = rng.random((8, 8, 8)) < 0.1
    b = rng.random((8, 8, 8)) < 0.1
    sp = (1.5, 1.0, 0.5)
    assert hausdorff(a.astype(np.uint8), b.astype(np.uint8), 1, sp) == brute_hausdorff(a, b, sp)


def test_hausdorff_scales_with_spacing():
    rng = np.random.default_rng(1)
    a = (rng.random((6, 6, 6)) < 0.2).astype(np.uint8)
    b = (rng.random((6, 6, 6)) < 0.2).astype(np.uint8)
    assert hausdorff(a, b, 1, (2, 2, 2)) == 2 * hausdorff(a, b, 1, (1, 1, 1))


def test_hausdorff_empty_is_undefined():
    a = np.zeros((3, 3, 3), np.uint8)
    b = a.copy()
    b[1, 1, 1] = 1
    with pytest.raises(UndefinedMetricError):
        hausdorff(a, b, 1)


def test_avd_examples():
    gt = np.zeros((10, 10, 2), np.uint8)
    gt[:, :, 0] = 1                 # 100 voxels
    pred = np.zeros_like(gt)
    pred[:8, :, 0] = 1              # 80 voxels
    assert avd(gt, pred, 1) == pytest.approx(0.2)
    assert avd(gt, gt, 1) == 0.0
    gt2 = np.zeros_like(gt)
    gt2[:5, :, 1] = 2               # 50 voxels
    assert avd(gt2, np.zeros_like(gt), 2) == 1.0
    with pytest.raises(UndefinedMetricError):
        avd(np.zeros_like(gt), gt, 1)


def test_evaluate_identical():
    rng = np.random.default_rng(2)
    lab = LabelVolume(rng.integers(0, 4, (6, 6, 6)))
    rec = evaluate_volume(lab, lab)
    for t in ("csf", "gm", "wm"):
        assert rec.dsc[t] == 1.0 and rec.hd[t] == 0.0 and rec.avd[t] == 0.0
    assert rec.mean_dsc == 1.0


def test_evaluate_matches_naive_recomputation():
    rng = np.random.default_rng(3)
    gt = rng.integers(0, 4, (16, 16, 16)).astype(np.uint8)
    pred = np.where(rng.random(gt.shape) < 0.2, rng.integers(0, 4, gt.shape), gt).astype(np.uint8)
    rec = evaluate_volume(LabelVolume(pred), LabelVolume(gt))
    for cid, t in ((1, "csf"), (2, "gm"), (3, "wm")):
        a, b = pred == cid, gt == cid
        tp = np.sum(a & b)
        fp = np.sum(a & ~b)
        fn = np.sum(~a & b)
        assert abs(rec.dsc[t] - 2 * tp / (2 * tp + fp + fn)) < 1e-12
        assert abs(rec.avd[t] - abs(a.sum() - b.sum()) / b.sum()) < 1e-12
        assert rec.hd[t] == brute_hausdorff(a, b, (1, 1, 1))


def test_evaluate_is_pure():
    rng = np.random.default_rng(4)
    gt = LabelVolume(rng.integers(0, 4, (6, 7, 8)))
    pred = LabelVolume(rng.integers(0, 4, (6, 7, 8)))
    assert evaluate_volume(pred, gt).to_row() == evaluate_volume(pred, gt).to_row()


def test_record_row_marks_undefined():
    gt = np.zeros((4, 4, 4), np.uint8)
    gt[1:3, 1:3, 1:3] = 3
    rec = evaluate_volume(LabelVolume(gt), LabelVolume(gt), volume_id="s1")
    row = rec.to_row()
    assert list(row) == CSV_COLUMNS
    assert row["hd_csf"] == "NA" and row["avd_csf"] == "NA"
    assert row["dsc_csf"] == 1.0
    assert mean_record([rec]).hd["csf"] is None
