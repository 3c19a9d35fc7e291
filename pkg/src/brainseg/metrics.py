"""Volume-level evaluation: Dice, Hausdorff distance and absolute volume difference."""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volume import LabelVolume

TISSUES = {1: "csf", 2: "gm", 3: "wm"}
CSV_COLUMNS = ["volume_id", "dsc_csf", "dsc_gm", "dsc_wm", "hd_csf", "hd_gm", "hd_wm",
               "avd_csf", "avd_gm", "avd_wm", "mean_dsc"]


class UndefinedMetricError(ValueError):
    """The metric has no value for this input (e.g. an empty class mask)."""


def _labels(v):
    return v.data if isinstance(v, LabelVolume) else np.asarray(v)


def _masks(a, b, class_id):
    la, lb = _labels(a), _labels(b)
    if la.shape != lb.shape:
        raise ValueError(f"label dims differ: {la.shape} vs {lb.shape}")
    return la == class_id, lb == class_id


def hard_dsc(a, b, class_id):
    """2TP / (2TP + FP + FN) for one class; 1.0 when both masks are empty."""
    ma, mb = _masks(a, b, class_id)
    total = int(ma.sum()) + int(mb.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(ma, mb).sum()) / total


def _directed_hausdorff(src, dst, spacing):
    # EDT of the complement gives, per voxel, the nearest dst voxel; cropping to
    # the union bounding box cannot hide any dst voxel.
    box = ndimage.find_objects((src | dst).astype(np.uint8))[0]
    src, dst = src[box], dst[box]
    _, nearest = ndimage.distance_transform_edt(~dst, sampling=spacing, return_indices=True)
    pts = np.nonzero(src)
    near = nearest[(slice(None),) + pts]
    diff = (np.stack(pts) - near).T * spacing
    return float(np.sqrt((diff ** 2).sum(axis=1)).max())


def hausdorff(a, b, class_id, spacing=None):
    """Exact symmetric Hausdorff distance (mm) between voxel-centre point sets."""
    ma, mb = _masks(a, b, class_id)
    if not ma.any() or not mb.any():
        raise UndefinedMetricError(f"class {class_id}: Hausdorff undefined for an empty mask")
    if spacing is None:
        spacing = a.spacing if isinstance(a, LabelVolume) else (1.0, 1.0, 1.0)
    spacing = np.asarray(spacing, dtype=np.float64)
    return max(_directed_hausdorff(ma, mb, spacing), _directed_hausdorff(mb, ma, spacing))


def avd(gt, pred, class_id):
    """|vol(pred) - vol(gt)| / vol(gt) for one class."""
    mg, mp = _masks(gt, pred, class_id)
    n_gt = int(mg.sum())
    if n_gt == 0:
        raise UndefinedMetricError(f"class {class_id}: AVD undefined for empty ground truth")
    return abs(int(mp.sum()) - n_gt) / n_gt


@dataclass
class MetricsRecord:
    volume_id: str
    dsc: dict = field(default_factory=dict)
    hd: dict = field(default_factory=dict)
    avd: dict = field(default_factory=dict)

    @property
    def mean_dsc(self):
        vals = [self.dsc[c] for c in TISSUES.values()]
        return float(np.mean(vals))

    def to_row(self):
        row = {"volume_id": self.volume_id}
        for prefix, values in (("dsc", self.dsc), ("hd", self.hd), ("avd", self.avd)):
            for name in TISSUES.values():
                v = values.get(name)
                row[f"{prefix}_{name}"] = "NA" if v is None else v
        row["mean_dsc"] = self.mean_dsc
        return row


def evaluate_volume(pred, gt, spacing=None, volume_id=""):
    """DSC, HD and AVD for CSF, GM and WM.  Undefined entries are ``None``."""
    if spacing is None:
        spacing = gt.spacing if isinstance(gt, LabelVolume) else (1.0, 1.0, 1.0)
    rec = MetricsRecord(volume_id)
    for cid, name in TISSUES.items():
        rec.dsc[name] = hard_dsc(pred, gt, cid)
        try:
            rec.hd[name] = hausdorff(pred, gt, cid, spacing)
        except UndefinedMetricError:
            rec.hd[name] = None
        try:
            rec.avd[name] = avd(gt, pred, cid)
        except UndefinedMetricError:
            rec.avd[name] = None
    return rec


def mean_record(records, volume_id="mean"):
    """Average each entry over records, skipping undefined values."""
    out = MetricsRecord(volume_id)
    for attr in ("dsc", "hd", "avd"):
        for name in TISSUES.values():
            vals = [getattr(r, attr)[name] for r in records if getattr(r, attr)[name] is not None]
            getattr(out, attr)[name] = float(np.mean(vals)) if vals else None
    return out
