"""Detection matching and segmentation quality scores.

A ground-truth lesion counts as detected when any predicted component
touches it by at least one voxel. Dice, IoU, and the 95th-percentile
Hausdorff distance are computed per detected lesion (against the union
of the predicted components paired to it), averaged per subject, then
summarized over the cohort as mean plus-or-minus standard deviation.
Subjects without lesions contribute only their false-positive count.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from . import MetricsError
from .volume import connected_components, require_same_grid

_NEIGHBORS6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1),
               (0, 0, -1))


@dataclass
class SubjectReport:
    subject_id: str
    tp: int
    fp: int
    fn: int
    sensitivity: float | None
    fp_rate: float
    per_aneurysm: list = field(default_factory=list)
    mean_dice: float | None = None
    mean_iou: float | None = None
    mean_hd95: float | None = None


def match_detections(pred, gt):
    """-> (tp, fp, fn, pairing) under the any-intersection rule.

    pairing = {"pred_to_gt": {pid: [gids]}, "gt_to_pred": {gid: [pids]},
    "n_pred": int, "n_gt": int}. A predicted component overlapping
    several lesions detects each of them and is never a false positive.
    """
    require_same_grid(pred, gt)
    pl, p_sizes = connected_components(pred, connectivity=26)
    gl, g_sizes = connected_components(gt, connectivity=26)
    pl = getattr(pl, "data", pl)
    gl = getattr(gl, "data", gl)
    n_pred, n_gt = len(p_sizes), len(g_sizes)

    both = (pl > 0) & (gl > 0)
    pred_to_gt = {pid: [] for pid in range(1, n_pred + 1)}
    gt_to_pred = {gid: [] for gid in range(1, n_gt + 1)}
    if both.any():
        pairs = np.unique(np.stack([pl[both], gl[both]], axis=1), axis=0)
        for pid, gid in pairs:
            pred_to_gt[int(pid)].append(int(gid))
            gt_to_pred[int(gid)].append(int(pid))

    tp = sum(1 for v in gt_to_pred.values() if v)
    fp = sum(1 for v in pred_to_gt.values() if not v)
    fn = n_gt - tp
    pairing = {"pred_to_gt": pred_to_gt, "gt_to_pred": gt_to_pred,
               "n_pred": n_pred, "n_gt": n_gt,
               "pred_labels": pl, "gt_labels": gl}
    return tp, fp, fn, pairing


def dice(pred_comp, gt_comp) -> float:
    a = np.asarray(pred_comp) != 0
    b = np.asarray(gt_comp) != 0
    sa, sb = int(a.sum()), int(b.sum())
    if sa == 0 and sb == 0:
        return 1.0
    return 2.0 * int((a & b).sum()) / (sa + sb)


def iou(pred_comp, gt_comp) -> float:
    a = np.asarray(pred_comp) != 0
    b = np.asarray(gt_comp) != 0
    if not a.any() and not b.any():
        return 1.0
    return int((a & b).sum()) / int((a | b).sum())


def boundary_voxels(mask) -> np.ndarray:
    """[K, 3] coords of foreground voxels with a background 6-neighbor
    (out-of-volume counts as background)."""
    m = np.asarray(mask) != 0
    padded = np.pad(m, 1)
    interior = np.ones_like(m)
    for dx, dy, dz in _NEIGHBORS6:
        sl = tuple(slice(1 + d, 1 + d + n) for d, n in zip((dx, dy, dz),
                                                           m.shape))
        interior &= padded[sl]
    return np.argwhere(m & ~interior)


def hd95(pred_comp, gt_comp, spacing=(1.0, 1.0, 1.0)) -> float:
    """Max of the two directed 95th-percentile boundary distances, in mm."""
    a = boundary_voxels(pred_comp)
    b = boundary_voxels(gt_comp)
    if len(a) == 0 or len(b) == 0:
        raise MetricsError("hd95 requires two nonempty masks")
    sp = np.asarray(spacing, dtype=np.float64)
    pa = a * sp
    pb = b * sp
    d_ab = cKDTree(pb).query(pa)[0]
    d_ba = cKDTree(pa).query(pb)[0]
    return max(float(np.percentile(d_ab, 95)), float(np.percentile(d_ba, 95)))


def evaluate_subject(pred, gt, subject_id: str = "") -> SubjectReport:
    """Match components, then score each detected lesion against the
    union of its paired predicted components."""
    tp, fp, fn, pairing = match_detections(pred, gt)
    pl = pairing["pred_labels"]
    gl = pairing["gt_labels"]
    spacing = getattr(pred, "spacing", (1.0, 1.0, 1.0))

    per = []
    for gid, pids in sorted(pairing["gt_to_pred"].items()):
        if not pids:
            continue
        gt_mask = gl == gid
        union = np.isin(pl, pids)
        per.append({
            "gt_id": int(gid),
            "pred_ids": [int(p) for p in pids],
            "dice": dice(union, gt_mask),
            "iou": iou(union, gt_mask),
            "hd95_mm": hd95(union, gt_mask, spacing),
        })

    def mean_of(key):
        return float(np.mean([e[key] for e in per])) if per else None

    return SubjectReport(
        subject_id=subject_id, tp=tp, fp=fp, fn=fn,
        sensitivity=(tp / (tp + fn)) if (tp + fn) > 0 else None,
        fp_rate=float(fp),
        per_aneurysm=per,
        mean_dice=mean_of("dice"),
        mean_iou=mean_of("iou"),
        mean_hd95=mean_of("hd95_mm"),
    )


def format_mean_std(values) -> str:
    vals = np.asarray(list(values), dtype=np.float64)
    return f"{vals.mean():.3f}±{vals.std(ddof=0):.3f}"


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None, "formatted": "n/a", "n": 0}
    arr = np.asarray(vals, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std(ddof=0)),
            "formatted": format_mean_std(arr), "n": len(vals)}


def evaluate_cohort(items) -> dict:
    """items: iterable of (pred, gt, subject_id) -> cohort report dict.

    Sensitivity averages over subjects that have lesions; Dice, IoU, and
    HD95 average over subjects with at least one true positive; the FP
    rate averages over everyone, controls included.
    """
    items = list(items)
    if not items:
        raise MetricsError("cohort is empty")
    reports = [evaluate_subject(p, g, sid) for p, g, sid in items]
    summary = {
        "fp_rate": _summary(r.fp_rate for r in reports),
        "sensitivity": _summary(r.sensitivity for r in reports),
        "dice": _summary(r.mean_dice for r in reports),
        "iou": _summary(r.mean_iou for r in reports),
        "hd95_mm": _summary(r.mean_hd95 for r in reports),
    }
    return {
        "n_subjects": len(reports),
        "subjects": [asdict(r) for r in reports],
        "summary": summary,
    }


_CSV_FIELDS = ("subject_id", "tp", "fp", "fn", "sensitivity", "fp_rate",
               "mean_dice", "mean_iou", "mean_hd95")


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2)


def write_report_csv(report: dict, path) -> None:
    """One row per subject, then mean / std / formatted summary rows."""
    key_map = {"sensitivity": "sensitivity", "fp_rate": "fp_rate",
               "mean_dice": "dice", "mean_iou": "iou",
               "mean_hd95": "hd95_mm"}
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_FIELDS)
        for sub in report["subjects"]:
            writer.writerow([
                sub["subject_id"], sub["tp"], sub["fp"], sub["fn"],
                *("" if sub[k] is None else f"{sub[k]:.6f}"
                  for k in _CSV_FIELDS[4:])])
        summary = report["summary"]
        for stat in ("mean", "std"):
            writer.writerow([f"cohort_{stat}", "", "", ""] + [
                "" if summary[key_map[k]][stat] is None
                else f"{summary[key_map[k]][stat]:.6f}"
                for k in _CSV_FIELDS[4:]])
        writer.writerow(["cohort_formatted", "", "", ""] + [
            summary[key_map[k]]["formatted"] for k in _CSV_FIELDS[4:]])
