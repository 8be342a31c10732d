"""Average-precision evaluation for boxes and masks.

Matching is greedy per class and image: detections in descending score order
each claim the unmatched ground truth of highest overlap at or above the
threshold. Precision is interpolated monotonically and integrated over 101
recall points. The headline number averages thresholds 0.50 to 0.95 in steps
of 0.05; looser single-threshold slices at 0.25 and 0.5 are reported
alongside, as are size-restricted variants using the standard area-range
ignore rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import DatasetFile, area_bucket, instance_mask
from .geometry import DAMAGE_SCALES, Detection, iou, mask_iou

COCO_THRESHOLDS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, float("inf")),
    "small": (0.0, 1024.0),
    "medium": (1024.0, 9216.0),
    "large": (9216.0, float("inf")),
}


@dataclass(frozen=True)
class ApSummary:
    """One kind's AP numbers; None marks buckets with no ground truth."""

    kind: str
    ap: float | None
    ap25: float | None
    ap50: float | None
    ap_s: float | None
    ap_m: float | None
    ap_l: float | None
    per_class: dict

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "ap": self.ap,
            "ap25": self.ap25,
            "ap50": self.ap50,
            "ap_s": self.ap_s,
            "ap_m": self.ap_m,
            "ap_l": self.ap_l,
            "per_class": dict(self.per_class),
        }


@dataclass(frozen=True)
class ApReport:
    mask: ApSummary
    box: ApSummary

    def to_dict(self) -> dict:
        return {"mask": self.mask.to_dict(), "box": self.box.to_dict()}


class _Gt:
    __slots__ = ("box", "mask", "area", "matched")

    def __init__(self, box, mask, area):
        self.box = box
        self.mask = mask
        self.area = area
        self.matched = False


def _gt_index(ds: DatasetFile, kind: str):
    """Damage ground truth grouped by (image, class), with bucket areas."""
    images = {im.id: im for im in ds.images}
    index: dict[tuple[int, str], list[_Gt]] = {}
    for inst in ds.instances:
        if inst.kind != "damage":
            continue
        mask = instance_mask(inst, images[inst.image_id])
        # bucket assignment always uses mask pixels, for boxes too
        index.setdefault((inst.image_id, inst.scale), []).append(
            _Gt(inst.box, mask if kind == "mask" else None, mask.area)
        )
    return index


def _det_area(det: Detection, kind: str) -> float:
    if kind == "mask":
        return float(det.mask.area)
    return det.box.area


def _overlap(det: Detection, gt: _Gt, kind: str) -> float:
    if kind == "mask":
        return mask_iou(det.mask, gt.mask)
    return iou(det.box, gt.box)


def _match_image(dets, gts, thr, area_range, kind):
    """Greedy matching on one image; returns per-det (tp, ignored) flags.

    Ground truth outside the area range is "ignored": it can absorb
    detections (which then count neither way) but only when no in-range
    ground truth matches. Unmatched detections whose own area lies outside
    the range are ignored rather than counted as false positives.
    """
    lo, hi = area_range
    order = sorted(range(len(gts)), key=lambda i: not (lo <= gts[i].area < hi))
    ignored_gt = [not (lo <= gts[i].area < hi) for i in order]
    for g in gts:
        g.matched = False
    flags = []
    for det in dets:
        best, best_iou = -1, thr
        for pos, gi in enumerate(order):
            gt = gts[gi]
            if gt.matched:
                continue
            if best >= 0 and not ignored_gt[best] and ignored_gt[pos]:
                break  # an in-range match stands; do not trade it for ignored
            ov = _overlap(det, gt, kind)
            if ov >= thr and (best < 0 or ov > best_iou):
                best_iou = ov
                best = pos
        if best >= 0:
            gts[order[best]].matched = True
            flags.append((not ignored_gt[best], ignored_gt[best]))
        else:
            out_of_range = not (lo <= _det_area(det, kind) < hi)
            flags.append((False, out_of_range))
    return flags


def _ap_from_matches(records, n_gt) -> float | None:
    """101-point interpolated AP from (score, order, tp, ignored) records."""
    if n_gt == 0:
        return None
    kept = [(s, o, tp) for s, o, tp, ig in records if not ig]
    if not kept:
        return 0.0
    kept.sort(key=lambda r: (-r[0], r[1]))
    tp = np.array([r[2] for r in kept], dtype=np.float64)
    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(1.0 - tp)
    recall = cum_tp / n_gt
    precision = cum_tp / (cum_tp + cum_fp)
    # monotone from the right, the usual interpolation
    for i in range(len(precision) - 2, -1, -1):
        precision[i] = max(precision[i], precision[i + 1])
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    interp = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(interp.mean())


def _class_threshold_ap(dets_by_image, gt_index, cls, thr, area_range, kind, images):
    records = []
    n_gt = 0
    for image_id in images:
        gts = gt_index.get((image_id, cls), [])
        lo, hi = area_range
        n_gt += sum(1 for g in gts if lo <= g.area < hi)
        dets = dets_by_image.get((image_id, cls), [])
        flags = _match_image([d for _, _, d in dets], gts, thr, area_range, kind)
        for (score, order, _), (tp, ig) in zip(dets, flags):
            records.append((score, order, tp, ig))
    return _ap_from_matches(records, n_gt), n_gt


def compute_ap(
    dets: list[Detection],
    ds: DatasetFile,
    kind: str,
    iou_thresholds=COCO_THRESHOLDS,
) -> ApSummary:
    """Evaluate one kind ("box" or "mask") against the dataset's damages."""
    if kind not in ("box", "mask"):
        raise ValueError(f"kind must be 'box' or 'mask', got {kind!r}")
    image_ids = {im.id for im in ds.images}
    dets_by_image: dict[tuple[int, str], list] = {}
    for order, det in enumerate(dets):
        if det.frame_id not in image_ids:
            raise ValueError(f"detection references unknown image {det.frame_id}")
        if kind == "mask" and det.mask is None:
            raise ValueError("mask evaluation requires detection masks")
        dets_by_image.setdefault((det.frame_id, det.class_label), []).append(
            (det.score, order, det)
        )
    for recs in dets_by_image.values():
        recs.sort(key=lambda r: (-r[0], r[1]))
    gt_index = _gt_index(ds, kind)
    images = sorted(image_ids)

    def averaged(thresholds, area_name) -> float | None:
        area_range = AREA_RANGES[area_name]
        per_class = []
        for cls in DAMAGE_SCALES:
            vals = []
            for thr in thresholds:
                ap, n_gt = _class_threshold_ap(
                    dets_by_image, gt_index, cls, thr, area_range, kind, images
                )
                if ap is not None:
                    vals.append(ap)
            if vals:
                per_class.append(float(np.mean(vals)))
        return float(np.mean(per_class)) if per_class else None

    per_class = {}
    for cls in DAMAGE_SCALES:
        vals = []
        for thr in iou_thresholds:
            ap, _ = _class_threshold_ap(
                dets_by_image, gt_index, cls, thr, AREA_RANGES["all"], kind, images
            )
            if ap is not None:
                vals.append(ap)
        per_class[cls] = float(np.mean(vals)) if vals else None

    return ApSummary(
        kind=kind,
        ap=averaged(iou_thresholds, "all"),
        ap25=averaged((0.25,), "all"),
        ap50=averaged((0.5,), "all"),
        ap_s=averaged(iou_thresholds, "small"),
        ap_m=averaged(iou_thresholds, "medium"),
        ap_l=averaged(iou_thresholds, "large"),
        per_class=per_class,
    )


def evaluate_both(dets: list[Detection], ds: DatasetFile) -> ApReport:
    return ApReport(mask=compute_ap(dets, ds, "mask"), box=compute_ap(dets, ds, "box"))


def _fmt(v: float | None) -> str:
    return "  n/a" if v is None else f"{100.0 * v:5.1f}"


def format_ap_report(report: ApReport) -> str:
    """Six-column summary line plus a size breakdown per kind."""
    lines = [
        "      AP  AP_25  AP_50   AP^bb  AP^bb_25  AP^bb_50",
        f"   {_fmt(report.mask.ap)}  {_fmt(report.mask.ap25)}  {_fmt(report.mask.ap50)}"
        f"   {_fmt(report.box.ap)}     {_fmt(report.box.ap25)}     {_fmt(report.box.ap50)}",
        "",
        "        AP_S   AP_M   AP_L",
        f"mask   {_fmt(report.mask.ap_s)}  {_fmt(report.mask.ap_m)}  {_fmt(report.mask.ap_l)}",
        f"box    {_fmt(report.box.ap_s)}  {_fmt(report.box.ap_m)}  {_fmt(report.box.ap_l)}",
    ]
    return "\n".join(lines)
