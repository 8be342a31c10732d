"""Average-precision evaluation: hand values, ignore rules, and a matcher oracle."""

import numpy as np
import pytest

from damast.dataset import (
    DatasetFile,
    ImageInfo,
    Instance,
    Video,
    instance_mask,
    rasterize_polygon,
)
from damast.evaluate import (
    COCO_THRESHOLDS,
    RECALL_POINTS,
    ApReport,
    ApSummary,
    compute_ap,
    evaluate_both,
    format_ap_report,
)
from damast.geometry import BBox, Detection, iou


def _rect(x1, y1, x2, y2):
    return ((x1, y1), (x2, y1), (x2, y2), (x1, y2))


def _damage(iid, image_id, x1, y1, x2, y2, scale="slight"):
    return Instance(
        id=iid,
        image_id=image_id,
        kind="damage",
        box=BBox(x1, y1, x2, y2),
        polygon=_rect(x1, y1, x2, y2),
        scale=scale,
        parent_id=1,
    )


def _ds(n_images, instances, size=256):
    images = [ImageInfo(100 + t, 1, t, size, size) for t in range(n_images)]
    return DatasetFile(
        videos=[Video(1, 2.0, n_images)], images=images, instances=instances
    )


def _det(ds, inst, score, box=None, mask=None, label=None):
    """Detection aligned with a ground-truth instance unless overridden."""
    image = ds.image_by_id(inst.image_id)
    return Detection(
        box=box if box is not None else inst.box,
        score=score,
        class_label=label if label is not None else inst.scale,
        frame_id=inst.image_id,
        mask=mask if mask is not None else instance_mask(inst, image),
    )


class TestHandValues:
    def test_perfect_detections(self):
        gts = [
            _damage(1, 100, 8, 8, 24, 24, "slight"),  # 256 px: small
            _damage(2, 101, 40, 40, 80, 80, "severe"),  # 1600 px: medium
        ]
        ds = _ds(2, gts)
        dets = [_det(ds, gts[0], 1.0), _det(ds, gts[1], 0.9)]
        for kind in ("box", "mask"):
            s = compute_ap(dets, ds, kind)
            assert s.kind == kind
            assert s.ap == s.ap25 == s.ap50 == 1.0
            assert s.ap_s == 1.0 and s.ap_m == 1.0 and s.ap_l is None
            assert s.per_class == {"slight": 1.0, "severe": 1.0, "debris": None}

    def test_no_detections_scores_zero(self):
        gts = [_damage(1, 100, 8, 8, 24, 24)]
        s = compute_ap([], _ds(1, gts), "box")
        assert s.ap == 0.0 and s.ap50 == 0.0
        assert s.ap_s == 0.0 and s.ap_m is None
        assert s.per_class["slight"] == 0.0 and s.per_class["debris"] is None

    def test_no_ground_truth_gives_none(self):
        building = Instance(
            id=1, image_id=100, kind="building", box=BBox(0, 0, 32, 32),
            polygon=_rect(0, 0, 32, 32),
        )
        ds = _ds(1, [building])
        det = Detection(
            box=BBox(0, 0, 16, 16), score=0.9, class_label="slight", frame_id=100,
            mask=rasterize_polygon(_rect(0, 0, 16, 16), 256, 256),
        )
        s = compute_ap([det], ds, "box")
        assert s.ap is None and s.ap25 is None and s.ap50 is None
        assert s.ap_s is None and s.ap_m is None and s.ap_l is None
        assert set(s.per_class.values()) == {None}

    def test_missed_gt_caps_recall(self):
        # one tp, one fp below it, one gt never found: AP integrates to 51/101
        gts = [
            _damage(1, 100, 8, 8, 24, 24),
            _damage(2, 100, 48, 48, 64, 64),
        ]
        ds = _ds(1, gts)
        dets = [
            _det(ds, gts[0], 0.9),
            _det(ds, gts[0], 0.8, box=BBox(96, 96, 112, 112)),
        ]
        s = compute_ap(dets, ds, "box")
        assert s.ap50 == pytest.approx(51 / 101)
        assert s.ap == pytest.approx(51 / 101)  # exact boxes match at every threshold
        assert s.per_class["slight"] == pytest.approx(51 / 101)

    def test_false_positive_above_tp_halves_precision(self):
        gts = [_damage(1, 100, 8, 8, 24, 24)]
        ds = _ds(1, gts)
        dets = [
            _det(ds, gts[0], 0.95, box=BBox(96, 96, 112, 112)),
            _det(ds, gts[0], 0.9),
        ]
        s = compute_ap(dets, ds, "box")
        assert s.ap50 == pytest.approx(0.5)

    def test_equal_scores_keep_input_order(self):
        gts = [_damage(1, 100, 8, 8, 24, 24)]
        ds = _ds(1, gts)
        dets = [
            _det(ds, gts[0], 0.5),
            _det(ds, gts[0], 0.5, box=BBox(96, 96, 112, 112)),
        ]
        s = compute_ap(dets, ds, "box")
        assert s.ap50 == pytest.approx(1.0)

    def test_greedy_prefers_highest_overlap(self):
        # wide det overlaps both gts above threshold; it must take the better one
        gts = [
            _damage(1, 100, 0, 0, 20, 20),
            _damage(2, 100, 30, 0, 50, 20),
        ]
        ds = _ds(1, gts)
        wide = _det(ds, gts[0], 0.9, box=BBox(10, 0, 50, 20))  # iou .2 / .5
        exact_b = _det(ds, gts[1], 0.8)
        s = compute_ap([wide, exact_b], ds, "box", iou_thresholds=(0.2,))
        assert s.ap == pytest.approx(51 / 101)


class TestKindDivergence:
    def test_quarter_mask_matches_only_loose_threshold(self):
        gt = _damage(1, 100, 16, 16, 48, 48)  # 1024 px: medium
        ds = _ds(1, [gt])
        quarter = rasterize_polygon(_rect(16, 16, 32, 32), 256, 256)
        det = _det(ds, gt, 0.9, mask=quarter)
        mask_s = compute_ap([det], ds, "mask")
        box_s = compute_ap([det], ds, "box")
        assert box_s.ap50 == 1.0 and box_s.ap_m == 1.0
        assert mask_s.ap25 == 1.0  # 0.25 overlap passes the closed threshold
        assert mask_s.ap50 == 0.0
        # at strict thresholds the 256-px detection is out of range: no fp
        assert mask_s.ap_m == 0.0

    def test_mask_kind_requires_masks(self):
        gt = _damage(1, 100, 8, 8, 24, 24)
        ds = _ds(1, [gt])
        det = Detection(box=gt.box, score=0.9, class_label="slight", frame_id=100)
        with pytest.raises(ValueError, match="mask"):
            compute_ap([det], ds, "mask")
        assert compute_ap([det], ds, "box").ap50 == 1.0


class TestAreaRanges:
    def _scene(self):
        gts = [
            _damage(1, 100, 8, 8, 24, 24),  # 256 px
            _damage(2, 100, 100, 100, 228, 228),  # 16384 px
        ]
        ds = _ds(1, gts)
        return ds, gts

    def test_out_of_range_matches_are_ignored(self):
        ds, gts = self._scene()
        dets = [_det(ds, gts[1], 0.95), _det(ds, gts[0], 0.9)]
        s = compute_ap(dets, ds, "box")
        assert s.ap_s == 1.0 and s.ap_l == 1.0 and s.ap == 1.0

    def test_unmatched_det_outside_range_is_not_a_false_positive(self):
        ds, gts = self._scene()
        stray = Detection(
            box=BBox(0, 100, 128, 228), score=0.99, class_label="slight", frame_id=100
        )
        dets = [stray, _det(ds, gts[1], 0.95), _det(ds, gts[0], 0.9)]
        s = compute_ap(dets, ds, "box")
        assert s.ap_s == 1.0  # the 16384-px stray cannot hurt the small slice
        assert s.ap_l == pytest.approx(0.5)  # but it is a real fp at large
        assert s.ap50 == pytest.approx(2 / 3)

    def test_score_monotone_transform_invariance(self):
        ds, gts = self._scene()
        dets = [
            _det(ds, gts[1], 0.55),
            _det(ds, gts[0], 0.3),
            Detection(box=BBox(40, 40, 60, 60), score=0.7, class_label="slight",
                      frame_id=100),
        ]
        squeezed = [d.with_score(0.25 + 0.5 * d.score) for d in dets]
        a = compute_ap(dets, ds, "box").to_dict()
        b = compute_ap(squeezed, ds, "box").to_dict()
        assert a == b


class TestAgainstOracle:
    @staticmethod
    def _oracle_class_ap(dets, ds, cls, thr):
        """Textbook AP: greedy per image, max raw precision at recall >= r."""
        records = []
        n_gt = 0
        for im in ds.images:
            gts = [
                inst for inst in ds.instances_of_image(im.id)
                if inst.kind == "damage" and inst.scale == cls
            ]
            n_gt += len(gts)
            img_dets = sorted(
                (
                    (d.score, k, d)
                    for k, d in enumerate(dets)
                    if d.frame_id == im.id and d.class_label == cls
                ),
                key=lambda r: (-r[0], r[1]),
            )
            taken = set()
            for score, order, det in img_dets:
                best, best_ov = None, thr
                for gi, gt in enumerate(gts):
                    if gi in taken:
                        continue
                    ov = iou(det.box, gt.box)
                    if ov >= thr and (best is None or ov > best_ov):
                        best, best_ov = gi, ov
                if best is not None:
                    taken.add(best)
                records.append((score, order, best is not None))
        if n_gt == 0:
            return None
        records.sort(key=lambda r: (-r[0], r[1]))
        tps = np.cumsum([r[2] for r in records], dtype=float)
        fps = np.cumsum([not r[2] for r in records], dtype=float)
        recall = tps / n_gt if len(records) else np.array([])
        precision = tps / np.maximum(tps + fps, 1e-12) if len(records) else np.array([])
        total = 0.0
        for r in RECALL_POINTS:
            at_least = precision[recall >= r]
            total += float(at_least.max()) if at_least.size else 0.0
        return total / len(RECALL_POINTS)

    def _random_scene(self, seed):
        rng = np.random.default_rng(seed)
        instances, dets = [], []
        iid = 1
        ds_images = 2
        for t in range(ds_images):
            image_id = 100 + t
            for cell_r in range(4):
                for cell_c in range(4):
                    if rng.random() < 0.35:
                        continue
                    x0, y0 = cell_c * 64.0, cell_r * 64.0
                    w = float(rng.uniform(14, 46))
                    h = float(rng.uniform(14, 46))
                    x1 = x0 + float(rng.uniform(0, 63 - w))
                    y1 = y0 + float(rng.uniform(0, 63 - h))
                    cls = ("slight", "severe", "debris")[int(rng.integers(3))]
                    inst = _damage(iid, image_id, x1, y1, x1 + w, y1 + h, cls)
                    instances.append(inst)
                    iid += 1
                    if rng.random() < 0.85:
                        dx, dy = rng.uniform(-8, 8, size=2)
                        grow = float(rng.uniform(-6, 10))
                        box = BBox(
                            max(0.0, x1 + dx),
                            max(0.0, y1 + dy),
                            min(256.0, x1 + w + dx + grow),
                            min(256.0, y1 + h + dy),
                        )
                        label = cls if rng.random() < 0.8 else "slight"
                        dets.append(
                            Detection(box=box, score=float(rng.random()),
                                      class_label=label, frame_id=image_id)
                        )
            for _ in range(int(rng.integers(0, 4))):
                x1 = float(rng.uniform(0, 220))
                y1 = float(rng.uniform(0, 220))
                dets.append(
                    Detection(
                        box=BBox(x1, y1, x1 + float(rng.uniform(8, 36)),
                                 y1 + float(rng.uniform(8, 36))),
                        score=float(rng.random()),
                        class_label=("slight", "severe", "debris")[int(rng.integers(3))],
                        frame_id=100 + int(rng.integers(ds_images)),
                    )
                )
        return _ds(ds_images, instances), dets

    def test_matches_textbook_ap(self):
        for seed in range(6):
            ds, dets = self._random_scene(seed)
            got = compute_ap(dets, ds, "box")
            for thresholds, value in (((0.5,), got.ap50), (COCO_THRESHOLDS, got.ap)):
                per_class = []
                for cls in ("slight", "severe", "debris"):
                    vals = [
                        ap
                        for thr in thresholds
                        if (ap := self._oracle_class_ap(dets, ds, cls, thr)) is not None
                    ]
                    if vals:
                        per_class.append(float(np.mean(vals)))
                want = float(np.mean(per_class)) if per_class else None
                assert value == pytest.approx(want, abs=1e-12), f"seed {seed}"

    def test_per_class_matches_oracle(self):
        ds, dets = self._random_scene(17)
        got = compute_ap(dets, ds, "box")
        for cls in ("slight", "severe", "debris"):
            vals = [
                ap
                for thr in COCO_THRESHOLDS
                if (ap := self._oracle_class_ap(dets, ds, cls, thr)) is not None
            ]
            want = float(np.mean(vals)) if vals else None
            assert got.per_class[cls] == pytest.approx(want, abs=1e-12)


class TestValidationAndFormat:
    def test_unknown_image_rejected(self):
        ds = _ds(1, [_damage(1, 100, 8, 8, 24, 24)])
        det = Detection(box=BBox(0, 0, 8, 8), score=0.5, class_label="slight",
                        frame_id=999)
        with pytest.raises(ValueError, match="999"):
            compute_ap([det], ds, "box")

    def test_bad_kind_rejected(self):
        ds = _ds(1, [_damage(1, 100, 8, 8, 24, 24)])
        with pytest.raises(ValueError, match="kind"):
            compute_ap([], ds, "both")

    def test_evaluate_both_and_report_dict(self):
        gt = _damage(1, 100, 8, 8, 24, 24)
        ds = _ds(1, [gt])
        dets = [_det(ds, gt, 1.0)]
        report = evaluate_both(dets, ds)
        assert isinstance(report, ApReport)
        assert report.mask.kind == "mask" and report.box.kind == "box"
        d = report.to_dict()
        assert d["mask"]["ap"] == 1.0 and d["box"]["ap50"] == 1.0

    def test_format_renders_values_and_gaps(self):
        gt = _damage(1, 100, 8, 8, 24, 24)
        ds = _ds(1, [gt])
        report = evaluate_both([_det(ds, gt, 1.0)], ds)
        text = format_ap_report(report)
        lines = text.splitlines()
        assert len(lines) == 6
        assert lines[0].split() == ["AP", "AP_25", "AP_50", "AP^bb", "AP^bb_25", "AP^bb_50"]
        assert "100.0" in lines[1]
        assert "n/a" in lines[4] and "n/a" in lines[5]  # no medium or large gt
        empty = ApSummary("box", None, None, None, None, None, None, {})
        text2 = format_ap_report(ApReport(mask=empty, box=empty))
        assert text2.count("n/a") == 12
