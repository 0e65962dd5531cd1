"""Metric tests: rotated IoU, NMS, AP, robustness scores, report IO."""

import json
import math

import numpy as np
import pytest
from shapely.geometry import Polygon

from lidarbench.metrics import (
    DetectionSet,
    RobustnessReport,
    average_precision,
    corruption_error,
    iou_bev,
    mean_ce,
    nms,
    write_chart,
)
from lidarbench.scene import BBox3D, Pose, transform_box

SEED = 8844


def box(x, y, w=2.0, l=4.0, yaw=0.0, score=None):
    return BBox3D(np.array([x, y, 0.0]), np.array([w, l, 1.5]), yaw, score=score)


def random_box(rng, spread=10.0, score=False):
    return BBox3D(
        np.array([rng.uniform(-spread, spread), rng.uniform(-spread, spread), 0.0]),
        np.array([rng.uniform(0.5, 3.0), rng.uniform(0.5, 4.0), 1.5]),
        rng.uniform(-math.pi, math.pi),
        score=rng.uniform(0, 1) if score else None,
    )


def shapely_iou(a, b):
    pa = Polygon(a.corners_bev())
    pb = Polygon(b.corners_bev())
    inter = pa.intersection(pb).area
    if inter <= 0.0:
        return 0.0
    return inter / (pa.area + pb.area - inter)


# ---------------------------------------------------------------------------
# IoU


def test_iou_identical_is_exactly_one():
    b = box(3.0, -1.0, yaw=0.7)
    assert iou_bev(b, b) == 1.0


def test_iou_disjoint_is_exactly_zero():
    assert iou_bev(box(0.0, 0.0), box(100.0, 0.0)) == 0.0


def test_iou_half_overlap():
    # Unit squares offset by half a side: inter 0.5, union 1.5.
    a = box(0.0, 0.0, w=1.0, l=1.0)
    b = box(0.5, 0.0, w=1.0, l=1.0)
    assert iou_bev(a, b) == pytest.approx(1.0 / 3.0, rel=1e-12)


def test_iou_symmetry():
    rng = np.random.default_rng(SEED)
    for _ in range(50):
        a = random_box(rng, spread=2.0)
        b = random_box(rng, spread=2.0)
        assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)


def test_iou_rigid_motion_invariance():
    rng = np.random.default_rng(SEED + 1)
    for _ in range(50):
        a = random_box(rng, spread=2.0)
        b = random_box(rng, spread=2.0)
        pose = Pose.from_yaw(
            rng.uniform(-math.pi, math.pi), rng.uniform(-20, 20, size=3)
        )
        moved = iou_bev(
            transform_box(a, pose, Pose.identity()),
            transform_box(b, pose, Pose.identity()),
        )
        assert moved == pytest.approx(iou_bev(a, b), abs=1e-9)


def test_iou_matches_polygon_clipping_oracle():
    rng = np.random.default_rng(SEED + 2)
    for _ in range(200):
        a = random_box(rng, spread=2.5)
        b = random_box(rng, spread=2.5)
        assert iou_bev(a, b) == pytest.approx(shapely_iou(a, b), abs=1e-9)


def test_iou_containment():
    outer = box(0.0, 0.0, w=4.0, l=4.0)
    inner = box(0.0, 0.0, w=2.0, l=2.0, yaw=0.3)
    assert iou_bev(outer, inner) == pytest.approx(4.0 / 16.0, rel=1e-12)


# ---------------------------------------------------------------------------
# NMS


def test_nms_empty_and_missing_score():
    assert nms([]) == []
    with pytest.raises(ValueError, match="score"):
        nms([box(0.0, 0.0)])


def test_nms_suppresses_duplicates_keeps_distant():
    a = box(0.0, 0.0, score=0.9)
    b = box(0.1, 0.0, score=0.8)  # heavy overlap with a
    c = box(50.0, 0.0, score=0.7)
    kept = nms([b, c, a])
    assert kept == [a, c]
    assert kept[0] is a and kept[1] is c


def test_nms_confidence_filter_inclusive():
    a = box(0.0, 0.0, score=0.25)
    b = box(50.0, 0.0, score=0.2499)
    assert nms([a, b], conf_thr=0.25) == [a]


def test_nms_keeps_boxes_at_exact_iou_threshold():
    # IoU is exactly 1/3; suppression requires strictly greater.
    a = box(0.0, 0.0, w=1.0, l=1.0, score=0.9)
    b = box(0.5, 0.0, w=1.0, l=1.0, score=0.8)
    assert len(nms([a, b], iou_thr=1.0 / 3.0)) == 2
    assert len(nms([a, b], iou_thr=0.33)) == 1


def test_nms_tie_breaks_by_input_order():
    a = box(0.0, 0.0, score=0.5)
    b = box(50.0, 0.0, score=0.5)
    assert nms([a, b]) == [a, b]
    assert nms([b, a]) == [b, a]


# ---------------------------------------------------------------------------
# AP


def make_dets(preds, gts):
    return DetectionSet(predictions=preds, ground_truth=gts)


def test_detection_set_validation():
    with pytest.raises(ValueError, match="frame ids differ"):
        make_dets({"a": ()}, {"b": ()})
    with pytest.raises(ValueError, match="score"):
        make_dets({"a": (box(0.0, 0.0),)}, {"a": ()})


def test_ap_ground_truth_as_predictions_is_exactly_one():
    rng = np.random.default_rng(SEED + 3)
    gts = {}
    preds = {}
    for f in range(4):
        boxes = [random_box(rng, spread=20.0) for _ in range(5)]
        gts[f"f{f}"] = tuple(boxes)
        preds[f"f{f}"] = tuple(b.with_score(0.9) for b in boxes)
    dets = make_dets(preds, gts)
    assert average_precision(dets, 0.5) == 1.0
    assert average_precision(dets, 0.7) == 1.0


def test_ap_hand_traces():
    gt = box(0.0, 0.0)
    hit = box(0.05, 0.0)
    miss = box(50.0, 0.0)
    # True positive outranks the false positive: perfect envelope.
    dets = make_dets(
        {"a": (hit.with_score(0.9), miss.with_score(0.8))}, {"a": (gt,)}
    )
    assert average_precision(dets, 0.5) == pytest.approx(1.0, abs=1e-12)
    # False positive first: precision at full recall is 1/2.
    dets = make_dets(
        {"a": (hit.with_score(0.8), miss.with_score(0.9))}, {"a": (gt,)}
    )
    assert average_precision(dets, 0.5) == pytest.approx(0.5, abs=1e-12)


def test_ap_missed_gt_caps_recall():
    gt_a, gt_b = box(0.0, 0.0), box(50.0, 0.0)
    dets = make_dets({"a": (box(0.0, 0.0, score=0.9),)}, {"a": (gt_a, gt_b)})
    assert average_precision(dets, 0.5) == pytest.approx(0.5, abs=1e-12)


def test_ap_empty_predictions_and_no_gt():
    dets = make_dets({"a": ()}, {"a": (box(0.0, 0.0),)})
    assert average_precision(dets, 0.5) == 0.0
    with pytest.raises(ValueError, match="ground-truth"):
        average_precision(make_dets({"a": ()}, {"a": ()}), 0.5)


def test_ap_invariant_to_monotone_score_transform():
    rng = np.random.default_rng(SEED + 4)
    preds = {}
    gts = {}
    for f in range(3):
        gts[f"f{f}"] = tuple(random_box(rng, spread=15.0) for _ in range(4))
        preds[f"f{f}"] = tuple(random_box(rng, spread=15.0, score=True) for _ in range(6))
    base = average_precision(make_dets(preds, gts), 0.3)
    squashed = {
        fid: tuple(b.with_score(b.score**3) for b in boxes)
        for fid, boxes in preds.items()
    }
    assert average_precision(make_dets(squashed, gts), 0.3) == pytest.approx(
        base, abs=1e-12
    )


def brute_force_ap(preds, gts, iou_thr):
    """Independent AP: pooled greedy matching with shapely IoU."""
    records = []
    for fid in sorted(preds):
        for i, b in enumerate(preds[fid]):
            records.append((-b.score, len(records), fid, b))
    records.sort(key=lambda r: (r[0], r[1]))
    used = {fid: [False] * len(gts[fid]) for fid in gts}
    total_gt = sum(len(g) for g in gts.values())
    tps = []
    for _, _, fid, b in records:
        best, best_j = 0.0, -1
        for j, gt in enumerate(gts[fid]):
            if used[fid][j]:
                continue
            iou = shapely_iou(b, gt)
            if iou >= iou_thr and iou > best:
                best, best_j = iou, j
        if best_j >= 0:
            used[fid][best_j] = True
            tps.append(1.0)
        else:
            tps.append(0.0)
    if not records:
        return 0.0
    tp_cum = np.cumsum(tps)
    recall = tp_cum / total_gt
    precision = tp_cum / np.arange(1, len(tps) + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    return float(np.dot(np.diff(np.r_[0.0, recall]), envelope))


def test_ap_matches_brute_force_on_random_sets():
    rng = np.random.default_rng(SEED + 5)
    for trial in range(10):
        preds = {}
        gts = {}
        for f in range(3):
            fid = f"f{f}"
            gt = [random_box(rng, spread=8.0) for _ in range(rng.integers(1, 5))]
            pr = []
            for g in gt:
                if rng.uniform() < 0.8:  # noisy copy of a ground-truth box
                    pr.append(
                        BBox3D(
                            g.center + rng.normal(0, 0.3, size=3) * [1, 1, 0],
                            g.size,
                            g.yaw + rng.normal(0, 0.1),
                            score=rng.uniform(0.3, 1.0),
                        )
                    )
            for _ in range(rng.integers(0, 3)):
                pr.append(random_box(rng, spread=8.0, score=True))
            gts[fid] = tuple(gt)
            preds[fid] = tuple(pr)
        for thr in (0.3, 0.5):
            ours = average_precision(make_dets(preds, gts), thr)
            ref = brute_force_ap(preds, gts, thr)
            assert ours == pytest.approx(ref, abs=1e-9), f"trial {trial} thr {thr}"


# ---------------------------------------------------------------------------
# robustness scores


def test_corruption_error_values():
    assert corruption_error(0.8, 0.6) == pytest.approx(0.25, rel=1e-12)
    assert corruption_error(0.8, 0.8) == 0.0
    assert corruption_error(0.5, 0.75) == pytest.approx(-0.5, rel=1e-12)
    with pytest.raises(ValueError):
        corruption_error(0.0, 0.5)


def test_mean_ce():
    assert mean_ce([0.1, 0.2, 0.3]) == pytest.approx(0.2, rel=1e-12)
    with pytest.raises(ValueError):
        mean_ce([])


def test_report_from_aps_and_round_trip():
    report = RobustnessReport.from_aps(
        {0.5: 0.8, 0.7: 0.6},
        {"fog": {0.5: 0.6, 0.7: 0.3}, "snow": {0.5: 0.7, 0.7: 0.45}},
    )
    assert report.ce_per_corruption["fog"][0.5] == pytest.approx(0.25, rel=1e-12)
    assert report.ce_per_corruption["fog"][0.7] == pytest.approx(0.5, rel=1e-12)
    assert report.mce[0.5] == pytest.approx((0.25 + 0.125) / 2, rel=1e-12)
    assert report.map_corrupt[0.5] == pytest.approx(0.65, rel=1e-12)
    back = RobustnessReport.from_json(report.to_json())
    assert back == report
    # keys survive as floats
    assert 0.5 in back.ap_clean and 0.7 in back.mce


def test_report_rejects_inconsistent_fields():
    good = RobustnessReport.from_aps({0.5: 0.8}, {"fog": {0.5: 0.6}})
    data = json.loads(good.to_json())
    data["mce"]["0.5"] = 0.999
    with pytest.raises(ValueError, match="mCE"):
        RobustnessReport.from_dict(data)
    data = json.loads(good.to_json())
    data["ce_per_corruption"]["fog"]["0.5"] = 0.0
    with pytest.raises(ValueError, match="CE"):
        RobustnessReport.from_dict(data)


def test_report_threshold_mismatch_rejected():
    with pytest.raises(ValueError, match="thresholds"):
        RobustnessReport.from_aps({0.5: 0.8}, {"fog": {0.7: 0.6}})


def test_write_chart_produces_svg(tmp_path):
    report = RobustnessReport.from_aps(
        {0.5: 0.9}, {"fog": {0.5: 0.7}, "snow": {0.5: 0.8}}
    )
    path = tmp_path / "chart.svg"
    write_chart(report, str(path))
    text = path.read_text()
    assert "<svg" in text and "fog" in text
