"""Detection metrics: rotated BEV IoU, NMS, AP, and robustness scores.

IoU is computed on the yaw-rotated top-down rectangles by convex polygon
clipping.  AP pools detections over frames, matches greedily in score
order, and integrates the precision envelope over all recall points
(all-point interpolation; tie-breaks and conventions documented on each
function so numbers are comparable across implementations).

Robustness of a detector under a corruption suite is summarized by the
relative AP drop per corruption (CE) and its mean over corruption kinds
(mCE).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from .scene import BBox3D

__all__ = [
    "iou_bev",
    "nms",
    "DetectionSet",
    "average_precision",
    "corruption_error",
    "mean_ce",
    "RobustnessReport",
    "write_chart",
]


def _clip_by_edge(polygon: List[np.ndarray], a: np.ndarray, b: np.ndarray):
    """Keep the part of a convex polygon on the left of directed edge a->b."""
    edge = b - a
    result: List[np.ndarray] = []
    n = len(polygon)
    for i in range(n):
        prev = polygon[i - 1]
        cur = polygon[i]
        prev_side = edge[0] * (prev[1] - a[1]) - edge[1] * (prev[0] - a[0])
        cur_side = edge[0] * (cur[1] - a[1]) - edge[1] * (cur[0] - a[0])
        if cur_side >= 0:
            if prev_side < 0:
                t = prev_side / (prev_side - cur_side)
                result.append(prev + t * (cur - prev))
            result.append(cur)
        elif prev_side >= 0:
            t = prev_side / (prev_side - cur_side)
            result.append(prev + t * (cur - prev))
    return result


def _polygon_area(polygon: Sequence[np.ndarray]) -> float:
    if len(polygon) < 3:
        return 0.0
    pts = np.asarray(polygon)
    x, y = pts[:, 0], pts[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def iou_bev(a: BBox3D, b: BBox3D) -> float:
    """Intersection over union of two yaw-rotated BEV rectangles.

    The intersection polygon comes from clipping a's corners successively
    against b's edges (both corner rings are counterclockwise).  Identical
    boxes give exactly 1.0; disjoint boxes exactly 0.0.
    """
    corners_a = a.corners_bev()
    corners_b = b.corners_bev()
    polygon = [corners_a[i] for i in range(4)]
    for i in range(4):
        polygon = _clip_by_edge(polygon, corners_b[i], corners_b[(i + 1) % 4])
        if not polygon:
            return 0.0
    inter = _polygon_area(polygon)
    if inter == 0.0:
        return 0.0
    area_a = float(a.size[0] * a.size[1])
    area_b = float(b.size[0] * b.size[1])
    return inter / (area_a + area_b - inter)


def _require_scores(boxes: Sequence[BBox3D], context: str) -> np.ndarray:
    scores = []
    for i, box in enumerate(boxes):
        if box.score is None:
            raise ValueError(f"{context}: box {i} has no score")
        scores.append(box.score)
    return np.asarray(scores, dtype=np.float64)


def nms(
    boxes: Sequence[BBox3D], iou_thr: float = 0.15, conf_thr: float = 0.25
) -> List[BBox3D]:
    """Greedy non-maximum suppression on scored boxes.

    Detections scoring below ``conf_thr`` are dropped; the rest are
    visited in descending score order (ties broken by earlier input
    index), keeping each visited box and suppressing every remaining box
    whose IoU with it strictly exceeds ``iou_thr``.
    """
    if not boxes:
        return []
    scores = _require_scores(boxes, "nms")
    alive = [i for i in np.argsort(-scores, kind="stable") if scores[i] >= conf_thr]
    kept: List[int] = []
    while alive:
        best = alive.pop(0)
        kept.append(best)
        alive = [i for i in alive if iou_bev(boxes[best], boxes[i]) <= iou_thr]
    return [boxes[i] for i in kept]


@dataclass(frozen=True)
class DetectionSet:
    """Per-frame scored predictions with aligned ground truth.

    Both mappings must cover exactly the same frame ids; frames are
    normalized to sorted-id order so downstream pooling is deterministic.
    """

    predictions: Dict[str, Tuple[BBox3D, ...]]
    ground_truth: Dict[str, Tuple[BBox3D, ...]]

    def __post_init__(self):
        pred_ids = set(self.predictions)
        gt_ids = set(self.ground_truth)
        if pred_ids != gt_ids:
            raise ValueError(
                f"frame ids differ: predictions {sorted(pred_ids)} vs "
                f"ground truth {sorted(gt_ids)}"
            )
        preds = {}
        for frame_id in sorted(pred_ids):
            boxes = tuple(self.predictions[frame_id])
            _require_scores(boxes, f"frame {frame_id}")
            preds[frame_id] = boxes
        gts = {fid: tuple(self.ground_truth[fid]) for fid in sorted(gt_ids)}
        object.__setattr__(self, "predictions", preds)
        object.__setattr__(self, "ground_truth", gts)

    @property
    def n_ground_truth(self) -> int:
        return sum(len(v) for v in self.ground_truth.values())


def average_precision(dets: DetectionSet, iou_thr: float) -> float:
    """All-point interpolated AP at one IoU threshold.

    Predictions are pooled over frames and sorted by descending score
    (stable, so pooled order breaks ties).  Each is matched greedily to
    the unmatched ground-truth box in its frame with the highest
    IoU >= ``iou_thr`` (ties: earlier ground-truth index).  The PR curve
    is integrated as the area under the precision envelope.
    """
    total_gt = dets.n_ground_truth
    if total_gt == 0:
        raise ValueError("AP undefined: no ground-truth boxes")
    pooled: List[Tuple[str, int]] = []
    scores: List[float] = []
    for frame_id, boxes in dets.predictions.items():
        for i, box in enumerate(boxes):
            pooled.append((frame_id, i))
            scores.append(box.score)
    if not pooled:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    matched = {fid: np.zeros(len(g), dtype=bool) for fid, g in dets.ground_truth.items()}
    tp = np.zeros(len(pooled))
    for rank, k in enumerate(order):
        frame_id, i = pooled[k]
        box = dets.predictions[frame_id][i]
        best_iou = 0.0
        best_gt = -1
        for j, gt in enumerate(dets.ground_truth[frame_id]):
            if matched[frame_id][j]:
                continue
            iou = iou_bev(box, gt)
            if iou >= iou_thr and iou > best_iou:
                best_iou = iou
                best_gt = j
        if best_gt >= 0:
            matched[frame_id][best_gt] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1.0 - tp)
    recall = tp_cum / total_gt
    precision = tp_cum / (tp_cum + fp_cum)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    deltas = np.diff(np.r_[0.0, recall])
    return float(np.dot(deltas, envelope))


def corruption_error(ap_clean: float, ap_corrupt: float) -> float:
    """Relative AP drop (positive means degradation); needs ap_clean > 0."""
    if not ap_clean > 0:
        raise ValueError(f"ap_clean must be > 0, got {ap_clean}")
    return (ap_clean - ap_corrupt) / ap_clean


def mean_ce(ces: Sequence[float]) -> float:
    """Arithmetic mean of per-corruption errors."""
    if len(ces) == 0:
        raise ValueError("mean_ce needs at least one corruption error")
    return float(np.mean(np.asarray(ces, dtype=np.float64)))


@dataclass(frozen=True)
class RobustnessReport:
    """AP per corruption plus derived CE / mCE, per IoU threshold.

    Keys of ``ap_clean`` are IoU thresholds; ``ap_per_corruption`` maps
    corruption kind to the same threshold keying.  The derived fields are
    recomputed and cross-checked at construction.
    """

    ap_clean: Dict[float, float]
    ap_per_corruption: Dict[str, Dict[float, float]]
    ce_per_corruption: Dict[str, Dict[float, float]]
    mce: Dict[float, float]
    map_corrupt: Dict[float, float]

    def __post_init__(self):
        for kind, aps in self.ap_per_corruption.items():
            if set(aps) != set(self.ap_clean):
                raise ValueError(f"corruption {kind!r} thresholds mismatch clean AP")
            for thr, ap in aps.items():
                expect = corruption_error(self.ap_clean[thr], ap)
                if abs(self.ce_per_corruption[kind][thr] - expect) > 1e-12:
                    raise ValueError(f"inconsistent CE for {kind!r} at {thr}")
        for thr in self.ap_clean:
            if self.ap_per_corruption:
                expect = mean_ce([self.ce_per_corruption[k][thr] for k in self.ce_per_corruption])
                if abs(self.mce[thr] - expect) > 1e-12:
                    raise ValueError(f"inconsistent mCE at {thr}")

    @staticmethod
    def from_aps(
        ap_clean: Mapping[float, float],
        ap_per_corruption: Mapping[str, Mapping[float, float]],
    ) -> "RobustnessReport":
        clean = {float(t): float(a) for t, a in ap_clean.items()}
        per_corr = {
            kind: {float(t): float(a) for t, a in aps.items()}
            for kind, aps in ap_per_corruption.items()
        }
        for kind, aps in per_corr.items():
            if set(aps) != set(clean):
                raise ValueError(f"corruption {kind!r} thresholds mismatch clean AP")
        ce = {
            kind: {t: corruption_error(clean[t], a) for t, a in aps.items()}
            for kind, aps in per_corr.items()
        }
        mce = {}
        map_corrupt = {}
        if per_corr:
            for t in clean:
                mce[t] = mean_ce([ce[kind][t] for kind in ce])
                map_corrupt[t] = float(np.mean([per_corr[kind][t] for kind in per_corr]))
        return RobustnessReport(clean, per_corr, ce, mce, map_corrupt)

    def to_dict(self) -> dict:
        def keyed(d: Mapping[float, float]) -> dict:
            return {repr(t): v for t, v in d.items()}

        return {
            "ap_clean": keyed(self.ap_clean),
            "ap_per_corruption": {k: keyed(v) for k, v in self.ap_per_corruption.items()},
            "ce_per_corruption": {k: keyed(v) for k, v in self.ce_per_corruption.items()},
            "mce": keyed(self.mce),
            "map_corrupt": keyed(self.map_corrupt),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(data: dict) -> "RobustnessReport":
        def unkeyed(d: Mapping[str, float]) -> Dict[float, float]:
            return {float(t): float(v) for t, v in d.items()}

        return RobustnessReport(
            unkeyed(data["ap_clean"]),
            {k: unkeyed(v) for k, v in data["ap_per_corruption"].items()},
            {k: unkeyed(v) for k, v in data["ce_per_corruption"].items()},
            unkeyed(data["mce"]),
            unkeyed(data["map_corrupt"]),
        )

    @staticmethod
    def from_json(text: str) -> "RobustnessReport":
        return RobustnessReport.from_dict(json.loads(text))


def write_chart(report: RobustnessReport, path: str) -> None:
    """Write an SVG bar chart of AP per corruption (clean bar included)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with matplotlib.rc_context({"svg.hashsalt": "lidarbench"}):
        thresholds = sorted(report.ap_clean)
        kinds = sorted(report.ap_per_corruption)
        labels = ["clean"] + kinds
        x = np.arange(len(labels))
        width = 0.8 / max(len(thresholds), 1)
        fig, ax = plt.subplots(figsize=(1.2 * len(labels) + 2, 4))
        for i, thr in enumerate(thresholds):
            values = [report.ap_clean[thr]] + [
                report.ap_per_corruption[k][thr] for k in kinds
            ]
            ax.bar(x + i * width, values, width, label=f"AP@{thr:g}")
        ax.set_xticks(x + width * (len(thresholds) - 1) / 2)
        ax.set_xticklabels(labels, rotation=30, ha="right")
        ax.set_ylabel("AP")
        ax.set_ylim(0, 1.05)
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, format="svg")
        plt.close(fig)
