"""End-to-end robustness evaluation over manifest frames.

For every frame: gate agents by communication range, corrupt each agent's
cloud per suite entry (student inputs), build the dense painted teacher,
encode both branches into ego-frame BEV maps, fuse with multi-scale
attention, run the seeded heads, evaluate every distillation and
reconstruction loss, detect objects, and finally aggregate per-condition
AP into corruption errors.

Detector modes:
  * ``oracle``: ground-truth boxes scored by in-box point density
    (``1 - exp(-count / density_tau)``), boxes without points skipped,
    plus fixed far-field decoy detections at a constant score.  On clean
    synthetic scenes every true box outranks every decoy, so clean AP is
    exactly 1 and corrupted AP can only fall.
  * ``head``: decode the seeded linear detection head through anchors and
    NMS (useful for exercising the full path, not for accuracy).
  * ``external``: read per-condition prediction files, enabling this
    harness to score real model outputs.

All randomness is derived from one root seed keyed by (suite seed, frame
id, agent id), so a threaded run reproduces the serial run bit for bit.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from .corruption import CorruptionConfig
from .distill import loss_dae, loss_daf, loss_dap, loss_kd
from .encode import (
    FeatureMap,
    GridSpec,
    detect_head,
    foreground_mask,
    fuse_attention,
    pillarize,
)
from .metrics import DetectionSet, RobustnessReport, average_precision, nms
from .pcio import read_manifest, read_predictions
from .recon import (
    build_recon_target,
    decode_points,
    loss_occupancy,
    loss_offsets,
    loss_recon,
    recon_head,
)
from .rng import derive_seed
from .scene import (
    BBox3D,
    PointCloud,
    Pose,
    Scene,
    aggregate,
    gate_by_range,
    points_in_box,
    transform_box,
    transform_points,
)
from .synth import CAR_SIZE
from .teacher import build_multiview, make_teacher

__all__ = [
    "CLEAN",
    "PipelineOptions",
    "FrameOutcome",
    "PipelineResult",
    "default_suite",
    "run_frame",
    "run_pipeline",
    "ANCHOR_YAWS",
]

CLEAN = "clean"

ANCHOR_YAWS = (0.0, math.pi / 2.0)

LOSS_KEYS = (
    "l_dae",
    "l_daf",
    "l_dap",
    "l_kd",
    "l_m",
    "l_o",
    "l_rec",
    "l_detect",
    "l_total",
)


@dataclass(frozen=True)
class PipelineOptions:
    """Knobs for one pipeline run; defaults mirror the CLI defaults."""

    seed: int = 0
    comm_range: float = 70.0
    x_range: Tuple[float, float] = (-40.0, 40.0)
    y_range: Tuple[float, float] = (-40.0, 40.0)
    voxel_size: float = 0.4
    scales: int = 2
    anchors: int = 2
    iou_thresholds: Tuple[float, ...] = (0.5, 0.7)
    nms_iou: float = 0.15
    conf_thr: float = 0.25
    threads: int = 1
    detector: str = "oracle"
    predictions_dir: Optional[str] = None
    teacher_mode: str = "dense"
    recon_source: str = "teacher"
    density_tau: float = 100.0
    decoy_score: float = 0.5
    n_decoys: int = 4
    decoy_radius: float = 30.0
    l_detect: float = 0.0
    with_losses: bool = True
    keep_tensors: bool = False

    def __post_init__(self):
        if self.detector not in ("oracle", "head", "external"):
            raise ValueError(f"unknown detector mode {self.detector!r}")
        if self.teacher_mode not in ("dense", "self"):
            raise ValueError(f"unknown teacher mode {self.teacher_mode!r}")
        if self.recon_source not in ("teacher", "student"):
            raise ValueError(f"unknown recon source {self.recon_source!r}")
        if self.detector == "external" and not self.predictions_dir:
            raise ValueError("external detector mode needs predictions_dir")
        if self.threads < 1:
            raise ValueError(f"threads must be >= 1, got {self.threads}")

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.x_range, self.y_range, self.voxel_size)


def default_suite(seed: int = 0) -> List[CorruptionConfig]:
    """The six-corruption suite with default parameters."""
    return [
        CorruptionConfig("beam_missing", {"n_drop": 16}, seed),
        CorruptionConfig("motion_blur", {"sigma": 0.2}, seed),
        CorruptionConfig(
            "fog", {"alpha": 0.06, "beta": 0.05, "noise_floor": 0.01}, seed
        ),
        CorruptionConfig("snow", {"rate": 0.05, "particle_radius": 0.02}, seed),
        CorruptionConfig("crosstalk", {"fraction": 0.01, "sigma": 3.0}, seed),
        CorruptionConfig(
            "cross_sensor",
            {"keep_every_kth_beam": 2, "point_subsample_ratio": 0.5},
            seed,
        ),
    ]


@dataclass
class FrameOutcome:
    """One frame under one condition: losses, detections, artifacts."""

    frame_id: str
    condition: str
    losses: Dict[str, float]
    detections: Tuple[BBox3D, ...]
    n_decoded: int
    tensors: Optional[dict] = None


@dataclass
class PipelineResult:
    """Aggregated pipeline outputs over all frames and conditions."""

    report: RobustnessReport
    loss_means: Dict[str, Dict[str, float]]
    outcomes: List[FrameOutcome]
    frame_ids: List[str]
    elapsed_seconds: float

    def qualitative_ordering(self, iou_thr: float) -> List[Tuple[str, float]]:
        """Corruption kinds sorted by descending CE at one threshold."""
        ces = self.report.ce_per_corruption
        return sorted(
            ((kind, ces[kind][iou_thr]) for kind in ces),
            key=lambda item: -item[1],
        )


def _corrupt_clouds(
    scene: Scene, config: Optional[CorruptionConfig], options: PipelineOptions, frame_id: str
) -> Dict[str, PointCloud]:
    clouds = {}
    for agent_id in sorted(scene.agents):
        cloud = scene.agents[agent_id].cloud
        if config is not None:
            seed = derive_seed(options.seed, config.seed, frame_id, agent_id)
            cloud = config.build(seed=seed).transform(cloud)
        clouds[agent_id] = cloud
    return clouds


def _encode_in_ego(
    scene: Scene, clouds: Dict[str, PointCloud], grid: GridSpec
) -> Dict[str, FeatureMap]:
    """Project each agent's cloud to the ego frame and pillarize."""
    ego_pose = scene.ego.pose
    maps = {}
    for agent_id, cloud in clouds.items():
        moved = transform_points(cloud, scene.agents[agent_id].pose, ego_pose)
        maps[agent_id] = pillarize(moved, grid)
    return maps


def _agent_order(scene: Scene) -> List[str]:
    return [scene.ego_id, *scene.neighbor_ids()]


def _fuse(scene: Scene, maps: Dict[str, FeatureMap], options: PipelineOptions):
    order = _agent_order(scene)
    return fuse_attention(
        maps[order[0]], [maps[a] for a in order[1:]], options.scales
    )


def _decoy_boxes(scene: Scene, options: PipelineOptions) -> List[BBox3D]:
    """Far-field constant-score decoys, placed in the world frame.

    True objects live near the world origin, so world-frame radius
    ``decoy_radius`` keeps decoys disjoint from every ground-truth box.
    """
    world = Pose.identity()
    ego_pose = scene.ego.pose
    decoys = []
    for k in range(options.n_decoys):
        angle = 2.0 * math.pi * (k + 0.5) / options.n_decoys
        center = np.array(
            [
                options.decoy_radius * math.cos(angle),
                options.decoy_radius * math.sin(angle),
                CAR_SIZE[2] / 2.0,
            ]
        )
        box = BBox3D(center, np.array(CAR_SIZE), 0.0, score=options.decoy_score)
        decoys.append(transform_box(box, world, ego_pose))
    return decoys


def _oracle_detections(
    scene: Scene,
    student_ego_clouds: Sequence[PointCloud],
    options: PipelineOptions,
) -> Tuple[BBox3D, ...]:
    merged = aggregate([c.strip_semantic() for c in student_ego_clouds])
    detections = []
    for box in scene.gt_boxes:
        count = int(points_in_box(merged, box).sum())
        if count == 0:
            continue
        score = 1.0 - math.exp(-count / options.density_tau)
        detections.append(box.with_score(score))
    detections.extend(_decoy_boxes(scene, options))
    return tuple(nms(detections, options.nms_iou, options.conf_thr))


def decode_head_boxes(
    cls_map: np.ndarray,
    reg_map: np.ndarray,
    grid: GridSpec,
    conf_thr: float = 0.25,
    max_detections: int = 200,
) -> List[BBox3D]:
    """Turn head output maps into scored boxes through car-sized anchors.

    Anchor yaws alternate (0, pi/2, ...) over the anchor axis; regression
    channels are (dx, dy, z, dw, dl, dh, dyaw) with offsets in cells and
    sizes as clipped log-scales of the anchor size.
    """
    scores = expit(cls_map)
    keep = np.argwhere(scores >= conf_thr)
    if keep.shape[0] > max_detections:
        order = np.argsort(-scores[tuple(keep.T)], kind="stable")[:max_detections]
        keep = keep[order]
    voxel = grid.voxel_size
    boxes = []
    for h, w, a in keep:
        reg = reg_map[h, w, a]
        cx, cy = grid.cell_center(h, w)
        center = np.array([cx + reg[0] * voxel, cy + reg[1] * voxel, reg[2]])
        size = np.asarray(CAR_SIZE) * np.exp(np.clip(reg[3:6], -2.0, 2.0))
        yaw = ANCHOR_YAWS[a % len(ANCHOR_YAWS)] + reg[6]
        boxes.append(BBox3D(center, size, yaw, score=float(scores[h, w, a])))
    return boxes


def _detect(
    scene: Scene,
    condition: str,
    frame_id: str,
    student_ego_clouds: Sequence[PointCloud],
    fused_student: FeatureMap,
    options: PipelineOptions,
    head_seed: int,
) -> Tuple[BBox3D, ...]:
    if options.detector == "oracle":
        return _oracle_detections(scene, student_ego_clouds, options)
    if options.detector == "head":
        cls_map, reg_map = detect_head(fused_student, options.anchors, head_seed)
        boxes = decode_head_boxes(cls_map, reg_map, options.grid, options.conf_thr)
        return tuple(nms(boxes, options.nms_iou, options.conf_thr))
    path = os.path.join(options.predictions_dir, condition, f"{frame_id}.yaml")
    if not os.path.exists(path):
        raise FileNotFoundError(
            f"frame {frame_id}: prediction file {path} not found"
        )
    return read_predictions(path)


def run_frame(
    scene: Scene,
    frame_id: str,
    suite: Sequence[CorruptionConfig],
    options: PipelineOptions,
) -> List[FrameOutcome]:
    """Evaluate one scene under the clean condition plus every suite entry."""
    scene = gate_by_range(scene, options.comm_range)
    grid = options.grid
    order = _agent_order(scene)
    head_seed = derive_seed(options.seed, "heads")

    if options.teacher_mode == "dense":
        teacher_clouds = make_teacher(scene)
    else:
        teacher_clouds = {a: scene.agents[a].cloud for a in scene.agents}
    teacher_maps = _encode_in_ego(scene, teacher_clouds, grid)
    teacher_fused = _fuse(scene, teacher_maps, options)
    cls_teacher, reg_teacher = detect_head(teacher_fused, options.anchors, head_seed)
    mask = foreground_mask(scene.gt_boxes, grid)
    masks = [mask] * len(order)

    if options.recon_source == "teacher":
        recon_cloud = build_multiview(scene).strip_semantic()
    else:
        recon_cloud = None  # per-condition student aggregate

    outcomes = []
    conditions: List[Tuple[str, Optional[CorruptionConfig]]] = [(CLEAN, None)]
    conditions.extend((cfg.kind, cfg) for cfg in suite)
    for condition, config in conditions:
        student_clouds = _corrupt_clouds(scene, config, options, frame_id)
        student_maps = _encode_in_ego(scene, student_clouds, grid)
        student_fused = _fuse(scene, student_maps, options)
        ego_pose = scene.ego.pose
        student_ego_clouds = [
            transform_points(student_clouds[a], scene.agents[a].pose, ego_pose)
            for a in order
        ]

        losses: Dict[str, float] = {}
        tensors: Optional[dict] = None
        n_decoded = 0
        if options.with_losses:
            l_dae = loss_dae(
                [teacher_maps[a] for a in order],
                [student_maps[a] for a in order],
                masks,
            )
            l_daf = loss_daf(teacher_fused, student_fused)
            cls_student, reg_student = detect_head(
                student_fused, options.anchors, head_seed
            )
            l_dap = loss_dap(cls_teacher, cls_student, reg_teacher, reg_student)
            l_kd = loss_kd(l_dae, l_daf, l_dap)
            target_cloud = (
                recon_cloud
                if recon_cloud is not None
                else aggregate([c.strip_semantic() for c in student_ego_clouds])
            )
            target = build_recon_target(target_cloud, grid)
            voxelgrid = recon_head(student_fused, head_seed)
            l_m = loss_occupancy(voxelgrid.v_m, target)
            l_o = loss_offsets(voxelgrid.o_p, voxelgrid.v_m, target)
            l_rec = loss_recon(l_m, l_o)
            decoded = decode_points(voxelgrid)
            n_decoded = len(decoded)
            losses = {
                "l_dae": l_dae.value,
                "l_daf": l_daf.value,
                "l_dap": l_dap.value,
                "l_kd": l_kd.value,
                "l_m": l_m.value,
                "l_o": l_o.value,
                "l_rec": l_rec.value,
                "l_detect": options.l_detect,
                "l_total": options.l_detect + l_kd.value + l_rec.value,
            }
            if options.keep_tensors:
                tensors = {
                    "teacher_maps": [teacher_maps[a] for a in order],
                    "student_maps": [student_maps[a] for a in order],
                    "masks": masks,
                    "teacher_fused": teacher_fused,
                    "student_fused": student_fused,
                    "cls_teacher": cls_teacher,
                    "cls_student": cls_student,
                    "reg_teacher": reg_teacher,
                    "reg_student": reg_student,
                    "voxelgrid": voxelgrid,
                    "recon_target": target,
                    "decoded": decoded,
                }
        detections = _detect(
            scene,
            condition,
            frame_id,
            student_ego_clouds,
            student_fused,
            options,
            head_seed,
        )
        outcomes.append(
            FrameOutcome(frame_id, condition, losses, detections, n_decoded, tensors)
        )
    return outcomes


def _frame_worker(args) -> Tuple[str, List[FrameOutcome]]:
    path, suite, options = args
    manifest = read_manifest(path)
    try:
        scene = manifest.load_scene(os.path.dirname(os.path.abspath(path)))
        return manifest.frame_id, run_frame(scene, manifest.frame_id, suite, options)
    except Exception as exc:
        raise RuntimeError(f"frame {manifest.frame_id}: {exc}") from exc


def run_pipeline(
    manifest_paths: Sequence[str],
    suite: Sequence[CorruptionConfig],
    options: PipelineOptions = PipelineOptions(),
) -> PipelineResult:
    """Run the full pipeline over manifests and aggregate a report.

    Frames are processed independently (``options.threads`` workers) and
    aggregated in frame-id order, so threaded and serial runs agree.
    """
    start = time.perf_counter()
    if not manifest_paths:
        raise ValueError("no manifest paths given")
    kinds = [cfg.kind for cfg in suite]
    if len(set(kinds)) != len(kinds):
        raise ValueError(f"duplicate corruption kinds in suite: {kinds}")

    jobs = [(path, suite, options) for path in manifest_paths]
    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            results = list(pool.map(_frame_worker, jobs))
    else:
        results = [_frame_worker(job) for job in jobs]

    by_frame = dict(results)
    if len(by_frame) != len(results):
        raise ValueError("duplicate frame ids across manifests")
    frame_ids = sorted(by_frame)

    manifests = {m.frame_id: m for m in (read_manifest(p) for p in manifest_paths)}
    gt = {fid: manifests[fid].gt_boxes for fid in frame_ids}
    conditions = [CLEAN, *kinds]
    detections: Dict[str, Dict[str, Tuple[BBox3D, ...]]] = {
        c: {} for c in conditions
    }
    outcomes: List[FrameOutcome] = []
    loss_sums: Dict[str, Dict[str, float]] = {c: {} for c in conditions}
    for fid in frame_ids:
        for outcome in by_frame[fid]:
            outcomes.append(outcome)
            detections[outcome.condition][fid] = outcome.detections
            sums = loss_sums[outcome.condition]
            for key, value in outcome.losses.items():
                sums[key] = sums.get(key, 0.0) + value

    n_frames = len(frame_ids)
    loss_means = {
        cond: {k: v / n_frames for k, v in sums.items()}
        for cond, sums in loss_sums.items()
    }

    def ap_for(condition: str) -> Dict[float, float]:
        dets = DetectionSet(detections[condition], gt)
        return {thr: average_precision(dets, thr) for thr in options.iou_thresholds}

    ap_clean = ap_for(CLEAN)
    ap_per_corruption = {kind: ap_for(kind) for kind in kinds}
    report = RobustnessReport.from_aps(ap_clean, ap_per_corruption)
    elapsed = time.perf_counter() - start
    return PipelineResult(report, loss_means, outcomes, frame_ids, elapsed)
