"""Deterministic synthetic multi-agent scenes for desk-scale runs.

Agents sit on a circle around the origin facing inward, car-sized boxes
are placed in the inner disk with a minimum separation, and each agent's
cloud is ray-cast: elevation rings fanned over azimuth, each ray keeping
its nearest hit against the ground plane or a box (occlusion falls out of
the nearest-hit rule).  Ground hits carry reflectance 0.3, box hits 0.7,
and every point records its elevation ring as its beam index.  Clouds are
stored in each agent's own frame; ground-truth boxes in the ego frame.

Rays are cast against boxes shrunk by a small margin, so surface hits lie
strictly inside the annotated ground-truth boxes and containment is
stable under frame round trips.

Everything derives from one seed: the same spec and frame index
reproduce the scene bit-identically.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from .pcio import AgentEntry, FrameManifest, write_cloud, write_manifest
from .rng import derive_rng
from .scene import Agent, BBox3D, PointCloud, Pose, Scene, transform_box

__all__ = ["SynthSpec", "make_scene", "write_frames", "GROUND_REFL", "OBJECT_REFL"]

GROUND_REFL = 0.3
OBJECT_REFL = 0.7

# Physical surfaces are shrunk by this much per dimension relative to the
# annotated boxes, keeping surface hits strictly interior.
BOX_MARGIN = 1e-3

CAR_SIZE = (4.5, 1.9, 1.6)


@dataclass(frozen=True)
class SynthSpec:
    """Scene-generator configuration."""

    n_agents: int = 3
    n_objects: int = 4
    n_beams: int = 64
    points_per_beam: int = 256
    seed: int = 0
    circle_radius: float = 20.0
    object_radius: float = 13.0
    min_separation: float = 6.0
    sensor_height: float = 1.8
    max_range: float = 60.0

    def __post_init__(self):
        if self.n_agents < 1:
            raise ValueError(f"n_agents must be >= 1, got {self.n_agents}")
        if self.n_objects < 0:
            raise ValueError(f"n_objects must be >= 0, got {self.n_objects}")
        if self.n_beams < 1 or self.points_per_beam < 1:
            raise ValueError("n_beams and points_per_beam must be >= 1")


def _place_boxes(spec: SynthSpec, frame_index: int) -> List[BBox3D]:
    """Sample separated car boxes in the inner disk, in the world frame."""
    rng = derive_rng(spec.seed, "synth", frame_index, "boxes")
    centers: List[np.ndarray] = []
    boxes: List[BBox3D] = []
    attempts = 0
    while len(boxes) < spec.n_objects:
        if attempts > 1000 * max(spec.n_objects, 1):
            raise RuntimeError(
                f"could not place {spec.n_objects} boxes with separation "
                f"{spec.min_separation} in radius {spec.object_radius}"
            )
        attempts += 1
        radius = spec.object_radius * math.sqrt(rng.uniform())
        angle = rng.uniform(0.0, 2.0 * math.pi)
        yaw = rng.uniform(-math.pi, math.pi)
        center = np.array(
            [radius * math.cos(angle), radius * math.sin(angle), CAR_SIZE[2] / 2.0]
        )
        if centers and min(
            float(np.linalg.norm(center[:2] - c[:2])) for c in centers
        ) < spec.min_separation:
            continue
        centers.append(center)
        boxes.append(BBox3D(center, np.array(CAR_SIZE), yaw))
    return boxes


def _ray_directions(spec: SynthSpec) -> np.ndarray:
    """(n_beams * points_per_beam, 3) unit directions, beam-major order."""
    elevations = np.linspace(math.radians(-30.0), math.radians(-2.0), spec.n_beams)
    azimuths = np.linspace(0.0, 2.0 * math.pi, spec.points_per_beam, endpoint=False)
    el = np.repeat(elevations, spec.points_per_beam)
    az = np.tile(azimuths, spec.n_beams)
    return np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=1
    )


def _cast_rays(
    origin: np.ndarray, dirs: np.ndarray, boxes: List[BBox3D], max_range: float
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nearest hit per ray against ground plane and shrunk box slabs.

    Returns (hit mask, world hit points, reflectance) over the rays.
    """
    n = dirs.shape[0]
    t_best = np.full(n, np.inf)
    refl = np.zeros(n)
    down = dirs[:, 2] < 0
    t_ground = np.full(n, np.inf)
    t_ground[down] = -origin[2] / dirs[down, 2]
    ground_hit = down & (t_ground <= max_range)
    t_best[ground_hit] = t_ground[ground_hit]
    refl[ground_hit] = GROUND_REFL
    for box in boxes:
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        o_local = (origin - box.center) @ rot
        d_local = dirs @ rot
        half = np.asarray(box.size) / 2.0 - BOX_MARGIN / 2.0
        with np.errstate(divide="ignore", invalid="ignore"):
            t_lo = (-half[None, :] - o_local[None, :]) / d_local
            t_hi = (half[None, :] - o_local[None, :]) / d_local
        t_min = np.minimum(t_lo, t_hi)
        t_max = np.maximum(t_lo, t_hi)
        # Rays parallel to a slab axis hit iff the origin lies inside it.
        parallel = d_local == 0.0
        inside = np.abs(o_local[None, :]) <= half[None, :]
        t_min = np.where(parallel, np.where(inside, -np.inf, np.inf), t_min)
        t_max = np.where(parallel, np.where(inside, np.inf, -np.inf), t_max)
        t_near = t_min.max(axis=1)
        t_far = t_max.min(axis=1)
        hit = (t_near <= t_far) & (t_near > 1e-6) & (t_near <= max_range)
        better = hit & (t_near < t_best)
        t_best[better] = t_near[better]
        refl[better] = OBJECT_REFL
    mask = np.isfinite(t_best)
    points = origin[None, :] + t_best[mask, None] * dirs[mask]
    return mask, points, refl[mask]


def make_scene(spec: SynthSpec, frame_index: int = 0) -> Scene:
    """Build one deterministic scene; agent 0 is the ego."""
    boxes_world = _place_boxes(spec, frame_index)
    dirs = _ray_directions(spec)
    beam_ids = np.repeat(
        np.arange(spec.n_beams, dtype=np.int32), spec.points_per_beam
    )
    agents = {}
    poses = []
    for i in range(spec.n_agents):
        angle = 2.0 * math.pi * i / spec.n_agents
        position = np.array(
            [
                spec.circle_radius * math.cos(angle),
                spec.circle_radius * math.sin(angle),
                spec.sensor_height,
            ]
        )
        pose = Pose.from_yaw(angle + math.pi, position)
        poses.append(pose)
        mask, world_pts, refl = _cast_rays(position, dirs, boxes_world, spec.max_range)
        local = (world_pts - pose.translation) @ pose.rotation
        cloud = PointCloud(local, refl, beam=beam_ids[mask])
        agents[f"agent_{i}"] = Agent(pose, cloud)
    ego_pose = poses[0]
    world = Pose.identity()
    gt_boxes = tuple(transform_box(b, world, ego_pose) for b in boxes_world)
    return Scene("agent_0", agents, gt_boxes)


def write_frames(spec: SynthSpec, n_frames: int, out_dir: str) -> List[str]:
    """Generate frames and write clouds plus manifests under ``out_dir``.

    Returns the manifest paths in frame order.  Frame k uses ``spec.seed``
    with frame index k, so outputs are reproducible file by file.
    """
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k in range(n_frames):
        scene = make_scene(spec, k)
        frame_id = f"{k:04d}"
        entries = []
        for agent_id in sorted(scene.agents):
            cloud_name = f"cloud_{frame_id}_{agent_id}.dspc"
            write_cloud(scene.agents[agent_id].cloud, os.path.join(out_dir, cloud_name))
            entries.append(
                AgentEntry(
                    agent_id, scene.agents[agent_id].pose, cloud_name, spec.n_beams
                )
            )
        manifest = FrameManifest(frame_id, scene.ego_id, tuple(entries), scene.gt_boxes)
        manifest_path = os.path.join(out_dir, f"frame_{frame_id}.yaml")
        write_manifest(manifest, manifest_path)
        paths.append(manifest_path)
    return paths
