"""Multi-agent scene model: point clouds, rigid poses, oriented boxes.

All types are immutable value objects (arrays are copied on construction and
marked read-only), and every operation is a pure function, so scenes can be
processed in parallel across frames without shared state.

Conventions:
  * coordinates are meters, right-handed, z up;
  * a pose maps agent-local coordinates to the world frame (``p_world =
    R @ p_local + t``);
  * boxes are yaw-only: ``size = (w, l, h)`` with ``w`` along the box x axis
    and ``l`` along the box y axis, rotated about z by ``yaw``;
  * box containment uses closed intervals, so boundary points count as
    inside (this makes semantic painting of boundary points deterministic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .validation import check_array, check_finite, check_unit_interval

__all__ = [
    "PointCloud",
    "Pose",
    "BBox3D",
    "Agent",
    "Scene",
    "transform_points",
    "transform_box",
    "aggregate",
    "gate_by_range",
    "points_in_box",
    "points_in_any_box",
]

_ORTHO_TOL = 1e-9


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = arr.copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class PointCloud:
    """A LiDAR return set.

    Attributes:
        xyz: (N, 3) float64 coordinates, meters.
        reflectance: (N,) float64 in [0, 1].
        semantic: optional (N,) uint8 in {0, 1}; present iff the cloud has
            been painted with per-point object indicators.  Either every
            point carries an indicator or none does.
        beam: optional (N,) int32 beam (elevation ring) indices.
    """

    xyz: np.ndarray
    reflectance: np.ndarray
    semantic: Optional[np.ndarray] = None
    beam: Optional[np.ndarray] = None

    def __post_init__(self):
        xyz = check_array(self.xyz, "xyz", shape=(None, 3))
        check_finite(xyz, "xyz")
        n = xyz.shape[0]
        refl = check_array(self.reflectance, "reflectance", shape=(n,))
        check_finite(refl, "reflectance")
        check_unit_interval(refl, "reflectance")
        object.__setattr__(self, "xyz", _freeze(xyz))
        object.__setattr__(self, "reflectance", _freeze(refl))
        if self.semantic is not None:
            sem = check_array(self.semantic, "semantic", shape=(n,), dtype=np.uint8)
            if sem.size and not np.all((sem == 0) | (sem == 1)):
                raise ValueError("semantic indicators must be 0 or 1")
            object.__setattr__(self, "semantic", _freeze(sem))
        if self.beam is not None:
            beam = check_array(self.beam, "beam", shape=(n,), dtype=np.int32)
            if beam.size and beam.min() < 0:
                raise ValueError("beam indices must be non-negative")
            object.__setattr__(self, "beam", _freeze(beam))

    def __len__(self) -> int:
        return self.xyz.shape[0]

    @property
    def arity(self) -> int:
        """4 for plain (x, y, z, r) clouds, 5 once painted."""
        return 5 if self.semantic is not None else 4

    @property
    def has_beams(self) -> bool:
        return self.beam is not None

    def with_xyz(self, xyz: np.ndarray) -> "PointCloud":
        return replace(self, xyz=xyz)

    def with_reflectance(self, reflectance: np.ndarray) -> "PointCloud":
        return replace(self, reflectance=reflectance)

    def with_semantic(self, semantic: np.ndarray) -> "PointCloud":
        return replace(self, semantic=semantic)

    def with_beam(self, beam: np.ndarray) -> "PointCloud":
        return replace(self, beam=beam)

    def strip_semantic(self) -> "PointCloud":
        return PointCloud(self.xyz, self.reflectance, None, self.beam)

    def take(self, indices) -> "PointCloud":
        """Select points by index array or boolean mask, preserving order."""
        indices = np.asarray(indices)
        return PointCloud(
            self.xyz[indices],
            self.reflectance[indices],
            None if self.semantic is None else self.semantic[indices],
            None if self.beam is None else self.beam[indices],
        )

    @staticmethod
    def empty(arity: int = 4, with_beams: bool = False) -> "PointCloud":
        return PointCloud(
            np.zeros((0, 3)),
            np.zeros(0),
            np.zeros(0, dtype=np.uint8) if arity == 5 else None,
            np.zeros(0, dtype=np.int32) if with_beams else None,
        )


@dataclass(frozen=True, eq=False)
class Pose:
    """SE(3) rigid transform of an agent in the world frame."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rot = check_array(self.rotation, "rotation", shape=(3, 3))
        check_finite(rot, "rotation")
        trans = check_array(self.translation, "translation", shape=(3,))
        check_finite(trans, "translation")
        err = np.abs(rot.T @ rot - np.eye(3)).max()
        if err > _ORTHO_TOL:
            raise ValueError(
                f"rotation is not orthonormal (max deviation {err:.3e})"
            )
        det = np.linalg.det(rot)
        if abs(det - 1.0) > _ORTHO_TOL:
            raise ValueError(f"rotation must have determinant +1, got {det!r}")
        object.__setattr__(self, "rotation", _freeze(rot))
        object.__setattr__(self, "translation", _freeze(trans))

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_yaw(yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return Pose(rot, np.asarray(translation, dtype=np.float64))

    def equals(self, other: "Pose") -> bool:
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    yaw = math.fmod(float(yaw), 2.0 * math.pi)
    if yaw <= -math.pi:
        yaw += 2.0 * math.pi
    elif yaw > math.pi:
        yaw -= 2.0 * math.pi
    return yaw


@dataclass(frozen=True, eq=False)
class BBox3D:
    """Oriented 3D box ``(x, y, z, w, l, h, yaw)`` with class id and score."""

    center: np.ndarray
    size: np.ndarray
    yaw: float
    class_id: int = 0
    score: Optional[float] = None

    def __post_init__(self):
        center = check_array(self.center, "center", shape=(3,))
        check_finite(center, "center")
        size = check_array(self.size, "size", shape=(3,))
        check_finite(size, "size")
        if not np.all(size > 0):
            raise ValueError(f"box size components must be > 0, got {size}")
        object.__setattr__(self, "center", _freeze(center))
        object.__setattr__(self, "size", _freeze(size))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))
        object.__setattr__(self, "class_id", int(self.class_id))
        if self.score is not None:
            score = float(self.score)
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"score must be in [0, 1], got {score}")
            object.__setattr__(self, "score", score)

    def with_score(self, score: float) -> "BBox3D":
        return BBox3D(self.center, self.size, self.yaw, self.class_id, score)

    def corners_bev(self) -> np.ndarray:
        """(4, 2) world-frame corners of the box footprint, counterclockwise."""
        w2, l2 = self.size[0] / 2.0, self.size[1] / 2.0
        local = np.array([[w2, l2], [-w2, l2], [-w2, -l2], [w2, -l2]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + self.center[:2]


@dataclass(frozen=True, eq=False)
class Agent:
    """One agent's pose (world frame) and raw cloud (its own frame)."""

    pose: Pose
    cloud: PointCloud


@dataclass(frozen=True, eq=False)
class Scene:
    """A collaborative frame: ego agent, neighbors, ground-truth boxes.

    ``gt_boxes`` are expressed in the ego agent's frame.  Agent ids are
    strings; the mapping enforces uniqueness.
    """

    ego_id: str
    agents: Mapping[str, Agent]
    gt_boxes: Sequence[BBox3D] = field(default_factory=tuple)

    def __post_init__(self):
        agents = dict(self.agents)
        if self.ego_id not in agents:
            raise ValueError(f"ego agent {self.ego_id!r} missing from agents")
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))

    @property
    def ego(self) -> Agent:
        return self.agents[self.ego_id]

    def neighbor_ids(self) -> list:
        return sorted(k for k in self.agents if k != self.ego_id)


def transform_points(cloud: PointCloud, src: Pose, dst: Pose) -> PointCloud:
    """Re-express ``cloud`` from the ``src`` frame in the ``dst`` frame.

    Coordinates are mapped by ``dst^-1 . src``; reflectance, semantic
    indicators, and beam indices ride along unchanged.  When the two poses
    are identical the cloud is returned as-is (bit-exact identity).
    """
    if src.equals(dst):
        return cloud
    world = cloud.xyz @ src.rotation.T + src.translation
    local = (world - dst.translation) @ dst.rotation
    return cloud.with_xyz(local)


def _relative_yaw(src: Pose, dst: Pose) -> tuple:
    """Yaw angle and translation of ``dst^-1 . src``.

    Raises if the relative rotation is not a pure z rotation; tilted
    frames cannot carry yaw-only boxes.
    """
    rel_rot = dst.rotation.T @ src.rotation
    off_plane = max(
        abs(rel_rot[2, 2] - 1.0),
        abs(rel_rot[0, 2]),
        abs(rel_rot[1, 2]),
        abs(rel_rot[2, 0]),
        abs(rel_rot[2, 1]),
    )
    if off_plane > 1e-6:
        raise ValueError(
            "relative rotation between frames is not yaw-only; cannot "
            "transform a yaw-only box between tilted frames"
        )
    rel_trans = dst.rotation.T @ (src.translation - dst.translation)
    return math.atan2(rel_rot[1, 0], rel_rot[0, 0]), rel_rot, rel_trans


def transform_box(box: BBox3D, src: Pose, dst: Pose) -> BBox3D:
    """Re-express a yaw-only box from the ``src`` frame in the ``dst`` frame."""
    if src.equals(dst):
        return box
    yaw, rel_rot, rel_trans = _relative_yaw(src, dst)
    center = rel_rot @ box.center + rel_trans
    return BBox3D(center, box.size, box.yaw + yaw, box.class_id, box.score)


def aggregate(clouds: Sequence[PointCloud]) -> PointCloud:
    """Concatenate clouds in a common frame, preserving input order.

    All non-empty inputs must share the same tuple arity (painted clouds
    cannot be mixed with unpainted ones).  Beam indices survive only when
    every non-empty input carries them.
    """
    clouds = [c for c in clouds if len(c) > 0]
    if not clouds:
        return PointCloud.empty()
    arities = {c.arity for c in clouds}
    if len(arities) > 1:
        raise ValueError(
            "cannot aggregate clouds of mixed arity (painted with unpainted)"
        )
    keep_beams = all(c.has_beams for c in clouds)
    return PointCloud(
        np.concatenate([c.xyz for c in clouds]),
        np.concatenate([c.reflectance for c in clouds]),
        np.concatenate([c.semantic for c in clouds]) if arities == {5} else None,
        np.concatenate([c.beam for c in clouds]) if keep_beams else None,
    )


def gate_by_range(scene: Scene, radius: float) -> Scene:
    """Drop neighbors farther than ``radius`` meters from the ego agent.

    Distance is the full 3D Euclidean distance between pose translations;
    the ego agent is always kept.
    """
    if not radius > 0:
        raise ValueError(f"communication radius must be > 0, got {radius}")
    ego_pos = scene.ego.pose.translation
    kept = {
        aid: agent
        for aid, agent in scene.agents.items()
        if aid == scene.ego_id
        or np.linalg.norm(agent.pose.translation - ego_pos) <= radius
    }
    return Scene(scene.ego_id, kept, scene.gt_boxes)


def points_in_box(cloud: PointCloud, box: BBox3D) -> np.ndarray:
    """Boolean mask of the points inside ``box`` (closed boundaries).

    A point is inside iff, expressed in the box frame (translate by
    ``-center``, rotate by ``-yaw`` about z), each coordinate magnitude is
    at most the corresponding half extent.

    The arithmetic is kept to elementwise expressions (no matrix products)
    so that a scalar reimplementation of the same formula produces
    bit-identical results.
    """
    dx = cloud.xyz[:, 0] - box.center[0]
    dy = cloud.xyz[:, 1] - box.center[1]
    dz = cloud.xyz[:, 2] - box.center[2]
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return (
        (np.abs(local_x) <= box.size[0] / 2.0)
        & (np.abs(local_y) <= box.size[1] / 2.0)
        & (np.abs(dz) <= box.size[2] / 2.0)
    )


def points_in_any_box(cloud: PointCloud, boxes: Iterable[BBox3D]) -> np.ndarray:
    """Boolean mask of the points inside at least one of ``boxes``."""
    mask = np.zeros(len(cloud), dtype=bool)
    for box in boxes:
        mask |= points_in_box(cloud, box)
    return mask
