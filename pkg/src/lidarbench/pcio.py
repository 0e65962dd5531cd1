"""File formats: binary point clouds, frame manifests, corruption suites.

Point clouds use a small binary container (magic ``DSPC``):

  ===========  ====  =====================================================
  field        type  meaning
  ===========  ====  =====================================================
  magic        4s    b"DSPC"
  version      u16   format version, currently 1
  arity        u8    values per record: 4 (x y z r) or 5 (x y z r s)
  flags        u8    bit 0: per-point beam indices appended
  count        u64   number of points
  records      f32   count x arity little-endian values
  beams        u16   count indices, only if flag bit 0 is set
  ===========  ====  =====================================================

Reading then rewriting a valid file is byte-identical: coordinates are
stored as f32 and survive the f32 -> f64 -> f32 round trip exactly.

Frame manifests and corruption suites are YAML documents.  A manifest
names the frame, its agents (pose, cloud file, beam count), the ego agent
and the ego-frame ground-truth boxes; rotations may be given as a 3x3
matrix or a unit quaternion (w, x, y, z, unit within 1e-6).
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import yaml

from .corruption import CorruptionConfig
from .scene import Agent, BBox3D, PointCloud, Pose, Scene

__all__ = [
    "read_cloud",
    "write_cloud",
    "AgentEntry",
    "FrameManifest",
    "read_manifest",
    "write_manifest",
    "read_suite",
    "write_suite",
    "read_predictions",
    "write_predictions",
    "quaternion_to_rotation",
]

_HEADER = struct.Struct("<4sHBBQ")
_MAGIC = b"DSPC"
_VERSION = 1
_FLAG_BEAMS = 0x01


def write_cloud(cloud: PointCloud, path: str) -> None:
    """Write a cloud to the binary container described in the module docs."""
    arity = cloud.arity
    flags = _FLAG_BEAMS if cloud.has_beams else 0
    columns = [cloud.xyz, cloud.reflectance[:, None]]
    if cloud.semantic is not None:
        columns.append(cloud.semantic[:, None].astype(np.float64))
    records = np.concatenate(columns, axis=1).astype("<f4") if len(cloud) else np.zeros(
        (0, arity), dtype="<f4"
    )
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, arity, flags, len(cloud)))
        fh.write(records.tobytes())
        if cloud.has_beams:
            fh.write(cloud.beam.astype("<u2").tobytes())


def read_cloud(path: str) -> PointCloud:
    """Read a binary cloud file, validating header and payload size."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ValueError(f"{path}: truncated header ({len(raw)} bytes)")
    magic, version, arity, flags, count = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"{path}: bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"{path}: unsupported version {version}")
    if arity not in (4, 5):
        raise ValueError(f"{path}: arity must be 4 or 5, got {arity}")
    if flags & ~_FLAG_BEAMS:
        raise ValueError(f"{path}: unknown flag bits 0x{flags:02x}")
    has_beams = bool(flags & _FLAG_BEAMS)
    expected = _HEADER.size + count * arity * 4 + (count * 2 if has_beams else 0)
    if len(raw) != expected:
        raise ValueError(
            f"{path}: payload size {len(raw)} does not match header "
            f"(expected {expected} bytes for {count} points, arity {arity})"
        )
    offset = _HEADER.size
    records = np.frombuffer(raw, dtype="<f4", count=count * arity, offset=offset)
    records = records.reshape(count, arity).astype(np.float64)
    offset += count * arity * 4
    beam: Optional[np.ndarray] = None
    if has_beams:
        beam = np.frombuffer(raw, dtype="<u2", count=count, offset=offset).astype(
            np.int32
        )
    semantic: Optional[np.ndarray] = None
    if arity == 5:
        values = records[:, 4]
        if not np.isin(values, (0.0, 1.0)).all():
            raise ValueError(f"{path}: semantic values must be 0 or 1")
        semantic = values.astype(np.uint8)
    return PointCloud(records[:, :3], records[:, 3], semantic, beam)


def quaternion_to_rotation(q: Sequence[float]) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion, unit within 1e-6.

    The quaternion is renormalized before conversion so the matrix is
    orthonormal to machine precision.
    """
    q = np.asarray(q, dtype=np.float64)
    if q.shape != (4,):
        raise ValueError(f"quaternion must have 4 components, got shape {q.shape}")
    norm = float(np.linalg.norm(q))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"quaternion norm {norm} deviates from 1 by more than 1e-6")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


@dataclass(frozen=True)
class AgentEntry:
    """One manifest row: agent id, world pose, cloud file, beam count."""

    agent_id: str
    pose: Pose
    cloud_path: str
    n_beams: int = 64

    def __post_init__(self):
        if self.n_beams < 1:
            raise ValueError(f"n_beams must be >= 1, got {self.n_beams}")


@dataclass(frozen=True)
class FrameManifest:
    """A frame: agents with pose and cloud files, ego id, GT boxes (ego frame)."""

    frame_id: str
    ego_id: str
    agents: Tuple[AgentEntry, ...]
    gt_boxes: Tuple[BBox3D, ...] = ()

    def __post_init__(self):
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"frame {self.frame_id}: duplicate agent ids")
        if sum(1 for i in ids if i == self.ego_id) != 1:
            raise ValueError(
                f"frame {self.frame_id}: ego id {self.ego_id!r} must match "
                f"exactly one agent, have {ids}"
            )
        object.__setattr__(self, "agents", tuple(self.agents))
        object.__setattr__(self, "gt_boxes", tuple(self.gt_boxes))

    def load_scene(self, base_dir: str) -> Scene:
        """Read the referenced cloud files and assemble a Scene."""
        agents: Dict[str, Agent] = {}
        for entry in self.agents:
            path = os.path.join(base_dir, entry.cloud_path)
            agents[entry.agent_id] = Agent(entry.pose, read_cloud(path))
        return Scene(self.ego_id, agents, self.gt_boxes)


def _pose_to_dict(pose: Pose) -> dict:
    return {
        "rotation": [[float(v) for v in row] for row in pose.rotation],
        "translation": [float(v) for v in pose.translation],
    }


def _pose_from_dict(data: dict, context: str) -> Pose:
    if "translation" not in data:
        raise ValueError(f"{context}: pose needs a translation")
    translation = np.asarray(data["translation"], dtype=np.float64)
    if "rotation" in data and "quaternion" in data:
        raise ValueError(f"{context}: give either rotation or quaternion, not both")
    if "rotation" in data:
        rotation = np.asarray(data["rotation"], dtype=np.float64)
    elif "quaternion" in data:
        rotation = quaternion_to_rotation(data["quaternion"])
    else:
        raise ValueError(f"{context}: pose needs a rotation or quaternion")
    return Pose(rotation, translation)


def _box_to_dict(box: BBox3D) -> dict:
    data = {
        "center": [float(v) for v in box.center],
        "size": [float(v) for v in box.size],
        "yaw": float(box.yaw),
        "class_id": int(box.class_id),
    }
    if box.score is not None:
        data["score"] = float(box.score)
    return data


def _box_from_dict(data: dict, context: str) -> BBox3D:
    for key in ("center", "size", "yaw"):
        if key not in data:
            raise ValueError(f"{context}: box needs {key!r}")
    return BBox3D(
        np.asarray(data["center"], dtype=np.float64),
        np.asarray(data["size"], dtype=np.float64),
        float(data["yaw"]),
        int(data.get("class_id", 0)),
        float(data["score"]) if "score" in data else None,
    )


def write_manifest(manifest: FrameManifest, path: str) -> None:
    data = {
        "frame_id": manifest.frame_id,
        "ego_id": manifest.ego_id,
        "agents": [
            {
                "agent_id": entry.agent_id,
                "pose": _pose_to_dict(entry.pose),
                "cloud_path": entry.cloud_path,
                "n_beams": entry.n_beams,
            }
            for entry in manifest.agents
        ],
        "gt_boxes": [_box_to_dict(box) for box in manifest.gt_boxes],
    }
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)


def read_manifest(path: str, check_files: bool = True) -> FrameManifest:
    """Parse a frame manifest; referenced cloud files must exist."""
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict):
        raise ValueError(f"{path}: manifest must be a mapping")
    for key in ("frame_id", "ego_id", "agents"):
        if key not in data:
            raise ValueError(f"{path}: manifest needs {key!r}")
    base_dir = os.path.dirname(os.path.abspath(path))
    agents: List[AgentEntry] = []
    for i, raw in enumerate(data["agents"]):
        context = f"{path}: agent {i}"
        for key in ("agent_id", "pose", "cloud_path"):
            if key not in raw:
                raise ValueError(f"{context} needs {key!r}")
        entry = AgentEntry(
            str(raw["agent_id"]),
            _pose_from_dict(raw["pose"], context),
            str(raw["cloud_path"]),
            int(raw.get("n_beams", 64)),
        )
        if check_files and not os.path.exists(os.path.join(base_dir, entry.cloud_path)):
            raise ValueError(f"{context}: cloud file {entry.cloud_path!r} not found")
        agents.append(entry)
    boxes = [
        _box_from_dict(raw, f"{path}: gt box {i}")
        for i, raw in enumerate(data.get("gt_boxes", []))
    ]
    return FrameManifest(str(data["frame_id"]), str(data["ego_id"]), tuple(agents), tuple(boxes))


def write_predictions(boxes: Sequence[BBox3D], path: str) -> None:
    """Write scored detection boxes for one frame (ego frame)."""
    for i, box in enumerate(boxes):
        if box.score is None:
            raise ValueError(f"prediction box {i} has no score")
    with open(path, "w") as fh:
        yaml.safe_dump({"boxes": [_box_to_dict(b) for b in boxes]}, fh, sort_keys=True)


def read_predictions(path: str) -> Tuple[BBox3D, ...]:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "boxes" not in data:
        raise ValueError(f"{path}: prediction file needs a top-level 'boxes' list")
    boxes = tuple(
        _box_from_dict(raw, f"{path}: box {i}") for i, raw in enumerate(data["boxes"])
    )
    for i, box in enumerate(boxes):
        if box.score is None:
            raise ValueError(f"{path}: box {i} has no score")
    return boxes


def write_suite(configs: Sequence[CorruptionConfig], path: str) -> None:
    data = {"suite": [c.to_dict() for c in configs]}
    with open(path, "w") as fh:
        yaml.safe_dump(data, fh, sort_keys=True)


def read_suite(path: str) -> List[CorruptionConfig]:
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if not isinstance(data, dict) or "suite" not in data:
        raise ValueError(f"{path}: suite file needs a top-level 'suite' list")
    return [CorruptionConfig.from_dict(entry) for entry in data["suite"]]
