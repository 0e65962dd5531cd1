"""Teacher cloud construction for multi-agent distillation.

The teacher input for each agent is a densified version of its own cloud:
the agent keeps its raw background points bit-exactly, object regions are
replaced by the aggregate of every agent's points falling inside the
ground-truth boxes, and a 0/1 semantic channel marks object membership.

Box membership uses closed boundaries throughout: a point exactly on a box
face belongs to the object region.
"""

from __future__ import annotations

from typing import Dict, Sequence

import numpy as np

from .scene import (
    BBox3D,
    PointCloud,
    Scene,
    aggregate,
    points_in_any_box,
    transform_box,
    transform_points,
)

__all__ = [
    "build_multiview",
    "replace_object_regions",
    "paint",
    "make_teacher",
]


def build_multiview(scene: Scene) -> PointCloud:
    """Aggregate every agent's cloud in the ego frame.

    The ego cloud comes first bit-exactly (its transform is an identity
    fast path), followed by each neighbor's transformed cloud in sorted
    agent-id order.
    """
    ego_pose = scene.ego.pose
    clouds = [transform_points(scene.ego.cloud, ego_pose, ego_pose)]
    for agent_id in scene.neighbor_ids():
        agent = scene.agents[agent_id]
        clouds.append(transform_points(agent.cloud, agent.pose, ego_pose))
    return aggregate(clouds)


def replace_object_regions(
    sparse: PointCloud, dense: PointCloud, boxes: Sequence[BBox3D]
) -> PointCloud:
    """Swap the sparse cloud's object points for the dense cloud's.

    Output = sparse points outside every box (in input order, bit-exact)
    followed by dense points inside any box (in input order).  Both clouds
    must live in the same frame as ``boxes``.  With no boxes this returns
    ``sparse`` unchanged.
    """
    if len(boxes) == 0:
        return sparse
    background = sparse.take(~points_in_any_box(sparse, boxes))
    foreground = dense.take(points_in_any_box(dense, boxes))
    return aggregate([background, foreground])


def paint(cloud: PointCloud, boxes: Sequence[BBox3D]) -> PointCloud:
    """Attach a semantic channel: 1 inside any box, else 0.

    Replaces an existing semantic channel if present.
    """
    if len(boxes) == 0:
        mask = np.zeros(len(cloud), dtype=bool)
    else:
        mask = points_in_any_box(cloud, boxes)
    return cloud.with_semantic(mask.astype(np.uint8))


def make_teacher(scene: Scene) -> Dict[str, PointCloud]:
    """Build the per-agent teacher clouds for a scene.

    For each agent: project the ego-frame multiview aggregate and the
    ground-truth boxes into the agent's frame, replace the agent's object
    regions with the dense multiview points, and paint semantics.  The
    agent's own background points survive bit-exactly because the sparse
    side of the replacement is its untransformed raw cloud.
    """
    multiview = build_multiview(scene)
    ego_pose = scene.ego.pose
    teachers: Dict[str, PointCloud] = {}
    for agent_id in sorted(scene.agents):
        agent = scene.agents[agent_id]
        dense = transform_points(multiview, ego_pose, agent.pose)
        boxes = [transform_box(b, ego_pose, agent.pose) for b in scene.gt_boxes]
        merged = replace_object_regions(agent.cloud, dense, boxes)
        teachers[agent_id] = paint(merged, boxes)
    return teachers
