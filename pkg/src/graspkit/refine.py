"""Contact-driven width/depth refinement, reconstruction collision filtering and grasp-NMS."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .graspgen import (
    MAX_DEPTH,
    MAX_WIDTH,
    GraspPose,
    GripperModel,
    _as_surface,
    check_collisions,
    contact_offsets,
    find_contacts,
)
from .octree import Octree


@dataclass(frozen=True)
class RefinementConfig:
    gamma_min: float = 0.005
    gamma_max: float = 0.02
    nms_translation: float = 0.03
    nms_rotation: float = np.deg2rad(30.0)
    top_k: int = 50

    def __post_init__(self):
        if not 0.0 <= self.gamma_min < self.gamma_max:
            raise ValueError("need 0 <= gamma_min < gamma_max")
        if self.top_k < 1:
            raise ValueError("top_k must be >= 1")
        if self.nms_translation < 0 or self.nms_rotation < 0:
            raise ValueError("NMS thresholds must be non-negative")


def width_update(width: float, clearance: float, gamma_min: float, gamma_max: float) -> float:
    """Move both fingers so the smaller finger-to-contact gap lands in ``[gamma_min, gamma_max]``."""
    return width + 2.0 * (min(max(clearance, gamma_min), gamma_max) - clearance)


def refine_grasp(grasp: GraspPose, reconstruction, gripper: GripperModel | None = None,
                 cfg: RefinementConfig | None = None) -> GraspPose | None:
    """Adjust width and depth from the contacts found on ``reconstruction``.

    ``reconstruction`` is an :class:`Octree` with SDF and normals or a
    ``(points, normals)`` pair. Returns None when no contact pair exists.
    """
    g = gripper or GripperModel()
    cfg = cfg or RefinementConfig()
    contacts = find_contacts(grasp, reconstruction, g)
    if contacts is None:
        return None
    d_left, d_right, z_left, z_right = contact_offsets(grasp, contacts)
    w = width_update(grasp.width, min(d_left, d_right), cfg.gamma_min, cfg.gamma_max)
    d = float(np.clip(max(z_left, z_right), 0.0, MAX_DEPTH))
    w = float(np.clip(w, 0.0, MAX_WIDTH))
    return grasp.replace(width=w, depth=d)


def refine_grasps(grasps, reconstruction, gripper: GripperModel | None = None,
                  cfg: RefinementConfig | None = None, threads: int = 1) -> list[GraspPose | None]:
    """:func:`refine_grasp` for many grasps sharing one reconstruction (KD-tree cropped)."""
    g = gripper or GripperModel()
    grasps = list(grasps)
    pts, nrm = _as_surface(reconstruction)
    if len(pts) == 0:
        return [None] * len(grasps)
    tree = cKDTree(pts)

    def one(gr):
        c_local, r = g.reach_radius(gr.width, gr.depth)
        idx = np.sort(np.asarray(tree.query_ball_point(gr.anchor + gr.rotation @ c_local, r + 1e-9), dtype=np.int64))
        if len(idx) == 0:
            return None
        return refine_grasp(gr, (pts[idx], nrm[idx]), g, cfg)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, grasps))
    return [one(gr) for gr in grasps]


def filter_collisions(grasps, reconstruction, gripper: GripperModel | None = None, support_z=None) -> list[GraspPose]:
    """Drop grasps whose gripper boxes contain reconstruction points; order is kept."""
    grasps = list(grasps)
    if isinstance(reconstruction, Octree) and reconstruction.n_leaves == 0:
        geometry = np.zeros((0, 3))
    else:
        geometry = reconstruction
    hit = check_collisions(grasps, geometry, gripper, support_z=support_z)
    return [gr for gr, h in zip(grasps, hit) if not h]


def rotation_angle(Ra, Rb) -> np.ndarray:
    """Geodesic angle between rotations (broadcasting over leading axes)."""
    rel = np.einsum("...ji,...jk->...ik", Ra, Rb)
    cos = (np.trace(rel, axis1=-2, axis2=-1) - 1.0) / 2.0
    return np.arccos(np.clip(cos, -1.0, 1.0))


def grasp_nms(grasps, cfg: RefinementConfig | None = None) -> list[GraspPose]:
    """Greedy selection by descending ``graspness * quality``.

    A grasp is dropped when it is both closer than ``nms_translation`` and
    rotated less than ``nms_rotation`` from an already kept grasp.
    """
    cfg = cfg or RefinementConfig()
    grasps = list(grasps)
    if not grasps:
        return []
    scores = np.array([gr.score for gr in grasps])
    order = np.argsort(-scores, kind="stable")
    anchors = np.array([gr.anchor for gr in grasps])
    rots = np.array([gr.rotation for gr in grasps])
    kept: list[int] = []
    for i in order:
        if kept:
            k = np.asarray(kept)
            near = np.linalg.norm(anchors[k] - anchors[i], axis=1) < cfg.nms_translation
            if near.any() and np.any(rotation_angle(rots[k[near]], rots[i]) < cfg.nms_rotation):
                continue
        kept.append(int(i))
        if len(kept) == cfg.top_k:
            break
    return [grasps[i] for i in kept]
