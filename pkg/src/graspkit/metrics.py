"""Reconstruction metrics (Chamfer, F-score, normal consistency) and friction-sweep grasp AP."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyPointSet, MissingGroundTruth, MissingNormals
from .graspgen import GripperModel, check_collisions, find_contacts, friction_threshold
from .refine import RefinementConfig

FRICTION_VALUES = (0.2, 0.4, 0.6, 0.8, 1.0, 1.2)
F1_THRESHOLD = 0.01


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray
    normals: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", p)
        if self.normals is not None:
            n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if len(n) != len(p):
                raise ValueError("normals and points differ in length")
            if len(n) and np.max(np.abs(np.linalg.norm(n, axis=1) - 1.0)) > 1e-5:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", n)

    def __len__(self) -> int:
        return len(self.points)


def _nn(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return cKDTree(dst).query(src)


def _check(pd: PointSet, gt: PointSet) -> None:
    if len(pd) == 0 or len(gt) == 0:
        raise EmptyPointSet("both point sets must be non-empty")


def chamfer_distance(pd: PointSet, gt: PointSet) -> float:
    """Mean of the two directed mean nearest-neighbor distances, in millimeters."""
    _check(pd, gt)
    d_pg, _ = _nn(pd.points, gt.points)
    d_gp, _ = _nn(gt.points, pd.points)
    return 1000.0 * (0.5 * d_pg.mean() + 0.5 * d_gp.mean())


def precision_recall(pd: PointSet, gt: PointSet, eta: float = F1_THRESHOLD) -> tuple[float, float]:
    """Percent of predicted points within ``eta`` of the ground truth, and vice versa."""
    _check(pd, gt)
    d_pg, _ = _nn(pd.points, gt.points)
    d_gp, _ = _nn(gt.points, pd.points)
    return 100.0 * float(np.mean(d_pg < eta)), 100.0 * float(np.mean(d_gp < eta))


def f1_score(pd: PointSet, gt: PointSet, eta: float = F1_THRESHOLD) -> float:
    p, r = precision_recall(pd, gt, eta)
    if p + r == 0.0:
        return 0.0
    return 2.0 * p * r / (p + r)


def normal_consistency(pd: PointSet, gt: PointSet) -> float:
    _check(pd, gt)
    if pd.normals is None or gt.normals is None:
        raise MissingNormals("normal consistency needs normals on both sets")
    _, j = _nn(pd.points, gt.points)
    _, i = _nn(gt.points, pd.points)
    a = np.einsum("ij,ij->i", pd.normals, gt.normals[j]).mean()
    b = np.einsum("ij,ij->i", gt.normals, pd.normals[i]).mean()
    return float(0.5 * a + 0.5 * b)


# -- grasp AP ----------------------------------------------------------------------------------
@dataclass(frozen=True, eq=False)
class APReport:
    ap: float
    ap_by_mu: dict
    precision_at_k: list = field(default_factory=list)  # per scene: {mu: [p@1, p@2, ...]}
    per_scene: list = field(default_factory=list)  # per scene: {mu: AP}

    def to_dict(self) -> dict:
        return {
            "ap": self.ap,
            "ap_by_mu": {str(k): v for k, v in self.ap_by_mu.items()},
            "per_scene": [{str(k): v for k, v in s.items()} for s in self.per_scene],
        }


def precision_curve(correct) -> np.ndarray:
    """precision@k for k = 1..len(correct)."""
    c = np.asarray(correct, dtype=np.float64)
    return np.cumsum(c) / np.arange(1, len(c) + 1)


def grasp_validity(grasps, scene, gripper: GripperModel | None = None, collision_spacing: float = 0.003,
                   contact_spacing: float = 0.002, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth ``(collision_free, quality)`` of each grasp; quality is NaN without contacts.

    Contacts come from ``scene.surface_points(contact_spacing, seed)``, the
    same cloud label generation uses for a given seed.
    """
    g = gripper or GripperModel()
    grasps = list(grasps)
    free = ~check_collisions(grasps, scene.solid_points(collision_spacing), g, support_z=scene.support_z)
    pts, nrm, _ = scene.surface_points(contact_spacing, seed)
    tree = cKDTree(pts)
    quality = np.full(len(grasps), np.nan)
    for i, gr in enumerate(grasps):
        if not free[i]:
            continue
        c_local, r = g.reach_radius(gr.width, gr.depth)
        idx = np.sort(np.asarray(tree.query_ball_point(gr.anchor + gr.rotation @ c_local, r + 1e-9), dtype=np.int64))
        if len(idx) == 0:
            continue
        contacts = find_contacts(gr, (pts[idx], nrm[idx]), g)
        if contacts is None:
            continue
        u = contacts.left - contacts.right
        u = u / np.linalg.norm(u)
        quality[i] = min(float(contacts.left_normal @ u), float(-contacts.right_normal @ u))
    return free, quality


def grasp_ap(grasps_per_scene, scenes, gripper: GripperModel | None = None,
             cfg: RefinementConfig | None = None, frictions=FRICTION_VALUES, threads: int = 1,
             seed: int = 0) -> APReport:
    """Friction-sweep average precision over the top-ranked grasps of each scene.

    Grasps are taken in the given order (callers sort by score). A grasp is
    correct at friction ``mu`` when it is collision-free in the full scene and
    its ground-truth contact quality reaches ``cos(arctan(mu))``. AP at one
    ``mu`` is the mean of precision@k over ``k = 1..min(top_k, n)``; a scene
    without grasps scores 0.
    """
    cfg = cfg or RefinementConfig()
    grasps_per_scene = [list(gs) for gs in grasps_per_scene]
    scenes = list(scenes)
    if len(scenes) != len(grasps_per_scene):
        raise MissingGroundTruth(f"{len(grasps_per_scene)} grasp sets but {len(scenes)} scenes")
    for s in scenes:
        if s is None or not s.objects:
            raise MissingGroundTruth("scene without ground-truth meshes")

    def one(args):
        grasps, scene = args
        top = grasps[: cfg.top_k]
        curves, aps = {}, {}
        if not top:
            return {mu: [] for mu in frictions}, {mu: 0.0 for mu in frictions}
        free, q = grasp_validity(top, scene, gripper, seed=seed)
        for mu in frictions:
            ok = free & (np.nan_to_num(q, nan=-np.inf) >= friction_threshold(mu) - 1e-12)
            curve = precision_curve(ok)
            curves[mu] = curve.tolist()
            aps[mu] = 100.0 * float(curve.mean())
        return curves, aps

    jobs = list(zip(grasps_per_scene, scenes))
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(one, jobs))
    else:
        results = [one(j) for j in jobs]
    ap_by_mu = {mu: float(np.mean([r[1][mu] for r in results])) if results else 0.0 for mu in frictions}
    return APReport(
        ap=float(np.mean(list(ap_by_mu.values()))),
        ap_by_mu=ap_by_mu,
        precision_at_k=[r[0] for r in results],
        per_scene=[r[1] for r in results],
    )
