"""Parallel-jaw grasp representation, analytic label generation and label transfer.

Grasp frame convention: origin at the anchor point, ``x`` is the approach
direction (the view), ``y`` the closing direction and ``z = x cross y``. The
left finger sits at ``-y``, the right finger at ``+y``. Grasp depth ``d`` is
how far the finger tips travel past the anchor along ``x``.
"""
from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import DegenerateContacts
from .geometry import SurfaceSample, TriangleMesh, sample_surface, surface_cloud
from .octree import Octree, extract_surface

N_VIEWS = 300
N_ANGLES = 12
DEPTHS = (0.01, 0.02, 0.03, 0.04)
MAX_WIDTH = 0.10
MAX_DEPTH = 0.04
N_CANDIDATES = N_VIEWS * N_ANGLES * len(DEPTHS)
LABEL_RADIUS = 0.005


@dataclass(frozen=True)
class GripperModel:
    """Box-shaped two-finger gripper.

    ``finger_depth`` is the finger length along the approach axis,
    ``finger_thickness`` the finger extent along the closing axis and
    ``finger_height`` the extent along the third axis. A palm block of depth
    ``base_depth`` joins the fingers behind the closing region.
    """

    max_width: float = 0.10
    finger_depth: float = 0.06
    finger_thickness: float = 0.01
    finger_height: float = 0.02
    base_depth: float = 0.02

    def __post_init__(self):
        for name in ("max_width", "finger_depth", "finger_thickness", "finger_height", "base_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"gripper {name} must be positive")
        if self.finger_depth < MAX_DEPTH:
            raise ValueError("finger_depth must cover the depth range")

    @property
    def open_width(self) -> float:
        return min(self.max_width, MAX_WIDTH)

    def reach_radius(self, width: float, depth: float) -> tuple[np.ndarray, float]:
        """Local center and radius of a sphere enclosing all gripper boxes."""
        back = depth - self.finger_depth - self.base_depth
        center = np.array([(back + depth) / 2.0, 0.0, 0.0])
        half = np.array([(depth - back) / 2.0, width / 2.0 + self.finger_thickness, self.finger_height / 2.0])
        return center, float(np.linalg.norm(half))

    @classmethod
    def from_json(cls, path) -> "GripperModel":
        return cls(**json.loads(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("max_width", "finger_depth", "finger_thickness", "finger_height", "base_depth")}


def normalize_angle(angle: float) -> float:
    a = float(np.mod(angle, np.pi))
    return 0.0 if a >= np.pi else a


@dataclass(frozen=True)
class GraspPose:
    anchor: np.ndarray
    view: np.ndarray
    angle: float
    width: float
    depth: float
    graspness: float = 0.0
    quality: float = 0.0
    object_id: int = 0

    def __post_init__(self):
        anchor = np.asarray(self.anchor, dtype=np.float64).reshape(3)
        view = np.asarray(self.view, dtype=np.float64).reshape(3)
        if abs(np.linalg.norm(view) - 1.0) > 1e-6:
            raise ValueError("view must be a unit vector")
        if not 0.0 <= self.angle < np.pi:
            raise ValueError(f"angle {self.angle} outside [0, pi)")
        if not -1e-12 <= self.width <= MAX_WIDTH + 1e-12:
            raise ValueError(f"width {self.width} outside [0, {MAX_WIDTH}]")
        if not -1e-12 <= self.depth <= MAX_DEPTH + 1e-12:
            raise ValueError(f"depth {self.depth} outside [0, {MAX_DEPTH}]")
        anchor.setflags(write=False)
        view.setflags(write=False)
        object.__setattr__(self, "anchor", anchor)
        object.__setattr__(self, "view", view)
        for name in ("angle", "width", "depth", "graspness", "quality"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "object_id", int(self.object_id))

    @property
    def rotation(self) -> np.ndarray:
        """Columns: approach, closing, height axes in world frame."""
        return grasp_rotation(self.view, self.angle)

    @property
    def score(self) -> float:
        return self.graspness * self.quality

    def replace(self, **kw) -> "GraspPose":
        fields_ = {k: getattr(self, k) for k in self.__dataclass_fields__}
        fields_.update(kw)
        return GraspPose(**fields_)

    def to_dict(self) -> dict:
        return {
            "anchor": [float(x) for x in self.anchor],
            "view": [float(x) for x in self.view],
            "angle": self.angle,
            "width": self.width,
            "depth": self.depth,
            "graspness": self.graspness,
            "quality": self.quality,
            "object_id": self.object_id,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GraspPose":
        return cls(
            d["anchor"], d["view"], d["angle"], d["width"], d["depth"],
            d.get("graspness", 0.0), d.get("quality", 0.0), d.get("object_id", 0),
        )


@dataclass(frozen=True)
class ContactPair:
    left: np.ndarray
    right: np.ndarray
    left_normal: np.ndarray
    right_normal: np.ndarray


@dataclass(frozen=True, eq=False)
class GraspLabel:
    """Per-view graspness of one surface sample plus its best grasp.

    ``quality`` and ``width`` hold every candidate, shape ``(views, angles,
    depths)``, with NaN where the candidate collides or has no contacts.
    """

    graspness: np.ndarray
    best: GraspPose | None
    quality: np.ndarray | None = field(default=None, repr=False)
    width: np.ndarray | None = field(default=None, repr=False)


# -- candidate space -------------------------------------------------------------------
def fibonacci_views(n: int = N_VIEWS) -> np.ndarray:
    """``n`` near-uniform unit vectors on the sphere (golden-angle spiral)."""
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
    phi = i * np.pi * (3.0 - np.sqrt(5.0))
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def candidate_angles(n: int = N_ANGLES) -> np.ndarray:
    return np.arange(n) * np.pi / n


def grasp_rotation(view, angle) -> np.ndarray:
    """Rotation(s) whose columns are the approach, closing and height axes.

    Accepts a single view ``(3,)`` with scalar angle, or batches ``(n, 3)``
    and ``(n,)``.
    """
    v = np.asarray(view, dtype=np.float64)
    single = v.ndim == 1
    v = v.reshape(-1, 3)
    a = np.broadcast_to(np.asarray(angle, dtype=np.float64), (len(v),))
    x = v / np.linalg.norm(v, axis=1, keepdims=True)
    y0 = np.stack([-x[:, 1], x[:, 0], np.zeros(len(x))], axis=1)
    n = np.linalg.norm(y0, axis=1)
    y0[n < 1e-8] = (0.0, 1.0, 0.0)
    y0 /= np.linalg.norm(y0, axis=1, keepdims=True)
    z0 = np.cross(x, y0)
    c, s = np.cos(a)[:, None], np.sin(a)[:, None]
    y = c * y0 + s * z0
    z = -s * y0 + c * z0
    R = np.stack([x, y, z], axis=2)
    return R[0] if single else R


def enumerate_candidates(sample: SurfaceSample, gripper: GripperModel | None = None) -> list[GraspPose]:
    """All 300 x 12 x 4 candidates at a sample, view-major, then angle, then depth."""
    gripper = gripper or GripperModel()
    views = fibonacci_views()
    angles = candidate_angles()
    w = gripper.open_width
    anchor = np.asarray(sample.point, dtype=np.float64)
    out = []
    for v in views:
        for a in angles:
            for d in DEPTHS:
                out.append(GraspPose(anchor, v, a, w, d))
    return out


# -- collision ---------------------------------------------------------------------------
def _local(points, anchor, R) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - anchor) @ R


def _box_hits(local, width, depth, g: GripperModel) -> np.ndarray:
    """Per-point mask of points inside any gripper box (the closing region excluded)."""
    x, y, z = local[..., 0], local[..., 1], local[..., 2]
    half = width / 2.0
    inz = np.abs(z) <= g.finger_height / 2.0
    ay = np.abs(y)
    finger_col = inz & (ay > half) & (ay <= half + g.finger_thickness)
    center_col = inz & (ay <= half)
    back = depth - g.finger_depth - g.base_depth
    finger_x = (x >= back) & (x <= depth)
    base_x = (x >= back) & (x < depth - g.finger_depth)
    return (finger_col & finger_x) | (center_col & base_x)


def _plane_hit(anchor, R, width, depth, g: GripperModel, support_z) -> np.ndarray:
    """True where the lowest gripper box corner dips below ``support_z``."""
    R = np.asarray(R).reshape(-1, 3, 3)
    back = depth - g.finger_depth - g.base_depth
    r0, r1, r2 = R[:, 2, 0], R[:, 2, 1], R[:, 2, 2]
    low = (
        np.minimum(r0 * back, r0 * depth)
        - np.abs(r1) * (width / 2.0 + g.finger_thickness)
        - np.abs(r2) * g.finger_height / 2.0
    )
    return anchor[..., 2] + low < support_z - 1e-12


def _collision_points(geometry) -> np.ndarray:
    if isinstance(geometry, Octree):
        return geometry.centers
    pts = np.asarray(geometry, dtype=np.float64)
    return pts.reshape(-1, 3)


def check_collision(grasp: GraspPose, geometry, gripper: GripperModel | None = None, support_z=None) -> bool:
    """True if any geometry point lies inside a finger or the palm.

    ``geometry`` is an ``(N, 3)`` point array or an :class:`Octree` (leaf
    centers are used). Points between the fingers do not count.
    """
    g = gripper or GripperModel()
    pts = _collision_points(geometry)
    R = grasp.rotation
    if support_z is not None and bool(_plane_hit(grasp.anchor, R, grasp.width, grasp.depth, g, support_z)[0]):
        return True
    if len(pts) == 0:
        return False
    return bool(np.any(_box_hits(_local(pts, grasp.anchor, R), grasp.width, grasp.depth, g)))


def check_collisions(grasps, geometry, gripper: GripperModel | None = None, support_z=None) -> np.ndarray:
    """Batched :func:`check_collision` using a KD-tree crop around each grasp."""
    g = gripper or GripperModel()
    grasps = list(grasps)
    out = np.zeros(len(grasps), dtype=bool)
    if not grasps:
        return out
    pts = _collision_points(geometry)
    tree = cKDTree(pts) if len(pts) else None
    for i, gr in enumerate(grasps):
        R = gr.rotation
        if support_z is not None and bool(_plane_hit(gr.anchor, R, gr.width, gr.depth, g, support_z)[0]):
            out[i] = True
            continue
        if tree is None:
            continue
        c_local, r = g.reach_radius(gr.width, gr.depth)
        idx = tree.query_ball_point(gr.anchor + R @ c_local, r + 1e-9)
        if idx:
            out[i] = bool(np.any(_box_hits(_local(pts[idx], gr.anchor, R), gr.width, gr.depth, g)))
    return out


# -- contacts and quality ------------------------------------------------------------------
def _as_surface(surface) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(surface, Octree):
        return extract_surface(surface)
    if isinstance(surface, tuple) and len(surface) == 2:
        return np.asarray(surface[0], dtype=np.float64), np.asarray(surface[1], dtype=np.float64)
    if hasattr(surface, "points") and hasattr(surface, "normals"):
        return np.asarray(surface.points, dtype=np.float64), np.asarray(surface.normals, dtype=np.float64)
    raise TypeError("surface must be an Octree, a (points, normals) pair or have .points/.normals")


def find_contacts(grasp: GraspPose, surface, gripper: GripperModel | None = None) -> ContactPair | None:
    """Closest surface points to each finger among points in the closing region.

    Returns None when the closing region is empty or both fingers would touch
    the same point.
    """
    g = gripper or GripperModel()
    pts, nrm = _as_surface(surface)
    if len(pts) == 0:
        return None
    local = _local(pts, grasp.anchor, grasp.rotation)
    half = grasp.width / 2.0
    inside = (
        (np.abs(local[:, 2]) <= g.finger_height / 2.0)
        & (np.abs(local[:, 1]) <= half)
        & (local[:, 0] >= grasp.depth - g.finger_depth)
        & (local[:, 0] <= grasp.depth)
    )
    if not inside.any():
        return None
    yq = _quantize(local[:, 1])
    il = int(np.argmin(np.where(inside, yq, np.inf)))
    ir = int(np.argmax(np.where(inside, yq, -np.inf)))
    if np.linalg.norm(pts[il] - pts[ir]) < 1e-6:
        return None
    return ContactPair(pts[il].copy(), pts[ir].copy(), nrm[il].copy(), nrm[ir].copy())


def _quantize(y):
    # nanometre steps, so near-equal points tie and resolve by index
    return np.round(np.asarray(y) * 1e9)


def contact_offsets(grasp: GraspPose, contacts: ContactPair) -> tuple[float, float, float, float]:
    """``(D_L, D_R, Z_L, Z_R)``: finger-to-contact gaps along the closing axis
    and contact positions along the approach axis (same frame as ``depth``)."""
    R = grasp.rotation
    ll = _local(contacts.left, grasp.anchor, R)
    lr = _local(contacts.right, grasp.anchor, R)
    half = grasp.width / 2.0
    return float(ll[1] + half), float(half - lr[1]), float(ll[0]), float(lr[0])


def grasp_quality(contacts: ContactPair) -> float:
    """Antipodal score: the smaller cosine between each contact normal and the contact axis."""
    diff = np.asarray(contacts.left, dtype=np.float64) - np.asarray(contacts.right, dtype=np.float64)
    n = np.linalg.norm(diff)
    if n < 1e-6:
        raise DegenerateContacts(f"contacts {n:.3g} m apart")
    u = diff / n
    return float(min(np.dot(contacts.left_normal, u), -np.dot(contacts.right_normal, u)))


def friction_threshold(mu: float) -> float:
    """Minimum quality for a grasp to hold under Coulomb friction ``mu``."""
    return float(np.cos(np.arctan(mu)))


# -- label generation ----------------------------------------------------------------------
@dataclass(frozen=True)
class LabelConfig:
    rho: float = 0.005
    q_min: float = 0.1
    clearance: float = 0.005
    cloud_spacing: float = 0.002
    seed: int = 0
    chunk: int = 256


class _SampleEvaluator:
    """Evaluates every candidate of one anchor against a fixed point cloud."""

    def __init__(self, points, normals, gripper: GripperModel, config: LabelConfig,
                 obstacles=None, support_z=None):
        self.g = gripper
        self.cfg = config
        self.points = np.asarray(points, dtype=np.float64)
        self.normals = np.asarray(normals, dtype=np.float64)
        n_surf = len(self.points)
        obs = np.zeros((0, 3)) if obstacles is None else np.asarray(obstacles, dtype=np.float64).reshape(-1, 3)
        self.all_points = np.vstack([self.points, obs])
        self.is_surface = np.arange(len(self.all_points)) < n_surf
        self.tree = cKDTree(self.all_points) if len(self.all_points) else None
        self.support_z = support_z
        self.views = fibonacci_views()
        self.angles = candidate_angles()
        self.depths = np.asarray(DEPTHS)
        W = gripper.open_width
        back = self.depths.min() - gripper.finger_depth - gripper.base_depth
        self.radius = float(np.linalg.norm([max(abs(back), self.depths.max()), W / 2 + gripper.finger_thickness,
                                            gripper.finger_height / 2]))

    def __call__(self, anchor, normal):
        g, cfg = self.g, self.cfg
        W = g.open_width
        half = W / 2.0
        nV, nA, nD = len(self.views), len(self.angles), len(self.depths)
        quality = np.full((nV, nA, nD), np.nan)
        width = np.full((nV, nA, nD), np.nan)
        facing = self.views @ normal < 0.0
        vidx = np.repeat(np.nonzero(facing)[0], nA)
        aidx = np.tile(np.arange(nA), int(facing.sum()))
        if len(vidx) == 0:
            return quality, width
        R_all = grasp_rotation(self.views[vidx], self.angles[aidx])
        if self.tree is not None:
            idx = np.sort(np.asarray(self.tree.query_ball_point(anchor, self.radius + 1e-9), dtype=np.int64))
        else:
            idx = np.zeros(0, np.int64)
        P = self.all_points[idx] - anchor
        surf = self.is_surface[idx]
        back_off = g.finger_depth + g.base_depth
        for s in range(0, len(vidx), cfg.chunk):
            R = R_all[s : s + cfg.chunk]
            k = len(R)
            x = R[:, :, 0] @ P.T
            y = R[:, :, 1] @ P.T
            z = R[:, :, 2] @ P.T
            inz = np.abs(z) <= g.finger_height / 2.0
            ay = np.abs(y)
            finger_col = inz & (ay > half) & (ay <= half + g.finger_thickness)
            center_col = inz & (ay <= half)
            for j, d in enumerate(self.depths):
                back = d - back_off
                hit = np.any(finger_col & (x >= back) & (x <= d), axis=1)
                hit |= np.any(center_col & (x >= back) & (x < d - g.finger_depth), axis=1)
                if self.support_z is not None:
                    hit |= _plane_hit(anchor, R, W, d, g, self.support_z)
                closing = center_col & surf & (x >= d - g.finger_depth) & (x <= d)
                has = closing.any(axis=1) & ~hit
                if not has.any():
                    continue
                rows = np.nonzero(has)[0]
                yc = y[rows]
                cm = closing[rows]
                yq = _quantize(yc)
                il = np.argmin(np.where(cm, yq, np.inf), axis=1)
                ir = np.argmax(np.where(cm, yq, -np.inf), axis=1)
                pl = idx[il]
                pr = idx[ir]
                diff = self.all_points[pl] - self.all_points[pr]
                dist = np.linalg.norm(diff, axis=1)
                okc = dist >= 1e-6
                u = diff / np.where(okc, dist, 1.0)[:, None]
                q = np.minimum(np.einsum("ij,ij->i", self.normals[pl], u), -np.einsum("ij,ij->i", self.normals[pr], u))
                yl = yc[np.arange(len(rows)), il]
                yr = yc[np.arange(len(rows)), ir]
                w = np.clip(2.0 * np.maximum(-yl, yr) + 2.0 * cfg.clearance, 0.0, W)
                rows, q, w = rows[okc], q[okc], w[okc]
                gi = s + rows
                quality[vidx[gi], aidx[gi], j] = q
                width[vidx[gi], aidx[gi], j] = w
        return quality, width


def label_from_candidates(anchor, quality, width, q_min: float = 0.1, object_id: int = 0) -> GraspLabel:
    """Collapse a ``(views, angles, depths)`` candidate table into a :class:`GraspLabel`."""
    nV, nA, nD = quality.shape
    with np.errstate(invalid="ignore"):
        good = np.nan_to_num(quality, nan=-np.inf) >= q_min
    graspness = good.reshape(nV, -1).sum(axis=1) / float(nA * nD)
    best = None
    if np.isfinite(quality).any():
        flat = int(np.nanargmax(quality.reshape(-1)))
        v, a, d = np.unravel_index(flat, quality.shape)
        best = GraspPose(
            anchor, fibonacci_views()[v], candidate_angles()[a], float(width[v, a, d]), DEPTHS[d],
            graspness=float(graspness[v]), quality=float(quality[v, a, d]), object_id=object_id,
        )
    return GraspLabel(graspness.astype(np.float64), best, quality, width)


def generate_labels(
    mesh: TriangleMesh,
    gripper: GripperModel | None = None,
    config: LabelConfig | None = None,
    obstacles=None,
    support_z=None,
    object_id: int = 0,
    threads: int = 1,
    samples: list[SurfaceSample] | None = None,
) -> list[tuple[SurfaceSample, GraspLabel]]:
    """Sample the surface and score every candidate of every sample.

    Collisions and contacts use a dense surface cloud of ``mesh``; extra
    collision-only points (other objects) go in ``obstacles`` and a table
    plane in ``support_z``.
    """
    g = gripper or GripperModel()
    cfg = config or LabelConfig()
    if samples is None:
        samples = sample_surface(mesh, cfg.rho, cfg.seed)
    pts, nrm = surface_cloud(mesh, cfg.cloud_spacing, seed=cfg.seed)
    ev = _SampleEvaluator(pts, nrm, g, cfg, obstacles, support_z)

    def one(sample):
        q, w = ev(np.asarray(sample.point, dtype=np.float64), np.asarray(sample.normal, dtype=np.float64))
        return sample, label_from_candidates(sample.point, q, w, cfg.q_min, object_id)

    if threads > 1 and len(samples) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, samples))
    return [one(s) for s in samples]


def label_grasps(labels, q_min: float = 0.1) -> list[GraspPose]:
    """Best grasp of every (sample, view) pair whose quality reaches ``q_min``."""
    views = fibonacci_views()
    angles = candidate_angles()
    out = []
    for sample, lab in labels:
        if lab.quality is None:
            if lab.best is not None and lab.best.quality >= q_min:
                out.append(lab.best)
            continue
        nV = lab.quality.shape[0]
        flat = np.nan_to_num(lab.quality.reshape(nV, -1), nan=-np.inf)
        arg = flat.argmax(axis=1)
        for v in np.nonzero(flat[np.arange(nV), arg] >= q_min)[0]:
            a, d = np.unravel_index(arg[v], lab.quality.shape[1:])
            out.append(GraspPose(
                sample.point, views[v], angles[a], float(lab.width[v, a, d]), DEPTHS[d],
                graspness=float(lab.graspness[v]), quality=float(lab.quality[v, a, d]),
                object_id=lab.best.object_id if lab.best else 0,
            ))
    return out


def assign_labels(tree: Octree, labels, radius: float = LABEL_RADIUS) -> Octree:
    """Copy graspness and best grasps onto octree leaves within ``radius`` of a sample.

    Leaves with no sample in range get zero graspness and a NaN best grasp.
    """
    n = tree.n_leaves
    graspness = np.zeros((n, N_VIEWS), dtype=np.float32)
    best = np.full((n, 12), np.nan, dtype=np.float32)
    if n and labels:
        anchors = np.array([s.point for s, _ in labels], dtype=np.float64)
        dist, j = cKDTree(anchors).query(tree.centers, distance_upper_bound=radius)
        for leaf in np.nonzero(np.isfinite(dist))[0]:
            lab = labels[j[leaf]][1]
            graspness[leaf] = lab.graspness
            if lab.best is not None:
                best[leaf] = _grasp_row(lab.best)
    return tree.with_attributes(graspness=graspness, best_grasps=best)


def _grasp_row(gp: GraspPose) -> np.ndarray:
    return np.array([*gp.anchor, *gp.view, gp.angle, gp.width, gp.depth, gp.graspness, gp.quality, gp.object_id])


# -- grasp I/O -----------------------------------------------------------------------------
GRASP_RECORD = struct.Struct("<11fi")  # anchor xyz, view xyz, angle, width, depth, graspness, quality, object_id


def write_grasps_jsonl(path, grasps) -> None:
    with open(path, "w") as fh:
        for g in grasps:
            fh.write(json.dumps(g.to_dict(), sort_keys=True) + "\n")


def read_grasps_jsonl(path) -> list[GraspPose]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(GraspPose.from_dict(json.loads(line)))
    return out


def pack_grasps(grasps) -> bytes:
    """Little-endian records of 11 float32 fields and an int32 object id, 48 bytes each."""
    return b"".join(
        GRASP_RECORD.pack(*g.anchor, *g.view, g.angle, g.width, g.depth, g.graspness, g.quality, g.object_id)
        for g in grasps
    )


def unpack_grasps(data: bytes) -> list[GraspPose]:
    if len(data) % GRASP_RECORD.size:
        raise ValueError("grasp buffer length is not a multiple of the record size")
    out = []
    for rec in GRASP_RECORD.iter_unpack(data):
        view = np.asarray(rec[3:6], dtype=np.float64)
        out.append(GraspPose(
            rec[0:3], view / np.linalg.norm(view), normalize_angle(rec[6]),
            min(max(rec[7], 0.0), MAX_WIDTH), min(max(rec[8], 0.0), MAX_DEPTH), *rec[9:],
        ))
    return out
