"""Multi-object scenes, ray-cast depth/instance rendering and depth unprojection."""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import UnknownObjectId
from .geometry import (
    CameraModel,
    RigidTransform,
    TriangleMesh,
    box,
    cylinder,
    icosphere,
    interior_points,
    load_mesh,
    look_at,
    merge,
    surface_cloud,
)

DEPTH_PNG_SCALE = 1e4  # 16-bit PNG stores depth in 0.1 mm units


@dataclass(frozen=True)
class SceneObject:
    object_id: int
    mesh_key: str
    pose: RigidTransform


@dataclass(frozen=True, eq=False)
class Scene:
    """Rigidly placed meshes with 1-based ids; ``support_z`` is an optional table plane."""

    objects: tuple
    meshes: dict
    support_z: float | None = None

    def __post_init__(self):
        objs = tuple(self.objects)
        ids = [o.object_id for o in objs]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique")
        if any(i < 1 for i in ids):
            raise ValueError("object ids are 1-based (0 is background)")
        for o in objs:
            if o.mesh_key not in self.meshes:
                raise ValueError(f"object {o.object_id} references unknown mesh {o.mesh_key!r}")
        object.__setattr__(self, "objects", objs)

    @property
    def object_ids(self) -> tuple:
        return tuple(o.object_id for o in self.objects)

    def get(self, object_id: int) -> SceneObject:
        for o in self.objects:
            if o.object_id == object_id:
                return o
        raise UnknownObjectId(f"object id {object_id} not in scene")

    def world_mesh(self, object_id: int) -> TriangleMesh:
        return self._world_meshes[object_id]

    @cached_property
    def _world_meshes(self) -> dict:
        return {o.object_id: self.meshes[o.mesh_key].transformed(o.pose) for o in self.objects}

    @cached_property
    def merged(self) -> tuple[TriangleMesh, np.ndarray]:
        """All objects in world frame plus the object id of every triangle."""
        meshes = [self.world_mesh(i) for i in self.object_ids]
        mesh, src = merge(meshes)
        ids = np.asarray(self.object_ids, dtype=np.int64)
        return mesh, ids[src] if len(src) else src

    def surface_points(self, spacing: float = 0.0015, seed: int = 0):
        """Dense surface samples of every object: ``(points, normals, object_ids)``."""
        return self._surface_cache(spacing, seed)

    def _surface_cache(self, spacing, seed):
        key = ("surf", spacing, seed)
        cache = self.__dict__.setdefault("_cloud_cache", {})
        if key not in cache:
            P, N, I = [], [], []
            for oid in self.object_ids:
                p, n = surface_cloud(self.world_mesh(oid), spacing, seed=seed + oid)
                P.append(p)
                N.append(n)
                I.append(np.full(len(p), oid))
            cache[key] = (
                np.vstack(P) if P else np.zeros((0, 3)),
                np.vstack(N) if N else np.zeros((0, 3)),
                np.concatenate(I) if I else np.zeros(0, np.int64),
            )
        return cache[key]

    def solid_points(self, spacing: float = 0.003, seed: int = 0) -> np.ndarray:
        """Surface samples plus interior lattice points of every object (collision geometry)."""
        key = ("solid", spacing, seed)
        cache = self.__dict__.setdefault("_cloud_cache", {})
        if key not in cache:
            pts = [self.surface_points(spacing, seed)[0]]
            for oid in self.object_ids:
                mesh = self.world_mesh(oid)
                if mesh.watertight:
                    pts.append(interior_points(mesh, spacing))
            cache[key] = np.vstack(pts)
        return cache[key]

    # -- JSON --------------------------------------------------------------------------
    @classmethod
    def from_json(cls, path, scale: float = 1.0) -> "Scene":
        path = Path(path)
        spec = json.loads(path.read_text())
        return cls.from_dict(spec, base_dir=path.parent, scale=scale)

    @classmethod
    def from_dict(cls, spec: dict, base_dir=".", scale: float = 1.0) -> "Scene":
        meshes, objects = {}, []
        for entry in spec["objects"]:
            src = entry["mesh"]
            key = json.dumps(src, sort_keys=True)
            if key not in meshes:
                meshes[key] = _mesh_from_spec(src, Path(base_dir), scale)
            pose = np.asarray(entry.get("pose", np.eye(4).tolist()), dtype=np.float64).reshape(4, 4)
            pose[:3, 3] *= scale
            objects.append(SceneObject(int(entry["id"]), key, RigidTransform.from_matrix(pose)))
        support = spec.get("support_z")
        return cls(tuple(objects), meshes, None if support is None else float(support) * scale)

    def to_dict(self) -> dict:
        objs = []
        for o in self.objects:
            objs.append({"id": o.object_id, "mesh": json.loads(o.mesh_key), "pose": o.pose.matrix.reshape(-1).tolist()})
        return {"objects": objs, "support_z": self.support_z}


def _mesh_from_spec(src, base_dir: Path, scale: float) -> TriangleMesh:
    if isinstance(src, str):
        p = Path(src)
        return load_mesh(p if p.is_absolute() else base_dir / p, scale=scale)
    kind = src.get("primitive")
    if kind == "box":
        return box(np.asarray(src["extents"]) * scale)
    if kind == "sphere":
        return icosphere(src["radius"] * scale, src.get("subdivisions", 3))
    if kind == "cylinder":
        return cylinder(src["radius"] * scale, src["height"] * scale, src.get("segments", 32))
    raise ValueError(f"unknown mesh spec {src!r}")


@dataclass(frozen=True, eq=False)
class SceneView:
    """Rendered observation: z-depth in meters (0 = no hit) and 1-based instance ids (0 = background)."""

    camera: CameraModel
    extrinsic: RigidTransform  # camera -> world
    depth: np.ndarray
    mask: np.ndarray
    object_ids: tuple = ()

    def __post_init__(self):
        d = np.asarray(self.depth, dtype=np.float64)
        m = np.asarray(self.mask, dtype=np.int64)
        shape = (self.camera.height, self.camera.width)
        if d.shape != shape or m.shape != shape:
            raise ValueError(f"depth/mask must be {shape}")
        if not np.all(np.isfinite(d)):
            raise ValueError("depth must be finite")
        if np.any((m > 0) & (d <= 0)):
            raise ValueError("depth must be positive wherever the mask is set")
        d.setflags(write=False)
        m.setflags(write=False)
        object.__setattr__(self, "depth", d)
        object.__setattr__(self, "mask", m)
        object.__setattr__(self, "object_ids", tuple(int(i) for i in self.object_ids))


def render(scene: Scene, camera: CameraModel, extrinsic: RigidTransform, threads: int = 1) -> SceneView:
    """First-hit z-depth and object id for every pixel by ray casting."""
    mesh, tri_ids = scene.merged
    H, W = camera.height, camera.width
    depth = np.zeros((H, W))
    mask = np.zeros((H, W), dtype=np.int64)
    origin = extrinsic.translation

    def do_rows(r0, r1):
        v, u = np.mgrid[r0:r1, 0:W]
        dirs = extrinsic.apply_vectors(camera.rays(u.reshape(-1), v.reshape(-1)))
        t = np.full(len(dirs), np.inf)
        ids = np.zeros(len(dirs), dtype=np.int64)
        if len(mesh.triangles):
            t, tri = mesh.bvh.first_hit(origin, dirs)
            hit = tri >= 0
            ids[hit] = tri_ids[tri[hit]]
        if scene.support_z is not None:
            with np.errstate(divide="ignore", invalid="ignore"):
                tp = (scene.support_z - origin[2]) / dirs[:, 2]
            plane = (tp > 0) & (tp < t)
            t = np.where(plane, tp, t)
            ids[plane] = 0
        t = np.where(np.isfinite(t), t, 0.0)
        depth[r0:r1] = t.reshape(r1 - r0, W)
        mask[r0:r1] = ids.reshape(r1 - r0, W)

    step = max(1, H // max(1, threads * 4))
    chunks = [(r, min(r + step, H)) for r in range(0, H, step)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(lambda c: do_rows(*c), chunks))
    else:
        for c in chunks:
            do_rows(*c)
    return SceneView(camera, extrinsic, depth, mask, scene.object_ids)


def unproject(view: SceneView, object_id: int, features=None):
    """World-frame points and ``(u, v)`` pixels of every pixel labeled ``object_id``.

    With a feature map ``features`` of shape ``(H, W, D)`` the per-pixel
    features are returned as a third array.
    """
    if view.object_ids and object_id not in view.object_ids:
        raise UnknownObjectId(f"object id {object_id} not in view")
    v, u = np.nonzero(view.mask == object_id)
    z = view.depth[v, u]
    cam_pts = view.camera.unproject(u, v, z)
    pts = view.extrinsic.apply(cam_pts)
    pixels = np.stack([u, v], axis=1)
    if features is None:
        return pts, pixels
    feats = np.asarray(features)[v, u]
    return pts, pixels, feats


def project_world(view: SceneView, points) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    cam = view.extrinsic.inverse().apply(points)
    return view.camera.project(cam)


# -- I/O --------------------------------------------------------------------------------
def save_depth_png(path, depth) -> None:
    d = np.round(np.asarray(depth) * DEPTH_PNG_SCALE)
    Image.fromarray(np.clip(d, 0, 65535).astype(np.uint16)).save(path)


def load_depth_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / DEPTH_PNG_SCALE


def save_mask_png(path, mask) -> None:
    Image.fromarray(np.asarray(mask).astype(np.uint16)).save(path)


def load_mask_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.int64)


def save_depth_raw(path, view: SceneView) -> None:
    """Little-endian f32 depth plus a ``.json`` sidecar with size, intrinsics and extrinsics."""
    path = Path(path)
    path.write_bytes(np.asarray(view.depth, dtype="<f4").tobytes())
    sidecar = {
        "width": view.camera.width,
        "height": view.camera.height,
        "K": view.camera.K.tolist(),
        "extrinsic": view.extrinsic.matrix.reshape(-1).tolist(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_depth_raw(path) -> tuple[np.ndarray, CameraModel, RigidTransform]:
    path = Path(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    depth = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(meta["height"], meta["width"]).astype(np.float64)
    cam = CameraModel.from_K(meta["K"], meta["width"], meta["height"])
    return depth, cam, RigidTransform.from_matrix(np.reshape(meta["extrinsic"], (4, 4)))


# -- demo -------------------------------------------------------------------------------
def demo_scene() -> Scene:
    """Three objects on a table at z = 0: a box (1) partly hiding a cylinder (2), a sphere (3) behind-right."""
    meshes = {
        "box": box((0.06, 0.04, 0.10)),
        "cylinder": cylinder(0.03, 0.08, 32),
        "sphere": icosphere(0.035, 3),
    }
    objects = (
        SceneObject(1, "box", RigidTransform.from_translation((-0.025, -0.09, 0.05))),
        SceneObject(2, "cylinder", RigidTransform.from_translation((0.0, 0.0, 0.04))),
        SceneObject(3, "sphere", RigidTransform.from_translation((0.055, 0.09, 0.035))),
    )
    return Scene(objects, meshes, support_z=0.0)


def demo_camera(width: int = 640, height: int = 480, fx: float = 600.0) -> tuple[CameraModel, RigidTransform]:
    cam = CameraModel(fx, fx, width / 2.0, height / 2.0, width, height)
    return cam, look_at((0.0, -0.55, 0.35), (0.0, 0.0, 0.04))
