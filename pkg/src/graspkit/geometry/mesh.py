from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..errors import NonWatertight, ZeroAreaMesh
from .bvh import BVH
from .transforms import RigidTransform

# Fixed, non-axis-aligned directions for parity voting; any three generic
# directions work, these just avoid lattice-aligned grazing hits.
_PARITY_DIRS = np.array(
    [
        [0.5773502691896258, 0.6172133998483676, 0.5345224838248488],
        [-0.7071067811865475, 0.3090169943749474, 0.6358041316028976],
        [0.2672612419124244, -0.8017837257372732, -0.5345224838248488],
    ]
)
_PARITY_DIRS = _PARITY_DIRS / np.linalg.norm(_PARITY_DIRS, axis=1, keepdims=True)


@dataclass(frozen=True, eq=False)
class TriangleMesh:
    """Indexed triangle mesh in meters with unit per-vertex normals.

    ``normals`` may be omitted, in which case area-weighted vertex normals are
    computed. Use :func:`from_arrays` to also split vertices along creases.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        V = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        F = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if F.size and (F.min() < 0 or F.max() >= len(V)):
            raise ValueError("triangle index out of range")
        if self.normals is None:
            N = _area_weighted_normals(V, F)
        else:
            N = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if N.shape != V.shape:
                raise ValueError("normals must align with vertices")
            N = _normalize_or_default(N)
        for arr in (V, F, N):
            arr.setflags(write=False)
        object.__setattr__(self, "vertices", V)
        object.__setattr__(self, "triangles", F)
        object.__setattr__(self, "normals", N)

    # -- derived quantities ------------------------------------------------
    @cached_property
    def corners(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        V, F = self.vertices, self.triangles
        return V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]

    @cached_property
    def face_normals(self) -> np.ndarray:
        a, b, c = self.corners
        return _normalize_or_default(np.cross(b - a, c - a))

    @cached_property
    def areas(self) -> np.ndarray:
        a, b, c = self.corners
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    @property
    def area(self) -> float:
        return float(self.areas.sum())

    @cached_property
    def watertight(self) -> bool:
        """Closed, consistently oriented 2-manifold after welding coincident vertices."""
        if len(self.triangles) == 0:
            return False
        _, weld = np.unique(self.vertices, axis=0, return_inverse=True)
        F = weld.reshape(-1)[self.triangles]
        directed = np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]])
        directed = directed[directed[:, 0] != directed[:, 1]]
        uniq_dir, dir_counts = np.unique(directed, axis=0, return_counts=True)
        if np.any(dir_counts != 1):
            return False
        undirected = np.sort(uniq_dir, axis=1)
        _, und_counts = np.unique(undirected, axis=0, return_counts=True)
        return bool(np.all(und_counts == 2))

    @cached_property
    def bvh(self) -> BVH:
        return BVH(*self.corners)

    @property
    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    # -- transforms ----------------------------------------------------------
    def transformed(self, T: RigidTransform) -> "TriangleMesh":
        return TriangleMesh(T.apply(self.vertices), self.triangles, T.apply_vectors(self.normals), self.name)

    def scaled(self, s: float) -> "TriangleMesh":
        return TriangleMesh(self.vertices * s, self.triangles, self.normals, self.name)


def from_arrays(vertices, triangles, normals=None, crease_angle_deg: float = 30.0, name: str = "") -> TriangleMesh:
    """Build a mesh, splitting vertices on sharp creases when normals are absent.

    Without the split a shared-corner cube would get diagonal normals that
    smear across its faces; sampled normals would then be useless for contacts.
    """
    V = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    F = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
    if normals is not None:
        return TriangleMesh(V, F, normals, name)
    if len(F) == 0:
        return TriangleMesh(V, F, None, name)
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    cross = np.cross(b - a, c - a)  # length = 2 * area, so sums are area-weighted
    fn = _normalize_or_default(cross)
    cos_thresh = np.cos(np.radians(crease_angle_deg))

    corner_v = F.reshape(-1)
    corner_f = np.repeat(np.arange(len(F)), 3)
    order = np.argsort(corner_v, kind="stable")
    sv, sf = corner_v[order], corner_f[order]
    bounds = np.searchsorted(sv, np.arange(len(V) + 1))

    corner_normal = np.zeros((len(corner_v), 3))
    for vid in range(len(V)):
        faces = sf[bounds[vid] : bounds[vid + 1]]
        if faces.size == 0:
            continue
        n = fn[faces]
        smooth = (n @ n.T) >= cos_thresh
        acc = smooth.astype(np.float64) @ cross[faces]
        corners = order[bounds[vid] : bounds[vid + 1]]
        corner_normal[corners] = acc

    corner_normal = _normalize_or_default(corner_normal)
    key = np.concatenate([corner_v[:, None].astype(np.float64), np.round(corner_normal, 9)], axis=1)
    uniq, inverse = np.unique(key, axis=0, return_inverse=True)
    new_V = V[uniq[:, 0].astype(np.int64)]
    new_N = uniq[:, 1:]
    return TriangleMesh(new_V, inverse.reshape(-1, 3), new_N, name)


def _normalize_or_default(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    out = np.where(norm > 1e-300, v / np.where(norm > 1e-300, norm, 1.0), 0.0)
    bad = norm[..., 0] <= 1e-300
    if np.any(bad):
        out[bad] = (0.0, 0.0, 1.0)
    return out


def _area_weighted_normals(V, F) -> np.ndarray:
    acc = np.zeros_like(V)
    if len(F):
        a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
        cross = np.cross(b - a, c - a)
        for k in range(3):
            np.add.at(acc, F[:, k], cross)
    return _normalize_or_default(acc)


# -- primitives ----------------------------------------------------------------
def box(extents=(1.0, 1.0, 1.0), center=(0.0, 0.0, 0.0), name: str = "box") -> TriangleMesh:
    """Axis-aligned box with flat (per-face) normals."""
    h = np.asarray(extents, dtype=np.float64) / 2.0
    c = np.asarray(center, dtype=np.float64)
    verts, tris, norms = [], [], []
    for axis in range(3):
        u, v = [i for i in range(3) if i != axis]
        for sign in (-1.0, 1.0):
            n = np.zeros(3)
            n[axis] = sign
            quad = []
            for su, sv in ((-1, -1), (1, -1), (1, 1), (-1, 1)):
                p = np.zeros(3)
                p[axis] = sign * h[axis]
                p[u] = su * h[u]
                p[v] = sv * h[v]
                quad.append(p + c)
            base = len(verts)
            verts.extend(quad)
            norms.extend([n] * 4)
            t1, t2 = [base, base + 1, base + 2], [base, base + 2, base + 3]
            e = np.cross(quad[1] - quad[0], quad[2] - quad[0])
            if e @ n < 0:
                t1, t2 = t1[::-1], t2[::-1]
            tris.extend([t1, t2])
    return TriangleMesh(np.array(verts), np.array(tris), np.array(norms), name)


def icosphere(radius: float = 0.5, subdivisions: int = 3, center=(0.0, 0.0, 0.0), name: str = "sphere") -> TriangleMesh:
    """Geodesic sphere with radial vertex normals."""
    t = (1.0 + 5 ** 0.5) / 2.0
    V = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
         [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=np.float64,
    )
    F = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
         [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
         [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
         [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]],
        dtype=np.int64,
    )
    V /= np.linalg.norm(V, axis=1, keepdims=True)
    for _ in range(subdivisions):
        edges = np.sort(np.concatenate([F[:, [0, 1]], F[:, [1, 2]], F[:, [2, 0]]]), axis=1)
        uniq, inv = np.unique(edges, axis=0, return_inverse=True)
        inv = inv.reshape(-1)
        mid = V[uniq[:, 0]] + V[uniq[:, 1]]
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        m = inv.reshape(3, -1).T + len(V)  # midpoints of edges (01, 12, 20)
        V = np.vstack([V, mid])
        a, b, c = F[:, 0], F[:, 1], F[:, 2]
        m01, m12, m20 = m[:, 0], m[:, 1], m[:, 2]
        F = np.concatenate(
            [np.stack(x, axis=1) for x in ((a, m01, m20), (b, m12, m01), (c, m20, m12), (m01, m12, m20))]
        )
    return TriangleMesh(V * radius + np.asarray(center, dtype=np.float64), F, V.copy(), name)


def cylinder(radius: float = 0.03, height: float = 0.1, segments: int = 32, center=(0.0, 0.0, 0.0), name: str = "cylinder") -> TriangleMesh:
    """Closed z-aligned cylinder; side and caps carry separate vertices."""
    ang = 2 * np.pi * np.arange(segments) / segments
    ring = np.stack([np.cos(ang), np.sin(ang), np.zeros(segments)], axis=1)
    hz = height / 2.0
    verts, norms, tris = [], [], []
    # side
    bottom = ring * radius + [0, 0, -hz]
    top = ring * radius + [0, 0, hz]
    verts += [bottom, top]
    norms += [ring, ring]
    i = np.arange(segments)
    j = (i + 1) % segments
    tris += [np.stack([i, j, j + segments], 1), np.stack([i, j + segments, i + segments], 1)]
    base = 2 * segments
    for z, sign in ((-hz, -1.0), (hz, 1.0)):
        cap = ring * radius + [0, 0, z]
        verts += [cap, np.array([[0, 0, z]])]
        norms += [np.tile([0, 0, sign], (segments + 1, 1))]
        ci = base + segments
        if sign > 0:
            tris.append(np.stack([base + i, base + j, np.full(segments, ci)], 1))
        else:
            tris.append(np.stack([base + j, base + i, np.full(segments, ci)], 1))
        base += segments + 1
    V = np.vstack(verts) + np.asarray(center, dtype=np.float64)
    return TriangleMesh(V, np.vstack(tris), np.vstack(norms), name)


def merge(meshes) -> tuple[TriangleMesh, np.ndarray]:
    """Concatenate meshes; also returns the source index of every triangle."""
    meshes = list(meshes)
    V, F, N, src = [], [], [], []
    offset = 0
    for k, m in enumerate(meshes):
        V.append(m.vertices)
        N.append(m.normals)
        F.append(m.triangles + offset)
        src.append(np.full(len(m.triangles), k, dtype=np.int64))
        offset += len(m.vertices)
    if not meshes:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)), np.zeros(0, dtype=np.int64)
    return TriangleMesh(np.vstack(V), np.vstack(F), np.vstack(N)), np.concatenate(src)


# -- queries ---------------------------------------------------------------------
def closest_points(mesh: TriangleMesh, queries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched closest point: ``(points, distances, triangle_ids)``."""
    if len(mesh.triangles) == 0:
        raise ValueError("mesh has no triangles")
    return mesh.bvh.closest(queries)


def closest_point(mesh: TriangleMesh, query) -> tuple[np.ndarray, float, int]:
    p, d, t = closest_points(mesh, np.asarray(query, dtype=np.float64).reshape(1, 3))
    return p[0], float(d[0]), int(t[0])


def inside_mask(mesh: TriangleMesh, queries) -> np.ndarray:
    """Ray-parity inside test with a majority vote over three fixed directions."""
    if not mesh.watertight:
        raise NonWatertight("inside/outside is undefined for an open mesh")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    votes = np.zeros(len(q), dtype=np.int64)
    for d in _PARITY_DIRS:
        votes += mesh.bvh.count_hits(q, np.broadcast_to(d, q.shape)) % 2
    return votes >= 2


def signed_distances(mesh: TriangleMesh, queries, return_closest: bool = False):
    """Signed distance (negative inside) for a batch of points."""
    if not mesh.watertight:
        raise NonWatertight("signed distance requires a watertight mesh")
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    pts, dist, tri = closest_points(mesh, q)
    sd = np.where(inside_mask(mesh, q), -dist, dist)
    if return_closest:
        return sd, pts, tri
    return sd


def signed_distance(mesh: TriangleMesh, query) -> float:
    return float(signed_distances(mesh, np.asarray(query, dtype=np.float64).reshape(1, 3))[0])


def sdf_with_gradient(mesh: TriangleMesh, queries) -> tuple[np.ndarray, np.ndarray]:
    """Signed distance and unit outward direction of steepest ascent.

    On (or numerically at) the surface the triangle normal stands in for the
    undefined gradient.
    """
    sd, pts, tri = signed_distances(mesh, queries, return_closest=True)
    q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    diff = q - pts
    dist = np.abs(sd)
    grad = mesh.face_normals[tri].copy()
    far = dist > 1e-9
    grad[far] = diff[far] / dist[far, None] * np.sign(sd[far])[:, None]
    return sd, grad


# -- sampling ----------------------------------------------------------------------
@dataclass(frozen=True)
class SurfaceSample:
    point: np.ndarray
    normal: np.ndarray
    triangle_id: int


def sample_points(mesh: TriangleMesh, count: int, rng: np.random.Generator):
    """Area-weighted uniform surface samples as arrays ``(points, normals, triangle_ids)``.

    Normals are barycentric interpolations of the vertex normals, renormalized.
    """
    areas = mesh.areas
    total = float(areas.sum())
    if total < 1e-12:
        raise ZeroAreaMesh(f"total surface area {total:.3e} m^2 is below 1e-12")
    count = int(count)
    tri = rng.choice(len(areas), size=count, p=areas / total)
    r1 = rng.random(count)
    r2 = rng.random(count)
    s = np.sqrt(r1)
    wa, wb, wc = 1.0 - s, s * (1.0 - r2), s * r2
    F = mesh.triangles[tri]
    V, N = mesh.vertices, mesh.normals
    pts = wa[:, None] * V[F[:, 0]] + wb[:, None] * V[F[:, 1]] + wc[:, None] * V[F[:, 2]]
    nrm = wa[:, None] * N[F[:, 0]] + wb[:, None] * N[F[:, 1]] + wc[:, None] * N[F[:, 2]]
    norm = np.linalg.norm(nrm, axis=1)
    fallback = norm < 1e-9
    nrm = np.where(fallback[:, None], mesh.face_normals[tri], nrm / np.where(fallback, 1.0, norm)[:, None])
    return pts, nrm, tri


def sample_count(mesh: TriangleMesh, rho: float) -> int:
    """Number of samples for area-per-sample ``rho`` (m^2): ``round(A / rho)``."""
    if rho <= 0:
        raise ValueError("rho must be positive")
    area = mesh.area
    if area < 1e-12:
        raise ZeroAreaMesh(f"total surface area {area:.3e} m^2 is below 1e-12")
    return int(round(area / rho))


def sample_surface(mesh: TriangleMesh, rho: float, seed: int) -> list[SurfaceSample]:
    """``round(A / rho)`` area-weighted samples; ``rho`` is square meters per sample."""
    n = sample_count(mesh, rho)
    pts, nrm, tri = sample_points(mesh, n, np.random.default_rng(seed))
    return [SurfaceSample(p, nn, int(t)) for p, nn, t in zip(pts, nrm, tri)]


def surface_cloud(mesh: TriangleMesh, spacing: float, max_points: int = 60000, seed: int = 0):
    """Dense deterministic surface samples at roughly ``spacing`` meters apart."""
    n = int(np.ceil(mesh.area / (spacing * spacing)))
    n = int(np.clip(n, 1, max_points))
    pts, nrm, _ = sample_points(mesh, n, np.random.default_rng(seed))
    return pts, nrm


def interior_points(mesh: TriangleMesh, spacing: float) -> np.ndarray:
    """Lattice points strictly inside a watertight mesh."""
    lo, hi = mesh.bounds
    axes = [np.arange(lo[i] + spacing / 2, hi[i], spacing) for i in range(3)]
    if any(a.size == 0 for a in axes):
        return np.zeros((0, 3))
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
    return grid[inside_mask(mesh, grid)]
