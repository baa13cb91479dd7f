"""Sparse octree with attributes stored on depth-``H`` leaves in Morton order.

Only the leaf level is stored; coarser occupancy is implied by the leaf codes
(a parent code is a leaf code shifted right by three bits per level).
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .errors import CorruptHeader, DepthOutOfRange, MissingAttributes, VersionMismatch

log = logging.getLogger(__name__)

MAX_DEPTH = 16
FORMAT_VERSION = 1
MAGIC = b"OCTZ"
HEADER = struct.Struct("<4sHBB4f")  # 24 bytes
LEAF_SECTION = struct.Struct("<QII")  # leaf count, feature dim, graspness views
BEST_GRASP_FIELDS = 12  # anchor(3) view(3) angle width depth graspness quality object_id

_FLAG_SDF = 1
_FLAG_NORMALS = 2
_FLAG_LABELS = 4
_FLAG_NONEMPTY = 128


# -- Morton codes -----------------------------------------------------------------
def _spread(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1FFFFF)
    x = (x | (x << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    x = (x | (x << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    x = (x | (x << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    x = (x | (x << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    x = (x | (x << np.uint64(2))) & np.uint64(0x1249249249249249)
    return x


def _compact(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64) & np.uint64(0x1249249249249249)
    x = (x ^ (x >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    x = (x ^ (x >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    x = (x ^ (x >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    x = (x ^ (x >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    x = (x ^ (x >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return x


def morton_encode(ijk) -> np.ndarray:
    """Interleave integer cell coordinates; x occupies the lowest bit of each triple."""
    ijk = np.asarray(ijk)
    return _spread(ijk[..., 0]) | (_spread(ijk[..., 1]) << np.uint64(1)) | (_spread(ijk[..., 2]) << np.uint64(2))


def morton_decode(codes) -> np.ndarray:
    c = np.asarray(codes, dtype=np.uint64)
    return np.stack([_compact(c), _compact(c >> np.uint64(1)), _compact(c >> np.uint64(2))], axis=-1).astype(np.int64)


# -- bounds -------------------------------------------------------------------------
@dataclass(frozen=True)
class Cube:
    """Axis-aligned cube; values are rounded to float32 so they serialize exactly."""

    center: np.ndarray
    half_extent: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float32).astype(np.float64).reshape(3)
        h = float(np.float32(self.half_extent))
        if not h > 0:
            raise ValueError("half extent must be positive")
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "half_extent", h)

    @classmethod
    def around(cls, points, pad: float = 0.1) -> "Cube":
        """Smallest centered cube containing ``points``, grown by ``pad`` (fraction) per side."""
        p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        lo, hi = p.min(axis=0), p.max(axis=0)
        half = 0.5 * float((hi - lo).max()) * (1.0 + pad)
        return cls((lo + hi) / 2.0, max(half, 1e-6))

    @property
    def lo(self) -> np.ndarray:
        return self.center - self.half_extent

    @property
    def hi(self) -> np.ndarray:
        return self.center + self.half_extent

    def cell_width(self, depth: int) -> float:
        return 2.0 * self.half_extent / (1 << depth)

    def cell_centers(self, ijk, depth: int) -> np.ndarray:
        return self.lo + (np.asarray(ijk, dtype=np.float64) + 0.5) * self.cell_width(depth)


@dataclass(frozen=True)
class LeafAttributes:
    center: np.ndarray
    feature: np.ndarray
    sdf: float | None
    normal: np.ndarray | None
    graspness: np.ndarray | None
    best_grasp: np.ndarray | None


def _check_depth(depth: int) -> int:
    depth = int(depth)
    if depth < 1 or depth > MAX_DEPTH:
        raise DepthOutOfRange(f"octree depth must be in [1, {MAX_DEPTH}], got {depth}")
    return depth


@dataclass(frozen=True, eq=False)
class Octree:
    bounds: Cube
    depth: int
    codes: np.ndarray
    features: np.ndarray
    sdf: np.ndarray | None = None
    normals: np.ndarray | None = None
    graspness: np.ndarray | None = None
    best_grasps: np.ndarray | None = None
    dropped: int = field(default=0, compare=False)

    def __post_init__(self):
        depth = _check_depth(self.depth)
        codes = np.ascontiguousarray(self.codes, dtype=np.uint64).reshape(-1)
        n = len(codes)
        if n > 1 and not np.all(codes[1:] > codes[:-1]):
            raise ValueError("leaf codes must be strictly increasing")
        if n and int(codes[-1]) >= 1 << (3 * depth):
            raise ValueError("leaf code outside the depth-H lattice")
        feats = np.asarray(self.features, dtype=np.float32)
        if feats.ndim != 2:
            feats = feats.reshape(n, -1) if n else np.zeros((0, 0), np.float32)
        if len(feats) != n:
            raise ValueError("features must align with leaves")
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "codes", codes)
        object.__setattr__(self, "features", feats)
        if self.sdf is not None:
            sdf = np.asarray(self.sdf, dtype=np.float32).reshape(-1)
            if len(sdf) != n:
                raise ValueError("sdf must align with leaves")
            if n and np.abs(sdf).max() > np.float32(self.truncation) * (1 + 1e-6):
                raise ValueError("sdf exceeds truncation bound")
            object.__setattr__(self, "sdf", sdf)
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=np.float32).reshape(-1, 3)
            if len(nrm) != n:
                raise ValueError("normals must align with leaves")
            if n and np.abs(np.linalg.norm(nrm.astype(np.float64), axis=1) - 1.0).max() > 1e-5:
                raise ValueError("normals must be unit length")
            object.__setattr__(self, "normals", nrm)
        if self.graspness is not None:
            g = np.asarray(self.graspness, dtype=np.float32)
            if g.ndim != 2 or len(g) != n:
                raise ValueError("graspness must be (N, views)")
            best = self.best_grasps
            best = np.full((n, BEST_GRASP_FIELDS), np.nan, np.float32) if best is None else np.asarray(best, np.float32)
            if best.shape != (n, BEST_GRASP_FIELDS):
                raise ValueError("best_grasps must be (N, 12)")
            object.__setattr__(self, "graspness", g)
            object.__setattr__(self, "best_grasps", best)
        elif self.best_grasps is not None:
            raise ValueError("best_grasps requires graspness")
        for name in ("codes", "features", "sdf", "normals", "graspness", "best_grasps"):
            arr = getattr(self, name)
            if arr is not None:
                arr.setflags(write=False)

    # -- basic properties ---------------------------------------------------------
    @classmethod
    def empty(cls, bounds: Cube, depth: int, feature_dim: int = 0) -> "Octree":
        return cls(bounds, depth, np.zeros(0, np.uint64), np.zeros((0, feature_dim), np.float32))

    def __len__(self) -> int:
        return len(self.codes)

    @property
    def n_leaves(self) -> int:
        return len(self.codes)

    @property
    def leaf_width(self) -> float:
        return self.bounds.cell_width(self.depth)

    @property
    def truncation(self) -> float:
        """SDF values are clamped to +/- two leaf widths."""
        return 2.0 * self.leaf_width

    @property
    def ijk(self) -> np.ndarray:
        return morton_decode(self.codes)

    @property
    def centers(self) -> np.ndarray:
        return self.bounds.cell_centers(self.ijk, self.depth)

    def leaf(self, i: int) -> LeafAttributes:
        return LeafAttributes(
            center=self.centers[i],
            feature=self.features[i],
            sdf=None if self.sdf is None else float(self.sdf[i]),
            normal=None if self.normals is None else self.normals[i],
            graspness=None if self.graspness is None else self.graspness[i],
            best_grasp=None if self.best_grasps is None or np.isnan(self.best_grasps[i, 0]) else self.best_grasps[i],
        )

    def with_attributes(self, **kwargs) -> "Octree":
        return replace(self, **kwargs)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Octree):
            return NotImplemented
        if self.depth != other.depth or self.n_leaves != other.n_leaves:
            return False
        if not (np.array_equal(self.bounds.center, other.bounds.center) and self.bounds.half_extent == other.bounds.half_extent):
            return False
        if self.n_leaves == 0:
            return True
        for name in ("codes", "features", "sdf", "normals", "graspness", "best_grasps"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and not np.array_equal(a, b, equal_nan=a.dtype.kind == "f"):
                return False
        return True

    __hash__ = None

    # -- hierarchy & neighbors ---------------------------------------------------------
    def level_codes(self, level: int) -> np.ndarray:
        """Occupied node codes at ``level`` (0 = root), ascending."""
        if not 0 <= level <= self.depth:
            raise DepthOutOfRange(f"level {level} outside [0, {self.depth}]")
        return np.unique(self.codes >> np.uint64(3 * (self.depth - level)))

    def find(self, codes) -> np.ndarray:
        """Leaf index for each code, ``-1`` where the leaf is not occupied."""
        codes = np.asarray(codes, dtype=np.uint64)
        idx = np.searchsorted(self.codes, codes)
        idx_c = np.minimum(idx, max(self.n_leaves - 1, 0))
        hit = (idx < self.n_leaves) & (self.codes[idx_c] == codes) if self.n_leaves else np.zeros(codes.shape, bool)
        return np.where(hit, idx, -1)

    def neighbor_indices(self, offset) -> np.ndarray:
        """Index of the leaf at ``ijk + offset`` for every leaf (``-1`` if absent)."""
        ijk = self.ijk + np.asarray(offset, dtype=np.int64)
        res = 1 << self.depth
        inside = np.all((ijk >= 0) & (ijk < res), axis=1)
        out = np.full(self.n_leaves, -1, dtype=np.int64)
        if inside.any():
            out[inside] = self.find(morton_encode(ijk[inside]))
        return out

    def locate(self, points) -> np.ndarray:
        """Leaf index containing each point (``-1`` outside bounds or unoccupied)."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        ijk, inside = _cell_index(p, self.bounds, self.depth)
        out = np.full(len(p), -1, dtype=np.int64)
        if inside.any():
            out[inside] = self.find(morton_encode(ijk[inside]))
        return out


def _cell_index(points, bounds: Cube, depth: int):
    res = 1 << depth
    rel = (points - bounds.lo) / (2.0 * bounds.half_extent)
    inside = np.all((rel >= 0.0) & (rel <= 1.0), axis=1)
    ijk = np.clip(np.floor(rel * res), 0, res - 1).astype(np.int64)
    return ijk, inside


# -- construction -----------------------------------------------------------------
def build_from_points(points, features, bounds: Cube, depth: int) -> Octree:
    """One leaf per occupied depth-``H`` cell, carrying the mean feature of its points.

    Points outside ``bounds`` are dropped; the count is kept on ``Octree.dropped``.
    """
    depth = _check_depth(depth)
    p = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    f = np.asarray(features, dtype=np.float64)
    f = f.reshape(len(p), -1) if len(p) else f.reshape(0, f.shape[-1] if f.ndim == 2 else 0)
    if len(f) != len(p):
        raise ValueError("features must align 1:1 with points")
    ijk, inside = _cell_index(p, bounds, depth)
    dropped = int((~inside).sum())
    if dropped:
        log.debug("dropped %d points outside octree bounds", dropped)
    codes = morton_encode(ijk[inside])
    f = f[inside]
    uniq, inv = np.unique(codes, return_inverse=True)
    inv = inv.reshape(-1)
    counts = np.bincount(inv, minlength=len(uniq)).astype(np.float64)
    sums = np.zeros((len(uniq), f.shape[1]))
    np.add.at(sums, inv, f)
    means = sums / np.maximum(counts, 1.0)[:, None]
    return Octree(bounds, depth, uniq, means.astype(np.float32), dropped=dropped)


SdfField = Callable[[np.ndarray], "tuple[np.ndarray, np.ndarray]"]


def build_from_sdf(field_fn: SdfField, bounds: Cube, depth: int, solid: bool = True, feature_dim: int = 0) -> Octree:
    """Octree of the cells a signed-distance field marks as surface (or interior).

    ``field_fn(points) -> (phi, normals)`` must be 1-Lipschitz in ``phi``. A leaf
    is kept when its center satisfies ``phi <= sqrt(3)/2 * w`` (the cell may
    touch the surface); with ``solid=False`` fully interior cells are dropped
    too. Coarse cells are pruned with the Lipschitz bound, and cells known to
    lie deeper than the truncation band are expanded without further queries.
    """
    depth = _check_depth(depth)
    w_leaf = bounds.cell_width(depth)
    hd_leaf = np.sqrt(3.0) / 2.0 * w_leaf
    trunc = 2.0 * w_leaf

    codes = np.zeros(1, dtype=np.uint64)
    saturated = np.zeros(1, dtype=bool)
    sat_normal = np.zeros((1, 3))
    for level in range(depth):
        hd = np.sqrt(3.0) / 2.0 * bounds.cell_width(level)
        todo = ~saturated
        keep = saturated.copy()
        newly_sat = np.zeros_like(saturated)
        if todo.any():
            centers = bounds.cell_centers(morton_decode(codes[todo]), level)
            phi, nrm = field_fn(centers)
            k = phi <= hd
            if not solid:
                k &= phi >= -hd
            keep[todo] = k
            if solid:
                deep = phi + (hd - hd_leaf) <= -trunc
                newly_sat[todo] = deep
                sat_normal[np.nonzero(todo)[0][deep]] = nrm[deep]
        saturated = saturated | newly_sat
        codes, saturated, sat_normal = codes[keep], saturated[keep], sat_normal[keep]
        child = np.arange(8, dtype=np.uint64)
        codes = ((codes[:, None] << np.uint64(3)) | child).reshape(-1)
        saturated = np.repeat(saturated, 8)
        sat_normal = np.repeat(sat_normal, 8, axis=0)

    phi = np.full(len(codes), -trunc)
    normals = sat_normal.copy()
    todo = ~saturated
    if todo.any():
        centers = bounds.cell_centers(morton_decode(codes[todo]), depth)
        p, n = field_fn(centers)
        phi[todo] = p
        normals[todo] = n
    keep = phi <= hd_leaf
    if not solid:
        keep &= phi >= -hd_leaf
    codes, phi, normals = codes[keep], phi[keep], normals[keep]
    order = np.argsort(codes, kind="stable")
    codes, phi, normals = codes[order], phi[order], normals[order]
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True).clip(1e-12)
    phi = np.clip(phi, -trunc, trunc)
    feats = np.zeros((len(codes), feature_dim), np.float32)
    return Octree(bounds, depth, codes, feats, sdf=phi, normals=normals)


def build_from_mesh(mesh, depth: int = 6, bounds: Cube | None = None, pad: float = 0.1, solid: bool = True) -> Octree:
    """Octree of a watertight mesh over its padded per-object cube."""
    from .geometry.mesh import sdf_with_gradient

    if bounds is None:
        bounds = Cube.around(mesh.vertices, pad=pad)
    return build_from_sdf(lambda p: sdf_with_gradient(mesh, p), bounds, depth, solid=solid)


# -- surface --------------------------------------------------------------------------
def extract_surface(tree: Octree, include_saturated: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Project leaf centers onto the zero level set: ``p - phi * n``.

    Leaves whose SDF sits at the truncation bound carry no surface position
    and are skipped unless ``include_saturated``.
    """
    if tree.sdf is None or tree.normals is None:
        raise MissingAttributes("extract_surface needs both sdf and normals on the leaves")
    phi = tree.sdf.astype(np.float64)
    n = tree.normals.astype(np.float64)
    keep = np.ones(len(phi), bool) if include_saturated else np.abs(phi) < np.float32(tree.truncation) * (1 - 1e-6)
    pts = tree.centers[keep] - phi[keep, None] * n[keep]
    return pts, n[keep]


def estimate_normals(tree: Octree) -> np.ndarray:
    """Normals from finite differences of leaf SDF values across lattice neighbors.

    Central differences where both neighbors exist, one-sided otherwise;
    leaves with no usable neighbor keep their stored normal.
    """
    if tree.sdf is None:
        raise MissingAttributes("estimate_normals needs sdf on the leaves")
    phi = tree.sdf.astype(np.float64)
    w = tree.leaf_width
    grad = np.zeros((tree.n_leaves, 3))
    have = np.zeros(tree.n_leaves, bool)
    for axis in range(3):
        off = np.zeros(3, dtype=np.int64)
        off[axis] = 1
        plus = tree.neighbor_indices(off)
        minus = tree.neighbor_indices(-off)
        hp, hm = plus >= 0, minus >= 0
        g = np.zeros(tree.n_leaves)
        both = hp & hm
        g[both] = (phi[plus[both]] - phi[minus[both]]) / (2 * w)
        only_p = hp & ~hm
        g[only_p] = (phi[plus[only_p]] - phi[only_p]) / w
        only_m = hm & ~hp
        g[only_m] = (phi[only_m] - phi[minus[only_m]]) / w
        grad[:, axis] = g
        have |= hp | hm
    norm = np.linalg.norm(grad, axis=1)
    ok = have & (norm > 1e-12)
    out = np.zeros_like(grad)
    out[ok] = grad[ok] / norm[ok, None]
    if tree.normals is not None:
        out[~ok] = tree.normals[~ok]
    else:
        out[~ok] = (0.0, 0.0, 1.0)
    return out


# -- serialization ------------------------------------------------------------------------
def _record_dtype(feature_dim: int, has_sdf: bool, has_normals: bool, views: int, has_labels: bool) -> np.dtype:
    fields = [("code", "<u8"), ("feature", "<f4", (feature_dim,))]
    if has_sdf:
        fields.append(("sdf", "<f4"))
    if has_normals:
        fields.append(("normal", "<f4", (3,)))
    if has_labels:
        fields.append(("graspness", "<f4", (views,)))
        fields.append(("best", "<f4", (BEST_GRASP_FIELDS,)))
    return np.dtype(fields)


def serialize(tree: Octree) -> bytes:
    """Little-endian binary form.

    Layout: 24-byte header ``"OCTZ" u16 version, u8 depth, u8 flags, f32 cx cy cz half``;
    when the tree has leaves, a 16-byte section ``u64 count, u32 feature_dim,
    u32 views`` follows, then packed Morton-sorted records ``u64 code, f32
    feature[D], [f32 sdf], [f32 normal[3]], [f32 graspness[views], f32 best[12]]``.
    """
    n = tree.n_leaves
    has_labels = tree.graspness is not None
    flags = (_FLAG_SDF if tree.sdf is not None else 0) | (_FLAG_NORMALS if tree.normals is not None else 0)
    flags |= _FLAG_LABELS if has_labels else 0
    flags |= _FLAG_NONEMPTY if n else 0
    c = tree.bounds.center
    out = [HEADER.pack(MAGIC, FORMAT_VERSION, tree.depth, flags, c[0], c[1], c[2], tree.bounds.half_extent)]
    if n:
        views = tree.graspness.shape[1] if has_labels else 0
        dim = tree.features.shape[1]
        out.append(LEAF_SECTION.pack(n, dim, views))
        rec = np.zeros(n, dtype=_record_dtype(dim, tree.sdf is not None, tree.normals is not None, views, has_labels))
        rec["code"] = tree.codes
        rec["feature"] = tree.features
        if tree.sdf is not None:
            rec["sdf"] = tree.sdf
        if tree.normals is not None:
            rec["normal"] = tree.normals
        if has_labels:
            rec["graspness"] = tree.graspness
            rec["best"] = tree.best_grasps
        out.append(rec.tobytes())
    return b"".join(out)


def deserialize(data: bytes) -> Octree:
    data = bytes(data)
    if len(data) < HEADER.size:
        raise CorruptHeader(f"need {HEADER.size} header bytes, got {len(data)}")
    magic, version, depth, flags, cx, cy, cz, half = HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise CorruptHeader(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"octree format version {version}, expected {FORMAT_VERSION}")
    if not 1 <= depth <= MAX_DEPTH:
        raise CorruptHeader(f"depth {depth} out of range")
    if not (np.isfinite([cx, cy, cz, half]).all() and half > 0):
        raise CorruptHeader("invalid bounds")
    bounds = Cube((cx, cy, cz), half)
    if not flags & _FLAG_NONEMPTY:
        if len(data) != HEADER.size:
            raise CorruptHeader("trailing bytes after empty octree header")
        return Octree.empty(bounds, depth)
    if len(data) < HEADER.size + LEAF_SECTION.size:
        raise CorruptHeader("truncated leaf section header")
    n, dim, views = LEAF_SECTION.unpack_from(data, HEADER.size)
    has_labels = bool(flags & _FLAG_LABELS)
    dtype = _record_dtype(dim, bool(flags & _FLAG_SDF), bool(flags & _FLAG_NORMALS), views, has_labels)
    body = len(data) - HEADER.size - LEAF_SECTION.size
    if n == 0 or body != n * dtype.itemsize:
        raise CorruptHeader(f"leaf payload is {body} bytes, expected {n} x {dtype.itemsize}")
    rec = np.frombuffer(data, dtype=dtype, offset=HEADER.size + LEAF_SECTION.size, count=n)
    try:
        return Octree(
            bounds,
            depth,
            rec["code"].copy(),
            rec["feature"].copy(),
            sdf=rec["sdf"].copy() if flags & _FLAG_SDF else None,
            normals=rec["normal"].copy() if flags & _FLAG_NORMALS else None,
            graspness=rec["graspness"].copy() if has_labels else None,
            best_grasps=rec["best"].copy() if has_labels else None,
        )
    except ValueError as exc:
        raise CorruptHeader(f"invalid leaf records: {exc}") from exc


def save(tree: Octree, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(tree))


def load(path) -> Octree:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
