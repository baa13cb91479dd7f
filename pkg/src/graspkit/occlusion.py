"""3D occlusion fields: per-voxel grids of sub-blocks flagged as hidden behind
the target object (``o_self``) or behind other objects (``o_inter``)."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import EmptyVoxelList
from .octree import Cube, Octree
from .scene import Scene, SceneView, project_world

FLAG_SELF = 0
FLAG_INTER = 1


def block_offsets(block_resolution: int) -> np.ndarray:
    """Unit-voxel offsets of the ``B^3`` block centers, index ``(ix * B + iy) * B + iz``."""
    B = int(block_resolution)
    c = (np.arange(B) + 0.5) / B - 0.5
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1).reshape(-1, 3)


@dataclass(frozen=True, eq=False)
class OcclusionField:
    voxel_centers: np.ndarray  # (N, 3)
    voxel_sizes: np.ndarray  # (N,)
    block_resolution: int
    flags: np.ndarray  # (N, B^3, 2) bool: [o_self, o_inter]
    target_id: int

    @property
    def n_voxels(self) -> int:
        return len(self.voxel_centers)

    def block_centers(self) -> np.ndarray:
        off = block_offsets(self.block_resolution)
        return self.voxel_centers[:, None, :] + off[None] * self.voxel_sizes[:, None, None]

    def occlusion_fraction(self) -> np.ndarray:
        """Fraction of flagged blocks per voxel, ``(N, 2)``."""
        return self.flags.mean(axis=1)

    def to_bytes(self) -> bytes:
        """One JSON header line, then the flags as a packed big-endian bitset (voxel, block, flag order)."""
        bits = np.packbits(self.flags.reshape(-1).astype(np.uint8))
        header = {
            "n_voxels": self.n_voxels,
            "block_resolution": self.block_resolution,
            "target_id": self.target_id,
            "layout": "voxel-major; block (ix*B+iy)*B+iz; flags [o_self, o_inter]",
            "n_bytes": int(bits.size),
            "voxel_centers": np.round(self.voxel_centers, 9).tolist(),
            "voxel_sizes": np.round(self.voxel_sizes, 9).tolist(),
        }
        return json.dumps(header).encode() + b"\n" + bits.tobytes()

    @classmethod
    def from_bytes(cls, data: bytes) -> "OcclusionField":
        head, _, body = data.partition(b"\n")
        meta = json.loads(head)
        B = meta["block_resolution"]
        n = meta["n_voxels"]
        bits = np.unpackbits(np.frombuffer(body, dtype=np.uint8, count=meta["n_bytes"]))
        flags = bits[: n * B ** 3 * 2].astype(bool).reshape(n, B ** 3, 2)
        return cls(
            np.asarray(meta["voxel_centers"], dtype=np.float64).reshape(n, 3),
            np.asarray(meta["voxel_sizes"], dtype=np.float64),
            B,
            flags,
            meta["target_id"],
        )


def compute_occlusion_field(
    view: SceneView,
    voxel_centers,
    voxel_size,
    target_id: int,
    block_resolution: int = 8,
    mode: str = "mask",
    scene: Scene | None = None,
) -> OcclusionField:
    """Flag every sub-block of every voxel.

    ``mode="mask"``: a block projecting onto pixel ``(u, v)`` is flagged when it
    lies deeper than ``D(u, v)`` by more than half the block diagonal and the
    pixel belongs to the target (``o_self``) or to another object
    (``o_inter``). Blocks outside the image or behind the camera stay clear.

    ``mode="ray"``: flags record whether the segment from the camera to the
    block crosses the target / another object; needs ``scene``.
    """
    centers = np.asarray(voxel_centers, dtype=np.float64).reshape(-1, 3)
    if len(centers) == 0:
        raise EmptyVoxelList("no voxels given")
    B = int(block_resolution)
    if B < 1:
        raise ValueError("block resolution must be >= 1")
    sizes = np.broadcast_to(np.asarray(voxel_size, dtype=np.float64), (len(centers),)).copy()
    off = block_offsets(B)
    blocks = centers[:, None, :] + off[None] * sizes[:, None, None]
    eps = (sizes / B * np.sqrt(3.0) / 2.0)[:, None]
    flat = blocks.reshape(-1, 3)
    if mode == "mask":
        flags = _mask_flags(view, flat, eps, target_id, len(centers), B)
    elif mode == "ray":
        if scene is None:
            raise ValueError("ray mode needs the scene geometry")
        flags = _ray_flags(view, scene, flat, eps, target_id, len(centers), B)
    else:
        raise ValueError(f"unknown occlusion mode {mode!r}")
    return OcclusionField(centers, sizes, B, flags, int(target_id))


def _mask_flags(view, flat, eps, target_id, n, B):
    u, v, z = project_world(view, flat)
    H, W = view.depth.shape
    with np.errstate(invalid="ignore"):
        ui = np.rint(u)
        vi = np.rint(v)
        ok = np.isfinite(ui) & np.isfinite(vi) & (z > 0) & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
    ui = np.where(ok, ui, 0).astype(np.int64)
    vi = np.where(ok, vi, 0).astype(np.int64)
    m = view.mask[vi, ui]
    d = view.depth[vi, ui]
    behind = ok & (z.reshape(n, -1) > (d.reshape(n, -1) + eps)).reshape(-1)
    o_self = behind & (m == target_id)
    o_inter = behind & (m != 0) & (m != target_id)
    return np.stack([o_self, o_inter], axis=-1).reshape(n, B ** 3, 2)


def _ray_flags(view, scene, flat, eps, target_id, n, B):
    origin = view.extrinsic.translation
    seg = flat - origin
    length = np.linalg.norm(seg, axis=1)
    dirs = seg / length[:, None]
    limit = (length.reshape(n, -1) - eps).reshape(-1)
    o_self = np.zeros(len(flat), bool)
    o_inter = np.zeros(len(flat), bool)
    for oid in scene.object_ids:
        t, _ = scene.world_mesh(oid).bvh.first_hit(origin, dirs)
        crosses = t < limit
        if oid == target_id:
            o_self |= crosses
        else:
            o_inter |= crosses
    return np.stack([o_self, o_inter], axis=-1).reshape(n, B ** 3, 2)


# -- voxel sources -----------------------------------------------------------------------
def voxel_grid(bounds: Cube, level: int) -> tuple[np.ndarray, float]:
    """All ``2^level``-per-axis voxel centers of ``bounds`` and their edge length."""
    res = 1 << level
    idx = np.stack(np.meshgrid(*[np.arange(res)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return bounds.cell_centers(idx, level), bounds.cell_width(level)


def voxels_from_octree(tree: Octree, level: int) -> tuple[np.ndarray, float]:
    """Occupied node centers of ``tree`` at ``level`` and their edge length."""
    from .octree import morton_decode

    codes = tree.level_codes(level)
    return tree.bounds.cell_centers(morton_decode(codes), level), tree.bounds.cell_width(level)
