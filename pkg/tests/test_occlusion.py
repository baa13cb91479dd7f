from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from graspkit.errors import EmptyVoxelList
from graspkit.geometry import CameraModel, RigidTransform, box
from graspkit.octree import Cube
from graspkit.occlusion import (
    OcclusionField,
    block_offsets,
    compute_occlusion_field,
    voxel_grid,
)
from graspkit.scene import Scene, SceneObject, demo_camera, demo_scene, render

CAM = CameraModel(90.0, 90.0, 40.0, 30.0, 80, 60)


def demo_view():
    scene = demo_scene()
    _, ext = demo_camera()
    return scene, render(scene, CAM, ext)


def random_voxels(n, seed, size=0.02):
    rng = np.random.default_rng(seed)
    return rng.uniform([-0.12, -0.16, 0.0], [0.12, 0.16, 0.12], (n, 3)), size


def mask_oracle(scene, view, blocks, eps, target):
    """Per block: own projection, exact first hit through that pixel center, same depth test."""
    mesh, ids = scene.merged
    R, o = view.extrinsic.rotation, view.extrinsic.translation
    cam = view.camera
    cache = {}
    out = np.zeros((len(blocks), 2), bool)
    for k, p in enumerate(blocks):
        x, y, z = R.T @ (p - o)
        if z <= 0:
            continue
        u, v = round(cam.fx * x / z + cam.cx), round(cam.fy * y / z + cam.cy)
        if not (0 <= u < cam.width and 0 <= v < cam.height):
            continue
        if (u, v) not in cache:
            d = R @ np.array([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, 1.0])
            t, f = oracles.first_hit_all(o, d, mesh.vertices, mesh.triangles)
            tp = (scene.support_z - o[2]) / d[2] if d[2] != 0 else np.inf
            if 0 < tp < t:
                t, f = tp, -1
            cache[u, v] = (t, ids[f] if f >= 0 and np.isfinite(t) else 0)
        t, m = cache[u, v]
        if m != 0 and z > t + eps:
            out[k] = (m == target, m != target)
    return out


def ray_oracle(scene, view, blocks, eps, target):
    """Per block and object: does the camera-to-block segment cross the object before the block?"""
    o = view.extrinsic.translation
    out = np.zeros((len(blocks), 2), bool)
    meshes = {oid: scene.world_mesh(oid) for oid in scene.object_ids}
    for k, p in enumerate(blocks):
        seg = p - o
        stop = 1.0 - eps / np.linalg.norm(seg)
        for oid, m in meshes.items():
            t, _ = oracles.first_hit_all(o, seg, m.vertices, m.triangles)
            if t < stop:
                out[k, 0 if oid == target else 1] = True
    return out


# -- oracle agreement -----------------------------------------------------------------------------
@pytest.mark.parametrize("target", [1, 2, 3])
def test_mask_mode_matches_ray_oracle(target):
    scene, view = demo_view()
    centers, size = random_voxels(400, target, 0.02)
    field = compute_occlusion_field(view, centers, size, target, block_resolution=2)
    blocks = field.block_centers().reshape(-1, 3)
    eps = size / 2 * np.sqrt(3) / 2
    want = mask_oracle(scene, view, blocks, eps, target)
    assert np.array_equal(field.flags.reshape(-1, 2), want)
    assert want[:, 0].any() and want[:, 1].any()


def test_ray_mode_matches_segment_oracle():
    scene, view = demo_view()
    centers, size = random_voxels(150, 7, 0.02)
    field = compute_occlusion_field(view, centers, size, 2, block_resolution=2, mode="ray", scene=scene)
    blocks = field.block_centers().reshape(-1, 3)
    want = ray_oracle(scene, view, blocks, size / 2 * np.sqrt(3) / 2, 2)
    assert np.array_equal(field.flags.reshape(-1, 2), want)
    assert want[:, 0].any() and want[:, 1].any()


# -- examples ---------------------------------------------------------------------------------------
def cube_view():
    scene = Scene((SceneObject(1, "c", RigidTransform.from_translation((0, 0, 1.0))),), {"c": box((0.2, 0.2, 0.2))})
    return scene, render(scene, CAM, RigidTransform.identity())


def test_block_behind_front_face_is_self_occluded():
    _, view = cube_view()
    # front face at z = 0.9 on the optical axis; a 1 cm block 5 cm behind it
    field = compute_occlusion_field(view, [[0, 0, 0.95]], 0.01, 1, block_resolution=1)
    assert field.flags[0, 0].tolist() == [True, False]


def test_free_space_block_is_clear():
    _, view = cube_view()
    field = compute_occlusion_field(view, [[0, 0, 0.5]], 0.01, 1, block_resolution=4)
    assert not field.flags.any()


def test_block_outside_image_is_clear():
    _, view = cube_view()
    field = compute_occlusion_field(view, [[5.0, 0, 1.0], [0, 0, -1.0]], 0.01, 1, block_resolution=2)
    assert not field.flags.any()


@pytest.mark.parametrize("mode", ["mask", "ray"])
def test_isolated_object_has_no_inter_flags(mode):
    scene, view = cube_view()
    centers, size = voxel_grid(Cube(np.array([0, 0, 1.0]), 0.15), 3)
    field = compute_occlusion_field(view, centers, size, 1, block_resolution=2, mode=mode, scene=scene)
    assert not field.flags[..., 1].any()
    assert field.flags[..., 0].any()


@pytest.mark.parametrize("mode", ["mask", "ray"])
def test_monotone_along_camera_ray(mode):
    scene, view = cube_view()
    rng = np.random.default_rng(3)
    for _ in range(20):
        u, v = rng.integers(34, 47), rng.integers(24, 37)
        d = np.array([(u - CAM.cx) / CAM.fx, (v - CAM.cy) / CAM.fy, 1.0])
        zs = np.linspace(0.3, 1.3, 101)
        field = compute_occlusion_field(view, zs[:, None] * d, 0.004, 1, block_resolution=1, mode=mode, scene=scene)
        s = field.flags[:, 0, 0]
        first = np.argmax(s)
        assert s.any() and not s[:first].any() and s[first:].all()
        assert zs[first] > 0.9 and zs[first - 1] <= 0.9 + 0.004


def test_eight_blocks_per_axis():
    _, view = cube_view()
    field = compute_occlusion_field(view, [[0, 0, 1.0]], 0.04, 1)
    assert field.flags.shape == (1, 512, 2)
    off = block_offsets(8)
    assert np.allclose(np.sort(np.unique(off[:, 0])), (np.arange(8) + 0.5) / 8 - 0.5)


def test_empty_voxel_list():
    _, view = cube_view()
    with pytest.raises(EmptyVoxelList):
        compute_occlusion_field(view, np.zeros((0, 3)), 0.01, 1)


def test_unknown_mode_and_missing_scene():
    _, view = cube_view()
    with pytest.raises(ValueError):
        compute_occlusion_field(view, [[0, 0, 1.0]], 0.01, 1, mode="cone")
    with pytest.raises(ValueError):
        compute_occlusion_field(view, [[0, 0, 1.0]], 0.01, 1, mode="ray")


# -- properties -------------------------------------------------------------------------------------
@given(st.integers(0, 10_000))
def test_voxel_order_invariance(seed):
    _, view = demo_view()
    centers, size = random_voxels(30, seed)
    perm = np.random.default_rng(seed).permutation(30)
    a = compute_occlusion_field(view, centers, size, 2, block_resolution=2)
    b = compute_occlusion_field(view, centers[perm], size, 2, block_resolution=2)
    assert np.array_equal(a.flags[perm], b.flags)


def test_bytes_roundtrip():
    _, view = demo_view()
    centers, size = random_voxels(50, 1)
    f = compute_occlusion_field(view, centers, size, 2, block_resolution=3)
    g = OcclusionField.from_bytes(f.to_bytes())
    assert np.array_equal(g.flags, f.flags)
    assert np.allclose(g.voxel_centers, f.voxel_centers, atol=1e-9)
    assert g.block_resolution == 3 and g.target_id == 2
