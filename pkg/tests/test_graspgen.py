from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from graspkit.errors import DegenerateContacts
from graspkit.geometry import RigidTransform, SurfaceSample, box, surface_cloud
from graspkit.graspgen import (
    DEPTHS,
    GRASP_RECORD,
    ContactPair,
    GraspPose,
    GripperModel,
    LabelConfig,
    assign_labels,
    candidate_angles,
    check_collision,
    check_collisions,
    contact_offsets,
    enumerate_candidates,
    fibonacci_views,
    find_contacts,
    generate_labels,
    grasp_quality,
    grasp_rotation,
    label_grasps,
    pack_grasps,
    read_grasps_jsonl,
    unpack_grasps,
    write_grasps_jsonl,
)
from graspkit.octree import Cube, build_from_points

DOWN = np.array([0.0, 0.0, -1.0])


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


# -- candidate space -------------------------------------------------------------------------------
def test_candidate_count_and_grid():
    cands = enumerate_candidates(SurfaceSample(np.zeros(3), np.array([0, 0, 1.0]), 0))
    assert len(cands) == 14_400
    assert sorted({c.depth for c in cands}) == list(DEPTHS)
    assert np.allclose(sorted({c.angle for c in cands}), np.arange(12) * np.pi / 12)
    assert len({tuple(c.view) for c in cands}) == 300


def test_views_are_spread_at_least_seven_degrees():
    v = fibonacci_views()
    assert np.allclose(np.linalg.norm(v, axis=1), 1.0)
    cos = v @ v.T
    np.fill_diagonal(cos, -1.0)
    assert np.degrees(np.arccos(cos.max())) >= 7.0


def test_candidates_are_deterministic():
    s = SurfaceSample(np.array([0.1, 0.2, 0.3]), np.array([0, 0, 1.0]), 0)
    a = enumerate_candidates(s)
    b = enumerate_candidates(s)
    assert all(np.array_equal(x.view, y.view) and x.angle == y.angle and x.depth == y.depth for x, y in zip(a, b))


@given(st.floats(-1, 1), st.floats(-1, 1), st.floats(-1, 1), st.floats(0, np.pi, exclude_max=True))
def test_rotation_matches_axis_angle_frame(x, y, z, a):
    if np.linalg.norm([x, y, z]) < 1e-3:
        return
    R = grasp_rotation(unit([x, y, z]), a)
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-12) and np.linalg.det(R) == pytest.approx(1.0)
    assert np.allclose(R, np.stack(oracles.gripper_frame([x, y, z], a), axis=1), atol=1e-9)


def test_grasp_pose_validation():
    with pytest.raises(ValueError):
        GraspPose(np.zeros(3), [0, 0, 2.0], 0.0, 0.05, 0.01)
    with pytest.raises(ValueError):
        GraspPose(np.zeros(3), DOWN, np.pi, 0.05, 0.01)
    with pytest.raises(ValueError):
        GraspPose(np.zeros(3), DOWN, 0.0, 0.11, 0.01)
    with pytest.raises(ValueError):
        GraspPose(np.zeros(3), DOWN, 0.0, 0.05, 0.05)


def test_gripper_validation():
    with pytest.raises(ValueError):
        GripperModel(finger_thickness=0.0)


# -- contacts -------------------------------------------------------------------------------------------
def box_cloud(ext=(0.04, 0.04, 0.04), spacing=0.002, seed=0):
    return surface_cloud(box(ext), spacing, seed=seed)


def test_box_contacts_one_cm_from_each_finger():
    # top-down over a 4 cm cube, closing along world y, 6 cm opening
    g = GraspPose(np.array([0, 0, 0.02]), DOWN, 0.0, 0.06, 0.02)
    c = find_contacts(g, box_cloud())
    assert c is not None
    assert c.left[1] == pytest.approx(-0.02, abs=1e-12) and c.right[1] == pytest.approx(0.02, abs=1e-12)
    assert np.allclose(c.left_normal, [0, -1, 0]) and np.allclose(c.right_normal, [0, 1, 0])
    dl, dr, _, _ = contact_offsets(g, c)
    assert dl == pytest.approx(0.01, abs=1e-12) and dr == pytest.approx(0.01, abs=1e-12)
    # sampled contacts are offset along the faces, so the contact axis tilts slightly
    assert grasp_quality(c) > 0.95


def test_empty_closing_region_has_no_contacts():
    g = GraspPose(np.array([0, 0, 0.5]), DOWN, 0.0, 0.06, 0.02)
    assert find_contacts(g, box_cloud()) is None


def brute_contacts(g, pts, gr=GripperModel()):
    x, y, z = oracles.gripper_frame(g.view, g.angle)
    ys = []
    for p in pts:
        r = p - g.anchor
        a, b, c = r @ x, r @ y, r @ z
        if g.depth - gr.finger_depth <= a <= g.depth and abs(b) <= g.width / 2 and abs(c) <= gr.finger_height / 2:
            ys.append(b)
    return (min(ys), max(ys)) if ys else None


@pytest.mark.parametrize("seed", range(6))
def test_find_contacts_matches_brute_force_scan(seed):
    rng = np.random.default_rng(seed)
    pts, nrm = box_cloud((0.05, 0.03, 0.07), 0.004, seed)
    T = RigidTransform.random(rng, scale=0.0)
    pts, nrm = T.apply(pts), nrm @ T.rotation.T
    for _ in range(40):
        anchor = pts[rng.integers(len(pts))]
        g = GraspPose(anchor, unit(rng.normal(size=3)), rng.uniform(0, np.pi), rng.uniform(0.02, 0.1),
                      float(rng.choice(DEPTHS)))
        want = brute_contacts(g, pts)
        got = find_contacts(g, (pts, nrm))
        if want is None or want[1] - want[0] < 1e-9:
            assert got is None or np.linalg.norm(got.left - got.right) >= 1e-6
            continue
        R = g.rotation
        assert (got.left - g.anchor) @ R[:, 1] == pytest.approx(want[0], abs=2e-9)
        assert (got.right - g.anchor) @ R[:, 1] == pytest.approx(want[1], abs=2e-9)


# -- quality --------------------------------------------------------------------------------------------
def test_quality_antipodal_orthogonal_and_sphere_30deg():
    pair = ContactPair(np.array([0, -0.02, 0]), np.array([0, 0.02, 0]), np.array([0, -1.0, 0]), np.array([0, 1.0, 0]))
    assert grasp_quality(pair) == pytest.approx(1.0)
    ortho = ContactPair(pair.left, pair.right, np.array([1.0, 0, 0]), np.array([0, 0, 1.0]))
    assert grasp_quality(ortho) == pytest.approx(0.0, abs=1e-12)
    r, a = 0.03, np.radians(30)
    cl, cr = r * np.array([-np.cos(a), np.sin(a), 0]), r * np.array([np.cos(a), np.sin(a), 0])
    sph = ContactPair(cl, cr, cl / r, cr / r)
    assert grasp_quality(sph) == pytest.approx(np.cos(a), abs=1e-12)


def test_degenerate_contacts():
    p = np.zeros(3)
    with pytest.raises(DegenerateContacts):
        grasp_quality(ContactPair(p, p + 1e-7, DOWN, -DOWN))


def random_pair(seed):
    rng = np.random.default_rng(seed)
    c = rng.normal(size=(2, 3)) * 0.05
    n = rng.normal(size=(2, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return ContactPair(c[0], c[1], n[0], n[1]), rng


@given(st.integers(0, 100_000))
def test_quality_rigid_invariance(seed):
    pair, rng = random_pair(seed)
    T = RigidTransform.random(rng)
    moved = ContactPair(T.apply(pair.left), T.apply(pair.right),
                        T.rotation @ pair.left_normal, T.rotation @ pair.right_normal)
    assert grasp_quality(moved) == pytest.approx(grasp_quality(pair), abs=1e-9)


@given(st.integers(0, 100_000))
def test_quality_swap_symmetry(seed):
    pair, _ = random_pair(seed)
    swapped = ContactPair(pair.right, pair.left, pair.right_normal, pair.left_normal)
    assert grasp_quality(swapped) == pytest.approx(grasp_quality(pair), abs=1e-12)
    assert -1.0 <= grasp_quality(pair) <= 1.0


def test_parallel_faces_sweep_peaks_when_closing_along_normals():
    cloud = box_cloud((0.04, 0.08, 0.04), 0.002)
    q = []
    for a in candidate_angles(36):
        g = GraspPose(np.array([0, 0, 0.02]), DOWN, a, 0.1, 0.02)
        c = find_contacts(g, cloud)
        q.append(grasp_quality(c) if c is not None else -1.0)
    q = np.array(q)
    # closing along world y (angle 0) or world x (angle pi/2) is normal to a face pair
    aligned = np.isin(np.arange(36), [0, 18])
    assert q[aligned].min() > 0.95
    assert q[~aligned].max() < q[aligned].min()


# -- collision ------------------------------------------------------------------------------------------
def test_far_grasp_is_free_and_finger_centroid_collides():
    pts, _ = box_cloud()
    assert not check_collision(GraspPose(np.array([1.0, 1, 1]), DOWN, 0.0, 0.06, 0.02), pts)
    g = GraspPose(np.zeros(3), DOWN, 0.0, 0.06, 0.02)
    centroid = g.anchor + g.rotation @ np.array([0.02 - 0.03, 0.03 + 0.005, 0.0])
    assert check_collision(g, centroid[None])
    # a point in the closing region is not a collision
    assert not check_collision(g, (g.anchor + g.rotation @ np.array([0.0, 0.0, 0.0]))[None])


def test_collisions_match_oriented_box_oracle():
    rng = np.random.default_rng(11)
    scene_pts = rng.uniform(-0.08, 0.08, (400, 3))
    grasps = [
        GraspPose(rng.uniform(-0.05, 0.05, 3), unit(rng.normal(size=3)), rng.uniform(0, np.pi),
                  rng.uniform(0, 0.1), rng.uniform(0, 0.04))
        for _ in range(1000)
    ]
    got = check_collisions(grasps, scene_pts)
    for g, hit in zip(grasps, got):
        want = any(oracles.point_in_gripper(p, g.anchor, g.view, g.angle, g.width, g.depth) for p in scene_pts)
        assert hit == want
        assert check_collision(g, scene_pts) == want
    assert 0 < got.sum() < len(grasps)


def test_collision_with_octree_and_support_plane():
    pts, _ = box_cloud()
    tree = build_from_points(pts, np.zeros((len(pts), 0)), Cube(np.zeros(3), 0.05), 5)
    # a 2 cm opening over a 4 cm cube puts both fingers into the top face
    g = GraspPose(np.zeros(3), DOWN, 0.0, 0.02, 0.02)
    assert check_collision(g, tree)
    assert not check_collision(g.replace(width=0.06), tree)
    up = GraspPose(np.array([0, 0, 0.2]), DOWN, 0.0, 0.06, 0.02)
    assert not check_collision(up, tree)
    # fingertips reach z = 0.18, finger half-height below that does not matter for a top-down grasp
    assert check_collision(up, tree, support_z=0.185)
    assert not check_collision(up, tree, support_z=0.175)


@given(st.integers(0, 100_000))
def test_collision_is_monotone_in_geometry(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(-0.06, 0.06, (50, 3))
    b = np.vstack([a, rng.uniform(-0.06, 0.06, (50, 3))])
    g = GraspPose(rng.uniform(-0.02, 0.02, 3), unit(rng.normal(size=3)), rng.uniform(0, np.pi), 0.08, 0.02)
    assert check_collision(g, b) >= check_collision(g, a)


# -- label generation -------------------------------------------------------------------------------
def sample(p, n):
    return SurfaceSample(np.asarray(p, dtype=np.float64), unit(n), 0)


def test_small_cube_has_a_good_view():
    labels = generate_labels(box((0.03, 0.03, 0.03)), config=LabelConfig(rho=0.005),
                             samples=[sample([0, 0, 0.015], [0, 0, 1])])
    (_, lab), = labels
    assert lab.graspness.shape == (300,) and np.all((lab.graspness >= 0) & (lab.graspness <= 1))
    assert lab.graspness.max() > 0.5
    assert lab.best is not None and lab.best.quality == pytest.approx(np.nanmax(lab.quality))


def test_big_cube_face_centers_are_ungraspable():
    mesh = box((0.2, 0.2, 0.2))
    samples = [sample([0, 0, 0.1], [0, 0, 1]), sample([0.1, 0.02, -0.03], [1, 0, 0])]
    for _, lab in generate_labels(mesh, samples=samples):
        assert not lab.graspness.any()
        assert lab.best is None


def test_thin_plate_pinch_views_beat_top_down():
    mesh = box((0.15, 0.15, 0.005))
    views = fibonacci_views()
    pinch = np.abs(views[:, 2]) < 0.3
    top = views[:, 2] < -0.9
    samples = [sample([0.05, 0.02, 0.0025], [0, 0, 1]), sample([-0.07, 0.0, 0.0025], [0, 0, 1])]
    for _, lab in generate_labels(mesh, samples=samples):
        assert lab.graspness[pinch].max() > 0
        assert lab.graspness[top].mean() < 0.05
        assert lab.graspness[top].max() < lab.graspness[pinch].max()


def test_only_opposing_views_are_evaluated():
    (_, lab), = generate_labels(box((0.03, 0.03, 0.03)), samples=[sample([0, 0, 0.015], [0, 0, 1])])
    views = fibonacci_views()
    assert not lab.graspness[views[:, 2] >= 0].any()
    assert np.all(np.isnan(lab.quality[views[:, 2] >= 0]))


def test_label_generation_is_deterministic_and_thread_safe():
    mesh = box((0.03, 0.04, 0.05))
    cfg = LabelConfig(rho=0.002)
    a = generate_labels(mesh, config=cfg, threads=1)
    b = generate_labels(mesh, config=cfg, threads=3)
    assert len(a) == len(b) > 1
    for (sa, la), (sb, lb) in zip(a, b):
        assert np.array_equal(sa.point, sb.point)
        assert np.array_equal(la.graspness, lb.graspness)
        assert np.array_equal(la.quality, lb.quality, equal_nan=True)


def test_label_grasps_reach_threshold():
    labels = generate_labels(box((0.03, 0.03, 0.03)), samples=[sample([0, 0, 0.015], [0, 0, 1])])
    gs = label_grasps(labels, 0.5)
    assert gs and all(g.quality >= 0.5 for g in gs)
    assert len({tuple(g.view) for g in gs}) == len(gs)


def test_assign_labels_within_radius():
    labels = generate_labels(box((0.03, 0.03, 0.03)), samples=[sample([0, 0, 0.015], [0, 0, 1])])
    pts = np.array([[0.001, 0.0, 0.015], [0.02, 0.0, 0.015]])
    tree = build_from_points(pts, np.zeros((2, 0)), Cube(np.zeros(3), 0.032), 9)
    out = assign_labels(tree, labels)
    near = np.argmin(np.linalg.norm(out.centers - pts[0], axis=1))
    far = 1 - near
    assert np.allclose(out.graspness[near], labels[0][1].graspness)
    assert not out.graspness[far].any()
    assert np.isnan(out.best_grasps[far]).all() and np.isfinite(out.best_grasps[near]).all()


# -- I/O -------------------------------------------------------------------------------------------------
def some_grasps(n=20, seed=0):
    rng = np.random.default_rng(seed)
    return [
        GraspPose(rng.normal(size=3), unit(rng.normal(size=3)), rng.uniform(0, np.pi), rng.uniform(0, 0.1),
                  rng.uniform(0, 0.04), rng.uniform(), rng.uniform(-1, 1), int(rng.integers(5)))
        for _ in range(n)
    ]


def test_jsonl_roundtrip_is_exact(tmp_path):
    gs = some_grasps()
    write_grasps_jsonl(tmp_path / "g.jsonl", gs)
    back = read_grasps_jsonl(tmp_path / "g.jsonl")
    for a, b in zip(gs, back):
        assert np.array_equal(a.anchor, b.anchor) and np.array_equal(a.view, b.view)
        assert (a.angle, a.width, a.depth, a.graspness, a.quality, a.object_id) == \
               (b.angle, b.width, b.depth, b.graspness, b.quality, b.object_id)


def test_packed_roundtrip_is_float32_close():
    gs = some_grasps()
    data = pack_grasps(gs)
    assert len(data) == GRASP_RECORD.size * len(gs) == 48 * len(gs)
    for a, b in zip(gs, unpack_grasps(data)):
        assert np.allclose(a.anchor, b.anchor, atol=1e-6) and np.allclose(a.view, b.view, atol=1e-6)
        assert b.angle == pytest.approx(a.angle, abs=1e-6) and b.object_id == a.object_id
    with pytest.raises(ValueError):
        unpack_grasps(data[:-1])
