from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import oracles
from graspkit.errors import CorruptHeader, DepthOutOfRange, GraspkitError, MissingAttributes, VersionMismatch
from graspkit.octree import (
    Cube,
    Octree,
    build_from_mesh,
    build_from_points,
    build_from_sdf,
    deserialize,
    estimate_normals,
    extract_surface,
    load,
    morton_decode,
    morton_encode,
    save,
    serialize,
)
from graspkit.geometry import box

UNIT = Cube(np.zeros(3), 1.0)


def sphere_sdf(radius=0.5):
    def fn(p):
        r = np.linalg.norm(p, axis=1)
        n = p / np.where(r > 0, r, 1.0)[:, None]
        n[r == 0] = (0.0, 0.0, 1.0)
        return r - radius, n

    return fn


def octants():
    c = np.array([[x, y, z] for x in (-0.5, 0.5) for y in (-0.5, 0.5) for z in (-0.5, 0.5)])
    return build_from_points(c, np.arange(8.0)[:, None], UNIT, 1), c


# -- Morton codes -----------------------------------------------------------------------------
@given(st.lists(st.tuples(*[st.integers(0, 2**16 - 1)] * 3), min_size=1, max_size=50))
def test_morton_roundtrip(ijk):
    ijk = np.array(ijk, dtype=np.int64)
    assert np.array_equal(morton_decode(morton_encode(ijk)), ijk)


def test_morton_interleaves_x_lowest():
    assert morton_encode(np.array([[1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1, 1]])).tolist() == [1, 2, 4, 7]


@given(st.lists(st.tuples(*[st.integers(0, 255)] * 3), min_size=2, max_size=40, unique=True))
def test_morton_order_is_total(ijk):
    codes = morton_encode(np.array(ijk))
    assert len(np.unique(codes)) == len(ijk)


# -- build ----------------------------------------------------------------------------------------
def test_single_point_at_center():
    t = build_from_points(np.zeros((1, 3)), np.ones((1, 2)), UNIT, 1)
    assert t.n_leaves == 1
    assert np.allclose(np.abs(t.centers[0]), 0.5)


def test_eight_octants_exact():
    t, c = octants()
    assert t.n_leaves == 8
    got = {tuple(p): f for p, f in zip(t.centers.tolist(), t.features[:, 0])}
    for i, p in enumerate(c):
        assert got[tuple(p)] == i


def test_build_matches_hash_grid():
    rng = np.random.default_rng(0)
    pts = rng.uniform(-1.2, 1.2, (100_000, 3))
    feats = rng.uniform(0, 1, (100_000, 2))
    t = build_from_points(pts, feats, UNIT, 6)
    ref = oracles.hash_grid(pts, feats, UNIT.lo, UNIT.cell_width(6), 64)
    assert t.n_leaves == len(ref)
    for ijk, f in zip(map(tuple, t.ijk), t.features):
        assert np.allclose(f, ref[ijk], atol=1e-6)
    inside = np.all(np.abs(pts) <= 1.0, axis=1)
    assert t.dropped == int((~inside).sum())


@given(st.integers(0, 10_000))
def test_build_is_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    pts = rng.uniform(-1, 1, (300, 3))
    f = rng.normal(size=(300, 3))
    perm = rng.permutation(300)
    a = build_from_points(pts, f, UNIT, 3)
    b = build_from_points(pts[perm], f[perm], UNIT, 3)
    assert np.array_equal(a.codes, b.codes)
    assert np.allclose(a.features, b.features, atol=1e-6)


def test_depth_out_of_range():
    with pytest.raises(DepthOutOfRange):
        build_from_points(np.zeros((1, 3)), np.zeros((1, 1)), UNIT, 17)
    with pytest.raises(DepthOutOfRange):
        Octree.empty(UNIT, 0)


def test_neighbors_match_brute_force_search():
    rng = np.random.default_rng(1)
    t = build_from_points(rng.uniform(-1, 1, (400, 3)), np.zeros((400, 1)), UNIT, 4)
    ijk = t.ijk
    lookup = {tuple(v): i for i, v in enumerate(ijk)}
    for off in [(1, 0, 0), (0, -1, 0), (1, 1, -1)]:
        got = t.neighbor_indices(off)
        want = [lookup.get(tuple(v + off), -1) for v in ijk]
        assert got.tolist() == want


def test_locate_points():
    t, c = octants()
    idx = t.locate(c * 0.9)
    assert np.allclose(t.centers[idx], c)
    assert t.locate(np.array([[2.0, 0, 0]])).tolist() == [-1]


# -- SDF octree and surface extraction -----------------------------------------------------------------
def test_extract_surface_zero_sdf_emits_centers():
    bounds = Cube(np.zeros(3), 0.32)
    t = build_from_points(np.array([[0, 0, 0.26], [0.1, 0.1, 0.1]]), np.zeros((2, 0)), bounds, 4)
    normals = np.array([[0, 0, 1.0], [0, 0, 1.0]])
    pts, _ = extract_surface(t.with_attributes(sdf=np.zeros(2), normals=normals))
    assert np.allclose(pts, t.centers)


def test_extract_surface_example_point():
    # a leaf centered exactly at (0, 0, 0.26): cube of half extent 0.32 at depth 5 has 0.02 cells
    bounds = Cube(np.array([0.01, 0.01, 0.01]), 0.32)
    t = build_from_points(np.array([[0.0, 0.0, 0.26]]), np.zeros((1, 0)), bounds, 5)
    assert np.allclose(t.centers[0], [0.0, 0.0, 0.26], atol=1e-6)
    t = t.with_attributes(sdf=np.array([0.01]), normals=np.array([[0, 0, 1.0]]))
    out, _ = extract_surface(t)
    assert np.allclose(out[0], [0, 0, 0.25], atol=1e-6)


def test_extract_surface_needs_sdf():
    t, _ = octants()
    with pytest.raises(MissingAttributes):
        extract_surface(t)


@pytest.mark.parametrize("depth", [5, 6])
def test_sphere_surface_within_half_leaf(depth):
    t = build_from_sdf(sphere_sdf(), UNIT, depth)
    pts, _ = extract_surface(t)
    assert len(pts) > 0
    err = np.abs(np.linalg.norm(pts, axis=1) - 0.5)
    assert err.max() <= t.leaf_width / 2


def test_surface_error_halves_with_depth_fd_normals():
    mean_err, max_err = [], []
    for depth in (5, 6, 7):
        t = build_from_sdf(sphere_sdf(), UNIT, depth)
        t = t.with_attributes(normals=estimate_normals(t))
        pts, _ = extract_surface(t)
        e = np.abs(np.linalg.norm(pts, axis=1) - 0.5)
        mean_err.append(e.mean())
        max_err.append(e.max())
    for coarse, fine in zip(mean_err, mean_err[1:]):
        assert fine <= 0.6 * coarse
    for coarse, fine in zip(max_err, max_err[1:]):
        assert fine <= 0.7 * coarse


def test_sdf_is_truncated():
    t = build_from_sdf(sphere_sdf(), UNIT, 5)
    assert np.abs(t.sdf).max() <= t.truncation * (1 + 1e-6)


def test_build_from_mesh_box_surface():
    m = box((0.1, 0.06, 0.04))
    t = build_from_mesh(m, depth=5)
    pts, _ = extract_surface(t)
    half = np.array([0.05, 0.03, 0.02])
    # distance from box surface of every extracted point
    q = np.abs(pts) - half
    outside = np.linalg.norm(np.maximum(q, 0), axis=1)
    inside = np.minimum(q.max(axis=1), 0)
    assert np.max(np.abs(outside + inside)) <= t.leaf_width / 2


# -- serialization -----------------------------------------------------------------------------------
def test_empty_octree_is_24_bytes():
    data = serialize(Octree.empty(UNIT, 6))
    assert len(data) == 24
    assert deserialize(data) == Octree.empty(UNIT, 6)


def test_roundtrip_octants(tmp_path):
    t, _ = octants()
    assert deserialize(serialize(t)) == t
    save(t, tmp_path / "t.octz")
    assert load(tmp_path / "t.octz") == t


def test_roundtrip_with_all_attributes():
    t = build_from_sdf(sphere_sdf(), UNIT, 4, feature_dim=3)
    n = t.n_leaves
    rng = np.random.default_rng(2)
    g = rng.uniform(0, 1, (n, 300))
    best = np.full((n, 12), np.nan)
    best[::3] = rng.normal(size=(len(best[::3]), 12))
    t = t.with_attributes(graspness=g, best_grasps=best)
    assert deserialize(serialize(t)) == t


def test_truncation_at_every_offset_fails_cleanly():
    t, _ = octants()
    data = serialize(t)
    for k in range(len(data)):
        with pytest.raises(GraspkitError):
            deserialize(data[:k])


def test_corrupt_magic_and_version():
    data = bytearray(serialize(octants()[0]))
    bad = bytes(b"XXXX" + data[4:])
    with pytest.raises(CorruptHeader):
        deserialize(bad)
    data[4] = 99
    with pytest.raises(VersionMismatch):
        deserialize(bytes(data))


@given(st.binary(max_size=64))
def test_fuzzed_bytes_never_crash(blob):
    try:
        deserialize(blob)
    except GraspkitError:
        pass
