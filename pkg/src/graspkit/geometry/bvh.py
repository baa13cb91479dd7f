"""Axis-aligned bounding-volume hierarchy over triangles.

Traversal is batched: every query carries its own frontier of candidate nodes
and whole frontiers are expanded at once with numpy, so there is no per-query
Python loop. Construction is a deterministic median split along the longest
centroid extent.
"""
from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

LEAF_SIZE = 4
_QUERY_CHUNK = 16384
_RAY_EPS = 1e-12


def closest_point_on_triangles(p, a, b, c):
    """Closest point on triangles ``(a, b, c)`` to points ``p`` (row-aligned).

    Returns ``(points, squared_distances)``. Interior projections are taken
    from the supporting plane; everything else falls back to the three edge
    segments, which also covers zero-area triangles.
    """
    ab = b - a
    ac = c - a
    n = np.cross(ab, ac)
    nn = np.einsum("ij,ij->i", n, n)
    ap = p - a
    with np.errstate(divide="ignore", invalid="ignore"):
        # barycentric coordinates of the plane projection
        d00 = np.einsum("ij,ij->i", ab, ab)
        d01 = np.einsum("ij,ij->i", ab, ac)
        d11 = np.einsum("ij,ij->i", ac, ac)
        d20 = np.einsum("ij,ij->i", ap, ab)
        d21 = np.einsum("ij,ij->i", ap, ac)
        denom = d00 * d11 - d01 * d01
        v = (d11 * d20 - d01 * d21) / denom
        w = (d00 * d21 - d01 * d20) / denom
    inside = (nn > 1e-30) & (v >= 0) & (w >= 0) & (v + w <= 1)

    best_pt = np.empty_like(p)
    best_d2 = np.full(len(p), np.inf)
    if inside.any():
        proj = a[inside] + v[inside, None] * ab[inside] + w[inside, None] * ac[inside]
        best_pt[inside] = proj
        diff = p[inside] - proj
        best_d2[inside] = np.einsum("ij,ij->i", diff, diff)
    out = ~inside
    if out.any():
        po = p[out]
        cand_pt = None
        cand_d2 = None
        for s0, s1 in ((a[out], b[out]), (b[out], c[out]), (c[out], a[out])):
            q, d2 = _closest_on_segments(po, s0, s1)
            if cand_pt is None:
                cand_pt, cand_d2 = q, d2
            else:
                better = d2 < cand_d2
                cand_pt[better] = q[better]
                cand_d2[better] = d2[better]
        best_pt[out] = cand_pt
        best_d2[out] = cand_d2
    return best_pt, best_d2


def _closest_on_segments(p, s0, s1):
    d = s1 - s0
    dd = np.einsum("ij,ij->i", d, d)
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", p - s0, d) / dd
    t = np.where(dd > 0, np.clip(t, 0.0, 1.0), 0.0)
    q = s0 + t[:, None] * d
    diff = p - q
    return q, np.einsum("ij,ij->i", diff, diff)


def ray_triangle_intersect(orig, dirs, a, b, c, t_min: float = _RAY_EPS):
    """Möller-Trumbore, row-aligned. Returns hit parameter ``t`` (``inf`` on miss)."""
    e1 = b - a
    e2 = c - a
    pvec = np.cross(dirs, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-18
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / det
        tvec = orig - a
        u = np.einsum("ij,ij->i", tvec, pvec) * inv
        qvec = np.cross(tvec, e1)
        v = np.einsum("ij,ij->i", dirs, qvec) * inv
        t = np.einsum("ij,ij->i", e2, qvec) * inv
        hit = ok & (u >= 0) & (v >= 0) & (u + v <= 1) & (t > t_min)
    return np.where(hit, t, np.inf)


class BVH:
    """Static BVH over a triangle soup given as corner arrays ``a, b, c``."""

    def __init__(self, a: np.ndarray, b: np.ndarray, c: np.ndarray, leaf_size: int = LEAF_SIZE):
        self.a = np.ascontiguousarray(a, dtype=np.float64)
        self.b = np.ascontiguousarray(b, dtype=np.float64)
        self.c = np.ascontiguousarray(c, dtype=np.float64)
        self.n_triangles = len(self.a)
        self.leaf_size = leaf_size
        self._build()

    def _build(self):
        tri_lo = np.minimum(np.minimum(self.a, self.b), self.c)
        tri_hi = np.maximum(np.maximum(self.a, self.b), self.c)
        centroid = (self.a + self.b + self.c) / 3.0
        order = np.arange(self.n_triangles)
        lo, hi, left, right, start, count = [], [], [], [], [], []

        def new_node():
            for arr in (lo, hi):
                arr.append(None)
            for arr in (left, right, start, count):
                arr.append(-1)
            return len(lo) - 1

        if self.n_triangles == 0:
            self.node_lo = np.zeros((0, 3))
            self.node_hi = np.zeros((0, 3))
            self.left = self.right = np.zeros(0, dtype=np.int64)
            self.leaf_tris = np.zeros((0, self.leaf_size), dtype=np.int64)
            self.is_leaf = np.zeros(0, dtype=bool)
            return

        stack = [(0, self.n_triangles, new_node())]
        while stack:
            s, e, nid = stack.pop()
            idx = order[s:e]
            lo[nid] = tri_lo[idx].min(axis=0)
            hi[nid] = tri_hi[idx].max(axis=0)
            if e - s <= self.leaf_size:
                start[nid], count[nid] = s, e - s
                continue
            cen = centroid[idx]
            axis = int(np.argmax(cen.max(axis=0) - cen.min(axis=0)))
            order[s:e] = idx[np.argsort(cen[:, axis], kind="stable")]
            mid = (s + e) // 2
            l_id, r_id = new_node(), new_node()
            left[nid], right[nid] = l_id, r_id
            stack.append((mid, e, r_id))
            stack.append((s, mid, l_id))

        self.node_lo = np.asarray(lo)
        self.node_hi = np.asarray(hi)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        start = np.asarray(start, dtype=np.int64)
        count = np.asarray(count, dtype=np.int64)
        self.is_leaf = self.left < 0
        slots = np.arange(self.leaf_size)
        leaf_tris = np.full((len(lo), self.leaf_size), -1, dtype=np.int64)
        rows = np.nonzero(self.is_leaf)[0]
        pos = start[rows, None] + slots
        valid = slots < count[rows, None]
        leaf_tris[rows] = np.where(valid, order[np.minimum(pos, self.n_triangles - 1)], -1)
        self.leaf_tris = leaf_tris
        self._centroid_tree = cKDTree(centroid)

    # -- closest point -----------------------------------------------------
    def closest(self, queries) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Exact closest surface point for each query.

        Returns ``(points, distances, triangle_ids)``. Among exactly tied
        triangles the smallest index wins.
        """
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        pts = np.empty_like(q)
        dist = np.empty(len(q))
        tri = np.empty(len(q), dtype=np.int64)
        for s in range(0, len(q), _QUERY_CHUNK):
            p, d, t = self._closest_chunk(q[s : s + _QUERY_CHUNK])
            pts[s : s + len(p)], dist[s : s + len(p)], tri[s : s + len(p)] = p, d, t
        return pts, dist, tri

    def _closest_chunk(self, q):
        Q = len(q)
        # Seed each query with the triangle owning its nearest centroid: a tight upper bound.
        _, seed_tri = self._centroid_tree.query(q)
        seed_tri = np.asarray(seed_tri, dtype=np.int64)
        best_pt, best_d2 = closest_point_on_triangles(q, self.a[seed_tri], self.b[seed_tri], self.c[seed_tri])
        best_tri = seed_tri.copy()

        qi = np.arange(Q)
        ni = np.zeros(Q, dtype=np.int64)
        while qi.size:
            d = np.maximum(self.node_lo[ni] - q[qi], 0.0) + np.maximum(q[qi] - self.node_hi[ni], 0.0)
            keep = np.einsum("ij,ij->i", d, d) <= best_d2[qi]
            qi, ni = qi[keep], ni[keep]
            leaf = self.is_leaf[ni]
            if leaf.any():
                tris = self.leaf_tris[ni[leaf]]
                valid = tris >= 0
                qq = np.repeat(qi[leaf], valid.sum(axis=1))
                tt = tris[valid]
                cp, d2 = closest_point_on_triangles(q[qq], self.a[tt], self.b[tt], self.c[tt])
                order = np.lexsort((tt, d2, qq))
                qq, tt, d2, cp = qq[order], tt[order], d2[order], cp[order]
                first = np.ones(len(qq), dtype=bool)
                first[1:] = qq[1:] != qq[:-1]
                qq, tt, d2, cp = qq[first], tt[first], d2[first], cp[first]
                better = (d2 < best_d2[qq]) | ((d2 == best_d2[qq]) & (tt < best_tri[qq]))
                qq, tt, d2, cp = qq[better], tt[better], d2[better], cp[better]
                best_d2[qq], best_tri[qq], best_pt[qq] = d2, tt, cp
            inner = ~leaf
            iq, inn = qi[inner], ni[inner]
            qi = np.concatenate([iq, iq])
            ni = np.concatenate([self.left[inn], self.right[inn]])
        return best_pt, np.sqrt(best_d2), best_tri

    # -- rays --------------------------------------------------------------
    def _ray_node_hits(self, o, inv, ni, t_far):
        t1 = (self.node_lo[ni] - o) * inv
        t2 = (self.node_hi[ni] - o) * inv
        t_near = np.maximum(np.minimum(t1, t2).max(axis=1), 0.0)
        t_exit = np.maximum(t1, t2).min(axis=1)
        return (t_exit >= t_near) & (t_near <= t_far)

    @staticmethod
    def _safe_inverse(d):
        d = np.where(np.abs(d) < 1e-300, np.where(d < 0, -1e-300, 1e-300), d)
        return 1.0 / d

    def first_hit(self, origins, dirs, t_max=np.inf) -> tuple[np.ndarray, np.ndarray]:
        """Nearest intersection per ray: ``(t, triangle_id)``; misses give ``(inf, -1)``."""
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        o, d = np.broadcast_arrays(o, d)
        R = len(d)
        best_t = np.full(R, float(t_max))
        best_tri = np.full(R, -1, dtype=np.int64)
        if self.n_triangles == 0 or R == 0:
            return np.full(R, np.inf), best_tri
        inv = self._safe_inverse(d)
        for s in range(0, R, _QUERY_CHUNK):
            ri = np.arange(s, min(s + _QUERY_CHUNK, R))
            ni = np.zeros(len(ri), dtype=np.int64)
            while ri.size:
                keep = self._ray_node_hits(o[ri], inv[ri], ni, best_t[ri])
                ri, ni = ri[keep], ni[keep]
                leaf = self.is_leaf[ni]
                if leaf.any():
                    tris = self.leaf_tris[ni[leaf]]
                    valid = tris >= 0
                    rr = np.repeat(ri[leaf], valid.sum(axis=1))
                    tt = tris[valid]
                    th = ray_triangle_intersect(o[rr], d[rr], self.a[tt], self.b[tt], self.c[tt])
                    hit = th < np.inf
                    rr, tt, th = rr[hit], tt[hit], th[hit]
                    order = np.lexsort((tt, th, rr))
                    rr, tt, th = rr[order], tt[order], th[order]
                    first = np.ones(len(rr), dtype=bool)
                    first[1:] = rr[1:] != rr[:-1]
                    rr, tt, th = rr[first], tt[first], th[first]
                    better = (th < best_t[rr]) | ((th == best_t[rr]) & (tt < best_tri[rr]))
                    best_t[rr[better]], best_tri[rr[better]] = th[better], tt[better]
                inner = ~leaf
                ir, inn = ri[inner], ni[inner]
                ri = np.concatenate([ir, ir])
                ni = np.concatenate([self.left[inn], self.right[inn]])
        best_t[best_tri < 0] = np.inf
        return best_t, best_tri

    def count_hits(self, origins, dirs) -> np.ndarray:
        """Number of forward intersections (t > 0) along each ray."""
        o = np.atleast_2d(np.asarray(origins, dtype=np.float64))
        d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
        o, d = np.broadcast_arrays(o, d)
        R = len(d)
        counts = np.zeros(R, dtype=np.int64)
        if self.n_triangles == 0 or R == 0:
            return counts
        inv = self._safe_inverse(d)
        ri = np.arange(R)
        ni = np.zeros(R, dtype=np.int64)
        while ri.size:
            keep = self._ray_node_hits(o[ri], inv[ri], ni, np.full(len(ri), np.inf))
            ri, ni = ri[keep], ni[keep]
            leaf = self.is_leaf[ni]
            if leaf.any():
                tris = self.leaf_tris[ni[leaf]]
                valid = tris >= 0
                rr = np.repeat(ri[leaf], valid.sum(axis=1))
                tt = tris[valid]
                th = ray_triangle_intersect(o[rr], d[rr], self.a[tt], self.b[tt], self.c[tt], t_min=0.0)
                counts += np.bincount(rr[th < np.inf], minlength=R)
            inner = ~leaf
            ir, inn = ri[inner], ni[inner]
            ri = np.concatenate([ir, ir])
            ni = np.concatenate([self.left[inn], self.right[inn]])
        return counts
