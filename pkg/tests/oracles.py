"""Slow, independent reference implementations used as test oracles.

None of these import the package's geometric kernels; they re-derive each
quantity from first principles with plain loops or O(n^2) scans.
"""
from __future__ import annotations

from collections import defaultdict

import numpy as np


# -- triangles ---------------------------------------------------------------------------
def closest_point_triangle(p, a, b, c):
    """Voronoi-region walk (Ericson, Real-Time Collision Detection 5.1.5)."""
    ab, ac, ap = b - a, c - a, p - a
    d1, d2 = ab @ ap, ac @ ap
    if d1 <= 0 and d2 <= 0:
        return a
    bp = p - b
    d3, d4 = ab @ bp, ac @ bp
    if d3 >= 0 and d4 <= d3:
        return b
    vc = d1 * d4 - d3 * d2
    if vc <= 0 and d1 >= 0 and d3 <= 0:
        return a + d1 / (d1 - d3) * ab
    cp = p - c
    d5, d6 = ab @ cp, ac @ cp
    if d6 >= 0 and d5 <= d6:
        return c
    vb = d5 * d2 - d1 * d6
    if vb <= 0 and d2 >= 0 and d6 <= 0:
        return a + d2 / (d2 - d6) * ac
    va = d3 * d6 - d5 * d4
    if va <= 0 and (d4 - d3) >= 0 and (d5 - d6) >= 0:
        return b + (d4 - d3) / ((d4 - d3) + (d5 - d6)) * (c - b)
    denom = 1.0 / (va + vb + vc)
    return a + ab * (vb * denom) + ac * (vc * denom)


def closest_point_mesh(p, V, F):
    best, best_d = None, np.inf
    for f in F:
        q = closest_point_triangle(p, V[f[0]], V[f[1]], V[f[2]])
        d = np.linalg.norm(q - p)
        if d < best_d:
            best, best_d = q, d
    return best, best_d


def ray_hit_triangle(o, d, a, b, c):
    """Plane intersection followed by same-side edge tests; returns t or inf."""
    n = np.cross(b - a, c - a)
    denom = n @ d
    if abs(denom) < 1e-15:
        return np.inf
    t = n @ (a - o) / denom
    if t <= 0:
        return np.inf
    x = o + t * d
    for p, q in ((a, b), (b, c), (c, a)):
        if np.cross(q - p, x - p) @ n < 0:
            return np.inf
    return t


def first_hit(o, d, V, F):
    best_t, best_f = np.inf, -1
    for i, f in enumerate(F):
        t = ray_hit_triangle(o, d, V[f[0]], V[f[1]], V[f[2]])
        if t < best_t:
            best_t, best_f = t, i
    return best_t, best_f


# -- nearest neighbours ----------------------------------------------------------------------
def nn_brute(src, dst):
    d = np.linalg.norm(src[:, None, :] - dst[None, :, :], axis=2)
    j = d.argmin(axis=1)
    return d[np.arange(len(src)), j], j


def chamfer_mm(pd, gt):
    a, _ = nn_brute(pd, gt)
    b, _ = nn_brute(gt, pd)
    return 1000.0 * (a.mean() + b.mean()) / 2.0


def f1_percent(pd, gt, eta=0.01):
    a, _ = nn_brute(pd, gt)
    b, _ = nn_brute(gt, pd)
    p, r = 100.0 * np.mean(a < eta), 100.0 * np.mean(b < eta)
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def normal_consistency(pd, npd, gt, ngt):
    _, j = nn_brute(pd, gt)
    _, i = nn_brute(gt, pd)
    return 0.5 * np.mean(np.sum(npd * ngt[j], axis=1)) + 0.5 * np.mean(np.sum(ngt * npd[i], axis=1))


# -- octree -----------------------------------------------------------------------------------
def hash_grid(points, features, lo, width, res):
    """Dict (i, j, k) -> mean feature of the points in that cell."""
    acc = defaultdict(list)
    for p, f in zip(points, features):
        ijk = tuple(int(v) for v in np.floor((p - lo) / width))
        if all(0 <= v < res for v in ijk):
            acc[ijk].append(f)
    return {k: np.mean(v, axis=0) for k, v in acc.items()}


# -- gripper -------------------------------------------------------------------------------------
def rodrigues(axis, angle):
    k = np.asarray(axis, dtype=np.float64) / np.linalg.norm(axis)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def gripper_frame(view, angle):
    """Approach, closing and height axes: closing starts horizontal and spins about the approach."""
    x = np.asarray(view, dtype=np.float64) / np.linalg.norm(view)
    y0 = np.cross([0.0, 0.0, 1.0], x)
    if np.linalg.norm(y0) < 1e-8:
        y0 = np.array([0.0, 1.0, 0.0])
    y0 /= np.linalg.norm(y0)
    y = rodrigues(x, angle) @ y0
    return x, y, np.cross(x, y)


def gripper_obbs(anchor, view, angle, width, depth, L=0.06, t=0.01, h=0.02, b=0.02):
    """World-frame oriented boxes (center, axes, half extents, half-open flags) of fingers and palm."""
    x, y, z = gripper_frame(view, angle)
    anchor = np.asarray(anchor, dtype=np.float64)
    fx = depth - L / 2
    out = []
    for side in (-1, 1):
        cy = side * (width / 2 + t / 2)
        out.append((anchor + fx * x + cy * y + 0 * z, (x, y, z), (L / 2, t / 2, h / 2), "finger", side))
    bx = depth - L - b / 2
    out.append((anchor + bx * x, (x, y, z), (b / 2, width / 2 + t, h / 2), "base", 0))
    return out


def point_in_gripper(p, anchor, view, angle, width, depth, L=0.06, t=0.01, h=0.02, b=0.02):
    """Brute-force point-in-oriented-box test with the same face conventions as the package:
    fingers exclude their inner face, the palm excludes its front face."""
    for center, axes, half, kind, side in gripper_obbs(anchor, view, angle, width, depth, L, t, h, b):
        r = p - center
        u = [r @ a for a in axes]
        if abs(u[2]) > half[2]:
            continue
        if kind == "finger":
            if abs(u[0]) > half[0]:
                continue
            # inner face (toward the closing region) is open
            if side < 0 and -half[1] <= u[1] < half[1]:
                return True
            if side > 0 and -half[1] < u[1] <= half[1]:
                return True
        else:
            if -half[0] <= u[0] < half[0] and abs(u[1]) <= half[1]:
                return True
    return False


# -- NMS ------------------------------------------------------------------------------------------
def nms_reference(anchors, rotations, scores, t_thresh, r_thresh, top_k):
    n = len(scores)
    dist = np.linalg.norm(anchors[:, None] - anchors[None], axis=2)
    ang = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            c = (np.trace(rotations[i].T @ rotations[j]) - 1) / 2
            ang[i, j] = np.arccos(np.clip(c, -1, 1))
    close = (dist < t_thresh) & (ang < r_thresh)
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    kept = []
    for i in order:
        if any(close[k, i] for k in kept):
            continue
        kept.append(i)
        if len(kept) == top_k:
            break
    return kept


def first_hit_all(o, d, V, F):
    """Vectorized over triangles (not rays) version of :func:`first_hit`, same math."""
    a, b, c = V[F[:, 0]], V[F[:, 1]], V[F[:, 2]]
    n = np.cross(b - a, c - a)
    denom = n @ d
    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.einsum("ij,ij->i", n, a - o) / denom
        ok = (np.abs(denom) >= 1e-15) & (t > 0)
        t = np.where(ok, t, 0.0)
        x = o + t[:, None] * d
        for p, q in ((a, b), (b, c), (c, a)):
            ok &= np.einsum("ij,ij->i", np.cross(q - p, x - p), n) >= 0
    if not ok.any():
        return np.inf, -1
    t = np.where(ok, t, np.inf)
    i = int(np.argmin(t))
    return float(t[i]), i


def points_in_gripper(P, anchor, view, angle, width, depth, L=0.06, t=0.01, h=0.02, b=0.02):
    """:func:`point_in_gripper` over an ``(n, 3)`` array, one oriented box at a time."""
    P = np.asarray(P, dtype=np.float64)
    hit = np.zeros(len(P), bool)
    for center, axes, half, kind, side in gripper_obbs(anchor, view, angle, width, depth, L, t, h, b):
        u = [(P - center) @ a for a in axes]
        inside = np.abs(u[2]) <= half[2]
        if kind == "finger":
            inside &= np.abs(u[0]) <= half[0]
            if side < 0:
                inside &= (-half[1] <= u[1]) & (u[1] < half[1])
            else:
                inside &= (-half[1] < u[1]) & (u[1] <= half[1])
        else:
            inside &= (-half[0] <= u[0]) & (u[0] < half[0]) & (np.abs(u[1]) <= half[1])
        hit |= inside
    return hit
