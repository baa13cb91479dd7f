"""Synthetic desk-scale benchmark: random primitive scenes, ground-truth labels,
simulated noisy grasp predictions and refined-vs-unrefined AP."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .geometry import RigidTransform, axis_angle, box, cylinder, icosphere
from .graspgen import DEPTHS, MAX_DEPTH, MAX_WIDTH, GraspPose, GripperModel, LabelConfig, generate_labels, label_grasps
from .metrics import grasp_ap
from .octree import Cube, Octree, build_from_mesh
from .refine import RefinementConfig, filter_collisions, grasp_nms, refine_grasps
from .scene import Scene, SceneObject


def random_object(rng: np.random.Generator):
    """A random graspable primitive resting with its base at z = 0 (local frame)."""
    kind = rng.integers(3)
    if kind == 0:
        ext = rng.uniform([0.03, 0.03, 0.04], [0.06, 0.06, 0.09])
        return box(ext, center=(0, 0, ext[2] / 2)), ext[:2].max()
    if kind == 1:
        r, h = rng.uniform(0.015, 0.03), rng.uniform(0.04, 0.09)
        return cylinder(r, h, 24, center=(0, 0, h / 2)), 2 * r
    r = rng.uniform(0.02, 0.035)
    return icosphere(r, 2, center=(0, 0, r)), 2 * r


def random_desk_scene(rng: np.random.Generator, n_objects: int, area: float = 0.13, gap: float = 0.07) -> Scene:
    """``n_objects`` primitives on a table at ``z = 0`` with a random yaw, kept ``gap`` apart."""
    meshes, objects, placed = {}, [], []
    for oid in range(1, n_objects + 1):
        mesh, size = random_object(rng)
        for _ in range(200):
            xy = rng.uniform(-area, area, 2)
            if all(np.linalg.norm(xy - p) >= (size + s) / 2 + gap for p, s in placed):
                break
        placed.append((xy, size))
        R = axis_angle((0, 0, 1), rng.uniform(0, 2 * np.pi))
        key = f"obj{oid}"
        meshes[key] = mesh
        objects.append(SceneObject(oid, key, RigidTransform(R, np.array([xy[0], xy[1], 0.0]))))
    return Scene(tuple(objects), meshes, support_z=0.0)


def scene_labels(scene: Scene, gripper: GripperModel | None = None, config: LabelConfig | None = None,
                 threads: int = 1) -> dict:
    """Labels of every object, with the other objects and the table as obstacles."""
    cfg = config or LabelConfig()
    pts, _, ids = scene.surface_points(cfg.cloud_spacing, cfg.seed)
    out = {}
    for oid in scene.object_ids:
        obstacles = pts[ids != oid]
        sub = LabelConfig(cfg.rho, cfg.q_min, cfg.clearance, cfg.cloud_spacing, cfg.seed + oid, cfg.chunk)
        out[oid] = generate_labels(scene.world_mesh(oid), gripper, sub, obstacles=obstacles,
                                   support_z=scene.support_z, object_id=oid, threads=threads)
    return out


def ground_truth_grasps(labels: dict, q_min: float = 0.1) -> list[GraspPose]:
    out = []
    for oid in sorted(labels):
        out.extend(label_grasps(labels[oid], q_min))
    return out


def reconstruct_scene(scene: Scene, depth: int = 7) -> Octree:
    """Solid octree of all scene objects over one world-frame cube."""
    mesh, _ = scene.merged
    return build_from_mesh(mesh, depth=depth, bounds=Cube.around(mesh.vertices, pad=0.1))


def simulate_predictions(grasps, rng: np.random.Generator, width_sigma: float = 0.02, depth_jitter: bool = True,
                         score_sigma: float = 0.1) -> list[GraspPose]:
    """Corrupt ground-truth grasps the way a learned predictor errs: widths and
    depths drift, scores get noisy. The ranking is by noisy ``graspness * quality``."""
    out = []
    for g in grasps:
        w = float(np.clip(g.width + rng.normal(0.0, width_sigma), 0.0, MAX_WIDTH))
        d = float(rng.choice(DEPTHS)) if depth_jitter else g.depth
        s = float(np.clip(g.graspness + rng.normal(0.0, score_sigma), 0.0, 1.0))
        out.append(g.replace(width=w, depth=min(d, MAX_DEPTH), graspness=s))
    return out


def rank(grasps) -> list[GraspPose]:
    grasps = list(grasps)
    order = np.argsort(-np.array([g.score for g in grasps]), kind="stable") if grasps else []
    return [grasps[i] for i in order]


@dataclass(frozen=True)
class BenchmarkResult:
    ap_refined: float
    ap_unrefined: float
    ap_by_mu_refined: dict
    ap_by_mu_unrefined: dict
    n_ground_truth: int
    n_predictions: int
    seconds: float

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["ap_by_mu_refined"] = {str(k): v for k, v in self.ap_by_mu_refined.items()}
        d["ap_by_mu_unrefined"] = {str(k): v for k, v in self.ap_by_mu_unrefined.items()}
        return d


def run_benchmark(n_scenes: int = 5, seed: int = 0, gripper: GripperModel | None = None,
                  label_config: LabelConfig | None = None, cfg: RefinementConfig | None = None,
                  octree_depth: int = 7, threads: int = 1) -> BenchmarkResult:
    """Generate labels, corrupt them into predictions, refine against an octree
    reconstruction and compare AP with and without refinement."""
    t0 = time.perf_counter()
    g = gripper or GripperModel()
    cfg = cfg or RefinementConfig()
    lcfg = label_config or LabelConfig(seed=seed)
    rng = np.random.default_rng(seed)
    scenes, refined_sets, raw_sets = [], [], []
    n_gt = n_pred = 0
    for _ in range(n_scenes):
        scene = random_desk_scene(rng, int(rng.integers(3, 5)))
        gt = ground_truth_grasps(scene_labels(scene, g, lcfg, threads), lcfg.q_min)
        preds = simulate_predictions(gt, rng)
        n_gt += len(gt)
        n_pred += len(preds)
        recon = reconstruct_scene(scene, octree_depth)
        raw_sets.append(rank(grasp_nms(preds, cfg)))
        refined = [r for r in refine_grasps(preds, recon, g, cfg, threads) if r is not None]
        refined = filter_collisions(refined, recon, g, support_z=scene.support_z)
        refined_sets.append(rank(grasp_nms(refined, cfg)))
        scenes.append(scene)
    rep_ref = grasp_ap(refined_sets, scenes, g, cfg, threads=threads, seed=lcfg.seed)
    rep_raw = grasp_ap(raw_sets, scenes, g, cfg, threads=threads, seed=lcfg.seed)
    return BenchmarkResult(rep_ref.ap, rep_raw.ap, rep_ref.ap_by_mu, rep_raw.ap_by_mu, n_gt, n_pred,
                           time.perf_counter() - t0)
