"""Command-line entry point: ``graspkit <subcommand> ...``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import octree as octree_mod
from .errors import GraspkitError, InvariantViolation
from .geometry import load_mesh, load_points_ply, sample_surface, save_points_ply
from .graspgen import (
    N_CANDIDATES,
    GripperModel,
    LabelConfig,
    assign_labels,
    generate_labels,
    label_grasps,
    pack_grasps,
    read_grasps_jsonl,
    write_grasps_jsonl,
)
from .metrics import PointSet, chamfer_distance, f1_score, grasp_ap, normal_consistency
from .occlusion import compute_occlusion_field, voxel_grid
from .refine import RefinementConfig, filter_collisions, grasp_nms, refine_grasps
from .scene import (
    Scene,
    SceneObject,
    demo_camera,
    demo_scene,
    project_world,
    render,
    save_depth_png,
    save_depth_raw,
    save_mask_png,
    unproject,
)

log = logging.getLogger("graspkit")

DEFAULTS = {
    "seed": 0,
    "depth": 6,
    "rho": 0.005,
    "gripper": None,
    "gamma_min": 0.005,
    "gamma_max": 0.02,
    "nms_t": 0.03,
    "nms_r": 30.0,
    "top_k": 50,
    "threads": 1,
    "out": ".",
    "scale": 1.0,
}


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    depth: int = 6
    rho: float = 0.005
    gripper: str | None = None
    gamma_min: float = 0.005
    gamma_max: float = 0.02
    nms_t: float = 0.03
    nms_r: float = 30.0  # degrees
    top_k: int = 50
    threads: int = 1
    out: str = "."
    scale: float = 1.0

    def __post_init__(self):
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must fit in an unsigned 64-bit integer")
        if not 1 <= self.depth <= octree_mod.MAX_DEPTH:
            raise ValueError(f"octree depth must be in [1, {octree_mod.MAX_DEPTH}]")
        if not self.rho > 0:
            raise ValueError("rho must be positive")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.gripper is not None and not Path(self.gripper).is_file():
            raise FileNotFoundError(f"gripper config not found: {self.gripper}")
        self.refinement()

    def gripper_model(self) -> GripperModel:
        return GripperModel.from_json(self.gripper) if self.gripper else GripperModel()

    def refinement(self) -> RefinementConfig:
        return RefinementConfig(self.gamma_min, self.gamma_max, self.nms_t, float(np.deg2rad(self.nms_r)), self.top_k)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Flags override the ``--config`` file, which overrides built-in defaults."""
    values = dict(DEFAULTS)
    env_threads = os.environ.get("GRASPKIT_THREADS")
    if env_threads:
        values["threads"] = int(env_threads)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        file_values = json.loads(path.read_text())
        unknown = set(file_values) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys in {path}: {sorted(unknown)}")
        values.update(file_values)
    for key in DEFAULTS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    return RunConfig(**values)


# -- helpers -------------------------------------------------------------------------------
def _emit(args, summary: dict) -> None:
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for k, v in summary.items():
            print(f"{k}: {v}")


def _load_scene(args, cfg: RunConfig) -> Scene:
    if getattr(args, "demo", False):
        return demo_scene()
    if getattr(args, "scene", None):
        path = Path(args.scene)
        if not path.is_file():
            raise FileNotFoundError(f"scene file not found: {path}")
        return Scene.from_json(path, scale=cfg.scale)
    if getattr(args, "mesh", None):
        mesh = load_mesh(args.mesh, scale=cfg.scale)
        from .geometry import RigidTransform

        return Scene((SceneObject(1, "mesh", RigidTransform.identity()),), {"mesh": mesh})
    raise ValueError("need --mesh, --scene or --demo")


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ---------------------------------------------------------------------------
def cmd_generate(args, cfg: RunConfig) -> dict:
    scene = _load_scene(args, cfg)
    gripper = cfg.gripper_model()
    out = _out_dir(cfg)
    lcfg = LabelConfig(rho=cfg.rho, seed=cfg.seed)
    pts_all, _, ids_all = scene.surface_points(lcfg.cloud_spacing, cfg.seed) if len(scene.objects) > 1 else (None, None, None)
    n_samples = candidates = survivors = 0
    all_grasps, best = [], []
    for oid in scene.object_ids:
        mesh = scene.world_mesh(oid)
        sub = LabelConfig(cfg.rho, lcfg.q_min, lcfg.clearance, lcfg.cloud_spacing, cfg.seed + oid, lcfg.chunk)
        if args.dry_run:
            n_samples += len(sample_surface(mesh, cfg.rho, sub.seed))
            continue
        obstacles = pts_all[ids_all != oid] if pts_all is not None else None
        labels = generate_labels(mesh, gripper, sub, obstacles=obstacles, support_z=scene.support_z,
                                 object_id=oid, threads=cfg.threads)
        n_samples += len(labels)
        candidates += N_CANDIDATES * len(labels)
        survivors += int(sum(np.isfinite(lab.quality).sum() for _, lab in labels))
        all_grasps.extend(label_grasps(labels, sub.q_min))
        best.extend(lab.best for _, lab in labels if lab.best is not None)
        tree = octree_mod.build_from_mesh(mesh, depth=cfg.depth)
        octree_mod.save(assign_labels(tree, labels), out / f"octree_{oid}.octz")
    if args.dry_run:
        return {"samples": n_samples, "candidates": n_samples * N_CANDIDATES}
    best.sort(key=lambda g: -g.score)
    all_grasps.sort(key=lambda g: -g.score)
    write_grasps_jsonl(out / "grasps.jsonl", all_grasps)
    (out / "grasps.bin").write_bytes(pack_grasps(all_grasps))
    write_grasps_jsonl(out / "best_grasps.jsonl", best)
    return {
        "samples": n_samples,
        "candidates": candidates,
        "survivors": survivors,
        "grasps": len(all_grasps),
        "best_grasps": len(best),
        "out": str(out),
    }


def _load_octree(path) -> octree_mod.Octree:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"octree file not found: {path}")
    return octree_mod.load(path)


def _read_grasps(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"grasp file not found: {path}")
    return read_grasps_jsonl(path)


def cmd_refine(args, cfg: RunConfig) -> dict:
    grasps = _read_grasps(args.grasps)
    trees = [_load_octree(p) for p in args.octree]
    surfaces = [octree_mod.extract_surface(t) for t in trees]
    pts = np.vstack([s[0] for s in surfaces])
    nrm = np.vstack([s[1] for s in surfaces])
    centers = np.vstack([t.centers for t in trees])
    gripper = cfg.gripper_model()
    rcfg = cfg.refinement()
    refined = [g for g in refine_grasps(grasps, (pts, nrm), gripper, rcfg, cfg.threads) if g is not None]
    kept = filter_collisions(refined, centers, gripper, support_z=args.support_z)
    final = grasp_nms(kept, rcfg)
    out = Path(args.output) if args.output else _out_dir(cfg) / "refined.jsonl"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_grasps_jsonl(out, final)
    for g in final:
        if not (0.0 <= g.width <= 0.10 and 0.0 <= g.depth <= 0.04):
            raise InvariantViolation("refined grasp outside clip ranges")
    return {"input": len(grasps), "refined": len(refined), "collision_free": len(kept), "output": len(final), "file": str(out)}


def cmd_evaluate(args, cfg: RunConfig) -> dict:
    report: dict = {}
    if args.grasps:
        scene = _load_scene(args, cfg)
        grasps = _read_grasps(args.grasps)
        grasps.sort(key=lambda g: -g.score)
        rep = grasp_ap([grasps], [scene], cfg.gripper_model(), cfg.refinement(), threads=cfg.threads, seed=cfg.seed)
        report.update(rep.to_dict())
        del report["per_scene"]
    if args.pred_ply or args.gt_ply:
        if not (args.pred_ply and args.gt_ply):
            raise ValueError("reconstruction metrics need both --pred-ply and --gt-ply")
        pd = PointSet(*_read_points(args.pred_ply))
        gt = PointSet(*_read_points(args.gt_ply))
        report["cd"] = chamfer_distance(pd, gt)
        report["f1"] = f1_score(pd, gt)
        if pd.normals is not None and gt.normals is not None:
            report["nc"] = normal_consistency(pd, gt)
    if not report:
        raise ValueError("nothing to evaluate: give --grasps and/or --pred-ply/--gt-ply")
    if args.csv:
        keys = [k for k in ("cd", "f1", "nc", "ap") if k in report]
        mus = sorted(report.get("ap_by_mu", {}), key=float)
        header = keys + [f"ap_{m}" for m in mus]
        row = [f"{report[k]:.4f}" for k in keys] + [f"{report['ap_by_mu'][m]:.4f}" for m in mus]
        Path(args.csv).write_text(",".join(header) + "\n" + ",".join(row) + "\n")
    return report


def _read_points(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"point file not found: {path}")
    pts, nrm = load_points_ply(path)
    if nrm is not None:
        nrm = nrm / np.linalg.norm(nrm, axis=1, keepdims=True)
    return pts, nrm


def cmd_render(args, cfg: RunConfig) -> dict:
    scene = _load_scene(args, cfg)
    cam, ext = demo_camera(args.width, args.height, args.fx)
    view = render(scene, cam, ext, threads=cfg.threads)
    out = _out_dir(cfg)
    save_depth_png(out / "depth.png", view.depth)
    save_mask_png(out / "mask.png", view.mask)
    save_depth_raw(out / "depth.f32", view)
    counts = {str(i): int((view.mask == i).sum()) for i in scene.object_ids}
    return {"width": cam.width, "height": cam.height, "pixels": counts, "out": str(out)}


def cmd_occlusion(args, cfg: RunConfig) -> dict:
    scene = _load_scene(args, cfg)
    cam, ext = demo_camera(args.width, args.height, args.fx)
    view = render(scene, cam, ext, threads=cfg.threads)
    pts, _ = unproject(view, args.target)
    if len(pts) == 0:
        pts = scene.world_mesh(args.target).vertices
    bounds = octree_mod.Cube.around(pts, pad=args.pad)
    centers, size = voxel_grid(bounds, args.level)
    field = compute_occlusion_field(view, centers, size, args.target, args.block, mode=args.mode, scene=scene)
    out = _out_dir(cfg)
    (out / f"occlusion_{args.target}.bin").write_bytes(field.to_bytes())
    inter = field.flags[..., 1].reshape(-1)
    blocks = field.block_centers().reshape(-1, 3)[inter]
    u, v, _ = project_world(view, blocks)
    occluders = sorted({int(i) for i in view.mask[np.rint(v).astype(int), np.rint(u).astype(int)]}) if len(blocks) else []
    frac = field.occlusion_fraction()
    return {
        "target": args.target,
        "voxels": field.n_voxels,
        "voxels_self": int((frac[:, 0] > 0).sum()),
        "voxels_inter": int((frac[:, 1] > 0).sum()),
        "inter_occluders": occluders,
        "out": str(out),
    }


def cmd_export_ply(args, cfg: RunConfig) -> dict:
    tree = _load_octree(args.octree)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    scalars = {}
    if args.surface:
        pts, nrm = octree_mod.extract_surface(tree)
    else:
        pts, nrm = tree.centers, tree.normals
        if tree.sdf is not None:
            scalars["sdf"] = tree.sdf.reshape(-1)
        if tree.graspness is not None:
            scalars["graspness"] = tree.graspness.max(axis=1)
    save_points_ply(out, pts, nrm, scalars)
    return {"points": int(len(pts)), "file": str(out)}


# -- parser --------------------------------------------------------------------------------
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file of option defaults (flags take precedence)")
    p.add_argument("--seed", type=int, help="random seed (default 0)")
    p.add_argument("--threads", type=int, help="worker threads (default $GRASPKIT_THREADS or 1)")
    p.add_argument("--out", help="output directory (default .)")
    p.add_argument("--scale", type=float, help="multiply input mesh coordinates, e.g. 0.001 for mm files")
    p.add_argument("--gripper", help="gripper JSON (max_width, finger_depth, finger_thickness, finger_height, base_depth)")
    p.add_argument("--json", action="store_true", help="print a JSON summary on stdout")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")


def _scene_inputs(p: argparse.ArgumentParser, mesh: bool = True) -> None:
    g = p.add_mutually_exclusive_group()
    if mesh:
        g.add_argument("--mesh", help="PLY/OBJ mesh (a single object)")
    g.add_argument("--scene", help="scene JSON")
    g.add_argument("--demo", action="store_true", help="use the bundled 3-object demo scene")


def _camera(p: argparse.ArgumentParser) -> None:
    p.add_argument("--width", type=int, default=640, help="image width in pixels")
    p.add_argument("--height", type=int, default=480, help="image height in pixels")
    p.add_argument("--fx", type=float, default=600.0, help="focal length in pixels")


def _refine_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gamma-min", dest="gamma_min", type=float, help="minimum finger clearance in m (default 0.005)")
    p.add_argument("--gamma-max", dest="gamma_max", type=float, help="maximum finger clearance in m (default 0.02)")
    p.add_argument("--nms-t", dest="nms_t", type=float, help="NMS translation threshold in m (default 0.03)")
    p.add_argument("--nms-r", dest="nms_r", type=float, help="NMS rotation threshold in degrees (default 30)")
    p.add_argument("--top-k", dest="top_k", type=int, help="grasps kept per scene (default 50)")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # bad usage is an input error: exit 1 (2 is reserved for invariant violations)
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="graspkit", description="Grasp label generation, refinement and evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample a mesh or scene and write grasp labels and octrees")
    _common(p)
    _scene_inputs(p)
    p.add_argument("--rho", type=float, help="surface area per sample in m^2 (default 0.005)")
    p.add_argument("--depth", type=int, help="octree depth (default 6)")
    p.add_argument("--dry-run", action="store_true", help="only sample the surface and report counts")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("refine", help="refine predicted grasps against octree reconstructions")
    _common(p)
    p.add_argument("--grasps", required=True, help="input grasps JSONL")
    p.add_argument("--octree", required=True, nargs="+", help="one or more octree files")
    p.add_argument("--support-z", dest="support_z", type=float, help="table height for collision checks")
    p.add_argument("-o", "--output", help="output JSONL (default OUT/refined.jsonl)")
    _refine_flags(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="grasp AP against ground-truth meshes and/or CD/F1/NC of point sets")
    _common(p)
    _scene_inputs(p)
    p.add_argument("--grasps", help="grasps JSONL to score")
    p.add_argument("--pred-ply", dest="pred_ply", help="predicted point cloud PLY")
    p.add_argument("--gt-ply", dest="gt_ply", help="ground-truth point cloud PLY")
    p.add_argument("--csv", help="also write a one-row CSV table here")
    _refine_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="ray-cast depth and instance mask images")
    _common(p)
    _scene_inputs(p, mesh=False)
    _camera(p)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("occlusion", help="3D occlusion field around one target object")
    _common(p)
    _scene_inputs(p, mesh=False)
    _camera(p)
    p.add_argument("--target", type=int, required=True, help="target object id")
    p.add_argument("--level", type=int, default=3, help="voxel grid level (2^level voxels per axis)")
    p.add_argument("--block", type=int, default=8, help="sub-blocks per voxel axis")
    p.add_argument("--pad", type=float, default=0.2, help="grid padding around the target, fraction per side")
    p.add_argument("--mode", choices=("mask", "ray"), default="mask", help="flag from the rendered mask or exact rays")
    p.set_defaults(func=cmd_occlusion)

    p = sub.add_parser("export-ply", help="write octree leaves (or extracted surface) as a PLY point cloud")
    _common(p)
    p.add_argument("--octree", required=True, help="octree file")
    p.add_argument("-o", "--output", required=True, help="output PLY")
    p.add_argument("--surface", action="store_true", help="export the zero level set instead of leaf centers")
    p.set_defaults(func=cmd_export_ply)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        summary = args.func(args, cfg)
    except InvariantViolation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (GraspkitError, FileNotFoundError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    _emit(args, summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
