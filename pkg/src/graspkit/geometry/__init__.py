"""Meshes, rigid transforms, the pinhole camera and spatial queries."""
from .camera import CameraModel
from .io import load_mesh, load_points_ply, save_mesh_ply, save_points_ply
from .mesh import (
    SurfaceSample,
    TriangleMesh,
    box,
    closest_point,
    closest_points,
    cylinder,
    from_arrays,
    icosphere,
    inside_mask,
    interior_points,
    merge,
    sample_count,
    sample_points,
    sample_surface,
    sdf_with_gradient,
    signed_distance,
    signed_distances,
    surface_cloud,
)
from .transforms import RigidTransform, axis_angle, look_at, random_rotation

__all__ = [
    "CameraModel", "RigidTransform", "SurfaceSample", "TriangleMesh",
    "axis_angle", "box", "closest_point", "closest_points", "cylinder", "from_arrays",
    "icosphere", "inside_mask", "interior_points", "load_mesh", "load_points_ply", "look_at",
    "merge", "random_rotation", "sample_count", "sample_points", "sample_surface",
    "save_mesh_ply", "save_points_ply", "sdf_with_gradient", "signed_distance",
    "signed_distances", "surface_cloud",
]
