"""Surface geometry: meshes, distance grids, frames, geodesics and alignment."""

from .frames import FrameError, LocalFrame, estimate_local_frame, tangent_basis, vertex_frame
from .geodesic import BoundaryError, fan_directions, start_rays, trace_geodesic, walk
from .mesh import MeshError, TriangleMesh, closest_point_on_triangles, load_mesh, max_shape_diameter, save_obj
from .procrustes import RigidTransform, orthogonal_procrustes, procrustes_align
from .sdf import ProjectionError, SignedDistanceGrid, mesh_to_sdf, project_to_surface, unsigned_distance

__all__ = [
    "BoundaryError",
    "FrameError",
    "LocalFrame",
    "MeshError",
    "ProjectionError",
    "RigidTransform",
    "SignedDistanceGrid",
    "TriangleMesh",
    "closest_point_on_triangles",
    "estimate_local_frame",
    "fan_directions",
    "load_mesh",
    "max_shape_diameter",
    "mesh_to_sdf",
    "orthogonal_procrustes",
    "procrustes_align",
    "project_to_surface",
    "save_obj",
    "start_rays",
    "tangent_basis",
    "trace_geodesic",
    "unsigned_distance",
    "vertex_frame",
    "walk",
]
