"""Principal-curvature frames from local quadratic fits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .mesh import TriangleMesh


class FrameError(ValueError):
    pass


@dataclass(frozen=True)
class LocalFrame:
    point: np.ndarray
    normal: np.ndarray
    u: np.ndarray
    v: np.ndarray
    kappa1: float
    kappa2: float
    triangle: int = -1
    bary: tuple = (1.0, 0.0, 0.0)


def tangent_basis(normal):
    n = np.asarray(normal, dtype=np.float64)
    helper = np.array([1.0, 0.0, 0.0]) if abs(n[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - (helper @ n) * n
    e1 /= np.linalg.norm(e1)
    return e1, np.cross(n, e1)


def _neighborhood(mesh: TriangleMesh, seeds, min_samples: int = 8, rings: int = 2):
    ring = set(int(s) for s in seeds)
    frontier = set(ring)
    level = 0
    nbrs = mesh.vertex_neighbors
    while level < rings or len(ring) < min_samples:
        nxt = set()
        for vi in frontier:
            nxt.update(int(x) for x in nbrs[vi])
        nxt -= ring
        if not nxt:
            break
        ring |= nxt
        frontier = nxt
        level += 1
    return np.fromiter(sorted(ring), dtype=np.int64)


def estimate_local_frame(mesh: TriangleMesh, point, *, triangle: int | None = None, bary=None) -> LocalFrame:
    """Least-squares quadratic height fit over the 2-ring of the containing triangle.

    Fits ``z = (a x^2 + 2 b xy + c y^2) / 2 * s + d x + e y + f`` in the tangent
    frame, where ``s = (x^2 + y^2 + z^2) / (x^2 + y^2)`` is the chord
    correction that makes the fit exact on spheres of any radius (the
    quadratic terms then measure normal curvature along each chord).
    Curvatures are eigenvalues of ``-[[a, b], [b, c]]`` so a sphere with
    outward normals has positive curvature. ``u`` follows the larger one and
    ``v = normal x u``.
    """
    point = np.asarray(point, dtype=np.float64)
    if triangle is None or bary is None:
        tri, b, q, _ = mesh.locate(point[None])
        triangle, bary, point = int(tri[0]), b[0], q[0]
    bary = np.asarray(bary, dtype=np.float64)
    normal = mesh.interpolate_normal(triangle, bary)
    idx = _neighborhood(mesh, mesh.triangles[triangle])
    e1, e2 = tangent_basis(normal)
    d = mesh.vertices[idx] - point
    x, y, z = d @ e1, d @ e2, d @ normal
    if len(idx) < 6:
        raise FrameError(f"only {len(idx)} samples in neighborhood")
    r2 = x * x + y * y
    scale = np.sqrt(np.mean(r2))
    if scale == 0:
        raise FrameError("collapsed neighborhood")
    chord = np.where(r2 > 1e-12 * scale * scale, (r2 + z * z) / np.maximum(r2, 1e-300), 1.0)
    design = np.stack([0.5 * x * x * chord, x * y * chord, 0.5 * y * y * chord, x, y, np.ones_like(x)], axis=1)
    # column scaling keeps the rank test meaningful at any mesh size
    col = np.array([scale**2, scale**2, scale**2, scale, scale, 1.0])
    coef, _, rank, _ = np.linalg.lstsq(design / col, z, rcond=None)
    if rank < 6:
        raise FrameError(f"rank-deficient neighborhood (rank {rank})")
    a, bb, c = coef[:3] / col[:3]
    shape_op = -np.array([[a, bb], [bb, c]])
    evals, evecs = np.linalg.eigh(shape_op)
    k1, k2 = float(evals[1]), float(evals[0])
    u = evecs[0, 1] * e1 + evecs[1, 1] * e2
    u /= np.linalg.norm(u)
    v = np.cross(normal, u)
    return LocalFrame(point, normal, u, v, k1, k2, int(triangle), tuple(float(x) for x in bary))


def vertex_frame(mesh: TriangleMesh, vertex: int) -> LocalFrame:
    t = mesh.vertex_triangles[vertex][0]
    k = int(np.nonzero(mesh.triangles[t] == vertex)[0][0])
    bary = np.zeros(3)
    bary[k] = 1.0
    return estimate_local_frame(mesh, mesh.vertices[vertex], triangle=int(t), bary=bary)
