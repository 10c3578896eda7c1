"""Signed distance grids built from watertight meshes."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .mesh import MeshError, TriangleMesh, closest_point_on_triangles


class ProjectionError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass(eq=False)
class SignedDistanceGrid:
    """Dense distance samples, negative inside, stored as ``values[i, j, k]`` at ``origin + spacing * (i, j, k)``."""

    origin: np.ndarray
    spacing: float
    dims: tuple[int, int, int]
    values: np.ndarray

    @property
    def upper(self) -> np.ndarray:
        return self.origin + self.spacing * (np.asarray(self.dims) - 1)

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(points)
        return np.all((p >= self.origin) & (p <= self.upper), axis=1)

    def sample(self, points, with_gradient: bool = False):
        """Trilinear interpolation (and its exact gradient) at ``points``."""
        p = np.atleast_2d(np.asarray(points, dtype=np.float64))
        if not np.all(self.contains(p)):
            raise ProjectionError("point outside grid bounds")
        g = (p - self.origin) / self.spacing
        dims = np.asarray(self.dims)
        i0 = np.clip(np.floor(g).astype(np.int64), 0, dims - 2)
        f = g - i0
        v = self.values
        c = np.empty((len(p), 2, 2, 2))
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    c[:, dx, dy, dz] = v[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
        cx = c[:, 0] * (1 - fx)[:, None, None] + c[:, 1] * fx[:, None, None]
        cxy = cx[:, 0] * (1 - fy)[:, None] + cx[:, 1] * fy[:, None]
        val = cxy[:, 0] * (1 - fz) + cxy[:, 1] * fz
        if not with_gradient:
            return val
        dcx = c[:, 1] - c[:, 0]
        dcxy = dcx[:, 0] * (1 - fy)[:, None] + dcx[:, 1] * fy[:, None]
        gx = dcxy[:, 0] * (1 - fz) + dcxy[:, 1] * fz
        dy_ = cx[:, 1] - cx[:, 0]
        gy = dy_[:, 0] * (1 - fz) + dy_[:, 1] * fz
        gz = cxy[:, 1] - cxy[:, 0]
        grad = np.stack([gx, gy, gz], axis=1) / self.spacing
        return val, grad

    def save(self, path) -> None:
        """Raw little-endian float32, x fastest, plus a JSON sidecar."""
        path = Path(path)
        self.values.astype("<f4").transpose(2, 1, 0).tofile(path)
        meta = {"origin": [float(x) for x in self.origin], "spacing": float(self.spacing), "dims": [int(d) for d in self.dims]}
        path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SignedDistanceGrid":
        path = Path(path)
        meta = json.loads(path.with_suffix(".json").read_text())
        dims = tuple(int(d) for d in meta["dims"])
        raw = np.fromfile(path, dtype="<f4")
        if raw.size != dims[0] * dims[1] * dims[2]:
            raise ValueError(f"{path}: expected {np.prod(dims)} values, found {raw.size}")
        values = raw.reshape(dims[2], dims[1], dims[0]).transpose(2, 1, 0).astype(np.float64)
        return cls(np.asarray(meta["origin"], dtype=np.float64), float(meta["spacing"]), dims, values)


def mesh_to_sdf(mesh: TriangleMesh, spacing: float, padding: int = 3) -> SignedDistanceGrid:
    """Exact point-to-triangle distance at every grid node, signed by ray parity."""
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    if mesh.boundary_edge_count:
        raise MeshError(f"mesh is not watertight: {mesh.boundary_edge_count} boundary edges")
    lo, hi = mesh.bounding_box()
    origin = lo - padding * spacing
    dims = tuple(int(d) for d in np.ceil((hi - lo) / spacing).astype(int) + 1 + 2 * padding)
    axes = [origin[a] + spacing * np.arange(dims[a]) for a in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    dist = unsigned_distance(mesh, pts)
    inside = _ray_parity_inside(mesh, axes, spacing).ravel()
    values = np.where(inside, -dist, dist).reshape(dims)
    return SignedDistanceGrid(origin, float(spacing), dims, values)


def unsigned_distance(mesh: TriangleMesh, points, chunk: int = 131072) -> np.ndarray:
    """Exact distance from ``points`` to the closest triangle.

    Candidates are the ``k`` triangles with nearest centroids. Every other
    triangle lies at least ``dc_k - r`` away, ``dc_k`` being the ``k``-th
    centroid distance and ``r`` the largest centroid-to-corner radius, so a
    point whose best candidate beats that bound is exact. The rest retry with
    larger ``k`` and finally brute force.
    """
    pts = np.asarray(points, dtype=np.float64)
    v = mesh.vertices
    tri = mesh.triangles
    a, b, c = v[tri[:, 0]], v[tri[:, 1]], v[tri[:, 2]]
    cen = mesh.centroids
    radius = float(np.linalg.norm(v[tri] - cen[:, None, :], axis=2).max())
    tree = cKDTree(cen)
    out = np.full(len(pts), np.inf)
    todo = np.arange(len(pts))
    for k in (12, 48, 192):
        if len(todo) == 0 or k >= mesh.n_triangles:
            break
        step = max(1, chunk // k)
        still = []
        for s in range(0, len(todo), step):
            idx = todo[s:s + step]
            dc, cand = tree.query(pts[idx], k=k)
            q, _ = closest_point_on_triangles(pts[idx, None, :], a[cand], b[cand], c[cand])
            d = np.linalg.norm(q - pts[idx, None, :], axis=2).min(axis=1)
            out[idx] = d
            still.append(idx[d > dc[:, -1] - radius])
        todo = np.concatenate(still)
    step = max(1, chunk // mesh.n_triangles)
    for s in range(0, len(todo), step):
        idx = todo[s:s + step]
        q, _ = closest_point_on_triangles(pts[idx, None, :], a[None], b[None], c[None])
        out[idx] = np.linalg.norm(q - pts[idx, None, :], axis=2).min(axis=1)
    return out


def _ray_parity_inside(mesh: TriangleMesh, axes, spacing: float) -> np.ndarray:
    """Inside flags from crossing counts of +x rays along every grid line.

    Lines are offset by an irrational fraction of the spacing so they never
    pass exactly through mesh edges or vertices.
    """
    ys = axes[1] + spacing * 1.234567e-5 * np.sqrt(2.0)
    zs = axes[2] + spacing * 2.345678e-5 * np.sqrt(3.0)
    xs = axes[0]
    v = mesh.vertices
    tri = v[mesh.triangles]
    crossings: dict[tuple[int, int], list[float]] = {}
    ymin, ymax = tri[:, :, 1].min(1), tri[:, :, 1].max(1)
    zmin, zmax = tri[:, :, 2].min(1), tri[:, :, 2].max(1)
    j0 = np.searchsorted(ys, ymin)
    j1 = np.searchsorted(ys, ymax, side="right")
    k0 = np.searchsorted(zs, zmin)
    k1 = np.searchsorted(zs, zmax, side="right")
    for t in np.nonzero((j1 > j0) & (k1 > k0))[0]:
        jj, kk = np.meshgrid(np.arange(j0[t], j1[t]), np.arange(k0[t], k1[t]), indexing="ij")
        jj = jj.ravel()
        kk = kk.ravel()
        p0, p1, p2 = tri[t]
        y, z = ys[jj], zs[kk]
        # 2-D barycentric in the yz projection
        d = (p1[1] - p0[1]) * (p2[2] - p0[2]) - (p2[1] - p0[1]) * (p1[2] - p0[2])
        if d == 0:
            continue
        l1 = ((y - p0[1]) * (p2[2] - p0[2]) - (p2[1] - p0[1]) * (z - p0[2])) / d
        l2 = ((p1[1] - p0[1]) * (z - p0[2]) - (y - p0[1]) * (p1[2] - p0[2])) / d
        l0 = 1 - l1 - l2
        hit = (l0 >= 0) & (l1 >= 0) & (l2 >= 0)
        xhit = l0 * p0[0] + l1 * p1[0] + l2 * p2[0]
        for j, k, x in zip(jj[hit], kk[hit], xhit[hit]):
            crossings.setdefault((int(j), int(k)), []).append(float(x))
    inside = np.zeros((len(xs), len(ys), len(zs)), dtype=bool)
    for (j, k), xc in crossings.items():
        xc = np.sort(xc)
        count_right = len(xc) - np.searchsorted(xc, xs, side="right")
        inside[:, j, k] = (count_right % 2) == 1
    return inside


def project_to_surface(grid: SignedDistanceGrid, points, tol: float = 1e-3, max_iter: int = 20):
    """Newton steps ``p <- p - D(p) grad D / |grad D|^2`` onto the zero level set.

    Accepts one point or an (n, 3) array; the result has the same shape.
    """
    p = np.asarray(points, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p).copy()
    if not np.all(grid.contains(p)):
        raise ProjectionError("point outside grid bounds")
    thresh = tol * grid.spacing
    active = np.ones(len(p), dtype=bool)
    for _ in range(max_iter + 1):
        d, g = grid.sample(p[active], with_gradient=True)
        done = np.abs(d) < thresh
        idx = np.nonzero(active)[0]
        active[idx[done]] = False
        if not active.any():
            return p[0] if single else p
        d, g = d[~done], g[~done]
        gg = np.einsum("ij,ij->i", g, g)
        if np.any(gg < 1e-24):
            raise ProjectionError("vanishing distance gradient", float(np.abs(d).max()))
        step = (d / gg)[:, None] * g
        lim = 2.0 * grid.spacing + np.abs(d)[:, None]
        step = np.clip(step, -lim, lim)
        newp = p[idx[~done]] - step
        newp = np.clip(newp, grid.origin, grid.upper)
        p[idx[~done]] = newp
    residual = float(np.abs(grid.sample(p[active])).max())
    raise ProjectionError(f"projection did not converge (residual {residual:.3g})", residual)
