"""Triangle meshes: ingestion, cleanup, topology and point location."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree


class MeshError(ValueError):
    """Raised for unreadable, malformed or unusable meshes."""


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    vertex_normals: np.ndarray = field(repr=False)

    @classmethod
    def from_arrays(cls, vertices, triangles, *, require_connected: bool = True) -> "TriangleMesh":
        """Build a cleaned mesh from raw arrays.

        Degenerate triangles (repeated indices or zero area) and unreferenced
        vertices are dropped; normals are area-weighted averages of the
        incident face normals.
        """
        vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
        triangles = np.asarray(triangles, dtype=np.int64).reshape(-1, 3)
        if len(vertices) == 0 or len(triangles) == 0:
            raise MeshError("empty mesh")
        if triangles.min() < 0 or triangles.max() >= len(vertices):
            raise MeshError("triangle index out of range")

        t = triangles
        distinct = (t[:, 0] != t[:, 1]) & (t[:, 1] != t[:, 2]) & (t[:, 0] != t[:, 2])
        t = t[distinct]
        cross = np.cross(vertices[t[:, 1]] - vertices[t[:, 0]], vertices[t[:, 2]] - vertices[t[:, 0]])
        area2 = np.linalg.norm(cross, axis=1)
        scale = max(float(np.ptp(vertices, axis=0).max()), 1e-300)
        t = t[area2 > 1e-14 * scale * scale]
        if len(t) == 0:
            raise MeshError("empty mesh")

        used = np.unique(t)
        remap = -np.ones(len(vertices), dtype=np.int64)
        remap[used] = np.arange(len(used))
        vertices = vertices[used]
        t = remap[t]

        if require_connected:
            n_comp = _component_count(len(vertices), t)
            if n_comp != 1:
                raise MeshError(f"mesh has {n_comp} connected components")

        normals = _area_weighted_normals(vertices, t)
        return cls(vertices, t, normals)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_triangles(self) -> int:
        return len(self.triangles)

    @cached_property
    def face_normals(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        n = np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    @cached_property
    def face_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        return 0.5 * np.linalg.norm(np.cross(v[t[:, 1]] - v[t[:, 0]], v[t[:, 2]] - v[t[:, 0]]), axis=1)

    @cached_property
    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    @cached_property
    def max_edge_length(self) -> float:
        v = self.vertices[self.triangles]
        e = np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2)
        return float(e.max())

    @cached_property
    def mean_edge_length(self) -> float:
        v = self.vertices[self.triangles]
        return float(np.linalg.norm(v - np.roll(v, -1, axis=1), axis=2).mean())

    @cached_property
    def triangle_neighbors(self) -> np.ndarray:
        """(T, 3) triangle across edge k = (t[k], t[k+1]); -1 on open boundary."""
        t = self.triangles
        n_t = len(t)
        a = t.reshape(-1)
        b = np.roll(t, -1, axis=1).reshape(-1)
        owner = np.repeat(np.arange(n_t), 3)
        slot = np.tile(np.arange(3), n_t)
        nv = self.n_vertices
        directed = a * nv + b
        reverse = b * nv + a
        order = np.argsort(directed, kind="stable")
        pos = np.searchsorted(directed[order], reverse)
        pos = np.clip(pos, 0, len(order) - 1)
        match = directed[order[pos]] == reverse
        nbr = np.full(n_t * 3, -1, dtype=np.int64)
        nbr[match] = owner[order[pos[match]]]
        out = np.full((n_t, 3), -1, dtype=np.int64)
        out[owner, slot] = nbr
        return out

    @cached_property
    def vertex_triangles(self) -> list[np.ndarray]:
        t = self.triangles
        flat = t.reshape(-1)
        owner = np.repeat(np.arange(len(t)), 3)
        order = np.argsort(flat, kind="stable")
        counts = np.bincount(flat, minlength=self.n_vertices)
        return np.split(owner[order], np.cumsum(counts)[:-1])

    @cached_property
    def vertex_neighbors(self) -> list[np.ndarray]:
        t = self.triangles
        rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2], t[:, 1], t[:, 2], t[:, 0]])
        cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0], t[:, 0], t[:, 1], t[:, 2]])
        adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(self.n_vertices,) * 2).tocsr()
        return [adj.indices[adj.indptr[i]:adj.indptr[i + 1]] for i in range(self.n_vertices)]

    @cached_property
    def vertex_fans(self) -> list[np.ndarray]:
        """Incident triangles of each vertex in counter-clockwise order about its normal."""
        t = self.triangles
        fans = []
        for vi, tris in enumerate(self.vertex_triangles):
            nxt = {}
            prv = {}
            for tri in tris:
                k = int(np.nonzero(t[tri] == vi)[0][0])
                a, b = int(t[tri, (k + 1) % 3]), int(t[tri, (k + 2) % 3])
                nxt[a] = (tri, b)
                prv[b] = tri
            start = next((a for a in nxt if a not in prv), next(iter(nxt)))
            order = []
            a = start
            while a in nxt and len(order) < len(tris):
                tri, b = nxt[a]
                order.append(tri)
                a = b
            fans.append(np.asarray(order, dtype=np.int64))
        return fans

    @cached_property
    def boundary_edge_count(self) -> int:
        return int((self.triangle_neighbors < 0).sum())

    @cached_property
    def _vertex_tree(self) -> cKDTree:
        return cKDTree(self.vertices)

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self.vertices.min(axis=0), self.vertices.max(axis=0)

    def locate(self, points, k: int = 8):
        """Closest surface points.

        Returns ``(triangle, barycentric, closest, distance)`` for each query
        point. Candidates are the triangles incident to the ``k`` nearest
        vertices, which is exact for points near the surface.
        """
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        k = min(k, self.n_vertices)
        _, vidx = self._vertex_tree.query(pts, k=k)
        vidx = np.asarray(vidx).reshape(len(pts), k)
        cand = self._incident_table[vidx].reshape(len(pts), -1)
        valid = cand >= 0
        cand = np.where(valid, cand, self._incident_table[vidx[:, 0], 0][:, None])
        tri = self.triangles[cand]
        v = self.vertices
        q, bary = closest_point_on_triangles(pts[:, None, :], v[tri[..., 0]], v[tri[..., 1]], v[tri[..., 2]])
        d = np.linalg.norm(q - pts[:, None, :], axis=2)
        j = np.argmin(d, axis=1)
        rows = np.arange(len(pts))
        return cand[rows, j], bary[rows, j], q[rows, j], d[rows, j]

    @cached_property
    def _incident_table(self) -> np.ndarray:
        vt = self.vertex_triangles
        width = max(len(x) for x in vt)
        table = np.full((self.n_vertices, width), -1, dtype=np.int64)
        for i, x in enumerate(vt):
            table[i, :len(x)] = x
        return table

    def interpolate_normal(self, tri: int, bary) -> np.ndarray:
        n = np.asarray(bary) @ self.vertex_normals[self.triangles[tri]]
        return n / np.linalg.norm(n)

    def transformed(self, rotation, translation) -> "TriangleMesh":
        rotation = np.asarray(rotation, dtype=np.float64)
        v = self.vertices @ rotation.T + np.asarray(translation, dtype=np.float64)
        return TriangleMesh(v, self.triangles.copy(), self.vertex_normals @ rotation.T)


def _component_count(n_vertices: int, triangles: np.ndarray) -> int:
    t = triangles
    rows = np.concatenate([t[:, 0], t[:, 1], t[:, 2]])
    cols = np.concatenate([t[:, 1], t[:, 2], t[:, 0]])
    adj = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_vertices, n_vertices))
    n, _ = connected_components(adj, directed=False)
    return int(n)


def _area_weighted_normals(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    t = triangles
    fn = np.cross(vertices[t[:, 1]] - vertices[t[:, 0]], vertices[t[:, 2]] - vertices[t[:, 0]])
    acc = np.zeros_like(vertices)
    for k in range(3):
        np.add.at(acc, t[:, k], fn)
    norm = np.linalg.norm(acc, axis=1, keepdims=True)
    if np.any(norm == 0):
        raise MeshError("vertex with vanishing normal")
    return acc / norm


def closest_point_on_triangles(p, a, b, c):
    """Vectorised closest point on triangles ``abc`` to points ``p``.

    Follows the Voronoi-region case analysis of Ericson, *Real-Time Collision
    Detection*, 5.1.5. Returns closest points and barycentric coordinates.
    """
    p, a, b, c = (np.asarray(x, dtype=np.float64) for x in (p, a, b, c))
    shape = np.broadcast_shapes(p.shape, a.shape, b.shape, c.shape)
    p, a, b, c = (np.broadcast_to(x, shape).reshape(-1, 3) for x in (p, a, b, c))
    n = len(p)
    ab = b - a
    ac = c - a
    ap = p - a
    d1 = np.einsum("ij,ij->i", ab, ap)
    d2 = np.einsum("ij,ij->i", ac, ap)
    bp = p - b
    d3 = np.einsum("ij,ij->i", ab, bp)
    d4 = np.einsum("ij,ij->i", ac, bp)
    cp = p - c
    d5 = np.einsum("ij,ij->i", ab, cp)
    d6 = np.einsum("ij,ij->i", ac, cp)

    with np.errstate(divide="ignore", invalid="ignore"):
        vc = d1 * d4 - d3 * d2
        vb = d5 * d2 - d1 * d6
        va = d3 * d6 - d5 * d4
        t_ab = d1 / (d1 - d3)
        t_ac = d2 / (d2 - d6)
        t_bc = (d4 - d3) / ((d4 - d3) + (d5 - d6))
        denom = 1.0 / (va + vb + vc)
        v_in = vb * denom
        w_in = vc * denom
    conds = [
        (d1 <= 0) & (d2 <= 0),
        (d3 >= 0) & (d4 <= d3),
        (vc <= 0) & (d1 >= 0) & (d3 <= 0),
        (d6 >= 0) & (d5 <= d6),
        (vb <= 0) & (d2 >= 0) & (d6 <= 0),
        (va <= 0) & ((d4 - d3) >= 0) & ((d5 - d6) >= 0),
    ]
    bv = np.select(conds, [0.0, 1.0, t_ab, 0.0, 0.0, 1 - t_bc], v_in)
    bw = np.select(conds, [0.0, 0.0, 0.0, 1.0, t_ac, t_bc], w_in)
    bary = np.stack([1 - bv - bw, bv, bw], axis=1)

    q = bary[:, :1] * a + bary[:, 1:2] * b + bary[:, 2:] * c
    return q.reshape(shape), bary.reshape(shape)


def load_mesh(path) -> TriangleMesh:
    """Read an ASCII OBJ or PLY triangle mesh and clean it."""
    path = Path(path)
    try:
        text = path.read_text()
    except (OSError, UnicodeDecodeError) as exc:
        raise MeshError(f"unreadable file {path}: {exc}") from exc
    suffix = path.suffix.lower()
    if suffix not in (".obj", ".ply"):
        raise MeshError(f"unsupported mesh format {suffix!r}")
    try:
        vertices, faces = _parse_obj(text) if suffix == ".obj" else _parse_ply(text)
    except (ValueError, IndexError) as exc:
        if isinstance(exc, MeshError):
            raise
        raise MeshError(f"unreadable file {path}: {exc}") from exc
    if any(len(f) != 3 for f in faces):
        raise MeshError("non-triangular face")
    if not vertices or not faces:
        raise MeshError("empty mesh")
    return TriangleMesh.from_arrays(np.array(vertices), np.array(faces))


def _parse_obj(text: str):
    vertices, faces = [], []
    for line in text.splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            vertices.append([float(x) for x in parts[1:4]])
        elif parts[0] == "f":
            idx = []
            for tok in parts[1:]:
                i = int(tok.split("/")[0])
                idx.append(i - 1 if i > 0 else len(vertices) + i)
            faces.append(idx)
    return vertices, faces


def _parse_ply(text: str):
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError("not a PLY file")
    n_vert = n_face = 0
    vert_props: list[str] = []
    current = None
    body = 0
    for i, line in enumerate(lines[1:], start=1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError("only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body = i + 1
            break
    try:
        ix = [vert_props.index(c) for c in ("x", "y", "z")]
    except ValueError as exc:
        raise MeshError("PLY vertex element lacks x/y/z") from exc
    rows = [ln.split() for ln in lines[body:] if ln.strip()]
    if len(rows) < n_vert + n_face:
        raise MeshError("truncated PLY body")
    vertices = [[float(r[j]) for j in ix] for r in rows[:n_vert]]
    faces = []
    for r in rows[n_vert:n_vert + n_face]:
        cnt = int(r[0])
        faces.append([int(x) for x in r[1:1 + cnt]])
    return vertices, faces


def save_obj(mesh: TriangleMesh, path) -> None:
    """Write ``v``/``f`` records with 17 significant digits (byte-stable)."""
    lines = [f"v {x:.17g} {y:.17g} {z:.17g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n")


def max_shape_diameter(meshes) -> float:
    """Largest bounding-box diagonal over an ensemble."""
    meshes = list(meshes)
    if not meshes:
        raise ValueError("max_shape_diameter needs at least one mesh")
    return max(float(np.linalg.norm(np.ptp(m.vertices, axis=0))) for m in meshes)
