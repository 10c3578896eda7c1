"""Straightest geodesics on triangle meshes by successive triangle unfolding.

Inside a triangle a geodesic is a straight segment. When it crosses an edge
the direction is unfolded into the neighbouring triangle (the component along
the edge is kept, the perpendicular part is rotated about the edge), which
preserves arc length exactly. Rays that run into a vertex restart from that
vertex in the straightest outgoing direction of its triangle fan.
"""

from __future__ import annotations

import numpy as np

from .mesh import TriangleMesh

_EDGE_EPS = 1e-9
_MAX_STEPS = 100000


class BoundaryError(RuntimeError):
    def __init__(self, traveled: float):
        super().__init__(f"geodesic left the mesh through an open boundary after {traveled:.6g}")
        self.traveled = traveled


def _rotate_between(a, b, vecs):
    """Rotate ``vecs`` by the minimal rotation taking unit ``a`` onto unit ``b``."""
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    c = float(np.dot(a, b))
    if s < 1e-15:
        return vecs if c > 0 else vecs - 2 * np.outer(vecs @ a, a)
    k = axis / s
    return vecs * c + np.cross(k, vecs) * s + np.outer(vecs @ k, k) * (1 - c)


def fan_directions(mesh: TriangleMesh, vertex: int, normal, tangents):
    """Map tangent-plane directions at a vertex to (triangle, in-face direction).

    Each fan wedge is stretched from its projected angle to its true corner
    angle, so directions splitting the fan in equal angle halves stay
    opposite; triangle is -1 where a direction falls into an open gap.
    """
    tangents = np.atleast_2d(np.asarray(tangents, dtype=np.float64))
    normal = np.asarray(normal, dtype=np.float64)
    fan = mesh.vertex_fans[vertex]
    t = mesh.triangles[fan]
    k = np.argmax(t == vertex, axis=1)
    a = t[np.arange(len(fan)), (k + 1) % 3]
    b = t[np.arange(len(fan)), (k + 2) % 3]
    p = mesh.vertices[vertex]
    ea = mesh.vertices[a] - p
    eb = mesh.vertices[b] - p
    helper = np.array([1.0, 0.0, 0.0]) if abs(normal[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = helper - (helper @ normal) * normal
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(normal, e1)
    phi_a = np.arctan2(ea @ e2, ea @ e1)
    phi_b = np.arctan2(eb @ e2, eb @ e1)
    delta = np.mod(phi_b - phi_a, 2 * np.pi)
    cum = np.concatenate([[0.0], np.cumsum(delta)])
    closed = len(fan) == len(mesh.vertex_triangles[vertex]) and a[0] == b[-1]
    psi = np.mod(np.arctan2(tangents @ e2, tangents @ e1) - phi_a[0], 2 * np.pi)
    if closed:
        psi = psi * cum[-1] / (2 * np.pi)
    w = np.clip(np.searchsorted(cum, psi, side="right") - 1, 0, len(fan) - 1)
    frac = np.clip((psi - cum[w]) / delta[w], 0.0, 1.0)
    ua = ea / np.linalg.norm(ea, axis=1, keepdims=True)
    ub = eb / np.linalg.norm(eb, axis=1, keepdims=True)
    corner = np.arccos(np.clip(np.einsum("ij,ij->i", ua, ub), -1.0, 1.0))
    perp = ub - np.einsum("ij,ij->i", ub, ua)[:, None] * ua
    perp /= np.linalg.norm(perp, axis=1, keepdims=True)
    ang = frac * corner[w]
    d = np.cos(ang)[:, None] * ua[w] + np.sin(ang)[:, None] * perp[w]
    tri = fan[w].copy()
    if not closed:
        tri[psi > cum[-1]] = -1
    return tri, d


def start_rays(mesh: TriangleMesh, triangle: int, bary, point, normal, tangents):
    """Initial (triangle, point, direction) for rays leaving a surface point."""
    tangents = np.atleast_2d(np.asarray(tangents, dtype=np.float64))
    bary = np.asarray(bary, dtype=np.float64)
    n_rays = len(tangents)
    j = int(np.argmax(bary))
    if bary[j] > 1 - 1e-12:
        vertex = int(mesh.triangles[triangle, j])
        tri, d = fan_directions(mesh, vertex, normal, tangents)
        pts = np.broadcast_to(mesh.vertices[vertex], (n_rays, 3)).copy()
        return tri, pts, d
    fn = mesh.face_normals[triangle]
    d = _rotate_between(np.asarray(normal, dtype=np.float64), fn, tangents)
    d -= np.outer(d @ fn, fn)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    tri = np.full(n_rays, triangle, dtype=np.int64)
    pts = np.broadcast_to(np.asarray(point, dtype=np.float64), (n_rays, 3)).copy()
    return tri, pts, d


def walk(mesh: TriangleMesh, tri, pts, dirs, lengths, radii=None):
    """Advance many rays along straightest geodesics.

    ``tri, pts, dirs`` are the per-ray start states and ``lengths`` the arc
    length to travel. If ``radii`` (ascending) is given, the positions at
    those arc lengths are recorded for every ray.

    Returns a dict with final ``point``, ``triangle``, ``direction``,
    ``traveled`` and ``boundary`` flags plus ``samples`` / ``n_samples``
    when radii were requested.
    """
    tri = np.asarray(tri, dtype=np.int64).copy()
    p = np.asarray(pts, dtype=np.float64).copy()
    d = np.asarray(dirs, dtype=np.float64).copy()
    n = len(tri)
    L = np.broadcast_to(np.asarray(lengths, dtype=np.float64), (n,)).copy()
    s = np.zeros(n)
    boundary = tri < 0
    active = ~boundary & (L > 0)
    V = mesh.vertices
    T = mesh.triangles
    FN = mesh.face_normals
    NB = mesh.triangle_neighbors

    if radii is not None:
        radii = np.asarray(radii, dtype=np.float64)
        samples = np.full((n, len(radii), 3), np.nan)
        ptr = np.zeros(n, dtype=np.int64)
        zero = radii <= 0
        if zero.any():
            samples[:, zero] = p[:, None, :]
            ptr[:] = int(zero.sum())

    def record(idx, seg_len):
        if radii is None or len(idx) == 0:
            return
        end = s[idx] + seg_len
        while True:
            pi = ptr[idx]
            ok = pi < len(radii)
            ok[ok] &= radii[pi[ok]] <= end[ok] * (1 + 1e-12) + 1e-15
            if not ok.any():
                break
            sel = idx[ok]
            r = radii[ptr[sel]]
            samples[sel, ptr[sel]] = p[sel] + (r - s[sel])[:, None] * d[sel]
            ptr[sel] += 1

    steps = 0
    while active.any():
        steps += 1
        if steps > _MAX_STEPS:
            raise RuntimeError("geodesic walk did not terminate")
        idx = np.nonzero(active)[0]
        ti = tri[idx]
        corners = V[T[ti]]
        P0 = corners
        P1 = np.roll(corners, -1, axis=1)
        edge = P1 - P0
        fn = FN[ti]
        m = np.cross(fn[:, None, :], edge)
        m /= np.linalg.norm(m, axis=2, keepdims=True)
        h = np.einsum("rkj,rkj->rk", p[idx, None, :] - P0, m)
        r = np.einsum("rj,rkj->rk", d[idx], m)
        with np.errstate(divide="ignore", invalid="ignore"):
            sk = np.where(r < -1e-14, np.maximum(h, 0.0) / -r, np.inf)
        k = np.argmin(sk, axis=1)
        seg = sk[np.arange(len(idx)), k]
        remaining = L[idx] - s[idx]

        fin = seg >= remaining
        if fin.any():
            fi = idx[fin]
            record(fi, remaining[fin])
            p[fi] += remaining[fin, None] * d[fi]
            s[fi] = L[fi]
            active[fi] = False

        go = ~fin
        if not go.any():
            continue
        gi = idx[go]
        kg = k[go]
        segg = seg[go]
        record(gi, segg)
        q = p[gi] + segg[:, None] * d[gi]
        e = edge[go, kg]
        e_len2 = np.einsum("ij,ij->i", e, e)
        tpar = np.einsum("ij,ij->i", q - P0[go, kg], e) / e_len2
        s[gi] += segg
        p[gi] = q

        at_vertex = (tpar < _EDGE_EPS) | (tpar > 1 - _EDGE_EPS)
        for local in np.nonzero(at_vertex)[0]:
            ray = gi[local]
            corner = kg[local] if tpar[local] < 0.5 else (kg[local] + 1) % 3
            vertex = int(T[tri[ray], corner])
            normal = mesh.vertex_normals[vertex]
            tan = d[ray] - (d[ray] @ normal) * normal
            if np.linalg.norm(tan) < 1e-12:
                tan = d[ray]
            new_tri, new_d = fan_directions(mesh, vertex, normal, tan / np.linalg.norm(tan))
            p[ray] = V[vertex]
            if new_tri[0] < 0:
                boundary[ray] = True
                active[ray] = False
            else:
                tri[ray] = new_tri[0]
                d[ray] = new_d[0]

        cross = ~at_vertex
        ci = gi[cross]
        kc = kg[cross]
        nb = NB[tri[ci], kc]
        open_edge = nb < 0
        if open_edge.any():
            boundary[ci[open_edge]] = True
            active[ci[open_edge]] = False
        ci, kc, nb = ci[~open_edge], kc[~open_edge], nb[~open_edge]
        ec = e[cross][~open_edge]
        eu = ec / np.linalg.norm(ec, axis=1, keepdims=True)
        along = np.einsum("ij,ij->i", d[ci], eu)
        perp_mag = np.sqrt(np.clip(1 - along**2, 0.0, None))
        m_new = np.cross(FN[nb], -eu)
        m_new /= np.linalg.norm(m_new, axis=1, keepdims=True)
        nd = along[:, None] * eu + perp_mag[:, None] * m_new
        d[ci] = nd / np.linalg.norm(nd, axis=1, keepdims=True)
        tri[ci] = nb

    out = {"point": p, "triangle": tri, "direction": d, "traveled": s, "boundary": boundary}
    if radii is not None:
        out["samples"] = samples
        out["n_samples"] = ptr
    return out


def trace_geodesic(mesh: TriangleMesh, start, tangent_dir, length: float, *, return_direction: bool = False):
    """Walk ``length`` along the straightest geodesic from ``start`` in ``tangent_dir``."""
    if length < 0:
        raise ValueError("length must be non-negative")
    start = np.asarray(start, dtype=np.float64)
    tri, bary, q, _ = mesh.locate(start[None])
    normal = mesh.interpolate_normal(int(tri[0]), bary[0])
    t = np.asarray(tangent_dir, dtype=np.float64)
    t = t - (t @ normal) * normal
    nrm = np.linalg.norm(t)
    if nrm < 1e-12:
        raise ValueError("tangent_dir is parallel to the surface normal")
    t0, p0, d0 = start_rays(mesh, int(tri[0]), bary[0], q[0], normal, t / nrm)
    res = walk(mesh, t0, p0, d0, [length])
    if res["boundary"][0]:
        raise BoundaryError(float(res["traveled"][0]))
    if return_direction:
        return res["point"][0], res["direction"][0]
    return res["point"][0]
