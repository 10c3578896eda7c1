"""Synthetic shape ensembles with exact vertex-to-vertex correspondence.

Every shape is a smooth deformation of one template mesh, so vertex ``i`` is
the same material point on every member of an ensemble.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geomcore import TriangleMesh, save_obj

FAMILIES = ("ellipsoid", "ellipsoid_bump", "bean1bump", "bean_multibump", "flange")

_TEMPLATE_LEVEL = {12: 0, 42: 1, 162: 2, 642: 3, 2562: 4, 10242: 5, 40962: 6}


def icosphere(level: int = 3, radius: float = 1.0) -> TriangleMesh:
    """Geodesic sphere: each icosahedron face is split at frequency ``2**level`` and projected once.

    Level 3 has 642 vertices, level 4 has 2562.
    """
    t = (1.0 + 5**0.5) / 2.0
    corners = np.array([
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ], dtype=np.float64)
    corners /= np.linalg.norm(corners, axis=1, keepdims=True)
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    freq = 2**level
    index: dict[tuple, int] = {}
    points: list[np.ndarray] = []

    def vertex(a, b, c, i, j):
        # shared edge points are keyed by their integer lattice coordinates
        w = {a: freq - i - j, b: i, c: j}
        key = tuple(sorted((k, x) for k, x in w.items() if x))
        if key not in index:
            index[key] = len(points)
            points.append(sum(corners[k] * x for k, x in w.items()) / freq)
        return index[key]

    tris = []
    for a, b, c in faces:
        g = {(i, j): vertex(a, b, c, i, j) for i in range(freq + 1) for j in range(freq + 1 - i)}
        for i in range(freq):
            for j in range(freq - i):
                tris.append((g[i, j], g[i + 1, j], g[i, j + 1]))
                if i + j < freq - 1:
                    tris.append((g[i + 1, j], g[i + 1, j + 1], g[i, j + 1]))
    pts = np.array(points)
    pts /= np.linalg.norm(pts, axis=1, keepdims=True)
    return TriangleMesh.from_arrays(pts * radius, np.array(tris))


# Default parameter ranges per family; every draw is uniform on [lo, hi].
DEFAULT_RANGES: dict[str, dict[str, tuple[float, float]]] = {
    "ellipsoid": {"axis_x": (16.0, 24.0), "axis_y": (12.0, 12.0), "axis_z": (10.0, 10.0)},
    "ellipsoid_bump": {"bump_position": (0.0, 1.0), "bump_amplitude": (2.5, 3.5), "axis_x": (20.0, 20.0)},
    "bean1bump": {"bump_position": (0.0, 1.0), "bump_amplitude": (2.5, 3.5)},
    "bean_multibump": {"ridge_offset": (0.0, 1.0), "ridge_amplitude": (1.2, 1.6)},
    "flange": {"flange_height": (5.0, 8.0), "flange_thickness": (1.6, 2.4)},
}

BUMP_SIGMA = 3.0  # mm
RIDGE_X0 = -6.0  # first ridge on the template (mm along the long axis)
RIDGE_TRAVEL = 6.0  # ridge_offset 0..1 slides the ridge group over this distance (mm)
FLANGE_ARC = 1.5 * np.pi  # azimuth span of the C-shaped sheet
_LAT_DENSITY = 0.3  # latitude compression at the equator for the flange template


class SynthError(ValueError):
    pass


@dataclass
class EnsembleSpec:
    family: str
    count: int = 30
    resolution: int = 2562
    seed: int = 0
    ranges: dict = field(default_factory=dict)
    max_retries: int = 20

    def resolved_ranges(self) -> dict[str, tuple[float, float]]:
        out = dict(DEFAULT_RANGES.get(self.family, {}))
        out.update({k: tuple(float(x) for x in v) for k, v in self.ranges.items()})
        return out

    def validate(self) -> list[str]:
        errors = []
        if self.family not in FAMILIES:
            errors.append(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.count < 2:
            errors.append(f"count must be >= 2, got {self.count}")
        if self.resolution not in _TEMPLATE_LEVEL:
            errors.append(f"resolution must be one of {sorted(_TEMPLATE_LEVEL)}, got {self.resolution}")
        known = DEFAULT_RANGES.get(self.family, {})
        for key, val in self.ranges.items():
            if key not in known:
                errors.append(f"unknown parameter {key!r} for family {self.family!r}")
                continue
            if len(val) != 2 or val[0] > val[1]:
                errors.append(f"range {key} must be [lo, hi] with lo <= hi, got {list(val)}")
        r = self.resolved_ranges() if not errors else {}
        for key in ("axis_x", "axis_y", "axis_z", "flange_height", "flange_thickness"):
            if key in r and r[key][0] <= 0:
                errors.append(f"{key} must be positive")
        for key in ("bump_position", "ridge_offset"):
            if key in r and not (0.0 <= r[key][0] and r[key][1] <= 1.0):
                errors.append(f"{key} must lie in [0, 1]")
        for key in ("bump_amplitude", "ridge_amplitude"):
            if key in r and r[key][0] < 0:
                errors.append(f"{key} must be non-negative")
        return errors


@dataclass(eq=False)
class Ensemble:
    spec: EnsembleSpec
    template: TriangleMesh
    meshes: list
    params: list
    regions: np.ndarray  # (N, V) bool: vertices on the bump / ridge / flange feature

    @property
    def positions(self) -> np.ndarray:
        """(N, V, 3) ground-truth corresponding positions."""
        return np.stack([m.vertices for m in self.meshes])


# ---------------------------------------------------------------- base shapes

def _bean_map(s):
    """Unit-sphere points to the undeformed bean (mm)."""
    s = np.atleast_2d(s)
    x = 20.0 * s[:, 0]
    y = 12.0 * s[:, 1] * (1.0 + 0.12 * s[:, 0])
    z = 10.0 * s[:, 2]
    z = z + 2.0 * np.exp(-(y / 3.5) ** 2) * np.maximum(0.0, -s[:, 2]) ** 2  # crease underneath
    z = z + 0.01 * x * x
    return np.stack([x, y, z], axis=1)


def _ellipsoid_map(axes):
    def f(s):
        return np.atleast_2d(s) * np.asarray(axes, dtype=np.float64)
    return f


def _remap_latitude(s):
    """Pack more template rows near the equator so a thin sheet there is resolved."""
    lat = np.arcsin(np.clip(s[:, 2], -1, 1))
    frac = np.abs(lat) / (np.pi / 2)
    new = lat * (_LAT_DENSITY + (1 - _LAT_DENSITY) * frac)
    ring = np.hypot(s[:, 0], s[:, 1])
    ring = np.where(ring > 0, ring, 1.0)
    return np.stack([s[:, 0] / ring * np.cos(new), s[:, 1] / ring * np.cos(new), np.sin(new)], axis=1)


def _bump_curve(t):
    """Sphere-domain curve across the top of the shape, t in [0, 1]."""
    psi = -0.9 + 1.8 * np.asarray(t, dtype=np.float64)
    s = np.stack([np.sin(psi), np.full_like(psi, 0.3), np.cos(psi)], axis=-1)
    return s / np.linalg.norm(s, axis=-1, keepdims=True)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def template_mesh(family: str, resolution: int = 2562, params: dict | None = None) -> TriangleMesh:
    """Undeformed member of a family; ellipsoid axes come from ``params``."""
    sphere = icosphere(_TEMPLATE_LEVEL[resolution])
    s = sphere.vertices
    if family == "flange":
        s = _remap_latitude(s)
    return TriangleMesh.from_arrays(_base_map(family, params or {})(s), sphere.triangles)


def _base_map(family, params):
    if family.startswith("bean"):
        return _bean_map
    if family == "ellipsoid":
        return _ellipsoid_map((params.get("axis_x", 20.0), params.get("axis_y", 12.0), params.get("axis_z", 10.0)))
    if family == "ellipsoid_bump":
        return _ellipsoid_map((params.get("axis_x", 20.0), 12.0, 10.0))
    return _ellipsoid_map((18.0, 12.0, 10.0))


def _displacement(family, params, base: TriangleMesh, sphere_pts):
    """Scalar height along the template normal and the feature-region mask."""
    v = base.vertices
    if family in ("ellipsoid_bump", "bean1bump"):
        amp = params["bump_amplitude"]
        center = _base_map(family, params)(_bump_curve(params["bump_position"]))[0]
        g = np.exp(-np.sum((v - center) ** 2, axis=1) / (2 * BUMP_SIGMA**2))
        return amp * g, g > 0.25
    if family == "bean_multibump":
        amp = params["ridge_amplitude"]
        width = 1.5 * base.mean_edge_length
        gap = 2.5 * width
        x0 = RIDGE_X0  # template position; the offset slides the surface under them (see deform)
        ridges = sum(np.exp(-((v[:, 0] - (x0 + j * gap)) ** 2) / (2 * width**2)) for j in range(4))
        window = np.exp(-0.5 * (v[:, 1] / 5.0) ** 2) * _smoothstep((sphere_pts[:, 2] - 0.2) / 0.5)
        h = ridges * window
        return amp * h, h > 0.25
    if family == "flange":
        height = params["flange_height"]
        half = params["flange_thickness"] / (2 * 10.0)  # latitude half-width of the sheet root
        lat = np.arcsin(np.clip(sphere_pts[:, 2], -1, 1))
        az = np.mod(np.arctan2(sphere_pts[:, 1], sphere_pts[:, 0]) + np.pi, 2 * np.pi)
        lo, hi = np.pi - FLANGE_ARC / 2, np.pi + FLANGE_ARC / 2
        ramp = 0.35
        arc = _smoothstep((az - lo) / ramp) * _smoothstep((hi - az) / ramp)
        g = np.exp(-((lat / half) ** 2)) * arc
        return height * g, g > 0.25
    return np.zeros(len(v)), np.zeros(len(v), dtype=bool)


def _draw(ranges, rng):
    return {k: float(lo if lo == hi else rng.uniform(lo, hi)) for k, (lo, hi) in sorted(ranges.items())}


def _slide(s, shift):
    """Move sphere points so their bean image slides ``shift`` mm along the long axis.

    Full shift over the middle of the bean, easing to zero over the last 8 mm
    at each end (C1), so the tips stay put and no triangle folds.
    """
    xt = 20.0 * s[:, 0]
    amount = _smoothstep((xt + 20.0) / 8.0) * _smoothstep((20.0 - xt) / 8.0)
    sx = np.clip(s[:, 0] + shift * amount / 20.0, -1.0, 1.0)
    ring = 1.0 - s[:, 0] ** 2
    k = np.sqrt(np.where(ring > 0, (1.0 - sx**2) / np.where(ring > 0, ring, 1.0), 1.0))
    return np.stack([sx, s[:, 1] * k, s[:, 2] * k], axis=1)


def deform(spec_family: str, params: dict, resolution: int = 2562):
    """One ensemble member and its feature-region mask.

    bean_multibump ridges are attached to template vertices and the surface
    slides along the long axis with ``ridge_offset``, so vertex ``i`` keeps
    its place on its ridge while the ridge group moves.
    """
    sphere = icosphere(_TEMPLATE_LEVEL[resolution])
    s = sphere.vertices
    if spec_family == "flange":
        s = _remap_latitude(s)
    base = TriangleMesh.from_arrays(_base_map(spec_family, params)(s), sphere.triangles)
    h, region = _displacement(spec_family, params, base, s)
    if spec_family == "bean_multibump" and params["ridge_amplitude"] > 0:
        moved = _slide(s, RIDGE_TRAVEL * (params["ridge_offset"] - 0.5))
        base = TriangleMesh.from_arrays(_base_map(spec_family, params)(moved), sphere.triangles)
    verts = base.vertices + h[:, None] * base.vertex_normals
    return TriangleMesh.from_arrays(verts, base.triangles), region


def generate_ensemble(spec: EnsembleSpec) -> Ensemble:
    """Draw ``spec.count`` deformations of the family template.

    Draws producing a self-intersecting surface are rejected and redrawn up
    to ``spec.max_retries`` times per shape.
    """
    errors = spec.validate()
    if errors:
        raise SynthError("; ".join(errors))
    ranges = spec.resolved_ranges()
    rng = np.random.default_rng(spec.seed)
    meshes, params, regions = [], [], []
    for i in range(spec.count):
        for _attempt in range(spec.max_retries + 1):
            p = _draw(ranges, rng)
            mesh, region = deform(spec.family, p, spec.resolution)
            if mesh.n_vertices == spec.resolution and not self_intersects(mesh):
                break
        else:
            raise SynthError(f"shape {i}: no intersection-free draw after {spec.max_retries} retries")
        meshes.append(mesh)
        params.append(p)
        regions.append(region)
    template = template_mesh(spec.family, spec.resolution, {k: 0.5 * (lo + hi) for k, (lo, hi) in ranges.items()})
    return Ensemble(spec, template, meshes, params, np.array(regions))


# ---------------------------------------------------------------- self-intersection

def self_intersects(mesh: TriangleMesh, max_pairs: int = 2_000_000, seed: int = 0) -> bool:
    """Edge-through-triangle test over spatially close, vertex-disjoint triangle pairs.

    All close pairs are tested when there are at most ``max_pairs`` of them,
    otherwise a uniform sample of that size.
    """
    from scipy.spatial import cKDTree

    v, t = mesh.vertices, mesh.triangles
    cen = mesh.centroids
    rad = float(np.linalg.norm(v[t] - cen[:, None, :], axis=2).max())
    pairs = cKDTree(cen).query_pairs(2 * rad, output_type="ndarray")
    if len(pairs) == 0:
        return False
    ta, tb = t[pairs[:, 0]], t[pairs[:, 1]]
    disjoint = ~np.any(ta[:, :, None] == tb[:, None, :], axis=(1, 2))
    pairs = pairs[disjoint]
    if len(pairs) > max_pairs:
        pairs = pairs[np.random.default_rng(seed).choice(len(pairs), max_pairs, replace=False)]
    for a, b in ((pairs[:, 0], pairs[:, 1]), (pairs[:, 1], pairs[:, 0])):
        tri = v[t[b]]
        for k in range(3):
            p0 = v[t[a, k]]
            p1 = v[t[a, (k + 1) % 3]]
            if np.any(_segment_hits_triangle(p0, p1, tri[:, 0], tri[:, 1], tri[:, 2])):
                return True
    return False


def _segment_hits_triangle(p0, p1, a, b, c):
    d = p1 - p0
    e1, e2 = b - a, c - a
    h = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, h)
    ok = np.abs(det) > 1e-14
    inv = np.where(ok, 1.0 / np.where(ok, det, 1.0), 0.0)
    s = p0 - a
    u = inv * np.einsum("ij,ij->i", s, h)
    q = np.cross(s, e1)
    w = inv * np.einsum("ij,ij->i", d, q)
    tt = inv * np.einsum("ij,ij->i", e2, q)
    return ok & (u >= 0) & (w >= 0) & (u + w <= 1) & (tt >= 0) & (tt <= 1)


# ---------------------------------------------------------------- output

def write_ensemble(ensemble: Ensemble, out_dir) -> list[Path]:
    """ASCII OBJ per shape, the ground-truth table and per-shape parameters."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, mesh in enumerate(ensemble.meshes):
        p = out / f"shape_{i:03d}.obj"
        save_obj(mesh, p)
        paths.append(p)
    write_ground_truth(ensemble, out / "ground_truth.csv")
    np.save(out / "regions.npy", ensemble.regions)
    meta = {"spec": asdict(ensemble.spec), "params": ensemble.params}
    (out / "ensemble.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return paths


def write_ground_truth(ensemble: Ensemble, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["shape_id", "vertex_id", "correspondence_id"])
        for i, mesh in enumerate(ensemble.meshes):
            for v in range(mesh.n_vertices):
                w.writerow([i, v, v])


def read_ground_truth(path) -> dict[int, np.ndarray]:
    """shape_id -> vertex ids ordered by correspondence id."""
    table: dict[int, dict[int, int]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            table.setdefault(int(row["shape_id"]), {})[int(row["correspondence_id"])] = int(row["vertex_id"])
    return {s: np.array([m[k] for k in sorted(m)]) for s, m in sorted(table.items())}


def ground_truth_pairs(ensemble: Ensemble, n_pairs: int, seed: int = 0, *, rho_max: float | None = None,
                       shapes=None, negative_ratio: float = 1.0, min_separation: float | None = None,
                       domain: int = 0):
    """Pair dataset whose correspondence model is the template vertex indexing.

    ``n_pairs`` template vertices are drawn as particles (all vertices when
    fewer exist, with extra positives per particle to reach the count).
    """
    from .geomcore import max_shape_diameter
    from .patchex import build_pair_dataset

    n_vert = ensemble.meshes[0].n_vertices
    pick_seed, pair_seed = np.random.SeedSequence(seed).generate_state(2)
    rng = np.random.default_rng(pick_seed)
    particles = np.sort(rng.choice(n_vert, size=min(n_pairs, n_vert), replace=False))
    per = -(-n_pairs // len(particles))
    if rho_max is None:
        rho_max = 0.05 * max_shape_diameter(ensemble.meshes)
    return build_pair_dataset(ensemble.positions, ensemble.meshes, rho_max=rho_max, positives_per_particle=per,
                              negative_ratio=negative_ratio, min_separation=min_separation, seed=int(pair_seed),
                              shapes=shapes, particles=particles, domain=domain)
