"""Particle-based correspondence optimization.

Each shape carries M particles on the zero level set of its distance grid.
The optimizer descends ``Q = H(Z) - sum_n H(X_n)``: ``H(Z)`` is the
regularized log-determinant of the dual-space covariance of the shape
vectors, ``H(X_n)`` a Gaussian-kernel entropy estimate of each shape's
particle distribution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .geomcore import (
    ProjectionError,
    RigidTransform,
    SignedDistanceGrid,
    TriangleMesh,
    procrustes_align,
    project_to_surface,
)

MODES = ("xyz", "normals", "fea", "fea-normals")


class PSMError(RuntimeError):
    pass


@dataclass
class ParticleSystem:
    surfaces: list[SignedDistanceGrid]
    local_positions: np.ndarray  # (N, M, 3)
    transforms: list[RigidTransform]
    meshes: list[TriangleMesh] | None = None
    rho0: float = 0.0

    @property
    def n_shapes(self) -> int:
        return len(self.surfaces)

    @property
    def n_particles(self) -> int:
        return int(self.local_positions.shape[1])

    @property
    def spacing(self) -> float:
        return float(max(g.spacing for g in self.surfaces))

    def world_positions(self) -> np.ndarray:
        return np.stack([t.apply(x) for t, x in zip(self.transforms, self.local_positions)])

    def check_on_surface(self, tol: float = 1e-2) -> float:
        worst = max(float(np.abs(g.sample(x)).max()) for g, x in zip(self.surfaces, self.local_positions))
        if worst >= tol * self.spacing:
            raise PSMError(f"particle off its surface by {worst:.3g} (limit {tol * self.spacing:.3g})")
        return worst


# ---------------------------------------------------------------- sampling entropy

def _nearest_distances(points: np.ndarray) -> np.ndarray:
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def kernel_sigmas(points: np.ndarray, lo: float, hi: float) -> np.ndarray:
    return np.clip(_nearest_distances(points), lo, hi)


def sampling_entropy(points: np.ndarray, sigma: np.ndarray) -> float:
    """``-(1/M) sum_i log( mean_{j != i} G(x_i - x_j; sigma_i) )`` with isotropic Gaussians."""
    m = len(points)
    if m < 2:
        return 0.0
    d2 = np.sum((points[:, None] - points[None]) ** 2, axis=2)
    s2 = (sigma ** 2)[:, None]
    logk = -d2 / (2 * s2) - 1.5 * np.log(2 * np.pi * s2)
    np.fill_diagonal(logk, -np.inf)
    lse = np.logaddexp.reduce(logk, axis=1) - np.log(m - 1)
    return float(-lse.mean())


def _sampling_gradient(points: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Exact gradient of :func:`sampling_entropy` with ``sigma`` held fixed."""
    m = len(points)
    if m < 2:
        return np.zeros_like(points)
    diff = points[:, None] - points[None]  # x_i - x_j
    d2 = np.sum(diff ** 2, axis=2)
    s2 = sigma ** 2
    logw = -d2 / (2 * s2[:, None])
    np.fill_diagonal(logw, -np.inf)
    logw -= logw.max(axis=1, keepdims=True)
    w = np.exp(logw)
    w /= w.sum(axis=1, keepdims=True)
    a = w / s2[:, None]
    # own kernel pushes x_i away from its neighbours; neighbours' kernels push back on x_i as x_j
    g = np.einsum("ij,ijk->ik", a, diff) + np.einsum("ji,ijk->ik", a, diff)
    return g / m


def _coincident(points: np.ndarray, tol: float = 1e-9) -> bool:
    d = np.linalg.norm(points[:, None] - points[None], axis=2)
    np.fill_diagonal(d, np.inf)
    return bool(len(points) > 1 and d.min() < tol)


def _tangential(vecs: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return vecs - np.sum(vecs * normals, axis=1, keepdims=True) * normals


def surface_normals(grid: SignedDistanceGrid, points) -> np.ndarray:
    _, g = grid.sample(points, with_gradient=True)
    n = np.linalg.norm(g, axis=1, keepdims=True)
    return g / np.maximum(n, 1e-300)


def sampling_entropy_gradient(system: ParticleSystem, n: int, *, rng=None) -> np.ndarray:
    """Tangential ascent direction of ``H(X_n)`` for every particle of shape ``n`` (local coordinates)."""
    x = system.local_positions[n]
    grid = system.surfaces[n]
    if _coincident(x):
        rng = rng or np.random.default_rng(0)
        x = x + _tangential(rng.normal(scale=1e-3 * grid.spacing, size=x.shape), surface_normals(grid, x))
        x = project_to_surface(grid, x)
        if _coincident(x):
            raise PSMError(f"shape {n}: coincident particles")
        system.local_positions[n] = x
    sigma = kernel_sigmas(x, grid.spacing, max(system.rho0, grid.spacing))
    return _tangential(_sampling_gradient(x, sigma), surface_normals(grid, x))


# ---------------------------------------------------------------- shape-space entropy

def correspondence_entropy(rows: np.ndarray, alpha: float) -> float:
    """``1/2 sum_j log(lambda_j + alpha)`` over the eigenvalues of the dual covariance."""
    y = rows - rows.mean(axis=0)
    k = y @ y.T / (len(rows) - 1)
    sign, logdet = np.linalg.slogdet(k + alpha * np.eye(len(rows)))
    return 0.5 * float(logdet)


def correspondence_entropy_gradient(shape_matrix, alpha: float) -> np.ndarray:
    """Gradient of :func:`correspondence_entropy` with respect to every row.

    ``(K + alpha I)^-1 Y / (N - 1)`` for the centered rows ``Y`` and dual
    covariance ``K = Y Y^T / (N - 1)``, followed by the centering projection.
    """
    rows = shape_matrix.rows if isinstance(shape_matrix, ShapeMatrix) else np.asarray(shape_matrix, dtype=np.float64)
    if alpha <= 0:
        raise PSMError(f"alpha must be positive, got {alpha}")
    if len(rows) < 2:
        raise PSMError("at least two shapes are needed")
    if not np.all(np.isfinite(rows)):
        raise PSMError("non-finite shape vectors")
    n = len(rows)
    y = rows - rows.mean(axis=0)
    k = y @ y.T / (n - 1)
    g = np.linalg.solve(k + alpha * np.eye(n), y) / (n - 1)
    return g - g.mean(axis=0)


# ---------------------------------------------------------------- features and normals

@dataclass
class FeatureSample:
    values: np.ndarray  # (P, L)
    gradients: np.ndarray  # (P, L, 3), tangential


def feature_interpolate(values: np.ndarray, mesh: TriangleMesh, points, tol: float | None = None) -> FeatureSample:
    """Barycentric interpolation of per-vertex features and the in-triangle gradient.

    ``values`` is (V, L) (a :class:`~corrforge.trainpipe.FeatureField` is
    accepted too). Points farther than ``tol`` (default: the mesh's mean edge
    length) from the surface are rejected.
    """
    values = np.asarray(getattr(values, "values", values), dtype=np.float64)
    pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
    tri, bary, _, dist = mesh.locate(pts)
    limit = mesh.mean_edge_length if tol is None else tol
    if np.any(dist > limit):
        raise PSMError(f"point {float(dist.max()):.3g} off the surface (limit {limit:.3g})")
    idx = mesh.triangles[tri]  # (P, 3)
    f = np.einsum("pk,pkl->pl", bary, values[idx])
    v = mesh.vertices
    e = np.stack([v[idx[:, 1]] - v[idx[:, 0]], v[idx[:, 2]] - v[idx[:, 0]]], axis=2)  # (P, 3, 2)
    gram = np.einsum("pki,pkj->pij", e, e)
    pinv = np.linalg.solve(gram, np.transpose(e, (0, 2, 1)))  # (P, 2, 3): displacement -> (b1, b2)
    df = np.stack([values[idx[:, 1]] - values[idx[:, 0]], values[idx[:, 2]] - values[idx[:, 0]]], axis=1)  # (P, 2, L)
    grad = np.einsum("pil,pik->plk", df, pinv)
    return FeatureSample(f, grad)


def _central_gradient(grid: SignedDistanceGrid, q: np.ndarray) -> np.ndarray:
    h = grid.spacing
    eye = np.eye(3)
    return np.stack([(grid.sample(q + h * eye[k]) - grid.sample(q - h * eye[k])) / (2 * h) for k in range(3)], axis=1)


def smooth_normals(grid: SignedDistanceGrid, points) -> np.ndarray:
    """Unit normals from central differences of the distance with step = spacing.

    Smoother than the interpolated gradient, whose direction kinks at every
    cell face; these are the normals that enter the shape matrix.
    """
    g = _central_gradient(grid, np.atleast_2d(np.asarray(points, dtype=np.float64)))
    norm = np.linalg.norm(g, axis=1)
    if np.any(norm < 0.5):
        raise PSMError(f"degenerate distance gradient (|grad D| = {float(norm.min()):.3g})")
    return g / norm[:, None]


def normal_and_jacobian(grid: SignedDistanceGrid, point):
    """:func:`smooth_normals` and their 3x3 Jacobian by central differences.

    Accepts one point or (P, 3); returns ``(normal, jacobian)`` with
    ``jacobian[..., i, k] = d normal_i / d x_k``.
    """
    p = np.asarray(point, dtype=np.float64)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    h = grid.spacing
    eye = np.eye(3)
    n0 = smooth_normals(grid, p)
    jac = np.empty((len(p), 3, 3))
    for k in range(3):
        gp, gm = _central_gradient(grid, p + h * eye[k]), _central_gradient(grid, p - h * eye[k])
        np_ = gp / np.linalg.norm(gp, axis=1, keepdims=True)
        nm = gm / np.linalg.norm(gm, axis=1, keepdims=True)
        jac[:, :, k] = (np_ - nm) / (2 * h)
    return (n0[0], jac[0]) if single else (n0, jac)


# ---------------------------------------------------------------- shape matrix

@dataclass
class ShapeMatrix:
    """Rows ``[features (M*L) | normals (3M) | world positions (3M)]``, block-major."""

    rows: np.ndarray
    n_particles: int
    n_features: int
    include_normals: bool
    feature_weight: float = 1.0
    normal_weight: float = 0.0
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    feature_scale: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def position_offset(self) -> int:
        return self.n_particles * (self.n_features + (3 if self.include_normals else 0))

    def positions(self) -> np.ndarray:
        return self.rows[:, self.position_offset:].reshape(len(self.rows), self.n_particles, 3)


def standardize_features(feats: np.ndarray):
    """Per-dimension ensemble mean and std over (N, M, L); zero spread keeps scale 1."""
    flat = feats.reshape(-1, feats.shape[-1])
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    scale = np.where(std > 0, std, 1.0)
    return mean, scale


def assemble_shape_matrix(system: ParticleSystem, feature_fields=None, include_normals: bool = False,
                          feature_weight: float = 1.0, normal_weight: float = 1.0, *, _samples=None) -> ShapeMatrix:
    """Shape vectors of every shape; ``feature_fields`` is one (V, L) field per shape or ``None``."""
    world = system.world_positions()
    n, m, _ = world.shape
    blocks = []
    L = 0
    mean = scale = np.zeros(0)
    if feature_fields is not None:
        if system.meshes is None or len(feature_fields) != n or any(f is None for f in feature_fields):
            raise PSMError("a feature field and a mesh are required for every shape")
        samples = _samples or [feature_interpolate(f, mesh, x)
                               for f, mesh, x in zip(feature_fields, system.meshes, system.local_positions)]
        feats = np.stack([s.values for s in samples])  # (N, M, L)
        L = feats.shape[2]
        mean, scale = standardize_features(feats)
        blocks.append((feature_weight * (feats - mean) / scale).reshape(n, -1))
    if include_normals:
        normals = np.stack([t.apply_vectors(smooth_normals(g, x))
                            for t, g, x in zip(system.transforms, system.surfaces, system.local_positions)])
        blocks.append(normal_weight * normals.reshape(n, -1))
    blocks.append(world.reshape(n, -1))
    return ShapeMatrix(np.concatenate(blocks, axis=1), m, L, include_normals, feature_weight,
                       normal_weight if include_normals else 0.0, mean, scale)


# ---------------------------------------------------------------- initialization

def _grid_centroid(grid: SignedDistanceGrid) -> np.ndarray:
    idx = np.argwhere(grid.values < 0)
    if len(idx) == 0:
        raise PSMError("distance grid has no interior")
    return grid.origin + grid.spacing * idx.mean(axis=0)


def _shape_axes(grid: SignedDistanceGrid) -> np.ndarray:
    """Principal axes of the interior volume, signs fixed by the third moment (columns).

    Moments are taken in node-index units so that translated grids give
    identical axes. An axis without significant skew (a mirror-symmetric
    shape) takes the sign that points along the grid axis it is closest to,
    which keeps similarly posed symmetric shapes consistent.
    """
    idx = np.argwhere(grid.values < 0).astype(np.float64)
    c = idx - idx.mean(axis=0)
    _, vecs = np.linalg.eigh(c.T @ c)
    for k in range(3):
        proj = c @ vecs[:, k]
        skew = np.mean(proj ** 3) / max(np.mean(proj ** 2), 1e-300) ** 1.5
        if abs(skew) > 1e-2:
            flip = skew < 0
        else:
            flip = vecs[np.argmax(np.abs(vecs[:, k])), k] < 0
        if flip:
            vecs[:, k] = -vecs[:, k]
    if np.linalg.det(vecs) < 0:
        vecs[:, 0] = -vecs[:, 0]
    return vecs


def _nearest_surface_point(grid: SignedDistanceGrid, target: np.ndarray) -> np.ndarray:
    near = np.argwhere(np.abs(grid.values) < grid.spacing)
    if len(near) == 0:
        raise PSMError("distance grid has no nodes near its zero level set")
    pts = grid.origin + grid.spacing * near
    start = pts[np.argmin(np.linalg.norm(pts - target, axis=1))]
    # off the node: the interpolated gradient there depends on which cell is picked, a choice grid rotations change
    toward = target - start
    start = start + 0.25 * grid.spacing * toward / max(float(np.linalg.norm(toward)), 1e-300)
    try:
        return project_to_surface(grid, start)
    except ProjectionError as exc:
        raise PSMError(f"initial projection failed: {exc}") from exc


@dataclass
class SamplingConfig:
    step: float = 0.5
    iterations: int = 200
    tol: float = 1e-4  # stop once max displacement < tol * spacing
    alpha: float = 1.0  # correspondence regularization while splitting, in units of 3 M spacing^2


def _sampling_rates(x, grid, rho0):
    """Kernel widths and stable per-particle rates for the sampling term.

    The entropy's stiffness is about ``1 / (M sigma^2)`` while the nearest
    neighbour sits near ``sigma``; once ``sigma`` is clamped below the
    neighbour distance ``d`` the kernel weights switch sharply between
    neighbours and the stiffness grows by ``(d / sigma)^2``.
    """
    nn = _nearest_distances(x) if len(x) > 1 else np.full(len(x), np.inf)
    sigma = np.clip(nn, grid.spacing, max(rho0, grid.spacing))
    return sigma, len(x) * sigma ** 2 * np.minimum(1.0, (sigma / nn) ** 2)


def _relax_shape(system: ParticleSystem, n: int, cfg: SamplingConfig, rng) -> None:
    grid = system.surfaces[n]
    for _ in range(cfg.iterations):
        x = system.local_positions[n]
        g = sampling_entropy_gradient(system, n, rng=rng)
        x = system.local_positions[n].copy()
        _, rate = _sampling_rates(x, grid, system.rho0)
        move = cfg.step * rate[:, None] * g
        # a single step may not exceed the kernel width
        lim = np.linalg.norm(move, axis=1)
        cap = max(system.rho0, grid.spacing)
        move *= np.minimum(1.0, cap / np.maximum(lim, 1e-300))[:, None]
        new = _project(grid, x + move, n)
        system.local_positions[n] = new
        if np.abs(new - x).max() < cfg.tol * grid.spacing:
            break


def _relax_joint(system: ParticleSystem, cfg: SamplingConfig) -> None:
    """Sampling and correspondence terms together, so every shape settles into the same arrangement."""
    opt = OptimizeConfig(step=cfg.step, procrustes_every=10)
    # the shapes barely differ right after a split, so the scale is geometric rather than the shape variance
    descent = _Descent(system, opt, None, 0.0, 3.0 * system.n_particles * system.spacing ** 2)
    _realign(system)
    for it in range(cfg.iterations):
        if it % opt.procrustes_every == 0 and it:
            _realign(system)
        rec = descent.iterate(it, cfg.alpha)
        if rec["max_displacement"] < cfg.tol * system.spacing:
            break
    system.transforms = [RigidTransform.identity() for _ in system.surfaces]


def _project(grid, pts, n):
    try:
        return project_to_surface(grid, np.clip(pts, grid.origin, grid.upper))
    except ProjectionError as exc:
        raise PSMError(f"shape {n}: surface projection failed: {exc}") from exc


def initialize_particles(surfaces, m_target: int, seed: int = 0, *, meshes=None, rho0: float | None = None,
                         sampling: SamplingConfig | None = None) -> ParticleSystem:
    """Particle splitting from one particle per shape up to ``m_target`` particles.

    Split offsets are drawn once per level in each shape's principal-axis
    frame, so every shape splits the same way. After each split the
    particles relax under the sampling term; with several shapes the
    correspondence term (regularized by ``sampling.alpha``) runs alongside
    so the shapes keep matching arrangements.
    """
    if m_target < 1 or m_target & (m_target - 1):
        raise PSMError(f"M must be a power of two, got {m_target}")
    surfaces = list(surfaces)
    if not surfaces:
        raise PSMError("no surfaces")
    sampling = sampling or SamplingConfig()
    rng = np.random.default_rng(seed)
    if rho0 is None:
        ext = max(float(np.linalg.norm(g.upper - g.origin)) for g in surfaces)
        rho0 = 0.05 * ext
    axes = [_shape_axes(g) for g in surfaces]
    pos = np.stack([_nearest_surface_point(g, _grid_centroid(g))[None] for g in surfaces])
    system = ParticleSystem(surfaces, pos, [RigidTransform.identity() for _ in surfaces], meshes, float(rho0))
    while system.n_particles < m_target:
        m = system.n_particles
        coef = rng.normal(size=(m, 3))
        new = np.empty((len(surfaces), 2 * m, 3))
        for n, (g, x) in enumerate(zip(surfaces, system.local_positions)):
            off = _tangential(coef @ axes[n].T, surface_normals(g, x))
            off *= 0.1 * g.spacing / np.maximum(np.linalg.norm(off, axis=1, keepdims=True), 1e-300)
            new[n, 0::2] = _project(g, x + off, n)
            new[n, 1::2] = _project(g, x - off, n)
        system.local_positions = new
        if len(surfaces) == 1:
            _relax_shape(system, 0, sampling, rng)
        else:
            _relax_joint(system, sampling)
    return system


# ---------------------------------------------------------------- optimization

@dataclass
class OptimizeConfig:
    mode: str = "xyz"
    iterations: int = 1000
    step: float = 0.5
    alpha_hi: float = 0.1  # fractions of the mean dual eigenvalue
    alpha_lo: float = 0.001
    alpha_steps: int = 100  # geometric stages spread evenly over the iteration budget
    feature_weight: float = 1.0
    normal_weight: float | None = None  # default 0.1 x mean shape radius
    procrustes_every: int = 10
    tol: float = 1e-4  # stop once max displacement < tol * spacing
    max_halvings: int = 10

    def validate(self) -> list[str]:
        errors = []
        if self.mode not in MODES:
            errors.append(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.iterations < 0:
            errors.append("iterations must be >= 0")
        for name in ("step", "alpha_hi", "alpha_lo"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        if self.alpha_lo > self.alpha_hi:
            errors.append("alpha_lo must not exceed alpha_hi")
        if self.alpha_steps < 1 or self.procrustes_every < 1:
            errors.append("alpha_steps and procrustes_every must be >= 1")
        if self.feature_weight < 0 or (self.normal_weight is not None and self.normal_weight < 0):
            errors.append("weights must be >= 0")
        return errors

    @property
    def uses_features(self) -> bool:
        return self.mode.startswith("fea")

    @property
    def uses_normals(self) -> bool:
        return self.mode.endswith("normals")


@dataclass
class CorrespondenceModel:
    positions: np.ndarray  # (N, M, 3) world
    mode: str
    n_features: int
    row_length: int
    history: list[dict] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)


def mean_shape_radius(system: ParticleSystem) -> float:
    x = system.local_positions
    return float(np.mean(np.linalg.norm(x - x.mean(axis=1, keepdims=True), axis=2)))


def _mean_dual_eigenvalue(sm: ShapeMatrix) -> float:
    y = sm.rows - sm.rows.mean(axis=0)
    return float(np.sum(y * y)) / (len(y) - 1) / len(y)


def _alpha_fraction(cfg: OptimizeConfig, it: int) -> float:
    stages = max(1, min(cfg.alpha_steps, cfg.iterations))
    stage = min(stages - 1, it * stages // max(cfg.iterations, 1))
    t = stage / (stages - 1) if stages > 1 else 1.0
    return cfg.alpha_hi * (cfg.alpha_lo / cfg.alpha_hi) ** t


def _objective(sm: ShapeMatrix, system: ParticleSystem, alpha: float) -> float:
    h = 0.0
    for g, x in zip(system.surfaces, system.local_positions):
        h += sampling_entropy(x, kernel_sigmas(x, g.spacing, max(system.rho0, g.spacing)))
    return correspondence_entropy(sm.rows, alpha) - h


def _realign(system: ParticleSystem) -> None:
    if system.n_shapes >= 2 and system.n_particles >= 3:
        system.transforms = procrustes_align(list(system.local_positions))


def local_gradient(system: ParticleSystem, sm: ShapeMatrix, grad_rows: np.ndarray, samples=None) -> np.ndarray:
    """Pull a gradient over shape-matrix rows back to the local particle positions (N, M, 3).

    Positions pass through each shape's rigid transform, features through
    the interpolated in-triangle gradient (standardization held fixed) and
    normals through the Jacobian of the distance-gradient direction.
    """
    n_shapes, m = system.n_shapes, system.n_particles
    g_feat = g_norm = None
    if sm.n_features:
        if samples is None:
            raise PSMError("feature samples are required for a feature shape matrix")
        g_feat = grad_rows[:, : m * sm.n_features].reshape(n_shapes, m, sm.n_features)
    if sm.include_normals:
        off = m * sm.n_features
        g_norm = grad_rows[:, off: off + 3 * m].reshape(n_shapes, m, 3)
    g_pos = grad_rows[:, sm.position_offset:].reshape(n_shapes, m, 3)
    out = np.empty((n_shapes, m, 3))
    for n in range(n_shapes):
        t = system.transforms[n]
        gx = t.scale * (g_pos[n] @ t.rotation)
        if g_feat is not None:
            coef = g_feat[n] * (sm.feature_weight / sm.feature_scale)[None, :]
            gx += np.einsum("pl,plk->pk", coef, samples[n].gradients)
        if g_norm is not None:
            _, jac = normal_and_jacobian(system.surfaces[n], system.local_positions[n])
            gx += sm.normal_weight * np.einsum("pi,pik->pk", g_norm[n] @ t.rotation, jac)
        out[n] = gx
    return out


class _Descent:
    """One gradient step on ``H(Z) - sum_n H(X_n)`` at a time, with step halving."""

    def __init__(self, system: ParticleSystem, cfg: OptimizeConfig, fields, nw: float, alpha_scale: float | None = None):
        self.system, self.cfg, self.fields, self.nw = system, cfg, fields, nw
        self.alpha_scale = alpha_scale
        self.step = cfg.step
        self.halvings = 0
        self.rng = np.random.default_rng(0)

    def evaluate(self, fraction: float):
        system, fields = self.system, self.fields
        samples = None
        if fields is not None:
            samples = [feature_interpolate(f, mesh, x) for f, mesh, x in zip(fields, system.meshes, system.local_positions)]
        sm = assemble_shape_matrix(system, fields, self.cfg.uses_normals, self.cfg.feature_weight, self.nw,
                                   _samples=samples)
        if self.alpha_scale is None:
            # fixed at the starting state: a scale that tracked the shrinking variance would make collapse free
            self.alpha_scale = _mean_dual_eigenvalue(sm)
        return sm, samples, max(fraction * self.alpha_scale, 1e-12)

    def iterate(self, it: int, fraction: float) -> dict:
        system = self.system
        n_shapes = system.n_shapes
        sm, samples, alpha = self.evaluate(fraction)
        g_corr = local_gradient(system, sm, correspondence_entropy_gradient(sm, alpha), samples)
        moves = np.empty_like(system.local_positions)
        for n in range(n_shapes):
            grid = system.surfaces[n]
            gx = g_corr[n] - sampling_entropy_gradient(system, n, rng=self.rng)
            x = system.local_positions[n]
            _, rate = _sampling_rates(x, grid, system.rho0)
            tau = np.minimum(rate, (n_shapes - 1) * alpha)
            moves[n] = -_tangential(tau[:, None] * gx, surface_normals(grid, x))
        while True:
            disp = self.step * moves
            if np.linalg.norm(disp, axis=2).max() <= system.rho0 or system.rho0 == 0:
                break
            self.halvings += 1
            self.step *= 0.5
            if self.halvings > self.cfg.max_halvings:
                raise PSMError(f"optimization diverged at iteration {it}: step halved {self.cfg.max_halvings} times")
        old = system.local_positions.copy()
        for n in range(n_shapes):
            system.local_positions[n] = _project(system.surfaces[n], old[n] + disp[n], n)
        max_move = float(np.linalg.norm(system.local_positions - old, axis=2).max())
        return {"iteration": it, "alpha": alpha, "max_displacement": max_move, "step": self.step}


def optimize(system: ParticleSystem, config: OptimizeConfig | None = None, feature_fields=None, *, log=None) -> CorrespondenceModel:
    """Gradient descent on ``H(Z) - sum_n H(X_n)``.

    Every particle moves by ``-step * tau_i * dQ/dx_i`` with a per-particle
    rate ``tau_i = min(M sigma_i^2, (N - 1) alpha)``, the stable rate of the
    stiffer of the two terms, then onto the tangent plane and back to the
    surface. A step that would move any particle farther than ``rho0`` is
    retried at half the step size.
    """
    cfg = config or OptimizeConfig()
    errors = cfg.validate()
    if cfg.uses_features and feature_fields is None:
        errors.append(f"mode {cfg.mode!r} needs feature fields")
    if cfg.uses_features and system.meshes is None:
        errors.append(f"mode {cfg.mode!r} needs meshes")
    if system.n_shapes < 2:
        errors.append("at least two shapes are needed")
    if errors:
        raise PSMError("; ".join(errors))
    fields = [np.asarray(getattr(f, "values", f), dtype=np.float64) for f in feature_fields] if cfg.uses_features else None
    nw = cfg.normal_weight if cfg.normal_weight is not None else 0.1 * mean_shape_radius(system)
    descent = _Descent(system, cfg, fields, nw)
    history = []
    _realign(system)
    for it in range(cfg.iterations):
        if it % cfg.procrustes_every == 0 and it:
            _realign(system)
        rec = descent.iterate(it, _alpha_fraction(cfg, it))
        history.append(rec)
        if log:
            log(rec)
        if rec["max_displacement"] < cfg.tol * system.spacing and _alpha_fraction(cfg, it) == cfg.alpha_lo:
            break
    _realign(system)
    sm, _, alpha = descent.evaluate(cfg.alpha_lo)
    system.check_on_surface()
    meta = {"mode": cfg.mode, "M": system.n_particles, "N": system.n_shapes, "L": sm.n_features, "normal_weight": nw,
            "feature_weight": cfg.feature_weight, "iterations_run": len(history), "step_halvings": descent.halvings,
            "final_alpha": alpha, "config": asdict(cfg)}
    return CorrespondenceModel(system.world_positions(), cfg.mode, sm.n_features, int(sm.rows.shape[1]), history, meta)


def objective_value(system: ParticleSystem, config: OptimizeConfig, feature_fields=None, alpha: float | None = None) -> float:
    """``1/2 sum log(lambda_j + alpha) - sum_n H(X_n)`` at the current state."""
    nw = config.normal_weight if config.normal_weight is not None else 0.1 * mean_shape_radius(system)
    fields = feature_fields if config.uses_features else None
    sm = assemble_shape_matrix(system, fields, config.uses_normals, config.feature_weight, nw)
    if alpha is None:
        y = sm.rows - sm.rows.mean(axis=0)
        alpha = max(config.alpha_lo * float(np.sum(y * y)) / (system.n_shapes - 1) / system.n_shapes, 1e-12)
    return _objective(sm, system, alpha)


# ---------------------------------------------------------------- files

def write_particles(model: CorrespondenceModel, out_dir, *, extra: dict | None = None) -> list[Path]:
    """``shape_XXX.particles`` (M lines ``x y z``, 17 significant digits) and ``particles.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for n, pts in enumerate(model.positions):
        p = out / f"shape_{n:03d}.particles"
        p.write_text("".join(f"{x:.17g} {y:.17g} {z:.17g}\n" for x, y, z in pts))
        paths.append(p)
    last = model.history[-1] if model.history else {}
    manifest = {
        "mode": model.mode, "L": model.n_features, "M": int(model.positions.shape[1]),
        "N": int(model.positions.shape[0]), "row_length": model.row_length,
        "config": model.metadata.get("config", {}),
        "convergence": {"iterations_run": len(model.history), "final_max_displacement": last.get("max_displacement"),
                        "step_halvings": model.metadata.get("step_halvings", 0)},
        **(extra or {}),
    }
    (out / "particles.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return paths


def read_particles(path) -> np.ndarray:
    data = np.loadtxt(path, ndmin=2)
    if data.shape[1] != 3:
        raise PSMError(f"{path}: expected 3 columns, found {data.shape[1]}")
    return data


def read_particle_dir(path) -> np.ndarray:
    files = sorted(Path(path).glob("shape_*.particles"))
    if not files:
        raise PSMError(f"{path}: no particle files")
    sets = [read_particles(f) for f in files]
    if len({s.shape for s in sets}) != 1:
        raise PSMError(f"{path}: particle files differ in length")
    return np.stack(sets)
