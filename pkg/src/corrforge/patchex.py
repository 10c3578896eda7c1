"""Geodesic polar patches and labeled pair datasets for Siamese training.

A patch samples the signed height of the surface above the tangent plane at
``n_rings`` geodesic radii along ``n_rays`` straightest geodesics. Channel 0
uses the frame basis ``(+u, +v)``, channel 1 the negated basis, which is the
same fan of rays rotated by half a turn.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geomcore import LocalFrame, TriangleMesh, estimate_local_frame, start_rays, vertex_frame, walk

N_RINGS = 64
N_RAYS = 64
PATCH_SHAPE = (2, N_RINGS, N_RAYS)

CORRESPONDING, NONCORRESPONDING = 1, 0
SOURCE, TARGET = 0, 1

_ORDERS = ((0, 1), (1, 0))


class DatasetError(ValueError):
    pass


@dataclass(eq=False)
class GeodesicPatch:
    values: np.ndarray  # (2, rings, rays)
    center: np.ndarray
    rho_max: float
    clipped: bool = False
    channel_order: tuple = (0, 1)

    @property
    def ring_spacing(self) -> float:
        return self.rho_max / self.values.shape[1]

    def reordered(self, order) -> "GeodesicPatch":
        """Patch with channels in ``order`` relative to the extracted (+u, +v) layout."""
        canonical = self.values if self.channel_order == (0, 1) else self.values[::-1]
        vals = canonical if tuple(order) == (0, 1) else canonical[::-1]
        return replace(self, values=vals.copy(), channel_order=tuple(order))


@dataclass(eq=False)
class PairSample:
    patch_a: GeodesicPatch
    patch_b: GeodesicPatch
    label: int
    domain: int = SOURCE
    shape_ids: tuple = (0, 0)
    particle_ids: tuple = (0, 0)

    @property
    def orders(self):
        return (self.patch_a.channel_order, self.patch_b.channel_order)

    def check(self) -> None:
        if self.label == CORRESPONDING and (self.particle_ids[0] != self.particle_ids[1] or self.shape_ids[0] == self.shape_ids[1]):
            raise DatasetError(f"corresponding pair with particles {self.particle_ids} on shapes {self.shape_ids}")


# ---------------------------------------------------------------- extraction

def ring_radii(rho_max: float, n_rings: int = N_RINGS) -> np.ndarray:
    return (np.arange(n_rings) + 1) * (rho_max / n_rings)


def extract_patches(mesh: TriangleMesh, frames, rho_max: float, n_rings: int = N_RINGS, n_rays: int = N_RAYS):
    """Patches for many frames on one mesh.

    Returns ``(values, clipped)`` with ``values`` of shape (P, 2, rings, rays).
    Rays that leave the mesh keep their last traced value for the remaining
    rings and flag the patch as clipped.
    """
    if rho_max <= 0:
        raise ValueError("rho_max must be positive")
    if n_rays % 2:
        raise ValueError("n_rays must be even")
    frames = list(frames)
    theta = 2 * np.pi * np.arange(n_rays) / n_rays
    cos, sin = np.cos(theta)[:, None], np.sin(theta)[:, None]
    tri, pts, dirs = [], [], []
    for f in frames:
        tangents = cos * f.u + sin * f.v
        t0, p0, d0 = start_rays(mesh, f.triangle, f.bary, f.point, f.normal, tangents)
        tri.append(t0)
        pts.append(p0)
        dirs.append(d0)
    if not frames:
        return np.zeros((0, 2, n_rings, n_rays)), np.zeros(0, dtype=bool)
    radii = ring_radii(rho_max, n_rings)
    res = walk(mesh, np.concatenate(tri), np.concatenate(pts), np.concatenate(dirs), rho_max, radii=radii)
    samples = res["samples"].reshape(len(frames), n_rays, n_rings, 3)
    centers = np.array([f.point for f in frames])
    normals = np.array([f.normal for f in frames])
    h = np.einsum("prkj,pj->prk", samples - centers[:, None, None, :], normals)
    clipped = np.isnan(h).any(axis=(1, 2))
    if clipped.any():
        h = _fill_along_rays(h)
    ch0 = h.transpose(0, 2, 1)  # (P, rings, rays)
    ch1 = np.roll(ch0, -n_rays // 2, axis=2)
    return np.stack([ch0, ch1], axis=1), clipped


def _fill_along_rays(h):
    out = h.copy()
    for p, k in zip(*np.nonzero(np.isnan(out).any(axis=2))):
        ray = out[p, k]
        good = ~np.isnan(ray)
        last = 0.0
        for r in range(len(ray)):
            if good[r]:
                last = ray[r]
            else:
                ray[r] = last
    return out


def extract_patch(mesh: TriangleMesh, frame: LocalFrame, rho_max: float) -> GeodesicPatch:
    values, clipped = extract_patches(mesh, [frame], rho_max)
    return GeodesicPatch(values[0], np.asarray(frame.point), float(rho_max), bool(clipped[0]))


def frames_at_points(mesh: TriangleMesh, points) -> list[LocalFrame]:
    tri, bary, q, _ = mesh.locate(np.atleast_2d(points))
    return [estimate_local_frame(mesh, q[i], triangle=int(tri[i]), bary=bary[i]) for i in range(len(q))]


def frames_at_vertices(mesh: TriangleMesh, vertices) -> list[LocalFrame]:
    return [vertex_frame(mesh, int(v)) for v in vertices]


# ---------------------------------------------------------------- sign handling

def sign_variants(sample: PairSample) -> list[PairSample]:
    """The four channel orderings of a pair, always in the same order."""
    out = []
    for oa in _ORDERS:
        for ob in _ORDERS:
            out.append(replace(sample, patch_a=sample.patch_a.reordered(oa), patch_b=sample.patch_b.reordered(ob)))
    return out


# ---------------------------------------------------------------- datasets

@dataclass(eq=False)
class PairDataset:
    """Columnar pair store.

    Distinct patches live once in ``store`` (float32, extracted channel
    order); each sample references two of them plus a channel order code
    (0 keeps the order, 1 swaps the channels).
    """

    store: np.ndarray
    index: np.ndarray  # (n, 2) rows of store
    order: np.ndarray  # (n, 2) uint8
    labels: np.ndarray
    domains: np.ndarray
    shape_ids: np.ndarray
    particle_ids: np.ndarray
    rho_max: float = 0.0
    mean: np.ndarray | None = None
    group: np.ndarray | None = None  # base pair id shared by the sign variants

    def __len__(self) -> int:
        return len(self.labels)

    def __post_init__(self):
        if self.group is None:
            self.group = np.arange(len(self.labels))

    def patches(self, rows, side: int, centered: bool = True) -> np.ndarray:
        """float64 patches (k, 2, rings, rays) for sample ``rows``; side 0 = a, 1 = b."""
        rows = np.asarray(rows)
        x = self.store[self.index[rows, side]]
        swap = self.order[rows, side] == 1
        x[swap] = x[swap, ::-1]
        x = x.astype(np.float64)
        if centered and self.mean is not None:
            x -= self.mean
        return x

    def subset(self, rows) -> "PairDataset":
        rows = np.asarray(rows)
        return replace(self, index=self.index[rows], order=self.order[rows], labels=self.labels[rows],
                       domains=self.domains[rows], shape_ids=self.shape_ids[rows],
                       particle_ids=self.particle_ids[rows], group=self.group[rows])

    def __getitem__(self, i: int) -> PairSample:
        pa = GeodesicPatch(self.patches([i], 0, centered=False)[0], np.zeros(3), self.rho_max,
                           channel_order=_ORDERS[int(self.order[i, 0])])
        pb = GeodesicPatch(self.patches([i], 1, centered=False)[0], np.zeros(3), self.rho_max,
                           channel_order=_ORDERS[int(self.order[i, 1])])
        return PairSample(pa, pb, int(self.labels[i]), int(self.domains[i]),
                          tuple(int(x) for x in self.shape_ids[i]), tuple(int(x) for x in self.particle_ids[i]))

    def samples(self) -> list[PairSample]:
        return [self[i] for i in range(len(self))]

    def check(self) -> None:
        pos = self.labels == CORRESPONDING
        bad = pos & ((self.particle_ids[:, 0] != self.particle_ids[:, 1]) | (self.shape_ids[:, 0] == self.shape_ids[:, 1]))
        if bad.any():
            raise DatasetError(f"{int(bad.sum())} corresponding pairs violate the pair invariant")


def _expand_variants(index, labels, domains, shape_ids, particle_ids):
    n = len(labels)
    rep = np.repeat(np.arange(n), 4)
    order = np.tile(np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=np.uint8), (n, 1))
    return index[rep], order, labels[rep], domains[rep], shape_ids[rep], particle_ids[rep], rep


def build_pair_dataset(
    correspondence_model,
    meshes,
    *,
    rho_max: float,
    positives_per_particle: int = 1,
    negative_ratio: float = 1.0,
    min_separation: float | None = None,
    seed: int = 0,
    shapes=None,
    particles=None,
    domain: int = SOURCE,
) -> PairDataset:
    """Corresponding and non-corresponding patch pairs from a correspondence model.

    ``correspondence_model`` is (N, M, 3): particle ``m`` of shape ``n``.
    Positives pair particle ``m`` on two distinct shapes; negatives pair
    ``m != m'`` at least ``min_separation`` apart (Euclidean, a lower bound
    on the geodesic separation) on the first shape of the pair. Every pair is
    expanded into its four sign variants.
    """
    model = np.asarray(correspondence_model, dtype=np.float64)
    n_shapes, n_particles, _ = model.shape
    if len(meshes) != n_shapes:
        raise DatasetError(f"{len(meshes)} meshes for a model of {n_shapes} shapes")
    shapes = np.arange(n_shapes) if shapes is None else np.asarray(shapes)
    particles = np.arange(n_particles) if particles is None else np.asarray(particles)
    if len(shapes) < 2:
        raise DatasetError("at least two shapes are needed for corresponding pairs")
    if min_separation is None:
        min_separation = 2.0 * rho_max
    rng = np.random.default_rng(seed)

    pos = []
    for m in particles:
        for _ in range(positives_per_particle):
            a, b = rng.choice(shapes, size=2, replace=False)
            pos.append((a, m, b, m))
    n_neg = int(round(negative_ratio * len(pos)))
    neg = []
    if n_neg:
        far = {}
        for s in shapes:
            p = model[s, particles]
            d = np.linalg.norm(p[:, None] - p[None], axis=2)
            far[int(s)] = d > min_separation
        if not any(f.any() for f in far.values()):
            raise DatasetError(f"min_separation {min_separation:g} excludes every negative pair")
        while len(neg) < n_neg:
            a, b = rng.choice(shapes, size=2, replace=True)
            i = rng.integers(len(particles))
            ok = np.nonzero(far[int(a)][i])[0]
            if len(ok) == 0:
                continue
            j = ok[rng.integers(len(ok))]
            neg.append((a, particles[i], b, particles[j]))

    pairs = np.array(pos + neg, dtype=np.int64).reshape(-1, 4)
    labels = np.array([CORRESPONDING] * len(pos) + [NONCORRESPONDING] * len(neg), dtype=np.uint8)

    keys = sorted({(int(s), int(m)) for s, m in np.concatenate([pairs[:, :2], pairs[:, 2:]])})
    slot = {k: i for i, k in enumerate(keys)}
    store = np.empty((len(keys),) + PATCH_SHAPE, dtype=np.float32)
    by_shape: dict[int, list] = {}
    for k in keys:
        by_shape.setdefault(k[0], []).append(k[1])
    for s, ms in by_shape.items():
        frames = frames_at_points(meshes[s], model[s, ms])
        vals, _ = extract_patches(meshes[s], frames, rho_max)
        for m, v in zip(ms, vals):
            store[slot[(s, m)]] = v
    index = np.array([[slot[(a, m)], slot[(b, n)]] for a, m, b, n in pairs], dtype=np.int64).reshape(-1, 2)
    domains = np.full(len(labels), domain, dtype=np.uint8)
    index, order, labels, domains, sids, pids, group = _expand_variants(
        index, labels, domains, pairs[:, [0, 2]], pairs[:, [1, 3]])
    ds = PairDataset(store, index, order, labels, domains, sids, pids, float(rho_max), None, group)
    ds.check()
    return ds


def dataset_mean(dataset: PairDataset) -> np.ndarray:
    """Per-pixel mean over every patch of every sample (centering applied if set)."""
    if len(dataset) == 0:
        raise DatasetError("empty dataset")
    total = np.zeros(PATCH_SHAPE)
    for side in (0, 1):
        for code in (0, 1):
            rows = dataset.order[:, side] == code
            counts = np.bincount(dataset.index[rows, side], minlength=len(dataset.store)).astype(np.float64)
            s = np.tensordot(counts, dataset.store.astype(np.float64), axes=1)
            total += s[::-1] if code else s
    mean = total / (2 * len(dataset))
    if dataset.mean is not None:
        mean = mean - dataset.mean
    return mean


def center_dataset(dataset: PairDataset, mean) -> PairDataset:
    return replace(dataset, mean=np.asarray(mean, dtype=np.float64))


def center_patches(patches, mean) -> np.ndarray:
    """Training-time centering for raw patches: round to float32 like the stored dataset, then subtract."""
    return np.asarray(patches).astype(np.float32).astype(np.float64) - mean


def sample_vertex_patches(meshes, n: int, rho_max: float, seed: int = 0, shapes=None):
    """Unlabeled patches at uniformly drawn vertices; returns (patches f32, shape ids, vertex ids)."""
    rng = np.random.default_rng(seed)
    shapes = np.arange(len(meshes)) if shapes is None else np.asarray(shapes)
    if n <= 0 or len(shapes) == 0:
        raise DatasetError("no target patches requested")
    sid = rng.choice(shapes, size=n)
    vid = np.array([rng.integers(meshes[s].n_vertices) for s in sid])
    out = np.empty((n,) + PATCH_SHAPE, dtype=np.float32)
    for s in np.unique(sid):
        rows = np.nonzero(sid == s)[0]
        vals, _ = extract_patches(meshes[s], frames_at_vertices(meshes[s], vid[rows]), rho_max)
        out[rows] = vals
    return out, sid, vid


# ---------------------------------------------------------------- persistence

_RECORD = np.dtype([
    ("label", "u1"), ("domain", "u1"), ("shape_ids", "<u4", (2,)), ("particle_ids", "<u4", (2,)),
    ("a", "<f4", PATCH_SHAPE), ("b", "<f4", PATCH_SHAPE),
])


def save_dataset(dataset: PairDataset, path, chunk: int = 1024) -> None:
    """Header of four u32 ``{count, 2, 64, 64}`` then packed little-endian records."""
    with open(path, "wb") as fh:
        np.array([len(dataset), *PATCH_SHAPE], dtype="<u4").tofile(fh)
        for s in range(0, len(dataset), chunk):
            rows = np.arange(s, min(s + chunk, len(dataset)))
            rec = np.empty(len(rows), dtype=_RECORD)
            rec["label"] = dataset.labels[rows]
            rec["domain"] = dataset.domains[rows]
            rec["shape_ids"] = dataset.shape_ids[rows]
            rec["particle_ids"] = dataset.particle_ids[rows]
            rec["a"] = dataset.patches(rows, 0, centered=False)
            rec["b"] = dataset.patches(rows, 1, centered=False)
            rec.tofile(fh)


def load_dataset(path, rho_max: float = 0.0) -> PairDataset:
    """Inverse of :func:`save_dataset`; identical and channel-swapped patches are stored once."""
    with open(path, "rb") as fh:
        header = np.fromfile(fh, dtype="<u4", count=4)
        if len(header) != 4 or tuple(int(x) for x in header[1:]) != PATCH_SHAPE:
            raise DatasetError(f"{path}: bad dataset header {header.tolist()}")
        rec = np.fromfile(fh, dtype=_RECORD)
    if len(rec) != header[0]:
        raise DatasetError(f"{path}: header says {header[0]} records, found {len(rec)}")
    seen: dict[bytes, int] = {}
    store = []
    index = np.empty((len(rec), 2), dtype=np.int64)
    order = np.zeros((len(rec), 2), dtype=np.uint8)
    for i in range(len(rec)):
        for side, key in ((0, "a"), (1, "b")):
            v = rec[key][i]
            k = v.tobytes()
            if k in seen:
                index[i, side] = seen[k]
                continue
            ks = v[::-1].tobytes()
            if ks in seen:
                index[i, side] = seen[ks]
                order[i, side] = 1
                continue
            seen[k] = len(store)
            index[i, side] = len(store)
            store.append(np.array(v))
    group = np.arange(len(rec)) // 4 if len(rec) % 4 == 0 else None
    return PairDataset(np.array(store, dtype=np.float32).reshape(-1, *PATCH_SHAPE), index, order,
                       rec["label"].copy(), rec["domain"].copy(), rec["shape_ids"].astype(np.int64),
                       rec["particle_ids"].astype(np.int64), rho_max, None, group)
