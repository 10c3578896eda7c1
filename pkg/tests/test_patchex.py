import numpy as np
import pytest

from conftest import grid_plane, random_rotation
from corrforge.geomcore import LocalFrame, estimate_local_frame, max_shape_diameter
from corrforge.patchex import (
    CORRESPONDING,
    NONCORRESPONDING,
    DatasetError,
    GeodesicPatch,
    PairSample,
    build_pair_dataset,
    center_dataset,
    center_patches,
    dataset_mean,
    extract_patch,
    extract_patches,
    frames_at_points,
    frames_at_vertices,
    load_dataset,
    ring_radii,
    save_dataset,
    sign_variants,
)
from corrforge.synthgen import EnsembleSpec, generate_ensemble, ground_truth_pairs, icosphere


@pytest.fixture(scope="module")
def small_ensemble():
    return generate_ensemble(EnsembleSpec("bean1bump", count=4, resolution=642, seed=1))


def test_plane_patch_is_zero():
    mesh = grid_plane(41, size=20.0, jitter=0.3)
    for f in frames_at_points(mesh, [[0.3, -0.7, 0.0], [2.0, 1.0, 0.0]]):
        p = extract_patch(mesh, f, 4.0)
        assert p.values.shape == (2, 64, 64)
        assert np.abs(p.values).max() < 1e-6
        assert not p.clipped
        assert p.ring_spacing == pytest.approx(4.0 / 64)


def test_sphere_patch_matches_closed_form():
    mesh = icosphere(6)
    rho = 0.5
    exact = np.cos(ring_radii(rho)) - 1.0
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(3, 3))
    frames = frames_at_points(mesh, pts / np.linalg.norm(pts, axis=1, keepdims=True)) + frames_at_vertices(mesh, [0, 17])
    vals, _ = extract_patches(mesh, frames, rho)
    err = np.abs(vals - exact[None, None, :, None])
    assert err.max() <= 0.01 * abs(exact[-1])
    # outer rings, where the signal dwarfs the facet sag, also meet a plain relative 1%
    assert (err[..., 48:, :] / np.abs(exact[48:, None])).max() < 0.01


def test_channel_one_is_half_turn_of_channel_zero(small_ensemble):
    mesh = small_ensemble.meshes[0]
    rho = 0.05 * max_shape_diameter([mesh])
    for f in frames_at_vertices(mesh, [3, 100, 400]):
        p = extract_patch(mesh, f, rho)
        assert np.abs(p.values[1] - np.roll(p.values[0], -32, axis=1)).max() < 1e-6 * rho
        # direct check with the negated basis
        neg = LocalFrame(f.point, f.normal, -f.u, -f.v, f.kappa1, f.kappa2, f.triangle, f.bary)
        q = extract_patch(mesh, neg, rho)
        assert np.abs(q.values[0] - p.values[1]).max() < 1e-6 * rho


def test_clipped_patch_filled_along_ray():
    mesh = grid_plane(11, size=2.0)
    f = frames_at_points(mesh, [[0.5, 0.0, 0.0]])[0]
    p = extract_patch(mesh, f, 1.5)
    assert p.clipped
    assert np.all(np.isfinite(p.values))


def test_rigid_invariance(small_ensemble):
    mesh = small_ensemble.meshes[1]
    rho = 0.05 * max_shape_diameter([mesh])
    rng = np.random.default_rng(8)
    R, t = random_rotation(rng), rng.normal(size=3) * 10
    moved = mesh.transformed(R, t)
    for v in (10, 200, 555):
        a = extract_patch(mesh, frames_at_vertices(mesh, [v])[0], rho).values
        b = extract_patch(moved, frames_at_vertices(moved, [v])[0], rho).values
        best = min(np.abs(np.roll(b, s, axis=2) - a).max() for s in range(64))
        assert best < 1e-4 * rho


def _patch(values, order=(0, 1)):
    return GeodesicPatch(np.asarray(values, dtype=float), np.zeros(3), 1.0, channel_order=order)


def test_sign_variants():
    rng = np.random.default_rng(0)
    sample = PairSample(_patch(rng.normal(size=(2, 64, 64))), _patch(rng.normal(size=(2, 64, 64))), CORRESPONDING,
                        shape_ids=(0, 1), particle_ids=(3, 3))
    out = sign_variants(sample)
    assert len(out) == 4
    assert len({s.orders for s in out}) == 4
    twice = {s.orders: s for v in out for s in sign_variants(v)}
    assert len(twice) == 4
    for s in out:
        ref = twice[s.orders]
        assert np.array_equal(ref.patch_a.values, s.patch_a.values)
        assert s.label == sample.label and s.shape_ids == sample.shape_ids
    sym = np.ones((2, 64, 64))
    same = sign_variants(PairSample(_patch(sym), _patch(sym), NONCORRESPONDING))
    assert all(np.array_equal(s.patch_a.values, sym) and np.array_equal(s.patch_b.values, sym) for s in same)


def test_pair_counts(small_ensemble):
    model = small_ensemble.positions[:2, :10]
    rho = 1.0
    ds = build_pair_dataset(model, small_ensemble.meshes[:2], rho_max=rho, seed=0)
    assert len(ds) == 80
    base = ds.labels[::4]
    assert (base == CORRESPONDING).sum() == 10 and (base == NONCORRESPONDING).sum() == 10
    ds.check()
    for s in ds.samples():
        s.check()


def test_pair_dataset_deterministic(small_ensemble):
    kw = dict(rho_max=1.5, seed=5, positives_per_particle=2)
    a = build_pair_dataset(small_ensemble.positions[:, :20], small_ensemble.meshes, **kw)
    b = build_pair_dataset(small_ensemble.positions[:, :20], small_ensemble.meshes, **kw)
    for field in ("store", "index", "order", "labels", "shape_ids", "particle_ids"):
        assert np.array_equal(getattr(a, field), getattr(b, field))


def test_min_separation_excluding_all_negatives(small_ensemble):
    with pytest.raises(DatasetError, match="excludes every negative"):
        build_pair_dataset(small_ensemble.positions[:, :5], small_ensemble.meshes, rho_max=1.0, min_separation=1e6)


def test_negatives_respect_separation(small_ensemble):
    ds = build_pair_dataset(small_ensemble.positions[:, :40], small_ensemble.meshes, rho_max=2.0, seed=1)
    neg = ds.labels == NONCORRESPONDING
    sa, pa, pb = ds.shape_ids[neg, 0], ds.particle_ids[neg, 0], ds.particle_ids[neg, 1]
    pos = small_ensemble.positions
    d = np.linalg.norm(pos[sa, pa] - pos[sa, pb], axis=1)
    assert d.min() > 4.0


def test_mean_and_centering(tmp_path, small_ensemble):
    ds = build_pair_dataset(small_ensemble.positions[:, :15], small_ensemble.meshes, rho_max=2.0, seed=3)
    mean = dataset_mean(ds)
    brute = np.concatenate([ds.patches(np.arange(len(ds)), 0, False), ds.patches(np.arange(len(ds)), 1, False)]).mean(0)
    np.testing.assert_allclose(mean, brute, atol=1e-12)
    centered = center_dataset(ds, mean)
    assert np.abs(dataset_mean(centered)).max() < 1e-12
    rows = np.arange(len(ds))
    assert np.abs(np.concatenate([centered.patches(rows, 0), centered.patches(rows, 1)]).mean(0)).max() < 1e-12
    # inference path with a persisted mean reproduces training centering bit-exactly
    np.save(tmp_path / "mean.npy", mean)
    back = np.load(tmp_path / "mean.npy")
    mesh = small_ensemble.meshes[ds.shape_ids[0, 0]]
    f = frames_at_points(mesh, small_ensemble.positions[ds.shape_ids[0, 0], [ds.particle_ids[0, 0]]])
    raw, _ = extract_patches(mesh, f, 2.0)
    assert np.array_equal(center_patches(raw, back)[0], centered.patches([0], 0)[0])


def test_constant_dataset_mean():
    store = np.full((1, 2, 64, 64), 0.25, dtype=np.float32)
    from corrforge.patchex import PairDataset
    ds = PairDataset(store, np.zeros((4, 2), dtype=int), np.zeros((4, 2), dtype=np.uint8), np.ones(4, np.uint8),
                     np.zeros(4, np.uint8), np.zeros((4, 2), int), np.zeros((4, 2), int))
    mean = dataset_mean(ds)
    assert np.array_equal(mean, np.full((2, 64, 64), 0.25))
    assert np.abs(center_dataset(ds, mean).patches(np.arange(4), 0)).max() == 0
    empty = ds.subset(np.array([], dtype=int))
    with pytest.raises(DatasetError):
        dataset_mean(empty)


def test_save_load_roundtrip(tmp_path, small_ensemble):
    ds = build_pair_dataset(small_ensemble.positions[:, :8], small_ensemble.meshes, rho_max=2.0, seed=2)
    save_dataset(ds, tmp_path / "pairs.bin")
    raw = np.fromfile(tmp_path / "pairs.bin", dtype="<u4", count=4)
    assert raw.tolist() == [len(ds), 2, 64, 64]
    assert (tmp_path / "pairs.bin").stat().st_size == 16 + len(ds) * (2 + 16 + 2 * 4 * 8192)
    back = load_dataset(tmp_path / "pairs.bin")
    rows = np.arange(len(ds))
    for side in (0, 1):
        assert np.array_equal(back.patches(rows, side), ds.patches(rows, side))
    assert np.array_equal(back.labels, ds.labels) and np.array_equal(back.particle_ids, ds.particle_ids)
    assert len(back.store) <= len(ds.store)


def test_positive_pairs_closer_than_negatives():
    e = generate_ensemble(EnsembleSpec("bean1bump", count=6, seed=4))
    ds = ground_truth_pairs(e, 150, seed=0)
    rows = np.arange(0, len(ds), 4)
    d = np.sqrt(((ds.patches(rows, 0) - ds.patches(rows, 1)) ** 2).mean(axis=(1, 2, 3)))
    lab = ds.labels[rows]
    assert d[lab == CORRESPONDING].mean() < d[lab == NONCORRESPONDING].mean()
    ds.check()
