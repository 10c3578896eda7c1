import hashlib

import numpy as np
import pytest

from corrforge import synthgen
from corrforge.geomcore import TriangleMesh, mesh_to_sdf
from corrforge.patchex import CORRESPONDING, build_pair_dataset
from corrforge.synthgen import (
    FAMILIES,
    EnsembleSpec,
    SynthError,
    _bump_curve,
    _bean_map,
    deform,
    generate_ensemble,
    ground_truth_pairs,
    read_ground_truth,
    self_intersects,
    template_mesh,
    write_ensemble,
)


@pytest.fixture(scope="module")
def bean30():
    return generate_ensemble(EnsembleSpec("bean1bump", count=30, seed=3))


def test_bean1bump_thirty_shapes(bean30):
    assert len(bean30.meshes) == 30
    t0 = bean30.meshes[0].triangles
    assert all(np.array_equal(m.triangles, t0) and m.n_vertices == 2562 for m in bean30.meshes)
    positions = np.array([p["bump_position"] for p in bean30.params])
    assert positions.std() > 0.2
    # the bump peak follows the prescribed curve
    base = template_mesh("bean1bump")
    for mesh, p in zip(bean30.meshes[:5], bean30.params[:5]):
        h = np.linalg.norm(mesh.vertices - base.vertices, axis=1)
        peak = base.vertices[np.argmax(h)]
        center = _bean_map(_bump_curve(p["bump_position"]))[0]
        assert np.linalg.norm(peak - center) < 2 * base.max_edge_length


def test_displacement_is_along_template_normals(bean30):
    base = template_mesh("bean1bump")
    d = bean30.meshes[4].vertices - base.vertices
    tangential = d - np.einsum("ij,ij->i", d, base.vertex_normals)[:, None] * base.vertex_normals
    assert np.abs(tangential).max() < 1e-12


def test_zero_amplitude_is_template():
    for fam, key in (("bean1bump", "bump_amplitude"), ("ellipsoid_bump", "bump_amplitude"),
                     ("bean_multibump", "ridge_amplitude")):
        e = generate_ensemble(EnsembleSpec(fam, count=3, seed=0, ranges={key: (0.0, 0.0)}))
        base = template_mesh(fam)
        for m in e.meshes:
            np.testing.assert_array_equal(m.vertices, base.vertices)


def test_multibump_ridges_translate_together():
    e = generate_ensemble(EnsembleSpec("bean_multibump", count=23, seed=1))
    assert len(e.meshes) == 23
    base = template_mesh("bean_multibump")
    width = 1.5 * base.mean_edge_length
    gap = 2.5 * width
    # ridges ride on fixed template vertices
    assert (e.regions == e.regions[0]).all()
    ridge = e.regions[0]
    x_t = base.vertices[:, 0]
    for mesh, p in zip(e.meshes[:6], e.params[:6]):
        shift = synthgen.RIDGE_TRAVEL * (p["ridge_offset"] - 0.5)
        np.testing.assert_allclose(mesh.vertices[ridge, 0] - x_t[ridge], shift, atol=0.35)
        # four separate crests: along the top centre line the crests stand above the valleys between them
        top = (np.abs(base.vertices[:, 1]) < 2.0) & (base.vertices[:, 2] > 0)
        crest = [top & (np.abs(x_t - (synthgen.RIDGE_X0 + j * gap)) < 0.25 * gap) for j in range(4)]
        valley = [top & (np.abs(x_t - (synthgen.RIDGE_X0 + (j + 0.5) * gap)) < 0.2 * gap) for j in range(3)]
        slid = TriangleMesh.from_arrays(_bean_map(synthgen._slide(synthgen.icosphere(4).vertices, shift)), base.triangles)
        lift = np.einsum("ij,ij->i", mesh.vertices - slid.vertices, slid.vertex_normals)
        assert min(lift[c].mean() for c in crest[1:3]) > max(lift[v].mean() for v in valley)
    # the slide eases out towards the tips
    tips = np.abs(x_t) > 19.5
    for mesh in e.meshes[:6]:
        assert np.abs(mesh.vertices[tips] - base.vertices[tips]).max() < 0.1


@pytest.mark.parametrize("family", FAMILIES)
def test_generated_meshes_are_watertight(family):
    e = generate_ensemble(EnsembleSpec(family, count=2, seed=5))
    for m in e.meshes:
        assert m.boundary_edge_count == 0
        grid = mesh_to_sdf(m, 2.0, padding=2)
        assert grid.values.min() < 0 < grid.values.max()
        assert not self_intersects(m)


def test_self_intersection_detected():
    mesh, _ = deform("ellipsoid_bump", {"bump_position": 0.5, "bump_amplitude": -40.0, "axis_x": 20.0}, 642)
    assert self_intersects(mesh)
    assert not self_intersects(template_mesh("ellipsoid", 642))


def test_spec_validation_lists_every_problem():
    errs = EnsembleSpec("blob", count=1, resolution=100).validate()
    assert len(errs) == 3
    with pytest.raises(SynthError):
        generate_ensemble(EnsembleSpec("bean1bump", count=2, ranges={"bump_position": (0.5, 2.0)}))


def test_obj_output_is_byte_deterministic(tmp_path):
    spec = EnsembleSpec("ellipsoid_bump", count=2, resolution=642, seed=9)
    digests = []
    for run in ("a", "b"):
        paths = write_ensemble(generate_ensemble(spec), tmp_path / run)
        digests.append([hashlib.sha256(p.read_bytes()).hexdigest() for p in paths])
    assert digests[0] == digests[1]
    table = read_ground_truth(tmp_path / "a" / "ground_truth.csv")
    assert sorted(table) == [0, 1]
    np.testing.assert_array_equal(table[1], np.arange(642))


def test_ground_truth_pairs_zero_amplitude_positive_discrepancy():
    e = generate_ensemble(EnsembleSpec("bean1bump", count=3, resolution=642, seed=2,
                                       ranges={"bump_amplitude": (0.0, 0.0)}))
    ds = ground_truth_pairs(e, 12, seed=4)
    pos = ds.labels == CORRESPONDING
    a, b = ds.store[ds.index[pos, 0]], ds.store[ds.index[pos, 1]]
    assert np.abs(a - b).max() == 0


def test_ground_truth_pairs_deterministic_and_match_builder():
    e = generate_ensemble(EnsembleSpec("bean1bump", count=3, resolution=642, seed=2))
    a = ground_truth_pairs(e, 10, seed=7)
    b = ground_truth_pairs(e, 10, seed=7)
    assert np.array_equal(a.labels, b.labels) and np.array_equal(a.store, b.store)
    assert np.array_equal(a.particle_ids, b.particle_ids)
    # the same table fed straight to the builder yields the same labels
    pick_seed, pair_seed = np.random.SeedSequence(7).generate_state(2)
    particles = np.sort(np.random.default_rng(pick_seed).choice(642, 10, replace=False))
    from corrforge.geomcore import max_shape_diameter
    direct = build_pair_dataset(e.positions, e.meshes, rho_max=0.05 * max_shape_diameter(e.meshes),
                                particles=particles, seed=int(pair_seed))
    assert np.array_equal(direct.labels, a.labels)
    assert np.array_equal(direct.particle_ids, a.particle_ids)
    assert np.array_equal(direct.shape_ids, a.shape_ids)
