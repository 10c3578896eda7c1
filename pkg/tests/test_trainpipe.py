import csv
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from corrforge import trainpipe
from corrforge.neuralcore import INFER
from corrforge.patchex import CORRESPONDING, NONCORRESPONDING, sample_vertex_patches
from corrforge.synthgen import EnsembleSpec, generate_ensemble, ground_truth_pairs, icosphere
from corrforge.trainpipe import (
    FeatureField,
    RocCurve,
    TrainConfig,
    TrainError,
    adapt_domain,
    auc_midrank,
    compute_feature_field,
    evaluate_roc,
    load_feature_field,
    roc_curve,
    save_feature_field,
    split_groups,
    train_siamese,
    write_report,
)

TINY = {"name": "trunk", "input": [2, 64, 64], "init": "normal", "std": 0.05, "layers": [
    {"kind": "conv", "out": 4, "k": 5, "input_grad": False}, {"kind": "avgpool"}, {"kind": "avgpool"},
    {"kind": "avgpool"}, {"kind": "batchnorm"}, {"kind": "softplus"}, {"kind": "flatten"},
    {"kind": "dense", "out": 16}, {"kind": "softplus"}, {"kind": "dense", "out": 4}]}


@pytest.fixture(scope="module")
def ensemble():
    return generate_ensemble(EnsembleSpec("bean1bump", count=4, resolution=642, seed=3))


@pytest.fixture(scope="module")
def dataset(ensemble):
    return ground_truth_pairs(ensemble, 40, seed=1)


@pytest.fixture(scope="module")
def trained(dataset):
    return train_siamese(dataset, TINY, TrainConfig(max_epochs=3, batch_pairs=16), seed=5)


def brute_auc(scores, labels):
    pos = scores[labels == CORRESPONDING]
    neg = scores[labels == NONCORRESPONDING]
    wins = (pos[:, None] > neg[None]).sum() + 0.5 * (pos[:, None] == neg[None]).sum()
    return wins / (len(pos) * len(neg))


def test_auc_examples():
    assert auc_midrank([3, 2, 1, 0], [1, 1, 0, 0]) == 1.0
    assert auc_midrank([0, 1, 2, 3], [1, 1, 0, 0]) == 0.0
    assert auc_midrank([1, 1, 1, 1], [1, 0, 1, 0]) == 0.5
    assert roc_curve([1, 1, 1, 1], [1, 0, 1, 0]).auc == 0.5


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 6), st.booleans()), min_size=2, max_size=40))
def test_auc_matches_pairwise_count(items):
    scores = np.array([float(s) for s, _ in items])
    labels = np.array([CORRESPONDING if p else NONCORRESPONDING for _, p in items])
    if len(set(labels.tolist())) < 2:
        with pytest.raises(TrainError):
            roc_curve(scores, labels)
        return
    expect = brute_auc(scores, labels)
    assert auc_midrank(scores, labels) == pytest.approx(expect, abs=1e-12)
    curve = roc_curve(scores, labels)
    assert curve.auc == pytest.approx(expect, abs=1e-12)
    assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)
    assert curve.fpr[-1] == 1.0 and curve.tpr[-1] == 1.0


def test_tpr_at_fpr_reads_best_point_below_limit():
    curve = RocCurve(0.0, np.array([0.0, 0.04, 0.15, 1.0]), np.array([0.0, 0.5, 0.8, 1.0]), np.zeros(4))
    assert curve.tpr_at() == {0.05: 0.5, 0.1: 0.5, 0.2: 0.8, 0.3: 0.8}


def test_config_validation_lists_every_problem():
    errors = TrainConfig(n_features=0, learning_rate=0, momentum=1.0, patience=0, split=(0.5, 0.5)).validate()
    assert len(errors) == 5
    assert TrainConfig().validate() == []


def test_split_keeps_sign_variants_together(dataset):
    tr, va, te = split_groups(dataset, (0.8, 0.1, 0.1), seed=0)
    assert len(np.intersect1d(tr, va)) == len(np.intersect1d(tr, te)) == len(np.intersect1d(va, te)) == 0
    assert len(tr) + len(va) + len(te) == len(dataset)
    g = [set(dataset.group[r].tolist()) for r in (tr, va, te)]
    assert not (g[0] & g[1]) and not (g[0] & g[2]) and not (g[1] & g[2])
    n_groups = len(np.unique(dataset.group))
    assert len(g[0]) == round(0.8 * n_groups)


def test_training_is_deterministic_and_reports(trained, dataset):
    again = train_siamese(dataset, TINY, TrainConfig(max_epochs=3, batch_pairs=16), seed=5)
    for (_, a), (_, b) in zip(trained.trunk.named_params(), again.trunk.named_params()):
        assert np.array_equal(a, b)
    rep = trained.report
    assert [r["epoch"] for r in rep.epochs] == [1, 2, 3]
    assert 1 <= rep.best_epoch <= 3
    assert rep.best_epoch == 1 + int(np.argmin([r["val_loss"] for r in rep.epochs]))
    assert set(rep.auc) == {"train", "val", "test"}
    assert all(0 <= v <= 1 for v in rep.auc.values())
    assert set(rep.tpr_at_fpr) == {0.05, 0.1, 0.2, 0.3}
    assert trained.mean_patch.shape == (2, 64, 64)


def test_early_stopping(dataset):
    res = train_siamese(dataset, TINY, TrainConfig(max_epochs=30, patience=1, batch_pairs=16),
                        seed=2)
    assert res.report.stopped_early
    assert len(res.report.epochs) < 30
    assert len(res.report.epochs) == res.report.best_epoch + 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(dataset):
    with pytest.raises(TrainError, match="diverged at epoch"):
        train_siamese(dataset, TINY, TrainConfig(max_epochs=5, learning_rate=1e200, batch_pairs=16), seed=0)


def test_single_class_dataset_rejected(dataset):
    only_pos = dataset.subset(np.nonzero(dataset.labels == CORRESPONDING)[0])
    with pytest.raises(TrainError, match="both"):
        train_siamese(only_pos, TINY, TrainConfig(max_epochs=1))


def test_report_files(tmp_path, trained):
    write_report(trained.report, tmp_path, "train")
    with open(tmp_path / "train_epochs.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "auc"]
    assert len(rows) == 4
    summary = json.loads((tmp_path / "train_summary.json").read_text())
    assert summary["best_epoch"] == trained.report.best_epoch
    assert summary["epochs_run"] == 3


def test_adaptation(ensemble, dataset, trained):
    target = generate_ensemble(EnsembleSpec("flange", count=2, resolution=642, seed=4))
    tp, sid, vid = sample_vertex_patches(target.meshes, 30, dataset.rho_max, seed=0)
    cfg = TrainConfig(batch_pairs=16, adapt_epochs=2)
    res = adapt_domain(trained.trunk, trained.mean_patch, dataset, tp, 0.01, cfg, seed=1)
    rep = res.report
    assert res.head is not None
    assert 0 <= rep.domain_accuracy <= 1
    assert rep.pre_adaptation_auc == pytest.approx(
        evaluate_roc(trained.trunk, trainpipe.center_dataset(dataset, trained.mean_patch),
                     split_groups(dataset, cfg.split, int(np.random.SeedSequence(1).generate_state(4)[1]))[2]).auc)
    assert {"domain_loss", "domain_accuracy"} <= set(rep.epochs[0])
    # adaptation moves the trunk weights
    assert not all(np.array_equal(a, b) for (_, a), (_, b) in zip(trained.trunk.named_params(), res.trunk.named_params()))
    with pytest.raises(TrainError):
        adapt_domain(trained.trunk, trained.mean_patch, dataset, tp, -1.0, cfg)


def test_feature_field_and_roundtrip(tmp_path, trained):
    mesh = icosphere(2, radius=10.0)
    ff = compute_feature_field(trained.trunk, trained.mean_patch, mesh, 2.0, "sphere")
    assert ff.values.shape == (mesh.n_vertices, 4)
    assert len(ff.flagged) == 0
    save_feature_field(ff, tmp_path / "sphere.f32")
    assert (tmp_path / "sphere.f32").stat().st_size == 4 * mesh.n_vertices * 4
    back = load_feature_field(tmp_path / "sphere.f32")
    assert back.mesh_id == "sphere"
    assert np.array_equal(back.values, ff.values.astype(np.float32).astype(np.float64))


def test_feature_field_matches_direct_embedding(trained):
    mesh = icosphere(1, radius=10.0)
    ff = compute_feature_field(trained.trunk, trained.mean_patch, mesh, 2.0)
    frame = trainpipe.vertex_frame(mesh, 7)
    vals, _ = trainpipe.extract_patches(mesh, [frame], 2.0)
    direct = trained.trunk.forward(vals.astype(np.float64) - trained.mean_patch, INFER)[0]
    assert np.allclose(ff.values[7], direct, atol=1e-10)


def test_feature_field_falls_back_to_nearest(monkeypatch, trained):
    mesh = icosphere(1, radius=10.0)
    real = trainpipe.vertex_frame

    def flaky(m, v):
        if v == 3:
            raise trainpipe.FrameError("degenerate")
        return real(m, v)

    monkeypatch.setattr(trainpipe, "vertex_frame", flaky)
    ff = compute_feature_field(trained.trunk, trained.mean_patch, mesh, 2.0)
    assert ff.flagged.tolist() == [3]
    others = np.delete(np.arange(mesh.n_vertices), 3)
    nearest = others[np.argmin(np.linalg.norm(mesh.vertices[others] - mesh.vertices[3], axis=1))]
    assert np.array_equal(ff.values[3], ff.values[nearest])


def test_feature_field_rejects_bad_sidecar(tmp_path):
    ff = FeatureField("x", np.ones((3, 2)))
    save_feature_field(ff, tmp_path / "x.f32")
    side = json.loads((tmp_path / "x.json").read_text())
    side["n_vertices"] = 4
    (tmp_path / "x.json").write_text(json.dumps(side))
    with pytest.raises(TrainError):
        load_feature_field(tmp_path / "x.f32")


def test_linear_separation():
    rng = np.random.default_rng(0)
    y = rng.random(400) < 0.2
    x = rng.normal(size=(400, 3))
    x[:, 1] += 4.0 * y
    assert trainpipe.linear_separation(x[:300], y[:300], x[300:], y[300:]) > 0.95
    noise = rng.normal(size=(400, 3))
    assert 0.3 < trainpipe.linear_separation(noise[:300], y[:300], noise[300:], y[300:]) < 0.7
    with pytest.raises(TrainError):
        trainpipe.linear_separation(x, np.zeros(400), x, y)
