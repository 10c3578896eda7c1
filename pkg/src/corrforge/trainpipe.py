"""Siamese training, domain-adversarial adaptation, ROC evaluation and feature fields."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .geomcore import FrameError, TriangleMesh, vertex_frame
from .neuralcore import (
    INFER,
    SGD,
    Sequential,
    bce_loss,
    contrastive_batch,
    adversarial_step,
    domain_head_arch,
    init_params,
    siamese_arch,
    siamese_step,
)
from .patchex import (
    CORRESPONDING,
    NONCORRESPONDING,
    PairDataset,
    center_dataset,
    center_patches,
    dataset_mean,
    extract_patches,
)

FPR_GRID = (0.05, 0.1, 0.2, 0.3)


class TrainError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    n_features: int = 10
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_pairs: int = 32
    max_epochs: int = 200
    patience: int = 10
    margin: float = 1.0
    split: tuple = (0.8, 0.1, 0.1)
    # adaptation only
    head_learning_rate: float = 0.01
    adapt_epochs: int = 10

    def validate(self) -> list[str]:
        errors = []
        if self.n_features < 1:
            errors.append("n_features must be >= 1")
        for name in ("learning_rate", "head_learning_rate", "margin"):
            if not getattr(self, name) > 0:
                errors.append(f"{name} must be > 0")
        if not 0 <= self.momentum < 1:
            errors.append("momentum must be in [0, 1)")
        for name in ("batch_pairs", "max_epochs", "adapt_epochs"):
            if getattr(self, name) < 1:
                errors.append(f"{name} must be >= 1")
        if self.patience < 1:
            errors.append("patience must be >= 1")
        if len(self.split) != 3 or min(self.split) <= 0 or abs(sum(self.split) - 1) > 1e-9:
            errors.append("split must be three positive fractions summing to 1")
        return errors


@dataclass
class TrainReport:
    epochs: list[dict] = field(default_factory=list)
    auc: dict = field(default_factory=dict)  # split -> AUC
    tpr_at_fpr: dict = field(default_factory=dict)  # on the test split
    best_epoch: int = 0
    stopped_early: bool = False
    domain_accuracy: float | None = None
    pre_adaptation_auc: float | None = None

    def check(self) -> None:
        for k, v in self.auc.items():
            if not 0.0 <= v <= 1.0:
                raise TrainError(f"AUC {k}={v} outside [0, 1]")


@dataclass
class TrainResult:
    trunk: Sequential
    mean_patch: np.ndarray
    report: TrainReport
    head: Sequential | None = None


# ---------------------------------------------------------------- ROC

@dataclass
class RocCurve:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def tpr_at(self, fpr_grid=FPR_GRID) -> dict:
        """Best TPR reachable without exceeding each false-positive rate."""
        return {float(f): float(self.tpr[self.fpr <= f + 1e-12].max()) for f in fpr_grid}


def auc_midrank(scores, labels) -> float:
    """Mann-Whitney AUC with ties counted as one half."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == CORRESPONDING
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise TrainError("ROC needs both corresponding and non-corresponding pairs")
    r = rankdata(scores)
    return float((r[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def roc_curve(scores, labels) -> RocCurve:
    """ROC over every distinct score threshold; AUC by the trapezoidal rule (ties land on one diagonal step)."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(labels) == CORRESPONDING
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise TrainError("ROC needs both corresponding and non-corresponding pairs")
    order = np.argsort(-scores, kind="stable")
    s, p = scores[order], pos[order]
    last = np.r_[np.nonzero(np.diff(s))[0], len(s) - 1]  # end of each tie block
    tp = np.cumsum(p)[last]
    fp = np.cumsum(~p)[last]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))
    return RocCurve(auc, fpr, tpr, np.r_[np.inf, s[last]])


def pair_distances(trunk: Sequential, dataset: PairDataset, rows=None, batch: int = 256) -> np.ndarray:
    """Feature distances of samples ``rows``; each distinct (patch, channel order) is embedded once."""
    rows = np.arange(len(dataset)) if rows is None else np.asarray(rows)
    if len(rows) == 0:
        return np.zeros(0)
    keys = dataset.index[rows] * 2 + dataset.order[rows]
    uniq, inv = np.unique(keys.ravel(), return_inverse=True)
    idx, code = uniq // 2, uniq % 2
    feats = np.empty((len(uniq), _n_features(trunk)))
    for s in range(0, len(uniq), batch):
        x = dataset.store[idx[s:s + batch]].copy()
        sw = code[s:s + batch] == 1
        x[sw] = x[sw, ::-1]
        x = x.astype(np.float64)
        if dataset.mean is not None:
            x -= dataset.mean
        feats[s:s + batch] = trunk.forward(x, INFER)
    f = feats[inv.reshape(-1, 2)]
    return np.linalg.norm(f[:, 0] - f[:, 1], axis=1)


def evaluate_roc(trunk: Sequential, dataset: PairDataset, rows=None) -> RocCurve:
    """ROC of score = -feature distance against the correspondence labels."""
    rows = np.arange(len(dataset)) if rows is None else np.asarray(rows)
    d = pair_distances(trunk, dataset, rows)
    return roc_curve(-d, dataset.labels[rows])


def _n_features(net: Sequential) -> int:
    return int(net.layers[-1].params["bias"].size)


# ---------------------------------------------------------------- training

def split_groups(dataset: PairDataset, fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Train/validation/test sample rows; the sign variants of one pair stay together."""
    groups = np.unique(dataset.group)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(groups)
    n_tr = int(round(fractions[0] * len(perm)))
    n_va = int(round(fractions[1] * len(perm)))
    parts = perm[:n_tr], perm[n_tr:n_tr + n_va], perm[n_tr + n_va:]
    return tuple(np.nonzero(np.isin(dataset.group, p))[0] for p in parts)


def _check_classes(dataset: PairDataset, rows, what: str) -> None:
    lab = dataset.labels[rows]
    if not ((lab == CORRESPONDING).any() and (lab == NONCORRESPONDING).any()):
        raise TrainError(f"{what} split needs both corresponding and non-corresponding pairs")


def _val_loss(trunk, dataset, rows, margin) -> float:
    d = pair_distances(trunk, dataset, rows)
    lab = dataset.labels[rows]
    hinge = np.maximum(0.0, margin - d)
    return float(np.mean(np.where(lab == CORRESPONDING, 0.5 * d * d, 0.5 * hinge * hinge)))


def train_siamese(dataset: PairDataset, arch: dict | None = None, config: TrainConfig | None = None,
                  seed: int = 0, *, log=None) -> TrainResult:
    """Minibatch SGD on the contrastive loss with early stopping on validation loss.

    The dataset is centered with its stored mean, or with the mean of the
    training split when none is stored. The returned trunk holds the weights
    of the best validation epoch.
    """
    config = config or TrainConfig()
    errors = config.validate()
    if errors:
        raise TrainError("; ".join(errors))
    if len(dataset) == 0:
        raise TrainError("empty dataset")
    _check_classes(dataset, np.arange(len(dataset)), "full")
    arch = arch or siamese_arch(config.n_features)
    init_seed, split_seed, order_seed = np.random.SeedSequence(seed).generate_state(3)
    train, val, test = split_groups(dataset, config.split, int(split_seed))
    for rows, what in ((train, "training"), (val, "validation"), (test, "test")):
        _check_classes(dataset, rows, what)
    if dataset.mean is None:
        dataset = center_dataset(dataset, dataset_mean(dataset.subset(train)))

    trunk = init_params(arch, int(init_seed))
    opt = SGD(config.learning_rate, config.momentum)
    rng = np.random.default_rng(order_seed)
    report = TrainReport()
    best = (math.inf, trunk.copy(), 0)
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        perm = rng.permutation(train)
        losses = []
        for s in range(0, len(perm), config.batch_pairs):
            rows = np.sort(perm[s:s + config.batch_pairs])
            if len(rows) < 2:
                continue
            loss, _ = siamese_step(trunk, dataset.patches(rows, 0), dataset.patches(rows, 1),
                                   dataset.labels[rows], config.margin)
            if not np.isfinite(loss):
                raise TrainError(f"training diverged at epoch {epoch}: loss is {loss}")
            opt.step(trunk)
            losses.append(loss)
        val_loss = _val_loss(trunk, dataset, val, config.margin)
        if not np.isfinite(val_loss):
            raise TrainError(f"training diverged at epoch {epoch}: validation loss is {val_loss}")
        val_auc = evaluate_roc(trunk, dataset, val).auc
        row = {"epoch": epoch, "train_loss": float(np.mean(losses)), "val_loss": val_loss, "auc": val_auc}
        report.epochs.append(row)
        if log:
            log(row)
        if val_loss < best[0]:
            best, stale = (val_loss, trunk.copy(), epoch), 0
        else:
            stale += 1
            if stale >= config.patience:
                report.stopped_early = True
                break
    trunk, report.best_epoch = best[1], best[2]
    for name, rows in (("train", train), ("val", val), ("test", test)):
        report.auc[name] = evaluate_roc(trunk, dataset, rows).auc
    report.tpr_at_fpr = evaluate_roc(trunk, dataset, test).tpr_at()
    report.check()
    return TrainResult(trunk, dataset.mean, report)


def adapt_domain(pretrained: Sequential, mean_patch, source: PairDataset, target_patches, lam: float = 0.01,
                 config: TrainConfig | None = None, seed: int = 0, *, log=None) -> TrainResult:
    """Domain-adversarial refinement of a trained trunk.

    Each step mixes ``batch_pairs`` source pairs (contrastive loss plus domain
    label 0) with as many target patches as source patches (domain label 1).
    The head sits behind a reversal layer, so the trunk descends the
    contrastive loss while ascending the head's loss scaled by ``lam``.
    Source pairs and target patches are split 80/10/10 and 90/10; the
    report's AUCs and domain accuracy use the held-out parts.
    """
    config = config or TrainConfig()
    errors = config.validate()
    if lam < 0:
        errors.append(f"lambda must be >= 0, got {lam}")
    target_patches = np.asarray(target_patches)
    if len(target_patches) < 2:
        errors.append("adaptation needs at least two target patches")
    if errors:
        raise TrainError("; ".join(errors))
    mean_patch = np.asarray(mean_patch, dtype=np.float64)
    source = center_dataset(source, mean_patch)
    head_seed, split_seed, order_seed, tgt_seed = np.random.SeedSequence(seed).generate_state(4)
    train, val, test = split_groups(source, config.split, int(split_seed))
    _check_classes(source, test, "source test")
    rng = np.random.default_rng(order_seed)
    tperm = np.random.default_rng(tgt_seed).permutation(len(target_patches))
    n_hold = max(1, len(tperm) // 10)
    t_hold, t_train = tperm[:n_hold], tperm[n_hold:]

    trunk = pretrained.copy()
    head = init_params(domain_head_arch(_n_features(trunk), lam=lam), int(head_seed))
    report = TrainReport(pre_adaptation_auc=evaluate_roc(trunk, source, test).auc)
    opt_t = SGD(config.learning_rate, config.momentum)
    opt_h = SGD(config.head_learning_rate, config.momentum)
    for epoch in range(1, config.adapt_epochs + 1):
        perm = rng.permutation(train)
        s_losses, d_losses, accs = [], [], []
        for s in range(0, len(perm), config.batch_pairs):
            rows = np.sort(perm[s:s + config.batch_pairs])
            if len(rows) < 2:
                continue
            pick = t_train[rng.integers(len(t_train), size=2 * len(rows))]
            xt = target_patches[pick].copy()
            flip = rng.random(len(pick)) < 0.5  # channel order is arbitrary for unlabeled patches
            xt[flip] = xt[flip, ::-1]
            s_loss, d_loss, acc = adversarial_step(trunk, head, source.patches(rows, 0), source.patches(rows, 1),
                                                   source.labels[rows], center_patches(xt, mean_patch),
                                                   margin=config.margin)
            if not (np.isfinite(s_loss) and np.isfinite(d_loss)):
                raise TrainError(f"adaptation diverged at epoch {epoch}")
            opt_t.step(trunk)
            opt_h.step(head)
            s_losses.append(s_loss)
            d_losses.append(d_loss)
            accs.append(acc)
        row = {"epoch": epoch, "train_loss": float(np.mean(s_losses)),
               "val_loss": _val_loss(trunk, source, val, config.margin),
               "auc": evaluate_roc(trunk, source, val).auc,
               "domain_loss": float(np.mean(d_losses)),
               "domain_accuracy": domain_accuracy(trunk, head, source, test, target_patches[t_hold], mean_patch)}
        report.epochs.append(row)
        if log:
            log(row)
    report.best_epoch = config.adapt_epochs
    for name, rows in (("train", train), ("val", val), ("test", test)):
        report.auc[name] = evaluate_roc(trunk, source, rows).auc
    report.tpr_at_fpr = evaluate_roc(trunk, source, test).tpr_at()
    report.domain_accuracy = domain_accuracy(trunk, head, source, test, target_patches[t_hold], mean_patch)
    report.check()
    return TrainResult(trunk, mean_patch, report, head)


def domain_accuracy(trunk: Sequential, head: Sequential, source: PairDataset, rows, target_raw, mean_patch) -> float:
    """Balanced held-out accuracy of the domain head (source patches vs target patches)."""
    src = np.unique(source.index[rows].ravel())
    n = min(len(src), len(target_raw))
    xs = source.store[src[:n]].astype(np.float64) - mean_patch
    xt = center_patches(target_raw[:n], mean_patch)
    zs = head.forward(trunk.forward(xs, INFER), INFER)[:, 0]
    zt = head.forward(trunk.forward(xt, INFER), INFER)[:, 0]
    return float((np.sum(zs <= 0) + np.sum(zt > 0)) / (2 * n))


def domain_loss(trunk: Sequential, head: Sequential, x_source, x_target) -> float:
    zs = head.forward(trunk.forward(x_source, INFER), INFER)[:, 0]
    zt = head.forward(trunk.forward(x_target, INFER), INFER)[:, 0]
    loss, _ = bce_loss(np.r_[zs, zt], np.r_[np.zeros(len(zs)), np.ones(len(zt))])
    return float(loss.mean())


def linear_separation(train_x, train_y, test_x, test_y, l2: float = 1e-3) -> float:
    """Balanced held-out accuracy of a class-weighted logistic-regression probe on frozen features.

    Features are standardized with the training statistics; labels are 0/1.
    """
    train_x, test_x = np.asarray(train_x, dtype=np.float64), np.asarray(test_x, dtype=np.float64)
    train_y, test_y = np.asarray(train_y).astype(bool), np.asarray(test_y).astype(bool)
    for y, what in ((train_y, "training"), (test_y, "test")):
        if y.all() or not y.any():
            raise TrainError(f"the {what} labels need both classes")
    mu, sd = train_x.mean(axis=0), train_x.std(axis=0)
    sd[sd < 1e-12] = 1.0
    a = np.c_[(train_x - mu) / sd, np.ones(len(train_x))]
    w = np.where(train_y, 0.5 / train_y.mean(), 0.5 / (1 - train_y.mean())) / len(train_y)
    t = train_y.astype(np.float64)

    def loss(beta):
        z = a @ beta
        p = 0.5 * (1 + np.tanh(0.5 * z))
        nll = np.sum(w * (np.logaddexp(0, z) - t * z))
        return nll + 0.5 * l2 * beta[:-1] @ beta[:-1], a.T @ (w * (p - t)) + l2 * np.r_[beta[:-1], 0.0]

    beta = minimize(loss, np.zeros(a.shape[1]), jac=True, method="L-BFGS-B").x
    pred = np.c_[(test_x - mu) / sd, np.ones(len(test_x))] @ beta > 0
    return float(0.5 * (np.mean(pred[test_y]) + np.mean(~pred[~test_y])))


# ---------------------------------------------------------------- feature fields

@dataclass
class FeatureField:
    mesh_id: str
    values: np.ndarray  # (V, L)
    flagged: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))  # vertices with copied features

    @property
    def n_features(self) -> int:
        return int(self.values.shape[1])

    def check(self, mesh: TriangleMesh | None = None) -> None:
        if mesh is not None and len(self.values) != mesh.n_vertices:
            raise TrainError(f"{self.mesh_id}: {len(self.values)} feature vectors for {mesh.n_vertices} vertices")
        if not np.all(np.isfinite(self.values)):
            raise TrainError(f"{self.mesh_id}: non-finite feature values")


def compute_feature_field(trunk: Sequential, mean_patch, mesh: TriangleMesh, rho_max: float,
                          mesh_id: str = "", chunk: int = 256) -> FeatureField:
    """Trunk features at every vertex (channel 0 = (+u, +v) geodesics, infer mode).

    Vertices whose frame cannot be estimated copy the features of the nearest
    vertex that succeeded and are listed in ``flagged``.
    """
    mean_patch = np.asarray(mean_patch, dtype=np.float64)
    frames, ok = [], []
    for v in range(mesh.n_vertices):
        try:
            frames.append(vertex_frame(mesh, v))
            ok.append(v)
        except FrameError:
            pass
    if not ok:
        raise TrainError(f"{mesh_id}: no vertex admits a local frame")
    ok = np.array(ok)
    feats = np.empty((len(ok), _n_features(trunk)))
    for s in range(0, len(ok), chunk):
        vals, _ = extract_patches(mesh, frames[s:s + chunk], rho_max)
        feats[s:s + chunk] = trunk.forward(center_patches(vals, mean_patch), INFER)
    values = np.empty((mesh.n_vertices, feats.shape[1]))
    values[ok] = feats
    bad = np.setdiff1d(np.arange(mesh.n_vertices), ok)
    if len(bad):
        _, nearest = cKDTree(mesh.vertices[ok]).query(mesh.vertices[bad])
        values[bad] = feats[nearest]
    out = FeatureField(mesh_id, values, bad)
    out.check(mesh)
    return out


def save_feature_field(ff: FeatureField, path) -> None:
    """Little-endian f32 V x L matrix plus a ``.json`` sidecar."""
    path = Path(path)
    np.ascontiguousarray(ff.values, dtype="<f4").tofile(path)
    side = {"mesh_id": ff.mesh_id, "n_vertices": int(ff.values.shape[0]), "n_features": ff.n_features,
            "dtype": "<f4", "flagged_vertices": [int(v) for v in ff.flagged]}
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True) + "\n")


def load_feature_field(path) -> FeatureField:
    path = Path(path)
    side = json.loads(path.with_suffix(".json").read_text())
    vals = np.fromfile(path, dtype=side.get("dtype", "<f4"))
    shape = (side["n_vertices"], side["n_features"])
    if vals.size != shape[0] * shape[1]:
        raise TrainError(f"{path}: {vals.size} values, sidecar says {shape}")
    ff = FeatureField(side["mesh_id"], vals.reshape(shape).astype(np.float64),
                      np.array(side.get("flagged_vertices", []), dtype=np.int64))
    ff.check()
    return ff


def write_report(report: TrainReport, out_dir, stem: str = "train") -> None:
    """``<stem>_epochs.csv`` (epoch, train_loss, val_loss, auc[, domain columns]) and ``<stem>_summary.json``."""
    out_dir = Path(out_dir)
    cols = ["epoch", "train_loss", "val_loss", "auc"]
    extra = [k for k in (report.epochs[0] if report.epochs else {}) if k not in cols]
    with open(out_dir / f"{stem}_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols + extra)
        for row in report.epochs:
            w.writerow([row["epoch"]] + [repr(float(row[k])) for k in cols[1:] + extra])
    summary = asdict(report)
    summary.pop("epochs")
    summary["epochs_run"] = len(report.epochs)
    (out_dir / f"{stem}_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
