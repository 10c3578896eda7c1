"""PCA shape models and the compactness / generalization / specificity metrics.

Distances are mean per-particle Euclidean distances over the positional
block of the shape vectors (the last ``3M`` entries).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class EvalError(ValueError):
    pass


@dataclass
class PCAModel:
    mean: np.ndarray
    eigenvalues: np.ndarray  # descending, clamped at 0
    modes: np.ndarray  # (D, K) orthonormal columns
    n_samples: int

    def project(self, rows, k: int) -> np.ndarray:
        return (np.atleast_2d(rows) - self.mean) @ self.modes[:, :k]

    def reconstruct(self, rows, k: int) -> np.ndarray:
        return self.mean + self.project(rows, k) @ self.modes[:, :k].T

    def decode(self, latent) -> np.ndarray:
        latent = np.atleast_2d(latent)
        return self.mean + latent @ self.modes[:, : latent.shape[1]].T


def _sign_convention(modes: np.ndarray) -> np.ndarray:
    """Per-column signs making each mode's largest-magnitude entry positive."""
    pick = modes[np.argmax(np.abs(modes), axis=0), np.arange(modes.shape[1])]
    return np.where(pick < 0, -1.0, 1.0)


def pca_fit(rows) -> PCAModel:
    """Eigen-decomposition of the N x N Gram matrix of the centered rows.

    Modes with eigenvalue below ``1e-12`` times the largest are dropped, so
    at most N - 1 modes are kept.
    """
    x = np.asarray(rows, dtype=np.float64)
    if x.ndim != 2 or len(x) < 2:
        raise EvalError("pca_fit needs at least two rows")
    n = len(x)
    mean = x.mean(axis=0)
    y = x - mean
    gram = y @ y.T / (n - 1)
    w, v = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, v = np.maximum(w[order], 0.0), v[:, order]
    keep = w > 1e-12 * max(w[0], 1e-300) if w[0] > 0 else np.zeros(len(w), dtype=bool)
    w, v = w[keep], v[:, keep]
    modes = y.T @ v / np.sqrt(w * (n - 1))
    if modes.shape[1]:
        # re-orthonormalize to roundoff; QR keeps the span of every leading column set
        modes, r = np.linalg.qr(modes)
        modes *= np.sign(np.diag(r))
        modes *= _sign_convention(modes)
    return PCAModel(mean, w, modes, n)


def compactness(model: PCAModel, n_modes: int | None = None) -> np.ndarray:
    """Cumulative percentage of variance for 1..n_modes modes (100 throughout for a zero-variance model)."""
    n_modes = model.n_samples - 1 if n_modes is None else n_modes
    lam = np.zeros(n_modes)
    k = min(n_modes, len(model.eigenvalues))
    lam[:k] = model.eigenvalues[:k]
    total = float(model.eigenvalues.sum())
    if total <= 0:
        return np.full(n_modes, 100.0)
    return np.cumsum(lam) / total * 100.0


def _positions(rows, n_particles: int | None):
    rows = np.atleast_2d(rows)
    m = rows.shape[1] // 3 if n_particles is None else n_particles
    return rows[:, -3 * m:].reshape(len(rows), m, 3)


def pointwise_distance(a, b, n_particles: int | None = None) -> np.ndarray:
    """Mean per-particle Euclidean distance between positional blocks (broadcasts over rows)."""
    pa, pb = _positions(a, n_particles), _positions(b, n_particles)
    return np.linalg.norm(pa - pb, axis=2).mean(axis=1)


def generalization(rows, k: int, n_particles: int | None = None) -> float:
    """Leave-one-out reconstruction error with ``k`` modes."""
    x = np.asarray(rows, dtype=np.float64)
    n = len(x)
    if n < 3:
        raise EvalError("generalization needs at least three rows")
    if k < 0 or k > n - 2:
        raise EvalError(f"k must be in [0, {n - 2}], got {k}")
    errs = []
    for i in range(n):
        model = pca_fit(np.delete(x, i, axis=0))
        rec = model.reconstruct(x[i], min(k, model.modes.shape[1]))
        errs.append(pointwise_distance(x[i], rec, n_particles)[0])
    return float(np.mean(errs))


def specificity(model: PCAModel, rows, k: int | None = None, n_draws: int = 1000, seed: int = 0,
                n_particles: int | None = None, chunk: int = 200) -> float:
    """Mean distance from shapes drawn out of the first ``k`` modes to their nearest training row."""
    x = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    k = len(model.eigenvalues) if k is None else min(k, len(model.eigenvalues))
    rng = np.random.default_rng(seed)
    latent = rng.standard_normal((n_draws, k)) * np.sqrt(model.eigenvalues[:k])
    out = np.empty(n_draws)
    px = _positions(x, n_particles)
    for s in range(0, n_draws, chunk):
        shapes = _positions(model.decode(latent[s:s + chunk]), n_particles)
        d = np.linalg.norm(shapes[:, None] - px[None], axis=3).mean(axis=2)
        out[s:s + chunk] = d.min(axis=1)
    return float(out.mean())


@dataclass
class MetricTable:
    variant: str
    k: np.ndarray
    compactness: np.ndarray
    generalization: np.ndarray
    specificity: np.ndarray


def evaluate_variant(name: str, positions: np.ndarray, max_modes: int = 5, n_draws: int = 1000,
                     seed: int = 0) -> MetricTable:
    """All three metrics for k = 1..max_modes on an (N, M, 3) correspondence model."""
    positions = np.asarray(positions, dtype=np.float64)
    rows = positions.reshape(len(positions), -1)
    m = positions.shape[1]
    model = pca_fit(rows)
    ks = np.arange(1, max_modes + 1)
    comp = compactness(model, max_modes)
    gen = np.array([generalization(rows, min(k, len(rows) - 2), m) for k in ks])
    spec = np.array([specificity(model, rows, k, n_draws, seed, m) for k in ks])
    return MetricTable(name, ks, comp, gen, spec)


def write_metrics(table: MetricTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "cumulative_variance_pct", "generalization_mm", "specificity_mm"])
        for row in zip(table.k, table.compactness, table.generalization, table.specificity):
            w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def read_metrics(path, variant: str | None = None) -> MetricTable:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        raise EvalError(f"{path}: empty metrics file")
    col = lambda key: np.array([float(r[key]) for r in rows])  # noqa: E731
    return MetricTable(variant or Path(path).stem, col("k").astype(int), col("cumulative_variance_pct"),
                       col("generalization_mm"), col("specificity_mm"))


def write_comparison(tables: list[MetricTable], path) -> None:
    """Long-format CSV across variants: variant, k, and the three metrics."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["variant", "k", "cumulative_variance_pct", "generalization_mm", "specificity_mm"])
        for t in tables:
            for row in zip(t.k, t.compactness, t.generalization, t.specificity):
                w.writerow([t.variant, int(row[0])] + [repr(float(v)) for v in row[1:]])
