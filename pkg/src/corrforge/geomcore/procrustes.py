"""Generalized Procrustes alignment of corresponding point sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class RigidTransform:
    rotation: np.ndarray
    translation: np.ndarray
    scale: float = 1.0

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return self.scale * (np.asarray(points) @ self.rotation.T) + self.translation

    def apply_vectors(self, vecs) -> np.ndarray:
        return np.asarray(vecs) @ self.rotation.T

    def inverse(self) -> "RigidTransform":
        rt = self.rotation.T
        return RigidTransform(rt, -(rt @ self.translation) / self.scale, 1.0 / self.scale)

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """``self`` after ``other``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.scale * (self.rotation @ other.translation) + self.translation,
            self.scale * other.scale,
        )

    def as_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m


def orthogonal_procrustes(source, target, *, scaling: bool = False) -> RigidTransform:
    """Best rotation (+translation) taking ``source`` onto ``target`` in least squares."""
    src = np.asarray(source, dtype=np.float64)
    tgt = np.asarray(target, dtype=np.float64)
    cs, ct = src.mean(axis=0), tgt.mean(axis=0)
    a, b = src - cs, tgt - ct
    u, sv, vt = np.linalg.svd(b.T @ a)
    fix = np.diag([1.0, 1.0, np.sign(np.linalg.det(u @ vt)) or 1.0])
    rot = u @ fix @ vt
    scale = 1.0
    if scaling:
        denom = float(np.sum(a * a))
        scale = float(np.sum(sv * np.diag(fix)) / denom) if denom > 0 else 1.0
    return RigidTransform(rot, ct - scale * (rot @ cs), scale)


def procrustes_align(particle_sets, *, scaling: bool = False, tol: float = 1e-8, max_iter: int = 1000):
    """Generalized Procrustes alignment.

    Alternates between the mean configuration and per-set orthogonal
    Procrustes fits until the mean moves less than ``tol``. The gauge is fixed
    so that the first set's transform is the identity.
    """
    sets = [np.asarray(s, dtype=np.float64) for s in particle_sets]
    if len(sets) < 2:
        raise ValueError("procrustes_align needs at least two point sets")
    m = sets[0].shape[0]
    if any(s.shape != (m, 3) for s in sets):
        raise ValueError("all point sets must be (M, 3) with equal M")
    if m < 3:
        raise ValueError("at least three points are required to fix a rotation")

    mean = sets[0].copy()
    transforms = [RigidTransform.identity() for _ in sets]
    for _ in range(max_iter):
        transforms = [orthogonal_procrustes(s, mean, scaling=scaling) for s in sets]
        aligned = [t.apply(s) for t, s in zip(transforms, sets)]
        new_mean = np.mean(aligned, axis=0)
        if scaling:
            # hold the mean's size fixed so the shrink-to-zero solution is excluded
            c = new_mean.mean(axis=0)
            size = np.linalg.norm(new_mean - c)
            ref = np.linalg.norm(sets[0] - sets[0].mean(axis=0))
            if size > 0:
                new_mean = c + (new_mean - c) * (ref / size)
        change = float(np.max(np.abs(new_mean - mean)))
        mean = new_mean
        if change < tol:
            break
    transforms = [orthogonal_procrustes(s, mean, scaling=scaling) for s in sets]
    gauge = transforms[0].inverse()
    return [gauge.compose(t) for t in transforms]
