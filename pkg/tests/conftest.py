import numpy as np
import pytest

from corrforge.geomcore import TriangleMesh
from corrforge.synthgen import icosphere

# one line per acceptance criterion, filled by test_acceptance and printed at the end of the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)


def grid_plane(n=21, size=10.0, jitter=0.0, seed=0):
    """Triangulated square in z=0 centred on the origin."""
    xs = np.linspace(-size / 2, size / 2, n)
    gx, gy = np.meshgrid(xs, xs, indexing="ij")
    v = np.stack([gx.ravel(), gy.ravel(), np.zeros(n * n)], axis=1)
    if jitter:
        rng = np.random.default_rng(seed)
        inner = (np.abs(v[:, 0]) < size / 2 - 1e-9) & (np.abs(v[:, 1]) < size / 2 - 1e-9)
        v[inner, :2] += rng.uniform(-jitter, jitter, (inner.sum(), 2)) * (size / (n - 1))
    idx = np.arange(n * n).reshape(n, n)
    a, b, c, d = idx[:-1, :-1].ravel(), idx[1:, :-1].ravel(), idx[1:, 1:].ravel(), idx[:-1, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh.from_arrays(v, tris)


def open_cylinder(radius=2.0, height=8.0, n_around=64, n_up=33):
    th = 2 * np.pi * np.arange(n_around) / n_around
    zs = np.linspace(-height / 2, height / 2, n_up)
    tt, zz = np.meshgrid(th, zs, indexing="ij")
    v = np.stack([radius * np.cos(tt).ravel(), radius * np.sin(tt).ravel(), zz.ravel()], axis=1)
    idx = np.arange(n_around * n_up).reshape(n_around, n_up)
    nxt = np.roll(idx, -1, axis=0)
    a, b, c, d = idx[:, :-1].ravel(), nxt[:, :-1].ravel(), nxt[:, 1:].ravel(), idx[:, 1:].ravel()
    tris = np.concatenate([np.stack([a, b, c], 1), np.stack([a, c, d], 1)])
    return TriangleMesh.from_arrays(v, tris)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


@pytest.fixture(scope="session")
def sphere642():
    return icosphere(3)


@pytest.fixture(scope="session")
def sphere2562():
    return icosphere(4)
