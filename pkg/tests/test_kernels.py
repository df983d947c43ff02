"""Compiled and pure-Python kernels must agree; both are checked against oracles."""

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mff import _pykernels, kernels
from mff.geometry import Box3D

from oracles import aligned_iou_2d, footprint_rect, mc_iou_3d

BACKENDS = [pytest.param(_pykernels, id="python")]
if kernels.compiled_backend is not None:
    BACKENDS.append(pytest.param(kernels.compiled_backend, id="cython"))

needs_compiled = pytest.mark.skipif(kernels.compiled_backend is None, reason="compiled kernels not built")


def random_boxes(rng, n, spread=6.0):
    return np.column_stack(
        [
            rng.uniform(-spread, spread, n),
            rng.uniform(-spread, spread, n),
            rng.uniform(0.2, 6, n),
            rng.uniform(0.2, 4, n),
            rng.uniform(-math.pi, math.pi, n),
        ]
    )


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")


@pytest.mark.parametrize("k", BACKENDS)
def test_square_overlap(k):
    a = [(0, 0), (2, 0), (2, 2), (0, 2)]
    b = [(1, 1), (3, 1), (3, 3), (1, 3)]
    assert k.convex_intersection_area(a, b) == pytest.approx(1.0)
    far = [(10, 10), (11, 10), (11, 11), (10, 11)]
    assert k.convex_intersection_area(a, far) == 0.0


@pytest.mark.parametrize("k", BACKENDS)
def test_overlap_matrix_axis_aligned_oracle(k):
    rng = np.random.default_rng(0)
    a = random_boxes(rng, 30)
    b = random_boxes(rng, 25)
    a[:, 4] = 0
    b[:, 4] = 0
    got = k.bev_overlap_matrix(a, b)
    for i in range(len(a)):
        for j in range(len(b)):
            ra = footprint_rect(Box3D((a[i, 0], a[i, 1], 0), (a[i, 2], a[i, 3], 1), 0))
            rb = footprint_rect(Box3D((b[j, 0], b[j, 1], 0), (b[j, 2], b[j, 3], 1), 0))
            iw = max(0.0, min(ra[2], rb[2]) - max(ra[0], rb[0]))
            ih = max(0.0, min(ra[3], rb[3]) - max(ra[1], rb[1]))
            assert got[i, j] == pytest.approx(iw * ih, abs=1e-9)


@pytest.mark.parametrize("k", BACKENDS)
def test_overlap_rotation_invariant(k):
    rng = np.random.default_rng(1)
    a = random_boxes(rng, 20)
    b = random_boxes(rng, 20)
    base = k.bev_overlap_matrix(a, b)
    th = 0.7
    c, s = math.cos(th), math.sin(th)

    def rot(m):
        m = m.copy()
        x, y = m[:, 0].copy(), m[:, 1].copy()
        m[:, 0], m[:, 1] = c * x - s * y, s * x + c * y
        m[:, 4] += th
        return m

    np.testing.assert_allclose(k.bev_overlap_matrix(rot(a), rot(b)), base, atol=1e-9)


@pytest.mark.parametrize("k", BACKENDS)
def test_overlap_against_monte_carlo(k):
    rng = np.random.default_rng(2)
    for _ in range(10):
        a = Box3D((0, 0, 0), rng.uniform(1, 4, 3), rng.uniform(-3, 3))
        b = Box3D(rng.uniform(-1, 1, 3) * (1, 1, 0), rng.uniform(1, 4, 3), rng.uniform(-3, 3))
        a2, b2 = Box3D(a.center, (*a.dims[:2], 1.0), a.yaw), Box3D(b.center, (*b.dims[:2], 1.0), b.yaw)
        inter = k.bev_overlap_matrix([a.bev()], [b.bev()])[0, 0]
        union = a.dims[0] * a.dims[1] + b.dims[0] * b.dims[1] - inter
        assert inter / union == pytest.approx(mc_iou_3d(a2, b2, 200_000, rng), abs=0.01)


@needs_compiled
@given(st.integers(0, 2**31))
def test_overlap_backends_agree(seed):
    rng = np.random.default_rng(seed)
    a = random_boxes(rng, 15, 3)
    b = random_boxes(rng, 12, 3)
    np.testing.assert_allclose(
        kernels.compiled_backend.bev_overlap_matrix(a, b), _pykernels.bev_overlap_matrix(a, b), atol=1e-9
    )


@needs_compiled
def test_overlap_backends_agree_on_touching_and_identical():
    a = np.array([[0, 0, 2, 2, 0], [0, 0, 2, 2, math.pi / 2], [2, 0, 2, 2, 0], [0, 0, 2, 2, math.pi / 4]], float)
    np.testing.assert_allclose(
        kernels.compiled_backend.bev_overlap_matrix(a, a), _pykernels.bev_overlap_matrix(a, a), atol=1e-12
    )
    m = _pykernels.bev_overlap_matrix(a, a)
    assert m[0, 1] == pytest.approx(4.0) and m[0, 2] == 0.0


@pytest.mark.parametrize("k", BACKENDS)
def test_empty_inputs(k):
    assert k.bev_overlap_matrix(np.zeros((0, 5)), random_boxes(np.random.default_rng(0), 3)).shape == (0, 3)
    out = k.zbuffer_min(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros(0), 2, 3)
    assert out.shape == (2, 3) and np.isnan(out).all()


def zbuffer_loop(rows, cols, depth, h, w):
    out = np.full((h, w), np.nan)
    for r, c, d in zip(rows, cols, depth):
        if not (out[r, c] <= d):
            out[r, c] = d
    return out


@pytest.mark.parametrize("k", BACKENDS)
@given(seed=st.integers(0, 2**31))
def test_zbuffer_matches_loop(k, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 400))
    rows = rng.integers(0, 7, n)
    cols = rng.integers(0, 9, n)
    depth = rng.uniform(0.5, 300, n)
    got = k.zbuffer_min(rows, cols, depth, 7, 9)
    ref = zbuffer_loop(rows, cols, depth, 7, 9)
    np.testing.assert_array_equal(np.isnan(got), np.isnan(ref))
    np.testing.assert_array_equal(got[~np.isnan(ref)], ref[~np.isnan(ref)])


def scatter_loop(ix, iy, z, nx, ny):
    dens = np.zeros((nx, ny), np.int64)
    mh = np.zeros((nx, ny))
    for i, j, h in zip(ix, iy, z):
        mh[i, j] = h if dens[i, j] == 0 else max(mh[i, j], h)
        dens[i, j] += 1
    return dens, mh


@pytest.mark.parametrize("k", BACKENDS)
@given(seed=st.integers(0, 2**31))
def test_scatter_matches_loop(k, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(0, 500))
    ix = rng.integers(0, 6, n)
    iy = rng.integers(0, 5, n)
    z = rng.uniform(-3, 3, n)
    dens, mh = k.bev_scatter(ix, iy, z, 6, 5)
    rd, rm = scatter_loop(ix, iy, z, 6, 5)
    np.testing.assert_array_equal(dens, rd)
    np.testing.assert_array_equal(mh, rm)
    assert dens.sum() == n


def test_aligned_iou_oracle_sanity():
    assert aligned_iou_2d((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def test_forced_python_fallback():
    import os
    import subprocess
    import sys

    env = dict(os.environ, MFF_FORCE_PYTHON="1")
    out = subprocess.run(
        [sys.executable, "-c", "from mff import kernels; print(kernels.BACKEND)"],
        env=env, capture_output=True, text=True, check=True,
    )
    assert out.stdout.strip() == "python"
