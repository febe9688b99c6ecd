import zlib

import numpy as np
import pytest

from spadfusion import forward_model as fm
from spadfusion.datacube import SpadMeasurement, TransientCube

import oracles


def geom(m=4, n=4, r=2, sigma=1.0, a=1, **kw):
    return fm.FusionGeometry(m, n, r, blur_sigma=sigma, active_width=a, **kw)


def inner(a, b):
    return float(np.vdot(a.ravel(), b.ravel()))


# --- geometry ---------------------------------------------------------------

def test_default_active_width_rule():
    assert [fm.default_active_width(r) for r in (1, 3, 7, 8, 12, 50)] == [1, 1, 1, 1, 2, 7]
    assert fm.FusionGeometry(2, 2, 3).active_width == 1


@pytest.mark.parametrize("kw", [dict(upsample_factor=0), dict(active_width=4),
                                dict(blur_sigma=-1.0), dict(boundary="wrap"),
                                dict(dead_pixels={(5, 0)})])
def test_geometry_validation(kw):
    base = dict(low_rows=2, low_cols=2, upsample_factor=3)
    base.update(kw)
    with pytest.raises(ValueError):
        fm.FusionGeometry(**base)


def test_kernel_truncation_and_mass():
    k = fm.gaussian_kernel(1.5)
    assert len(k) == 2 * 6 + 1
    assert k.sum() == pytest.approx(1.0, abs=1e-15)
    np.testing.assert_allclose(k, k[::-1])


# --- B ------------------------------------------------------------------------

def test_blur_sigma_zero_is_identity(rng):
    g = geom(sigma=0.0)
    x = rng.random((8, 8))
    np.testing.assert_array_equal(fm.blur(x, g), x)


def test_blur_replicate_preserves_constant():
    g = geom(sigma=2.0, boundary="replicate")
    np.testing.assert_allclose(fm.blur(np.full((8, 8), 3.0), g), 3.0, rtol=1e-12)


def test_blur_delta_matches_dense_convolution():
    g = fm.FusionGeometry(3, 3, 3, blur_sigma=1.0, active_width=1)
    x = np.zeros((9, 9))
    x[4, 4] = 1.0
    B = oracles.dense_blur(9, 9, 1.0)
    expect = (B @ x.ravel()).reshape(9, 9)
    assert np.abs(fm.blur(x, g) - expect).max() < 1e-6


@pytest.mark.parametrize("boundary", ["zero_pad", "replicate", "reflect"])
@pytest.mark.parametrize("sigma", [0.7, 1.0, 3.0, 9.0])
def test_blur_matches_dense(boundary, sigma, rng):
    g = geom(sigma=sigma, boundary=boundary)
    B = oracles.dense_blur(8, 8, sigma, boundary)
    x = rng.random((8, 8))
    y = rng.random((8, 8))
    np.testing.assert_allclose(fm.blur(x, g).ravel(), B @ x.ravel(), atol=1e-12)
    np.testing.assert_allclose(fm.blur_adjoint(y, g).ravel(), B.T @ y.ravel(), atol=1e-12)


def test_blur_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        fm.blur(np.zeros((7, 8)), geom())


# --- S, P -----------------------------------------------------------------------

def test_mask_center_pixel():
    g = fm.FusionGeometry(2, 2, 3, active_width=1)
    m = fm.mask(np.ones((6, 6)), g)
    assert m.sum() == 4
    assert m[1, 1] == m[1, 4] == m[4, 1] == m[4, 4] == 1


def test_mask_full_active_is_identity(rng):
    g = fm.FusionGeometry(2, 2, 3, active_width=3)
    x = rng.random((6, 6))
    np.testing.assert_array_equal(fm.mask(x, g), x)


def test_mask_dead_pixel_zeroes_block():
    g = fm.FusionGeometry(2, 2, 3, active_width=3, dead_pixels={(0, 0)}, model_dead_pixels=True)
    m = fm.mask(np.ones((6, 6)), g)
    assert m[:3, :3].sum() == 0
    assert m.sum() == 27
    unmodeled = fm.FusionGeometry(2, 2, 3, active_width=3, dead_pixels={(0, 0)})
    assert fm.mask(np.ones((6, 6)), unmodeled).sum() == 36


def test_downsample_cases(rng):
    x = rng.random((5, 7))
    np.testing.assert_array_equal(fm.downsample(x, fm.FusionGeometry(5, 7, 1)), x)
    np.testing.assert_array_equal(fm.downsample(np.ones((4, 4)), fm.FusionGeometry(2, 2, 2)), 4.0)


def test_downsample_matches_dense_96():
    g = fm.FusionGeometry(32, 32, 3)
    P = np.zeros((32 * 32, 96 * 96))
    for i in range(32):
        for j in range(32):
            for u in range(3):
                for v in range(3):
                    P[i * 32 + j, (3 * i + u) * 96 + 3 * j + v] = 1.0
    x = np.random.default_rng(5).random((96, 96))
    assert np.abs(fm.downsample(x, g).ravel() - P @ x.ravel()).max() < 1e-5


# --- A, A_tau -------------------------------------------------------------------

def test_apply_A_tau_zero_and_shapes():
    g = fm.FusionGeometry(32, 32, 3, blur_sigma=6.0)
    cube = TransientCube(np.zeros((5, 96, 96)), 55.0)
    meas = fm.apply_A_tau(cube, g)
    assert isinstance(meas, SpadMeasurement)
    assert meas.values.shape == (5, 32, 32)
    assert meas.bin_width == 55.0
    assert not meas.values.any()


def test_apply_A_tau_matches_dense_composition(rng):
    g = geom()
    A = oracles.dense_A(4, 4, 2, 1.0, 1)
    assert A.shape == (16, 64)
    cube = TransientCube(rng.random((4, 8, 8)), 1.0)
    got = fm.apply_A_tau(cube, g).values
    for t in range(4):
        assert np.abs(got[t].ravel() - A @ cube.values[t].ravel().astype(np.float64)).max() < 1e-5


def test_apply_A_is_composition(rng):
    g = geom(sigma=1.3, a=2, boundary="replicate")
    x = rng.random((3, 8, 8))
    np.testing.assert_array_equal(fm.apply_A(x, g), fm.downsample(fm.mask(fm.blur(x, g), g), g))


def test_identity_configuration_adjoint(rng):
    g = fm.FusionGeometry(3, 5, 1, blur_sigma=0.0, active_width=1)
    y = rng.random((3, 5))
    np.testing.assert_array_equal(fm.adjoint_A(y, g), y)
    np.testing.assert_array_equal(fm.apply_A(y, g), y)


@pytest.mark.parametrize("boundary", ["zero_pad", "replicate", "reflect"])
def test_adjoint_equals_dense_transpose(boundary, rng):
    g = geom(boundary=boundary)
    A = oracles.dense_A(4, 4, 2, 1.0, 1, boundary)
    y = rng.random((4, 4))
    np.testing.assert_allclose(fm.adjoint_A(y, g).ravel(), A.T @ y.ravel(), atol=1e-12)


def test_dead_pixel_geometry_matches_dense(rng):
    g = geom(sigma=1.0, a=2, dead_pixels={(1, 2)}, model_dead_pixels=True)
    A = oracles.dense_A(4, 4, 2, 1.0, 2, dead={(1, 2)})
    x = rng.random((8, 8))
    np.testing.assert_allclose(fm.apply_A(x, g).ravel(), A @ x.ravel(), atol=1e-12)


def test_workers_do_not_change_results(rng):
    g = geom(sigma=1.5)
    x = rng.random((7, 8, 8))
    np.testing.assert_array_equal(fm.apply_A(x, g, workers=3), fm.apply_A(x, g))
    y = rng.random((7, 4, 4))
    np.testing.assert_array_equal(fm.adjoint_A(y, g, workers=3), fm.adjoint_A(y, g))


# --- T, K -----------------------------------------------------------------------

def test_integrate_time_cases(rng):
    one = TransientCube(rng.random((1, 3, 4)), 1.0)
    np.testing.assert_array_equal(fm.integrate_time_cube(one).values, one.values[0])
    vals = np.zeros((3, 2, 2))
    vals[:, 1, 0] = [1, 2, 3]
    assert fm.integrate_time_cube(TransientCube(vals, 1.0)).values[1, 0] == 6
    x = rng.random((4, 3, 5))
    loop = np.zeros((3, 5))
    for t in range(4):
        for p in range(3):
            for q in range(5):
                loop[p, q] += x[t, p, q]
    np.testing.assert_array_equal(fm.integrate_time(x), loop)


def test_integrate_space_cases(rng):
    np.testing.assert_array_equal(fm.integrate_space_high(TransientCube(np.ones((3, 2, 2)), 1.0)),
                                  [4, 4, 4])
    x = rng.random((4, 3, 5))
    loop = [sum(x[t, p, q] for p in range(3) for q in range(5)) for t in range(4)]
    np.testing.assert_allclose(fm.integrate_space(x), loop, rtol=1e-14)


def test_histogram_conservation_full_mask(rng):
    g = fm.FusionGeometry(3, 3, 2, blur_sigma=0.0, active_width=2)
    cube = TransientCube(rng.random((5, 6, 6)), 1.0)
    meas = fm.apply_A_tau(cube, g)
    np.testing.assert_allclose(fm.integrate_space_low(meas), fm.integrate_space_high(cube), rtol=1e-6)


@pytest.mark.parametrize("sigma", [0.0, 1.0, 2.5, 20.0])
def test_count_conservation_reflect(sigma, rng):
    g = fm.FusionGeometry(4, 3, 3, blur_sigma=sigma, active_width=3, boundary="reflect")
    x = rng.random((12, 9))
    assert fm.apply_A(x, g).sum() == pytest.approx(x.sum(), rel=1e-5)


def test_replicate_conserves_constants_but_not_totals():
    g = fm.FusionGeometry(4, 3, 3, blur_sigma=1.0, active_width=3, boundary="replicate")
    assert fm.apply_A(np.full((12, 9), 2.0), g).sum() == pytest.approx(216.0, rel=1e-12)
    x = np.zeros((12, 9))
    x[0, 0] = 1.0  # corner mass is over-weighted by edge replication
    B = oracles.dense_blur(12, 9, 1.0, "replicate")
    assert fm.apply_A(x, g).sum() == pytest.approx(B[:, 0].sum(), rel=1e-12)
    assert B[:, 0].sum() > 1.1


# --- gradient -------------------------------------------------------------------

def test_gradient_cases():
    g_r, g_c = fm.gradient_2d(TransientCube(np.full((2, 3, 3), 4.0), 1.0))
    assert not g_r.any() and not g_c.any()
    g_r, g_c = fm.grad2d(np.array([[[0.0, 1.0], [0.0, 1.0]]]))
    np.testing.assert_array_equal(g_c[0], [[1, 0], [1, 0]])
    np.testing.assert_array_equal(g_r[0], 0)


def test_gradient_matches_dense(rng):
    Gr, Gc = oracles.dense_grad(5, 6)
    x = rng.random((5, 6))
    g_r, g_c = fm.grad2d(x)
    np.testing.assert_allclose(g_r.ravel(), Gr @ x.ravel(), atol=1e-14)
    np.testing.assert_allclose(g_c.ravel(), Gc @ x.ravel(), atol=1e-14)


# --- operator-wide properties ---------------------------------------------------

def operator_pairs():
    """(name, forward, adjoint, input shape, output shape) for every pair."""
    gz = fm.FusionGeometry(4, 3, 3, blur_sigma=1.2, active_width=1)
    gr = fm.FusionGeometry(4, 3, 3, blur_sigma=2.0, active_width=2, boundary="replicate")
    gm = fm.FusionGeometry(4, 3, 3, blur_sigma=5.0, active_width=3, boundary="reflect")
    M, N, tau = 12, 9, 4
    pairs = []
    for tag, g in (("zero", gz), ("repl", gr), ("refl", gm)):
        pairs += [
            (f"blur-{tag}", lambda x, g=g: fm.blur(x, g), lambda y, g=g: fm.blur_adjoint(y, g),
             (tau, M, N), (tau, M, N)),
            (f"mask-{tag}", lambda x, g=g: fm.mask(x, g), lambda y, g=g: fm.mask(y, g),
             (tau, M, N), (tau, M, N)),
            (f"pool-{tag}", lambda x, g=g: fm.downsample(x, g),
             lambda y, g=g: fm.downsample_adjoint(y, g), (tau, M, N), (tau, 4, 3)),
            (f"A_tau-{tag}", lambda x, g=g: fm.apply_A(x, g), lambda y, g=g: fm.adjoint_A(y, g),
             (tau, M, N), (tau, 4, 3)),
        ]
    pairs += [
        ("T", fm.integrate_time, lambda y: fm.integrate_time_adjoint(y, tau), (tau, M, N), (M, N)),
        ("K_h", fm.integrate_space, lambda y: fm.integrate_space_adjoint(y, (M, N)),
         (tau, M, N), (tau,)),
        ("grad", lambda x: np.stack(fm.grad2d(x)), lambda y: fm.grad2d_adjoint(y[0], y[1]),
         (tau, M, N), (2, tau, M, N)),
    ]
    return pairs


PAIRS = operator_pairs()


@pytest.mark.parametrize("name,fwd,adj,xs,ys", PAIRS, ids=[p[0] for p in PAIRS])
def test_adjoint_identity_randomized(name, fwd, adj, xs, ys):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        x = rng.standard_normal(xs)
        y = rng.standard_normal(ys)
        lhs, rhs = inner(fwd(x), y), inner(x, adj(y))
        assert abs(lhs - rhs) <= 1e-5 * max(abs(lhs), abs(rhs), 1e-12)


@pytest.mark.parametrize("name,fwd,adj,xs,ys", PAIRS, ids=[p[0] for p in PAIRS])
def test_linearity(name, fwd, adj, xs, ys, rng):
    for _ in range(10):
        a, b = rng.standard_normal(2)
        x, z = rng.standard_normal(xs), rng.standard_normal(xs)
        lhs = fwd(a * x + b * z)
        rhs = a * fwd(x) + b * fwd(z)
        assert np.linalg.norm(lhs - rhs) <= 1e-5 * max(np.linalg.norm(rhs), 1e-12)


def test_power_norm_matches_svd():
    A = oracles.dense_A(4, 4, 2, 1.0, 1)
    g = geom()
    est = fm.power_norm(lambda x: fm.apply_A(x, g), lambda y: fm.adjoint_A(y, g), (8, 8), iters=200,
                        tol=1e-12)
    assert est == pytest.approx(np.linalg.norm(A, 2), rel=1e-6)
