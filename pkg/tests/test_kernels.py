import mpmath as mp
import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import integrate

from sgflow.kernels import (KernelMultipliers, ScalarKernels, ScaleGrid, g_hat, g_increment_hat,
                            gdot_hat, gdot_radial, green_diag, green_diag_continuum,
                            interval_weights, kernel_moment, make_scale_grid, q_hat, q_radial)
from sgflow.lattice import LatticeSpec

ts = st.floats(1e-2, 1e3)
ws = st.floats(1e-2, 1e3)


@given(ts, ws)
def test_gdot_is_q_squared(t, w):
    assert np.isclose(gdot_hat(t, w), q_hat(t, w) ** 2, rtol=1e-12)


@given(st.floats(0.05, 50), st.floats(0.1, 50))
def test_g_is_integral_of_gdot(t, w):
    mp.mp.dps = 40
    # u = 1/s turns Gdot_s ds into e^{-w u} du; shift u by 1/t so quad sees a unit-height integrand
    v = mp.quad(lambda u: mp.exp(-w * u), [0, mp.inf])
    val = mp.exp(-w / mp.mpf(t)) * v
    assert np.isclose(float(val), g_hat(t, w), rtol=1e-10, atol=0)


@given(st.floats(0.05, 50), st.floats(1e-3, 50), st.floats(1e-3, 1e3))
def test_increment_consistency(t1, dt, w):
    t2 = t1 + dt
    mp.mp.dps = 50
    ref = float((mp.exp(-mp.mpf(w) / t2) - mp.exp(-mp.mpf(w) / t1)) / w)
    assert np.isclose(g_increment_hat(t1, t2, w), ref, rtol=1e-12, atol=0)
    assert g_increment_hat(t1, t2, w) >= 0


def test_limits():
    w = np.array([0.5, 2.0])
    assert np.array_equal(g_hat(0, w), [0, 0]) and np.array_equal(q_hat(0, w), [0, 0])
    assert np.allclose(g_hat(np.inf, w), 1 / w)
    assert np.allclose(g_increment_hat(3.0, np.inf, w), 1 / w - g_hat(3.0, w))
    with pytest.raises(ValueError):
        g_increment_hat(2.0, 1.0, w)


def test_multipliers_monotone_in_t(km16):
    prev = km16.g(0.5)
    for t in (1.0, 2.0, 8.0, np.inf):
        cur = km16.g(t)
        assert np.all(cur >= prev)
        prev = cur


def test_lattice_kernels_match_continuum():
    spec = LatticeSpec(64, 1 / 16)
    km = KernelMultipliers(spec, 1.0)
    t = 16.0
    for lat, cont in ((km.Gdot_field(t), gdot_radial), (km.real_kernel(km.q(t)), q_radial)):
        ref = cont(t, spec.radius, 1.0)
        assert np.max(np.abs(lat - ref)) < 1e-6 * ref.max()


def test_convolution_is_positive_definite(km16):
    f = np.random.default_rng(0).standard_normal(km16.spec.shape)
    for t in (0.5, 4.0):
        assert np.sum(f * km16.convolve_gdot(f, t)) > 0
        assert np.allclose(km16.convolve_q(km16.convolve_q(f, t), t), km16.convolve_gdot(f, t))


def test_conv_kernel_matches_multiplier(km16):
    f = np.random.default_rng(1).standard_normal(km16.spec.shape)
    K = km16.Gdot_field(2.0)
    assert np.allclose(km16.conv_kernel(f, K), km16.convolve_gdot(f, 2.0), atol=1e-13)


def test_green_diag_forms_agree():
    for t in (0.5, 3.0, 50.0):
        assert np.isclose(green_diag_continuum(t, 1.0, "closed"), green_diag_continuum(t, 1.0),
                          rtol=1e-10)
    assert green_diag_continuum(0.0, 1.0) == 0.0
    spec = LatticeSpec(256, 1 / 16)
    km = KernelMultipliers(spec, 1.0)
    assert np.isclose(green_diag(4.0, 1.0, spec), km.diag(4.0))
    # large box, t well inside the window: lattice diagonal tracks the continuum
    assert abs(green_diag(4.0, 1.0, spec) - green_diag_continuum(4.0, 1.0)) < 1e-6


def test_green_diag_bounded_residual():
    # |G_t(0) - log(t)/4pi| stays within a fixed band for t in [10, T]
    spec = LatticeSpec(128, 1 / 32)
    res = [green_diag(t, 1.0, spec) - np.log(t) / (4 * np.pi) for t in np.geomspace(10, 256, 12)]
    assert np.ptp(res) < 0.02


def test_off_diagonal_log_behaviour():
    # (G_inf - G_t)(x) - log(1 v 1/(t|x|^2))/4pi bounded for a << |x| << L
    spec = LatticeSpec(256, 1 / 32)
    km = KernelMultipliers(spec, 1.0)
    r = spec.radius
    mask = (r > 4 * spec.a) & (r < 1.0)
    vals = []
    for t in (1.0, 10.0, 100.0):
        C = km.G_field(np.inf) - km.G_field(t)
        vals.append(C[mask] - np.log(np.maximum(1 / (r[mask] ** 2 * t), 1)) / (4 * np.pi))
    vals = np.concatenate(vals)
    assert np.abs(vals).max() < 0.1


@given(st.floats(0.0, 3.0), st.floats(0.5, 40.0))
def test_interval_weights_against_quadrature(t0, dt):
    t1 = t0 + dt
    w = np.array([1.0, 7.5])
    W = interval_weights(t0, t1, w)
    for i, wi in enumerate(w):
        def mom(f):
            return integrate.quad(lambda s: gdot_hat(s, wi) * f((s - t0) / dt), t0, t1,
                                  epsrel=1e-11, epsabs=1e-15, limit=200)[0]
        assert np.isclose(W["wR"][i], mom(lambda u: u), rtol=1e-6, atol=1e-12)
        assert np.isclose(W["w11"][i], mom(lambda u: u * u), rtol=1e-6, atol=1e-12)
        assert np.isclose(W["wL"][i] + W["wR"][i], W["I0"][i], rtol=1e-12)
        assert np.isclose(W["w00"][i] + W["w01"][i] + W["w11"][i], W["I0"][i], rtol=1e-10)


def test_scale_grid():
    g = make_scale_grid(16.0)
    assert g.knots[0] == 0 and g.T == 16.0 and np.all(np.diff(g.knots) > 0)
    assert np.allclose(g.knots[:8], np.linspace(0, 1, 8))
    # nested prefixes for doubled cutoffs
    g2 = make_scale_grid(32.0)
    assert np.allclose(g2.knots[: len(g.knots)], g.knots)
    assert len(make_scale_grid(0.5).knots) == 8
    for bad in ([0.0], [1.0, 2.0], [0.0, 2.0, 1.0]):
        with pytest.raises(ValueError):
            ScaleGrid(np.array(bad))
    with pytest.raises(ValueError):
        make_scale_grid(np.inf)


def test_kernel_moment_normalisation():
    # alpha = gamma = 0 integrates the kernel: Gdot_t(k=0) and Q_t(k=0)
    for t in (1.0, 9.0):
        assert np.isclose(kernel_moment(t, 0, 0, 1.0), np.exp(-1 / t) / t**2, rtol=1e-8)
        assert np.isclose(kernel_moment(t, 0, 0, 1.0, "q"), np.exp(-0.5 / t) / t, rtol=1e-8)
    with pytest.raises(ValueError):
        kernel_moment(1.0, -1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        kernel_moment(1.0, 0.5, 1.0, 1.0)


def test_scalar_kernels(km16):
    sk = ScalarKernels(km16)
    assert np.isclose(sk.g(2.0)[0, 0], km16.diag(2.0))
    assert np.isclose(sk.q(2.0)[0, 0] ** 2, km16.diag_dot(2.0))
    assert np.isclose(sk.increment(1.0, 3.0)[0, 0], km16.diag(3.0) - km16.diag(1.0))
    W = sk.interval_weights(1.0, 2.0)
    assert np.isclose(W["I0"][0, 0], km16.diag(2.0) - km16.diag(1.0))
    assert np.isclose(sk.q_integral(1.0, 2.0)[0, 0],
                      integrate.quad(lambda s: np.sqrt(km16.diag_dot(s)), 1.0, 2.0)[0], rtol=1e-8)


def test_mass_must_be_positive(spec16):
    with pytest.raises(ValueError):
        KernelMultipliers(spec16, 0.0)
