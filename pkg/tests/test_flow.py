import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgflow.flow import (ChargeVector, CouplingParams, ForceTables, beta2_threshold,
                         charged_bound_check, diagnostic_norm, f1, lambda_t, pair_covariance)
from sgflow.kernels import KernelMultipliers
from sgflow.lattice import LatticeSpec, make_rho


@pytest.fixture(scope="module")
def small():
    spec = LatticeSpec(8, 0.5)
    km = KernelMultipliers(spec, 1.0)
    rho = make_rho(spec, 0.75, 0.75).values
    return spec, km, rho


def tables(small, ell, lam=0.3, beta2=2 * np.pi, T=1.0, **kw):
    spec, km, rho = small
    return ForceTables(CouplingParams(lam, beta2, ell), km, rho, T, **kw)


def test_thresholds():
    assert np.isclose(beta2_threshold(1), 4 * np.pi)
    assert np.isclose(beta2_threshold(3), 6 * np.pi)
    with pytest.raises(ValueError):
        CouplingParams(0.1, 4 * np.pi, 1)
    with pytest.raises(ValueError):
        CouplingParams(0.1, 2.0, 4)
    with pytest.raises(ValueError):
        CouplingParams(0.1, -1.0, 1)
    assert np.isclose(CouplingParams(0.1, 4 * np.pi, 2).delta, 0.5)


def test_charges():
    assert ChargeVector((1, -1)).neutral and ChargeVector((1, 1, -1)).q == 1
    with pytest.raises(ValueError):
        ChargeVector((1, 0))


@given(st.floats(0.5, 60.0), st.floats(0.01, 1.0))
def test_lambda_t_monotone(t, lam):
    spec = LatticeSpec(32, 1 / 8)
    km = KernelMultipliers(spec, 1.0)
    p = CouplingParams(lam, 2 * np.pi, 1)
    assert lambda_t(t * 1.1, p, km) > lambda_t(t, p, km) > 0
    assert np.isclose(abs(f1(t, 1, p, km)), lambda_t(t, p, km) * p.beta / 2)


def test_window_enforced(small):
    with pytest.raises(ValueError):
        tables(small, 1, T=1.5)


def _finite_difference_force(tb, t, phi, level, h=1e-6):
    spec = tb.kernels.spec
    out = np.zeros_like(phi)
    for idx in itertools.product(range(spec.N), repeat=2):
        e = np.zeros_like(phi)
        e[idx] = h
        out[idx] = (tb.potential(t, phi + e, level) - tb.potential(t, phi - e, level)) / (2 * h)
    return out / spec.area


@pytest.mark.parametrize("level", [1, 2, 3])
def test_force_is_gradient_of_potential(small, level):
    tb = tables(small, 3, beta2=2 * np.pi)
    phi = np.random.default_rng(level).standard_normal(small[0].shape) * 0.4
    F = tb.force_apply(0.4, phi, level)
    fd = _finite_difference_force(tb, 0.4, phi, level)
    assert np.max(np.abs(F - fd)) < 1e-6 * max(1.0, np.abs(F).max())


@pytest.mark.parametrize("level", [1, 2, 3])
def test_hessian_is_derivative_of_force(small, level):
    tb = tables(small, 3)
    rng = np.random.default_rng(10 + level)
    phi = rng.standard_normal(small[0].shape) * 0.4
    v = rng.standard_normal(small[0].shape)
    h = 1e-6
    fd = (tb.force_apply(0.3, phi + h * v, level) - tb.force_apply(0.3, phi - h * v, level)) / (2 * h)
    H = tb.hessian_apply(0.3, phi, v, level)
    assert np.max(np.abs(H - fd)) < 1e-6 * max(1.0, np.abs(H).max())


def test_level2_closed_form_matches_quadrature(small):
    a = tables(small, 2, f2_method="closed")
    b = tables(small, 2, f2_method="quadrature")
    for t in (0.0, 0.3, 0.8):
        for p in (1, -1):
            Ka, Kb = a.k2_kernel(t, p), b.k2_kernel(t, p)
            assert np.max(np.abs(Ka - Kb)) < 1e-6 * np.abs(Ka).max()


def test_level3_pointwise_matches_table(small):
    tb = tables(small, 3)
    t = 0.3
    K3 = tb.k3_kernels(t)["K3"]
    dflat, shift = tb._neighbourhood()
    n = small[0].N
    rng = np.random.default_rng(5)
    checked = 0
    for _ in range(40):
        i2 = rng.integers(len(dflat))
        d3 = rng.integers(n * n)
        sg = (int(rng.choice([1, -1])), int(rng.choice([1, -1])))
        x2 = divmod(int(dflat[i2]), n)
        x3 = divmod(int(d3), n)
        # place x1 at the rho plateau centre so every rho factor can be read off directly
        c = np.array([n // 2, n // 2])
        pts = [c, c + x2, c + x3]
        rho = np.prod([tb.rho[tuple(p % n)] for p in pts])
        val = tb.f3_evaluate(t, [(1, tuple(pts[0])), (sg[0], tuple(pts[1])), (sg[1], tuple(pts[2]))])
        assert np.isclose(val, rho * K3[sg][i2, d3], rtol=1e-9, atol=1e-14)
        checked += rho > 0 and K3[sg][i2, d3] != 0
    assert checked > 5


@pytest.mark.parametrize("ell", [2, 3])
def test_higher_levels_vanish_at_cutoff(small, ell):
    tb = tables(small, ell)
    phi = np.random.default_rng(0).standard_normal(small[0].shape)
    for level in range(2, ell + 1):
        assert np.max(np.abs(tb.force_apply(tb.T, phi, level))) < 1e-14


def test_neutral_kernel_larger_at_origin():
    spec = LatticeSpec(32, 1 / 8)
    km = KernelMultipliers(spec, 1.0)
    tb = ForceTables(CouplingParams(0.2, 2 * np.pi, 2), km, np.ones(spec.shape), 16.0)
    for t in (1.0, 4.0):
        _, ch = tb.f2_radial(t, 1)
        _, ne = tb.f2_radial(t, -1)
        assert np.all(np.isfinite(ch)) and np.all(np.isfinite(ne))
        assert abs(ne[0]) > abs(ch[0])
    assert tb.f2_value(1.0, 100.0, -1) == 0.0


def test_h_source_vanishes_without_truncation_defect(small):
    # with every pair l'+l'' > l* absent at lambda = 0
    tb = tables(small, 2, lam=0.0)
    phi = np.random.default_rng(2).standard_normal(small[0].shape)
    assert np.all(tb.h_source(0.5, phi) == 0)


def test_h_source_matches_pair_sum(small):
    tb = tables(small, 1)
    phi = np.random.default_rng(3).standard_normal(small[0].shape)
    t = 0.5
    F = tb.force_apply(t, phi, 1)
    ref = -tb.hessian_apply(t, phi, tb.kernels.convolve_gdot(F, t), 1)
    assert np.allclose(tb.h_source(t, phi), ref)
    assert np.allclose(tb.df_gdot_apply(t, phi, F), -ref)


def test_pair_covariance_and_charged_bound(km32):
    sites = [(0, 0), (3, 1), (5, 7)]
    w = pair_covariance(1.0, 16.0, (1, 1, -1), sites, km32, 2 * np.pi)
    # neutral pair at zero separation: exactly zero
    assert pair_covariance(1.0, 16.0, (1, -1), [(2, 2), (2, 2)], km32, 2 * np.pi) == 0.0
    lhs, rhs = charged_bound_check(1.0, 16.0, (1, 1, -1), sites, km32, 2 * np.pi)
    assert lhs == w and rhs < 0
    with pytest.raises(ValueError):
        charged_bound_check(1.0, 16.0, (1, -1), sites[:2], km32, 2 * np.pi)
    with pytest.raises(ValueError):
        pair_covariance(2.0, 1.0, (1,), [(0, 0)], km32, 2 * np.pi)


@given(st.lists(st.tuples(st.integers(0, 31), st.integers(0, 31)), min_size=1, max_size=5),
       st.integers(0, 2**5 - 1))
def test_pair_covariance_nonpositive(sites, signs):
    # Gdot is positive definite, so W_{t,s} <= 0 for any configuration
    spec = LatticeSpec(32, 1 / 8)
    km = KernelMultipliers(spec, 1.0)
    sigma = [1 if (signs >> i) & 1 else -1 for i in range(len(sites))]
    assert pair_covariance(0.5, 8.0, sigma, sites, km, 2 * np.pi) <= 1e-12


def test_diagnostic_norm_ignores_roundoff():
    spec = LatticeSpec(64, 1 / 8)
    km = KernelMultipliers(spec, 1.0)
    tb = ForceTables(CouplingParams(0.2, 2 * np.pi, 2), km, np.ones(spec.shape), 16.0)
    vals = [diagnostic_norm(tb, t) for t in tb.grid.knots[1:-1]]
    assert np.all(np.isfinite(vals)) and max(vals) < 1.0


def test_dumps(tmp_path, small):
    tb = tables(small, 2)
    tb.dump_f2_csv(tmp_path / "f2.csv")
    tb.dump_lambda_csv(tmp_path / "lam.csv")
    rows = (tmp_path / "f2.csv").read_text().splitlines()
    assert rows[0] == "t,r,sector,value" and len(rows) > 1
    lam = np.loadtxt(tmp_path / "lam.csv", delimiter=",", skiprows=1)
    assert np.all(np.diff(lam[:, 1]) > 0)
