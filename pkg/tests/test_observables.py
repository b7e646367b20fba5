import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgflow.fbsde import sample_w_increment
from sgflow.kernels import KernelMultipliers
from sgflow.lattice import LatticeSpec, make_rho
from sgflow.observables import (centred_bump, clipped_observable, connected_cumulants, default_gamma,
                                fit_decay, free_decay_benchmark, gaussian_tanh_covariance, mollified_diag,
                                pair_covariances, r_eps, reflect, reflection_positivity_gram,
                                singularity_stat, spearman_trend, spectral_profile, wick_trig,
                                write_cumulant_csv)


def test_wick_cos_has_unit_mean(km32):
    rng = np.random.default_rng(0)
    W = sample_w_increment(0.0, 8.0, km32, rng.standard_normal((400, 32, 32)))
    b = np.sqrt(2 * np.pi)
    per = wick_trig(W, 8.0, "cos", km32, b).values.mean(axis=(1, 2))
    assert abs(per.mean() - 1) < 5 * per.std(ddof=1) / np.sqrt(len(per))
    s = wick_trig(W, 8.0, "sin", km32, b).values.mean(axis=(1, 2))
    assert abs(s.mean()) < 5 * s.std(ddof=1) / np.sqrt(len(s))
    with pytest.raises(ValueError):
        wick_trig(W, 8.0, "tan", km32, b)


def test_free_cumulants_vanish():
    x = np.random.default_rng(1).standard_normal(20000) * 0.7
    c = connected_cumulants(x)
    assert c["k2"][0] == pytest.approx(0.49, abs=4 * c["k2"][1])
    assert abs(c["k3"][0]) < 4 * c["k3"][1] and abs(c["k4"][0]) < 4 * c["k4"][1]
    with pytest.raises(ValueError):
        connected_cumulants(x[:100])


def test_uniform_cumulant_known():
    # [DERIVED] fourth cumulant of U(-1,1) is -2/15
    x = np.random.default_rng(2).uniform(-1, 1, 50000)
    k4, se = connected_cumulants(x)["k4"]
    assert abs(k4 + 2 / 15) < 4 * se


def test_cumulant_csv(tmp_path):
    p = tmp_path / "c.csv"
    write_cumulant_csv(p, [("free", 4, 0.1, 0.01)])
    assert p.read_text().splitlines()[1].startswith("free,4,")


def test_reflection_involution():
    f = np.random.default_rng(3).standard_normal((16, 16))
    assert np.array_equal(reflect(reflect(f)), f)


@given(st.integers(0, 10_000), st.integers(1, 6))
def test_reflection_positive(seed, n):
    spec = LatticeSpec(16, 0.25)
    km = KernelMultipliers(spec, 1.0)
    fs = np.zeros((n, 16, 16))
    fs[:, 8:, :] = np.random.default_rng(seed).standard_normal((n, 8, 16))
    assert reflection_positivity_gram(fs, km) >= -1e-10


def test_reflection_rejects_lower_half(km16):
    f = np.zeros((16, 16))
    f[2, 3] = 1.0
    with pytest.raises(ValueError):
        reflection_positivity_gram(f, km16)


def test_spearman_signs():
    assert spearman_trend([1, 2, 3, 5]) == pytest.approx(1.0)
    assert spearman_trend([4, 3, 2, 1]) == pytest.approx(-1.0)


def test_gamma_branches():
    assert default_gamma(0.5) == 0.75
    # [DERIVED] delta = 0.4: interval (2 max(0.1, -0.2), 2 * 0.2) midpoint
    assert default_gamma(0.4) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        default_gamma(0.6)
    assert r_eps(0.1, 0.4) == pytest.approx(0.1**0.3)
    assert r_eps(0.1, 0.5) == pytest.approx(np.log(100.0) ** -0.75)


def test_profile_shape():
    u = np.array([0.0, 0.5, 0.75, 1.0, 1.5])
    assert np.allclose(spectral_profile(u), [1, 1, 0.5, 0, 0])


def test_mollified_diag_slope():
    spec = LatticeSpec(128, 1 / 32)
    km = KernelMultipliers(spec, 1.0)
    eps = np.array([2, 4, 8, 16]) * spec.a
    G = [mollified_diag(km, e) for e in eps]
    slope = np.polyfit(np.log(eps**-2.0), G, 1)[0]
    assert slope * 4 * np.pi == pytest.approx(1.0, abs=0.1)


def test_singularity_stat_needs_width(km16):
    rho = make_rho(km16.spec, 1.0, 0.5).values
    with pytest.raises(ValueError):
        singularity_stat(km16, km16.spec.a, 4 * np.pi, rho)
    U = singularity_stat(km16, 2 * km16.spec.a, 4 * np.pi, rho)
    assert U(np.zeros((3, 16, 16))).shape == (3,)


def test_decay_fit_exact_exponential():
    d = np.arange(2.0, 7.0)
    fit = fit_decay(d, 3 * np.exp(-1.3 * d), 1e-3 * np.exp(-1.3 * d))
    assert fit.resolved and fit.rate == pytest.approx(1.3)


def test_pair_covariance_matches_benchmark():
    spec = LatticeSpec(32, 0.25)
    km = KernelMultipliers(spec, 1.0)
    chi = centred_bump(spec, 0.5, 0.5)
    seps = [4, 6, 8]
    rng = np.random.default_rng(4)
    W = sample_w_increment(0.0, 4.0, km, rng.standard_normal((3000, 32, 32)))
    O = clipped_observable(W, chi, km)
    cov, se = pair_covariances(O, seps)
    bm = free_decay_benchmark(km, chi, seps, t=4.0)
    assert np.all(np.abs(cov - bm.covariances) < 5 * se)


def test_gaussian_tanh_small_variance():
    # tanh is linear near zero
    c = gaussian_tanh_covariance(1e-4, np.array([5e-5]))
    assert c[0] == pytest.approx(5e-5, rel=1e-3)
