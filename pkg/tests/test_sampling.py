import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgflow.fbsde import ZeroDimModel
from sgflow.flow import CouplingParams, ForceTables
from sgflow.lattice import LatticeSpec, make_rho
from sgflow.sampling import (EstimatorResult, GibbsChainState, LawSample, append_results_csv,
                             free_field_sample, free_mode_check, gibbs_oracle_sample, girsanov_estimate,
                             holm_adjust, integrated_autocorr, terminal_law_compare, weighted_estimate)


def test_free_modes_match_covariance(km16):
    res = free_mode_check(km16, 4.0, 4000, seed=0, knots=[0.0, 1.0, 2.0, 4.0])
    assert res["pass"] and res["n_skipped"] < km16.w.size // 4


def test_free_sample_is_deterministic(km16):
    a = free_field_sample(km16, [0.0, 1.0, 4.0], 3, seed=11)
    b = free_field_sample(km16, [0.0, 1.0, 4.0], 3, seed=11)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, free_field_sample(km16, [0.0, 1.0, 4.0], 3, seed=12))


def test_self_normalised_weights():
    rng = np.random.default_rng(0)
    v = rng.standard_normal(1000)
    lw = rng.standard_normal(1000)
    a = weighted_estimate(v, lw)
    b = weighted_estimate(v, lw + 50.0)
    assert a.mean == pytest.approx(b.mean) and a.stderr == pytest.approx(b.stderr)
    flat = weighted_estimate(v, np.zeros(1000))
    assert flat.mean == pytest.approx(v.mean()) and flat.ess == pytest.approx(1000)
    skewed = weighted_estimate(v, np.r_[100.0, np.zeros(999)])
    assert skewed.flagged


def test_method_tag_checked():
    with pytest.raises(ValueError):
        EstimatorResult(0.0, 1.0, 1.0, "magic")


def test_preconditioner_positive():
    with pytest.raises(ValueError):
        GibbsChainState(np.zeros(1), np.zeros(1), 1.0, np.array([1.0, 0.0]))


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12))
def test_holm_bounds(p):
    p = np.array(p)
    adj = holm_adjust(p)
    assert np.all(adj >= p - 1e-15) and np.all(adj <= 1)
    order = np.argsort(p)
    assert np.all(np.diff(adj[order]) >= -1e-15)


def test_iat_of_ar1():
    rng = np.random.default_rng(1)
    phi, n = 0.8, 200000
    e = rng.standard_normal(n)
    x = np.empty(n)
    x[0] = e[0]
    for i in range(1, n):
        x[i] = phi * x[i - 1] + e[i]
    assert integrated_autocorr(x) == pytest.approx((1 + phi) / (1 - phi), rel=0.1)
    assert integrated_autocorr(rng.standard_normal(5000)) == pytest.approx(1.0, abs=0.2)


def test_law_compare_detects_shift():
    rng = np.random.default_rng(2)
    a = LawSample(rng.standard_normal((4000, 1, 1)), "fbsde")
    b = LawSample(rng.standard_normal((4000, 1, 1)) + 0.3, "gibbs")
    obs = {"mean": lambda X: X[:, 0, 0]}
    assert not terminal_law_compare(a, b, obs)["pass"]
    assert terminal_law_compare(a, b, obs, systematic={"mean": 0.4})["pass"]
    c = LawSample(rng.standard_normal((4000, 1, 1)), "gibbs")
    assert terminal_law_compare(a, c, obs)["pass"]


def _exact_cos(zm):
    # E cos(beta phi) under exp(-V) N(0, g(T)) by Gauss-Hermite
    x, w = np.polynomial.hermite.hermgauss(200)
    phi = np.sqrt(2 * zm.g(zm.T)) * x
    e = w * np.exp(-zm.V(phi))
    return np.sum(e * np.cos(zm.params.beta * phi)) / np.sum(e)


def test_zero_dim_gibbs_and_girsanov():
    zm = ZeroDimModel(LatticeSpec(32, 1 / 8), 1.0, CouplingParams(0.5, 2 * np.pi, 1), 16.0)
    exact = _exact_cos(zm)
    cos = lambda X: np.cos(zm.params.beta * X[..., 0, 0])
    res = gibbs_oracle_sample(zm.tables, 1000, seed=3, n_chains=8)
    gb = weighted_estimate(cos(res.flat()), groups=res.groups())
    gs = girsanov_estimate(zm.tables, cos, 8000, seed=4)
    assert abs(gb.mean - exact) < 4 * gb.stderr
    assert abs(gs.mean - exact) < 4 * gs.stderr


def test_gibbs_free_acceptance_is_one(km16):
    rho = make_rho(km16.spec, 1.0, 0.5).values
    tb = ForceTables(CouplingParams(0.0, 2 * np.pi, 1), km16, rho, 4.0)
    res = gibbs_oracle_sample(tb, 20, seed=0, n_chains=4, pilot_steps=50)
    assert res.acceptance == 1.0


def test_results_csv(tmp_path):
    p = tmp_path / "r.csv"
    append_results_csv(p, "abc", 7, {"x": EstimatorResult(0.1, 0.01, 100.0, "gibbs")})
    append_results_csv(p, "abc", 7, {"y": EstimatorResult(0.2, 0.02, 50.0, "free")})
    lines = p.read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("run_id")
