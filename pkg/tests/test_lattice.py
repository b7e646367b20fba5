import numpy as np
import pytest
from hypothesis import given, strategies as st

from sgflow.lattice import (LatticeSpec, besov_block_norms, from_spectral, hermitian_defect,
                            lp_block_multipliers, lp_blocks, make_rho, plateau_bump, read_sgf1,
                            steiner_diameter, to_spectral, weighted_lp_norm, write_sgf1)

from conftest import random_field


@pytest.mark.parametrize("N,a", [(3, 0.1), (5, 0.1), (2, 0.1), (8, 0.0), (8, -1.0)])
def test_spec_rejects_bad_parameters(N, a):
    with pytest.raises(ValueError):
        LatticeSpec(N, a)


def test_spec_geometry(spec16):
    assert spec16.L == 4.0 and spec16.area == 0.0625
    assert spec16.radius[0, 0] == 0.0
    # minimal image: farthest site is the antipode
    assert np.isclose(spec16.radius.max(), np.hypot(2.0, 2.0))
    assert spec16.centre_radius[8, 8] == 0.0


@given(st.integers(0, 10_000))
def test_spectral_roundtrip(seed):
    spec = LatticeSpec(8, 0.5)
    f = random_field(seed, spec.shape)
    g = to_spectral(f, spec)
    assert hermitian_defect(g) < 1e-12
    assert np.allclose(from_spectral(g, spec), f, atol=1e-13)


def test_hermitian_defect_detects_complex_field():
    f = random_field(1, (8, 8)) + 1j * random_field(2, (8, 8))
    assert hermitian_defect(np.fft.fft2(f)) > 1e-3


def test_shape_mismatch(spec16):
    with pytest.raises(ValueError):
        to_spectral(np.zeros((8, 8)), spec16)


def test_rho_profile(spec16):
    rho = make_rho(spec16, 1.0, 0.5)
    r = spec16.centre_radius
    assert np.all(rho.values[r <= 1.0] == 1.0)
    assert np.all(rho.values[r >= 1.5] == 0.0)
    assert np.all((rho.values >= 0) & (rho.values <= 1))
    assert rho.outer_radius == 1.5
    with pytest.raises(ValueError):
        make_rho(spec16, 1.0, 0.0)
    assert np.array_equal(plateau_bump(spec16, 1.0, 0.5), rho.values)


@given(st.integers(0, 10_000))
def test_lp_blocks_partition_of_unity(seed):
    spec = LatticeSpec(16, 0.125)
    total = sum(m for _, m in lp_block_multipliers(spec))
    assert np.allclose(total, 1.0, atol=1e-14)
    f = random_field(seed, spec.shape)
    assert np.allclose(sum(b for _, b in lp_blocks(f, spec)), f, atol=1e-12)


def test_besov_norms_are_nonnegative(spec16):
    f = random_field(3, spec16.shape)
    norms = besov_block_norms(f, spec16)
    assert [i for i, _ in norms][0] == -1
    assert all(v >= 0 for _, v in norms)


def test_weighted_norm_limits(spec16):
    f = np.ones(spec16.shape)
    assert np.isclose(weighted_lp_norm(f, spec16, np.inf, 3.0), 1.0)
    assert weighted_lp_norm(f, spec16, 2.0, 3.0) < weighted_lp_norm(f, spec16, 2.0, 0.0)
    assert np.isclose(weighted_lp_norm(f, spec16, 1.0, 0.0), spec16.L**2)


def test_steiner_known_values():
    assert steiner_diameter([(0, 0), (3, 4)]) == 5.0
    # equilateral triangle of side 1: sqrt(3)
    tri = [(0, 0), (1, 0), (0.5, np.sqrt(3) / 2)]
    assert np.isclose(steiner_diameter(tri), np.sqrt(3))
    # obtuse (> 120 deg) triangle: sum of the two short sides
    assert np.isclose(steiner_diameter([(0, 0), (1, 0), (2, 0.01)]),
                      1 + np.hypot(1, 0.01))
    with pytest.raises(ValueError):
        steiner_diameter([(0, 0)])
    with pytest.raises(NotImplementedError):
        steiner_diameter([(0, 0), (1, 0), (0, 1), (1, 1)])


pt = st.tuples(st.floats(-5, 5), st.floats(-5, 5))


@given(pt, pt, pt)
def test_steiner_bounds(p, q, r):
    d = steiner_diameter([p, q, r])
    sides = sorted(np.linalg.norm(np.subtract(u, v)) for u, v in [(p, q), (q, r), (p, r)])
    # between the longest side and the minimum spanning tree
    assert sides[2] - 1e-9 <= d <= sides[0] + sides[1] + 1e-9


def test_sgf1_roundtrip(tmp_path, spec16):
    f = random_field(4, spec16.shape)
    p = tmp_path / "snap.sgf1"
    write_sgf1(p, f, 0.25, 1.0, 7)
    g, a, m, idx = read_sgf1(p)
    assert np.array_equal(f, g) and (a, m, idx) == (0.25, 1.0, 7)
    raw = p.read_bytes()
    assert raw[:4] == b"SGF1" and len(raw) == 4 + 4 + 8 + 8 + 8 + 16 * 16 * 8
    p.write_bytes(raw[:-8])
    with pytest.raises(ValueError):
        read_sgf1(p)
    p.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError):
        read_sgf1(p)
    with pytest.raises(ValueError):
        write_sgf1(p, np.zeros((2, 3)), 1.0, 1.0)
