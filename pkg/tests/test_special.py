import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose
from scipy import special as sp

from jincsplat import special
from jincsplat.special import (
    SMALL_ALPHA,
    SPH_J1_SERIES_MAX,
    FnAccuracyReport,
    accuracy_reports,
    bessel_j0,
    bessel_j1,
    cyl_bessel_j,
    erf,
    jinc2,
    jinc2_deriv,
    jinc2_dsq,
    mod_bessel_k_half,
    sph_bessel_j1,
    sph_j1_over_x,
    switchover_jumps,
)

from oracles import bessel_j

J1_ZEROS = (3.8317059702075125, 7.015586669815619, 10.173468135062722)


def test_bessel_origin_values():
    assert cyl_bessel_j(0, 0.0) == 1.0
    assert cyl_bessel_j(1, 0.0) == 0.0


@pytest.mark.parametrize("order,x,expected", [(1, 2.0, 0.5767248078), (0, 5.0, -0.1775967713)])
def test_bessel_examples_match_quadrature(order, x, expected):
    ref = bessel_j(order, x)
    assert_allclose(ref, expected, atol=1e-10)
    assert_allclose(cyl_bessel_j(order, x), ref, rtol=1e-12)


def test_bessel_against_mpmath_on_grid():
    x = np.linspace(0.013, 100.0, 397)
    for order, fn in ((0, bessel_j0), (1, bessel_j1)):
        ref = np.array([float(mpmath.besselj(order, xi)) for xi in x])
        rel = np.abs(fn(x) - ref) / np.abs(ref)
        assert rel.max() <= 1e-10, (order, rel.max())


def test_j1_zeros():
    assert_allclose(bessel_j1(np.array(J1_ZEROS)), 0.0, atol=1e-15)


def test_cyl_bessel_domain():
    with pytest.raises(ValueError):
        cyl_bessel_j(0, -1.0)
    with pytest.raises(ValueError):
        cyl_bessel_j(2, 1.0)


def test_sph_j1_examples():
    assert sph_bessel_j1(0.0) == 0.0
    assert_allclose(sph_j1_over_x(0.0), 1.0 / 3.0, rtol=0, atol=0)
    assert_allclose(sph_bessel_j1(math.pi), 1.0 / math.pi, rtol=1e-14)
    with mpmath.workdps(40):
        x = mpmath.mpf(2)
        ref = float(mpmath.sin(x) / x**2 - mpmath.cos(x) / x)
    assert_allclose(sph_bessel_j1(2.0), ref, atol=1e-12)


def test_sph_j1_nan_passthrough():
    assert math.isnan(sph_bessel_j1(float("nan")))


def test_sph_j1_closed_form_above_switchover():
    x = np.linspace(0.5, 200.0, 2001)
    closed = np.sin(x) / x**2 - np.cos(x) / x
    scale = np.maximum(np.abs(closed), 1e-3)
    assert np.max(np.abs(sph_bessel_j1(x) - closed) / scale) <= 1e-11
    assert_allclose(sph_bessel_j1(x), sp.spherical_jn(1, x), rtol=1e-9, atol=1e-15)


def test_switchover_continuity():
    jumps = switchover_jumps()
    assert max(jumps.values()) <= 1e-12
    left = sph_bessel_j1(np.nextafter(SPH_J1_SERIES_MAX, 0))
    right = sph_bessel_j1(SPH_J1_SERIES_MAX)
    assert abs(left - right) <= 1e-12


def test_j1_derivative_identity():
    # J1'(x) = J0(x) - J1(x)/x
    x = np.linspace(0.1, 50.0, 500)
    h = 1e-5
    fd = (bessel_j1(x + h) - bessel_j1(x - h)) / (2 * h)
    assert_allclose(fd, bessel_j0(x) - bessel_j1(x) / x, atol=1e-6)


def test_jinc2_values_and_derivatives():
    assert jinc2(0.0) == 1.0
    assert jinc2_deriv(0.0) == 0.0
    assert_allclose(jinc2_dsq(0.0), -0.125, rtol=1e-15)
    a = np.concatenate([np.linspace(0.01, 0.49, 25), np.linspace(0.51, 40.0, 200)])
    assert_allclose(jinc2(a), 2 * sp.j1(a) / a, rtol=1e-12, atol=1e-15)
    h = 1e-6
    fd = (jinc2(a + h) - jinc2(a - h)) / (2 * h)
    assert_allclose(jinc2_deriv(a), fd, rtol=1e-6, atol=1e-9)
    assert_allclose(jinc2_dsq(a), jinc2_deriv(a) / (2 * a), rtol=1e-12, atol=1e-16)


def test_small_alpha_branch_is_continuous():
    for fn in (jinc2, jinc2_deriv, jinc2_dsq):
        lo = fn(np.nextafter(SMALL_ALPHA, 0))
        hi = fn(SMALL_ALPHA)
        assert abs(lo - hi) <= 1e-14


@given(st.floats(0.0, 200.0))
def test_bessel_energy_bound(x):
    # from J0^2 + 2 sum J_n^2 = 1
    assert bessel_j0(x) ** 2 + 2 * bessel_j1(x) ** 2 <= 1.0 + 1e-14


@given(st.floats(0.0, 100.0))
def test_pure_and_deterministic(x):
    assert bessel_j1(x) == bessel_j1(x)
    assert jinc2(x) == jinc2(x)


def test_mod_bessel_k_half():
    assert_allclose(mod_bessel_k_half(1.0), math.sqrt(math.pi / 2) * math.exp(-1), rtol=1e-15)
    assert_allclose(mod_bessel_k_half(0.5), math.sqrt(math.pi) * math.exp(-0.5), rtol=1e-15)
    assert_allclose(mod_bessel_k_half(1.0), 0.4610685, atol=1e-7)
    assert_allclose(mod_bessel_k_half(0.5), 1.0750477, atol=1e-7)
    x = np.linspace(0.1, 50, 300)
    v = mod_bessel_k_half(x)
    assert np.all(np.diff(v) < 0)
    assert_allclose(v, sp.kv(0.5, x), rtol=1e-13)
    with pytest.raises(ValueError):
        mod_bessel_k_half(0.0)


def test_erf():
    assert erf(0.0) == 0.0
    assert erf(math.inf) == 1.0
    assert_allclose(erf(1.0), 0.8427007929, atol=1e-10)
    x = np.linspace(-6, 6, 241)
    assert np.max(np.abs(erf(x) - np.array([float(mpmath.erf(v)) for v in x]))) <= 1e-12


def test_accuracy_reports_meet_bounds():
    reports = {r.function_name: r for r in accuracy_reports()}
    assert reports["bessel_j0"].max_rel_err <= 1e-10
    assert reports["bessel_j1"].max_rel_err <= 1e-10
    assert reports["bessel_j0"].domain == (0.0, 100.0)


def test_report_invariants():
    with pytest.raises(ValueError):
        FnAccuracyReport("f", 0.0, -1.0, (0.0, 1.0))
    with pytest.raises(ValueError):
        FnAccuracyReport("f", 0.0, 0.0, (1.0, 1.0))


def test_trapezoid_oracle_is_spectral():
    assert_allclose(special.bessel_j_trapezoid(1, 2.0), sp.j1(2.0), rtol=1e-14)
