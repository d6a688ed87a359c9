import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import optimize, special

from jincsplat.kernels import KernelKind, KernelTag, RadialKernel, UnsupportedKindError, eval_frequency
from jincsplat.spectral import (
    TABLE1_FREQUENCY,
    TABLE1_SPATIAL,
    ConvergenceError,
    Domain,
    EnergyReport,
    Normalization,
    SpectralProfile,
    Weighting,
    calibrate_convention,
    decay_loglog_slope,
    energy_cdf,
    energy_radius_95,
    gaussian_decay_fit,
    numerical_radial_ft,
    orderings_hold,
    sample_profile,
    wynn_epsilon,
)

from oracles import wynn

G = RadialKernel(KernelKind(KernelTag.Gaussian), 1.0)
T = RadialKernel(KernelKind(KernelTag.StudentT), 1.0)
J = RadialKernel(KernelKind(KernelTag.Jinc), 1.0)
E = RadialKernel(KernelKind(KernelTag.Exponential), 1.0)


@pytest.fixture(scope="module")
def calibration():
    return calibrate_convention()


def test_gaussian_amplitude_r95_matches_maxwell_cdf():
    cdf = lambda x: special.erf(x / math.sqrt(2)) - math.sqrt(2 / math.pi) * x * math.exp(-x * x / 2)
    ref = optimize.brentq(lambda x: cdf(x) - 0.95, 0.5, 6.0, xtol=1e-14)
    got = energy_radius_95(G, Domain.Spatial, Weighting.Amplitude)
    assert_allclose(got, ref, rtol=1e-6)
    assert_allclose(got, 2.80, atol=0.005)


def test_gaussian_amplitude_squared_r95():
    # r^2 exp(-r^2) is the Maxwell density at scale 1/sqrt(2)
    cdf = lambda x: special.erf(x) - 2 / math.sqrt(math.pi) * x * math.exp(-x * x)
    ref = optimize.brentq(lambda x: cdf(x) - 0.95, 0.5, 6.0, xtol=1e-14)
    assert_allclose(energy_radius_95(G, Domain.Spatial, Weighting.AmplitudeSquared), ref, rtol=1e-6)
    # the Gaussian's frequency profile has the same shape
    assert_allclose(energy_radius_95(G, Domain.Frequency, Weighting.AmplitudeSquared), ref, rtol=1e-6)


def test_jinc_frequency_passband_radius():
    assert_allclose(energy_radius_95(J, Domain.Frequency, Weighting.AmplitudeSquared), 0.95 ** (1 / 3), rtol=1e-6)
    assert_allclose(energy_radius_95(J, Domain.Frequency, Weighting.Amplitude), 0.95 ** (1 / 3), rtol=1e-6)


def test_r95_scales_with_sigma():
    g2 = RadialKernel(G.kind, 2.5)
    for d, factor in ((Domain.Spatial, 2.5), (Domain.Frequency, 1 / 2.5)):
        a = energy_radius_95(G, d, Weighting.Amplitude)
        b = energy_radius_95(g2, d, Weighting.Amplitude)
        assert_allclose(b, a * factor, rtol=1e-6)


def test_jinc_spatial_amplitude_squared_converges_slowly():
    # r^2 |h|^2 ~ r^-2 with oscillation: convergent, needs the interval scheme
    r95 = energy_radius_95(J, Domain.Spatial, Weighting.AmplitudeSquared)
    assert 15.0 < r95 < 25.0


def test_jinc_spatial_amplitude_diverges():
    # r^2 |h| ~ r^0: no finite total
    with pytest.raises(ConvergenceError) as info:
        energy_radius_95(J, Domain.Spatial, Weighting.Amplitude)
    assert info.value.diagnostics


def test_energy_cdf_monotone():
    for k in (G, T, J):
        r = np.linspace(0.0, 15.0, 120)
        c = energy_cdf(k, Domain.Spatial, Weighting.AmplitudeSquared, r)
        assert np.all(np.diff(c) >= -1e-12)
        assert c[0] == 0.0


def test_orderings_hold_under_every_candidate(calibration):
    chosen = orderings_hold(calibration.values)
    assert chosen == (True, True)


def test_calibration_reports_residuals(calibration):
    assert calibration.weighting == Weighting.Amplitude
    assert calibration.normalization == Normalization.Sigma
    assert set(calibration.residuals) == {(d, t) for d in Domain for t in TABLE1_SPATIAL}
    g = calibration.values[(Domain.Spatial, KernelTag.Gaussian)]
    assert abs(g / TABLE1_SPATIAL[KernelTag.Gaussian] - 1) <= 0.05
    assert len(calibration.candidates) == 6
    assert not calibration.meets(0.05)


def test_frequency_table_values_reference():
    assert TABLE1_FREQUENCY[KernelTag.Jinc] == 1.90


def test_numerical_ft_gaussian_1d():
    f = np.linspace(0.0, 5.0, 21)
    prof = numerical_radial_ft(G, 1, f)
    expected = math.sqrt(2 * math.pi) * np.exp(-0.5 * f * f)
    assert_allclose(prof.magnitudes, expected, rtol=1e-6)


def test_numerical_ft_exponential_1d():
    f = np.linspace(0.0, 10.0, 21)
    prof = numerical_radial_ft(E, 1, f)
    assert_allclose(prof.magnitudes, 2.0 / (1.0 + f * f), rtol=1e-6)
    # the cycles convention of the same pair: 2 / (1 + (2 pi nu)^2) at nu = f / (2 pi)
    nu = f / (2 * math.pi)
    assert_allclose(prof.magnitudes, 2.0 / (1.0 + (2 * math.pi * nu) ** 2), rtol=1e-6)


def test_numerical_ft_student_3d_round_trip():
    f = np.linspace(0.2, 5.0, 9)
    prof = numerical_radial_ft(T, 3, np.concatenate([[0.0], f]))
    norm = prof.magnitudes / prof.magnitudes[0]
    assert_allclose(norm[1:], eval_frequency(T, f), rtol=1e-3)


@pytest.mark.slow
def test_numerical_ft_jinc_3d_passband():
    f = np.array([0.0, 0.25, 0.5, 0.75, 0.9, 1.5])
    prof = numerical_radial_ft(J, 3, f)
    dc = 4 * math.pi * 3  # 4 pi int r^2 3 j1(r)/r ... normalised by the passband value
    vals = prof.magnitudes / prof.magnitudes[0]
    assert_allclose(vals[:-1], 1.0, atol=1e-3)
    assert abs(vals[-1]) <= 1e-2
    assert dc > 0


def test_numerical_ft_rejects_bad_grid():
    with pytest.raises(ValueError):
        numerical_radial_ft(G, 2, [0.0, 1.0])
    with pytest.raises(ValueError):
        numerical_radial_ft(G, 1, [1.0, 0.5])
    with pytest.raises(UnsupportedKindError):
        numerical_radial_ft(RadialKernel(KernelKind(KernelTag.Delta)), 1, [0.0])


def test_wynn_matches_independent_implementation():
    # alternating harmonic series -> ln 2
    s = np.cumsum([(-1) ** k / (k + 1) for k in range(20)])
    est, err = wynn_epsilon(s)
    assert_allclose(est, math.log(2), rtol=1e-10)
    assert_allclose(est, wynn(s), rtol=1e-9)
    assert err >= 0


def test_gaussian_decay_is_quadratic():
    slope, r2 = gaussian_decay_fit(G)
    assert r2 >= 0.999
    assert_allclose(slope, -0.5, rtol=1e-6)


def test_heavy_tail_slopes():
    # (1 + r^2)^-2 ~ r^-4; 3 j1(r)/r has envelope ~ 3 r^-2
    assert_allclose(decay_loglog_slope(T), -4.0, atol=0.1)
    assert_allclose(decay_loglog_slope(J, envelope=True), -2.0, atol=0.1)


def test_profile_validation():
    with pytest.raises(ValueError):
        SpectralProfile(Domain.Spatial, np.array([0.0, 0.0]), np.array([1.0, 1.0]), G)
    with pytest.raises(ValueError):
        SpectralProfile(Domain.Spatial, np.array([0.0, 1.0]), np.array([1.0, np.nan]), G)
    with pytest.raises(ValueError):
        EnergyReport(G.kind, 0.0, 1.0, Weighting.Amplitude)
    p = sample_profile(G, Domain.Frequency, [0.0, 1.0])
    assert_allclose(p.magnitudes, [1.0, math.exp(-0.5)])
