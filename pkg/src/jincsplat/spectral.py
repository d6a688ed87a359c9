"""Energy concentration, decay rates and numerical radial Fourier transforms.

The energy of a radial profile h inside radius R is

    E(R) = int_0^R r^2 |h(r)|^p dr,   p = 2 (AmplitudeSquared) or 1 (Amplitude),

and r95 solves E(r95) = 0.95 E(inf).  Profiles with slowly decaying,
oscillating tails (Jinc) are integrated interval by interval on a grid
aligned with their oscillation; the doubling-chunk partial totals are then
extrapolated with Wynn's epsilon algorithm.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate, optimize

from .kernels import (
    KernelKind,
    KernelTag,
    RadialKernel,
    UnsupportedKindError,
    eval_frequency,
    eval_spatial,
    fwhm,
)

__all__ = [
    "Domain",
    "Weighting",
    "Normalization",
    "ConvergenceError",
    "SpectralProfile",
    "EnergyReport",
    "CalibrationResult",
    "TABLE1_SPATIAL",
    "TABLE1_FREQUENCY",
    "wynn_epsilon",
    "total_energy",
    "energy_radius",
    "energy_radius_95",
    "energy_cdf",
    "energy_report",
    "calibrate_convention",
    "orderings_hold",
    "normalized_sigma",
    "numerical_radial_ft",
    "sample_profile",
    "decay_loglog_slope",
    "gaussian_decay_fit",
]

TABLE1_SPATIAL = {KernelTag.Gaussian: 2.77, KernelTag.StudentT: 3.68, KernelTag.Jinc: 5.59}
TABLE1_FREQUENCY = {KernelTag.Gaussian: 2.77, KernelTag.StudentT: 2.99, KernelTag.Jinc: 1.90}

MAX_INTERVALS = 1_000_000


class Domain(enum.Enum):
    Spatial = "spatial"
    Frequency = "frequency"


class Weighting(enum.Enum):
    AmplitudeSquared = 2
    Amplitude = 1


class Normalization(enum.Enum):
    Sigma = "sigma=1"
    UnitFWHM = "unit-fwhm"
    UnitFrequencyR95 = "unit-frequency-r95"


class ConvergenceError(RuntimeError):
    """A tail integral or series did not converge; ``diagnostics`` says why."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class SpectralProfile:
    domain: Domain
    radii: np.ndarray
    magnitudes: np.ndarray
    kernel: RadialKernel

    def __post_init__(self):
        r = np.asarray(self.radii, dtype=np.float64)
        m = np.asarray(self.magnitudes, dtype=np.float64)
        if r.ndim != 1 or r.shape != m.shape:
            raise ValueError("radii and magnitudes must be 1D arrays of equal length")
        if r.size and (r[0] < 0 or np.any(np.diff(r) <= 0)):
            raise ValueError("radii must be strictly ascending and start >= 0")
        if not np.all(np.isfinite(m)):
            raise ValueError("magnitudes must be finite")
        object.__setattr__(self, "radii", r)
        object.__setattr__(self, "magnitudes", m)


@dataclass(frozen=True)
class EnergyReport:
    kernel: KernelKind
    spatial_r95: float
    frequency_r95: float
    weighting: Weighting

    def __post_init__(self):
        if not (self.spatial_r95 > 0 and self.frequency_r95 > 0):
            raise ValueError("r95 values must be > 0")


@dataclass
class CalibrationResult:
    weighting: Weighting
    normalization: Normalization
    values: dict  # (Domain, KernelTag) -> r95 under the chosen convention
    residuals: dict  # (Domain, KernelTag) -> relative deviation from Table 1
    max_residual: float
    candidates: list = field(default_factory=list)  # (weighting, norm, max_residual, values)

    def meets(self, tol: float = 0.05) -> bool:
        return self.max_residual <= tol


# ---------------------------------------------------------------------------
# Series acceleration


def wynn_epsilon(seq) -> tuple[float, float]:
    """Wynn's epsilon extrapolation of a sequence of partial sums.

    Returns (estimate, error estimate).  The error estimate is the change
    between the last two even-column entries, or the last step of the raw
    sequence when the table cannot be built.
    """
    s = [float(v) for v in seq]
    if len(s) < 3:
        err = abs(s[-1] - s[-2]) if len(s) == 2 else math.inf
        return s[-1], err
    prev = [0.0] * (len(s) + 1)
    cur = list(s)
    estimates = [s[-1]]
    col = 0
    while len(cur) > 1:
        nxt = []
        for i in range(len(cur) - 1):
            d = cur[i + 1] - cur[i]
            if d == 0.0 or not math.isfinite(d):
                nxt = None
                break
            nxt.append(prev[i + 1] + 1.0 / d)
        if nxt is None:
            break
        prev, cur = cur, nxt
        col += 1
        if col % 2 == 0 and math.isfinite(cur[-1]):
            estimates.append(cur[-1])
    if len(estimates) == 1:
        return s[-1], abs(s[-1] - s[-2])
    return estimates[-1], abs(estimates[-1] - estimates[-2])


# ---------------------------------------------------------------------------
# Profiles and integration grids


def _profile(k: RadialKernel, domain: Domain):
    if k.kind.tag == KernelTag.Delta:
        raise UnsupportedKindError("Delta has no finite energy profile")
    if domain == Domain.Spatial:
        return lambda r: float(eval_spatial(k, r))
    return lambda f: float(eval_frequency(k, f))


def _grid(k: RadialKernel, domain: Domain) -> tuple[float, list[float]]:
    """Interval width and extra breakpoints for the chosen profile."""
    kind = k.kind
    if domain == Domain.Spatial:
        if kind.tag == KernelTag.Jinc:
            return math.pi * k.sigma, []
        if kind.is_modulated:
            return math.pi * k.sigma / kind.f0, []
        return k.sigma, []
    if kind.tag == KernelTag.Jinc:
        return 0.25 / k.sigma, [1.0 / k.sigma]
    if kind.is_modulated:
        return 0.5 / k.sigma, [kind.f0 / k.sigma]
    return 1.0 / k.sigma, []


def _quad(fn, a: float, b: float) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        v, _ = integrate.quad(fn, a, b, epsabs=0.0, epsrel=1e-12, limit=200)
    return v


def _integrand(k: RadialKernel, domain: Domain, weighting: Weighting):
    h = _profile(k, domain)
    p = weighting.value
    if p == 2:
        return lambda r: r * r * h(r) ** 2
    return lambda r: r * r * abs(h(r))


@dataclass
class _EnergyTable:
    edges: list  # interval edges, edges[0] = 0
    cumulative: list  # E(edges[i])
    total: float


def _energy_table(k: RadialKernel, domain: Domain, weighting: Weighting) -> _EnergyTable:
    fn = _integrand(k, domain, weighting)
    width, breaks = _grid(k, domain)
    edges = [0.0]
    cum = [0.0]
    chunk_totals = []  # E at the end of each doubling chunk
    chunk_gain = []
    n_int = 0
    chunk = 0
    estimate = math.nan
    while True:
        count = 2**chunk if chunk > 0 else 4
        start_e = cum[-1]
        for _ in range(count):
            a = edges[-1]
            b = a + width
            pts = [a] + [x for x in breaks if a < x < b] + [b]
            e = cum[-1]
            for lo, hi in zip(pts[:-1], pts[1:]):
                e += _quad(fn, lo, hi)
            edges.append(b)
            cum.append(e)
        n_int += count
        chunk += 1
        chunk_totals.append(cum[-1])
        chunk_gain.append(cum[-1] - start_e)
        total = cum[-1]
        if total > 0 and chunk_gain[-1] <= 1e-15 * total:
            return _EnergyTable(edges, cum, total)
        if len(chunk_gain) >= 6 and all(
            chunk_gain[-i] >= 0.98 * chunk_gain[-i - 1] for i in (1, 2, 3)
        ):
            raise ConvergenceError(
                "energy integral diverges",
                {"kernel": k, "domain": domain.value, "chunk_gain": chunk_gain[-4:]},
            )
        if len(chunk_totals) >= 5:
            new, err = wynn_epsilon(chunk_totals[-8:])
            if err <= 1e-10 * abs(new) and abs(new - estimate) <= 1e-10 * abs(new):
                return _EnergyTable(edges, cum, new)
            estimate = new
        if n_int >= MAX_INTERVALS:
            raise ConvergenceError(
                "tail estimate did not converge",
                {"kernel": k, "domain": domain.value, "intervals": n_int, "last": estimate},
            )


def total_energy(k: RadialKernel, domain: Domain, weighting: Weighting) -> float:
    return _energy_table(k, domain, weighting).total


def energy_radius(k: RadialKernel, domain: Domain, weighting: Weighting, fraction: float = 0.95) -> float:
    """Radius containing ``fraction`` of the total weighted energy."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must lie in (0, 1)")
    tab = _energy_table(k, domain, weighting)
    target = fraction * tab.total
    i = int(np.searchsorted(tab.cumulative, target))
    if i >= len(tab.cumulative):
        raise ConvergenceError("target energy lies in the extrapolated tail", {"kernel": k})
    fn = _integrand(k, domain, weighting)
    a = tab.edges[i - 1]
    base = tab.cumulative[i - 1]
    b = tab.edges[i]
    return optimize.brentq(
        lambda r: base + _quad(fn, a, r) - target, a, b, xtol=1e-12 * b, rtol=1e-14
    )


def energy_radius_95(k: RadialKernel, domain: Domain, weighting: Weighting) -> float:
    return energy_radius(k, domain, weighting, 0.95)


def energy_cdf(k: RadialKernel, domain: Domain, weighting: Weighting, radii) -> np.ndarray:
    """E(r)/E(inf) on an ascending grid of radii."""
    radii = np.asarray(radii, dtype=np.float64)
    if np.any(np.diff(radii) < 0) or np.any(radii < 0):
        raise ValueError("radii must be ascending and >= 0")
    tab = _energy_table(k, domain, weighting)
    fn = _integrand(k, domain, weighting)
    out = np.empty_like(radii)
    e = 0.0
    prev = 0.0
    for j, r in enumerate(radii):
        e += _quad(fn, prev, r) if r > prev else 0.0
        prev = r
        out[j] = e / tab.total
    return out


def energy_report(kind: KernelKind, weighting: Weighting, sigma: float = 1.0) -> EnergyReport:
    k = RadialKernel(kind, sigma)
    return EnergyReport(
        kind,
        energy_radius_95(k, Domain.Spatial, weighting),
        energy_radius_95(k, Domain.Frequency, weighting),
        weighting,
    )


# ---------------------------------------------------------------------------
# Calibration against the published table


def _sigma_for(kind: KernelKind, norm: Normalization, weighting: Weighting, freq_r95_unit: float) -> float:
    # freq_r95_unit is the frequency r95 at sigma = 1 (used by UnitFrequencyR95)
    if norm == Normalization.Sigma:
        return 1.0
    if norm == Normalization.UnitFWHM:
        return 1.0 / fwhm(RadialKernel(kind, 1.0))
    # frequency r95 scales as 1/sigma; pick sigma so that it equals 1
    return freq_r95_unit


def _score(residuals: dict) -> tuple:
    anchor_ok = residuals[(Domain.Spatial, KernelTag.Gaussian)] <= 0.05
    divergent = sum(1 for v in residuals.values() if not math.isfinite(v))
    finite = [v for v in residuals.values() if math.isfinite(v)]
    return (not anchor_ok, divergent, max(finite) if finite else math.inf)


def calibrate_convention() -> CalibrationResult:
    """Search weighting x scale normalisation for the best match to Table 1.

    Every r95 scales linearly with sigma in the spatial domain and with
    1/sigma in the frequency domain, so each kernel is integrated once at
    sigma = 1 per weighting and rescaled per normalisation.  A divergent
    energy integral gives r95 = inf.

    Candidates are ranked by: Gaussian spatial anchor within 5% of 2.77
    first, then fewest divergent entries, then the largest finite relative
    residual.
    """
    tags = (KernelTag.Gaussian, KernelTag.StudentT, KernelTag.Jinc)
    unit = {}
    for w in Weighting:
        for t in tags:
            k = RadialKernel(KernelKind(t), 1.0)
            for d in Domain:
                try:
                    unit[(w, d, t)] = energy_radius_95(k, d, w)
                except ConvergenceError:
                    unit[(w, d, t)] = math.inf
    best = None
    best_score = None
    candidates = []
    for w in Weighting:
        for norm in Normalization:
            values = {}
            residuals = {}
            for t in tags:
                kind = KernelKind(t)
                fr = unit[(w, Domain.Frequency, t)]
                sigma = _sigma_for(kind, norm, w, fr)
                values[(Domain.Spatial, t)] = unit[(w, Domain.Spatial, t)] * sigma
                values[(Domain.Frequency, t)] = fr / sigma
                residuals[(Domain.Spatial, t)] = abs(values[(Domain.Spatial, t)] / TABLE1_SPATIAL[t] - 1.0)
                residuals[(Domain.Frequency, t)] = abs(
                    values[(Domain.Frequency, t)] / TABLE1_FREQUENCY[t] - 1.0
                )
            score = _score(residuals)
            worst = max(residuals.values())
            candidates.append((w, norm, worst, values))
            if best is None or score < best_score:
                best = CalibrationResult(w, norm, values, residuals, worst)
                best_score = score
    best.candidates = candidates
    return best


def orderings_hold(values: dict) -> tuple[bool, bool]:
    """(spatial G < T < J, frequency J < G < T) for a table of r95 values."""
    g, t, j = KernelTag.Gaussian, KernelTag.StudentT, KernelTag.Jinc
    sp = values[(Domain.Spatial, g)] < values[(Domain.Spatial, t)] < values[(Domain.Spatial, j)]
    fr = values[(Domain.Frequency, j)] < values[(Domain.Frequency, g)] < values[(Domain.Frequency, t)]
    return sp, fr


def normalized_sigma(kind: KernelKind, norm: Normalization, weighting: Weighting) -> float:
    """Scale that puts ``kind`` under normalisation ``norm``."""
    fr = 1.0
    if norm == Normalization.UnitFrequencyR95:
        fr = energy_radius_95(RadialKernel(kind, 1.0), Domain.Frequency, weighting)
    return _sigma_for(kind, norm, weighting, fr)


# ---------------------------------------------------------------------------
# Numerical radial Fourier transform


def numerical_radial_ft(
    k: RadialKernel,
    dimension: int,
    f_grid,
    max_intervals: int = 4000,
    rtol: float = 1e-9,
) -> SpectralProfile:
    """Radial Fourier transform of ``eval_spatial`` at angular wavenumbers f.

    1D: 2 int_0^inf h(r) cos(f r) dr.
    3D: 4 pi int_0^inf h(r) r^2 sin(f r)/(f r) dr.

    The half-line is cut into intervals of length pi/(f + w_h), where w_h is
    the profile's own oscillation wavenumber, so that the integrand changes
    sign about once per interval.  Partial sums are extrapolated with Wynn's
    epsilon algorithm; unconverged sums raise ConvergenceError.
    """
    if dimension not in (1, 3):
        raise ValueError("dimension must be 1 or 3")
    f_grid = np.asarray(f_grid, dtype=np.float64)
    if f_grid.ndim != 1 or np.any(f_grid < 0) or np.any(np.diff(f_grid) <= 0):
        raise ValueError("f_grid must be ascending and >= 0")
    if k.kind.tag == KernelTag.Delta:
        raise UnsupportedKindError("Delta has no integrable profile")
    kind = k.kind
    w_h = 0.0
    if kind.tag == KernelTag.Jinc:
        w_h = 1.0 / k.sigma
    elif kind.is_modulated:
        w_h = kind.f0 / k.sigma
    out = np.empty_like(f_grid)
    for j, f in enumerate(f_grid):
        out[j] = _ft_point(k, dimension, float(f), w_h, max_intervals, rtol)
    return SpectralProfile(Domain.Frequency, f_grid, out, k)


def _ft_point(k, dimension, f, w_h, max_intervals, rtol) -> float:
    h = lambda r: float(eval_spatial(k, r))
    if dimension == 1:
        fn = lambda r: 2.0 * h(r) * math.cos(f * r)
    elif f == 0.0:
        fn = lambda r: 4.0 * math.pi * h(r) * r * r
    else:
        fn = lambda r: 4.0 * math.pi * h(r) * r * math.sin(f * r) / f
    if f + w_h == 0.0:
        # nothing oscillates: one semi-infinite adaptive quadrature
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", integrate.IntegrationWarning)
            v, err = integrate.quad(fn, 0.0, math.inf, epsabs=0.0, epsrel=1e-12, limit=500)
        if not err <= 1e-8 * abs(v):
            raise ConvergenceError(
                "radial transform did not converge", {"f": f, "dimension": dimension, "error": err}
            )
        return v
    width = math.pi / max(f + w_h, 1.0 / k.sigma)
    sums = []
    s = 0.0
    scale = 0.0
    quiet = 0
    for i in range(max_intervals):
        v = _quad(fn, i * width, (i + 1) * width)
        s += v
        scale = max(scale, abs(s))
        sums.append(s)
        # absolutely convergent profiles: stop once increments are negligible
        quiet = quiet + 1 if abs(v) <= 1e-16 * scale else 0
        if quiet >= 4:
            return s
        if i >= 40 and i % 20 == 0:
            est, err = wynn_epsilon(sums[-40:])
            if err <= rtol * max(abs(est), 1e-12 * scale):
                return est
    est, err = wynn_epsilon(sums[-40:])
    if err <= 1e-6 * max(scale, abs(est)):
        return est
    raise ConvergenceError(
        "radial transform did not converge",
        {"f": f, "dimension": dimension, "estimate": est, "error": err, "scale": scale},
    )


# ---------------------------------------------------------------------------
# Decay classification


def sample_profile(k: RadialKernel, domain: Domain, radii) -> SpectralProfile:
    radii = np.asarray(radii, dtype=np.float64)
    fn = eval_spatial if domain == Domain.Spatial else eval_frequency
    return SpectralProfile(domain, radii, np.asarray(fn(k, radii), dtype=np.float64), k)


def _local_maxima(r: np.ndarray, a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    idx = np.nonzero((a[1:-1] > a[:-2]) & (a[1:-1] >= a[2:]))[0] + 1
    return r[idx], a[idx]


def decay_loglog_slope(
    k: RadialKernel, r_min: float = 5.0, r_max: float = 50.0, envelope: bool = False, n: int = 4000
) -> float:
    """Least-squares slope of log|h| against log r on [r_min, r_max] (units of sigma).

    With ``envelope`` the fit uses only local maxima of |h|, which is how an
    oscillating profile's envelope is sampled.
    """
    r = np.linspace(r_min * k.sigma, r_max * k.sigma, n)
    a = np.abs(np.asarray(eval_spatial(k, r)))
    if envelope:
        r, a = _local_maxima(r, a)
    good = a > 0
    slope, _ = np.polyfit(np.log(r[good]), np.log(a[good]), 1)
    return float(slope)


def gaussian_decay_fit(k: RadialKernel, r_min: float = 5.0, r_max: float = 50.0, n: int = 400):
    """Fit log h = c + s r^2 on [r_min, r_max]; returns (s, R^2).

    Points where h underflows to zero are dropped.
    """
    r = np.linspace(r_min * k.sigma, r_max * k.sigma, n)
    h = np.asarray(eval_spatial(k, r))
    good = h > 0
    x = r[good] ** 2
    y = np.log(h[good])
    s, c = np.polyfit(x, y, 1)
    resid = y - (c + s * x)
    r2 = 1.0 - np.sum(resid**2) / np.sum((y - y.mean()) ** 2)
    return float(s), float(r2)
