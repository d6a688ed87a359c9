"""Special functions used by the kernels, the ray integral and its gradients.

Everything here is self-contained: the Bessel functions J0/J1 are evaluated
from their power series on [0, 1), from piecewise Chebyshev expansions on
[1, 48) whose coefficients are built at import time from Miller's backward
recurrence, and from the Hankel asymptotic expansion beyond that.  The scalar cores are numba-compiled so the
rasterizer can call them from its inner loops; the public names are numpy
ufuncs that accept scalars or arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

__all__ = [
    "FnAccuracyReport",
    "SPH_J1_SERIES_MAX",
    "CHEB_XMAX",
    "SMALL_ALPHA",
    "sph_bessel_j1",
    "cyl_bessel_j",
    "bessel_j0",
    "bessel_j1",
    "jinc2",
    "jinc2_deriv",
    "jinc2_dsq",
    "sph_j1_over_x",
    "mod_bessel_k_half",
    "erf",
    "REL_FLOOR",
    "accuracy_reports",
    "switchover_jumps",
    "bessel_j_trapezoid",
    "sph_j1_legendre",
]

# Below this |x| the spherical j1 uses its Taylor series.
SPH_J1_SERIES_MAX = 0.5
# Chebyshev tables cover [0, CHEB_XMAX) in unit-width cells.
CHEB_XMAX = 48
CHEB_NCOEF = 13
_CHEB_NODES = 32
# Below this alpha, 2*J1(a)/a and its derivative use their power series;
# shared by the forward response and every backward formula.
SMALL_ALPHA = 0.5
_HANKEL_TERMS = 18


@dataclass(frozen=True)
class FnAccuracyReport:
    function_name: str
    max_abs_err: float
    max_rel_err: float
    domain: tuple[float, float]

    def __post_init__(self):
        if not self.max_rel_err >= 0:
            raise ValueError("max_rel_err must be >= 0")
        if not self.domain[1] > self.domain[0]:
            raise ValueError("empty domain")


# ---------------------------------------------------------------------------
# Reference J0/J1 by Miller's backward recurrence (used to build the tables).


def _j01_miller(x: float) -> tuple[float, float]:
    if x == 0.0:
        return 1.0, 0.0
    n = 2 * int((x + 30.0 + 12.0 * x ** (1.0 / 3.0)) / 2.0)
    jp = 0.0
    j = 1e-30
    s = 2.0 * j  # n is even, so J_n belongs to the normalisation sum
    for k in range(n, 0, -1):
        jm = (2.0 * k / x) * j - jp
        jp, j = j, jm
        if abs(j) > 1e250:
            j *= 1e-250
            jp *= 1e-250
            s *= 1e-250
        if (k - 1) % 2 == 0 and k - 1 > 0:
            s += 2.0 * j
    norm = j + s
    return j / norm, jp / norm


def _build_cheb_tables() -> tuple[np.ndarray, np.ndarray]:
    # Oversampled discrete Chebyshev transform: extra nodes average down the
    # rounding noise that otherwise lands in the highest coefficients.
    m = _CHEB_NODES
    theta = np.pi * (np.arange(m) + 0.5) / m
    nodes = np.cos(theta)
    t0 = np.zeros((CHEB_XMAX, CHEB_NCOEF))
    t1 = np.zeros((CHEB_XMAX, CHEB_NCOEF))
    for cell in range(CHEB_XMAX):
        xs = cell + 0.5 + 0.5 * nodes
        v = np.array([_j01_miller(float(x)) for x in xs])
        for k in range(CHEB_NCOEF):
            w = np.cos(k * theta) * (2.0 / m)
            t0[cell, k] = math.fsum(w * v[:, 0])
            t1[cell, k] = math.fsum(w * v[:, 1])
        t0[cell, 0] *= 0.5
        t1[cell, 0] *= 0.5
    return t0, t1


_CHEB_J0, _CHEB_J1 = _build_cheb_tables()


def _hankel_coeffs(nu: float, nterms: int) -> np.ndarray:
    mu = 4.0 * nu * nu
    a = np.empty(nterms)
    a[0] = 1.0
    for k in range(1, nterms):
        a[k] = a[k - 1] * (mu - (2 * k - 1) ** 2) / (k * 8.0)
    return a


_HANKEL0 = _hankel_coeffs(0.0, _HANKEL_TERMS)
_HANKEL1 = _hankel_coeffs(1.0, _HANKEL_TERMS)


# ---------------------------------------------------------------------------
# Compiled scalar cores.


@numba.njit(cache=True, inline="always")
def _clenshaw(c, t):
    b1 = 0.0
    b2 = 0.0
    t2 = 2.0 * t
    for k in range(c.shape[0] - 1, 0, -1):
        b1, b2 = t2 * b1 - b2 + c[k], b1
    return t * b1 - b2 + c[0]


@numba.njit(cache=True)
def _hankel(a, x, shift):
    # P and Q series of the Hankel expansion; `shift` is 0 for J0 and 1 for J1.
    p = 0.0
    q = 0.0
    inv = 1.0 / x
    powk = 1.0
    for k in range(a.shape[0]):
        term = a[k] * powk
        if k % 4 == 0:
            p += term
        elif k % 4 == 1:
            q += term
        elif k % 4 == 2:
            p -= term
        else:
            q -= term
        powk *= inv
    s = math.sin(x)
    c = math.cos(x)
    r = 1.0 / math.sqrt(2.0)
    if shift == 0:
        cchi = (c + s) * r
        schi = (s - c) * r
    else:
        cchi = (s - c) * r
        schi = -(c + s) * r
    return math.sqrt(2.0 / (math.pi * x)) * (p * cchi - q * schi)


@numba.njit(cache=True)
def _j0_series(x):
    # sum_k (-x^2/4)^k / (k!)^2; 12 terms reach machine precision on [0, 1)
    z = -0.25 * x * x
    term = 1.0
    s = 1.0
    for k in range(1, 12):
        term *= z / (k * k)
        s += term
    return s


@numba.njit(cache=True)
def _j1_series(x):
    z = -0.25 * x * x
    term = 0.5 * x
    s = term
    for k in range(1, 12):
        term *= z / (k * (k + 1))
        s += term
    return s


@numba.njit(cache=True)
def j0_core(x):
    if x != x:
        return x
    if x < 0.0:
        x = -x
    if x < 1.0:
        return _j0_series(x)
    if x < CHEB_XMAX:
        cell = int(x)
        return _clenshaw(_CHEB_J0[cell], 2.0 * (x - cell) - 1.0)
    return _hankel(_HANKEL0, x, 0)


@numba.njit(cache=True)
def j1_core(x):
    if x != x:
        return x
    sign = 1.0
    if x < 0.0:
        x = -x
        sign = -1.0
    if x < 1.0:
        return sign * _j1_series(x)
    if x < CHEB_XMAX:
        cell = int(x)
        return sign * _clenshaw(_CHEB_J1[cell], 2.0 * (x - cell) - 1.0)
    return sign * _hankel(_HANKEL1, x, 1)


@numba.njit(cache=True)
def jinc2_core(a):
    """2*J1(a)/a with value 1 at a = 0."""
    if a < SMALL_ALPHA:
        # sum_k (-a^2/4)^k / (k! (k+1)!)
        z = -0.25 * a * a
        term = 1.0
        s = 1.0
        for k in range(1, 12):
            term *= z / (k * (k + 1))
            s += term
        return s
    return 2.0 * j1_core(a) / a


@numba.njit(cache=True)
def jinc2_deriv_core(a):
    """d/da of 2*J1(a)/a, i.e. 2*(J0(a)/a - 2*J1(a)/a^2)."""
    if a < SMALL_ALPHA:
        # derivative of the series above, term by term
        z = -0.25 * a * a
        term = 1.0
        s = 0.0
        for k in range(1, 12):
            term *= z / (k * (k + 1))
            s += 2.0 * k * term / a if a != 0.0 else 0.0
        return s
    return 2.0 * (j0_core(a) / a - 2.0 * j1_core(a) / (a * a))


@numba.njit(cache=True)
def sph_j1_core(x):
    if x != x:
        return x
    ax = abs(x)
    if ax < SPH_J1_SERIES_MAX:
        # x * sum_k (-x^2/2)^k / (k! (2k+3)!!)
        z = -0.5 * x * x
        term = 1.0 / 3.0
        s = term
        for k in range(1, 10):
            term *= z / (k * (2 * k + 3))
            s += term
        return x * s
    return (math.sin(x) - x * math.cos(x)) / (x * x)


# ---------------------------------------------------------------------------
# Public ufuncs.

bessel_j0 = numba.vectorize(["float64(float64)"], cache=True)(j0_core)
bessel_j1 = numba.vectorize(["float64(float64)"], cache=True)(j1_core)
jinc2 = numba.vectorize(["float64(float64)"], cache=True)(jinc2_core)
jinc2_deriv = numba.vectorize(["float64(float64)"], cache=True)(jinc2_deriv_core)
sph_bessel_j1 = numba.vectorize(["float64(float64)"], cache=True)(sph_j1_core)


def cyl_bessel_j(order: int, x):
    """Bessel function of the first kind J0 or J1 for x >= 0."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError("cyl_bessel_j is defined here for x >= 0 only")
    if order == 0:
        out = bessel_j0(x)
    elif order == 1:
        out = bessel_j1(x)
    else:
        raise ValueError(f"unsupported order {order}; only 0 and 1")
    return out[()] if out.ndim == 0 else out


def mod_bessel_k_half(x):
    """K_{1/2}(x) = sqrt(pi / (2x)) * exp(-x)."""
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0)):
        raise ValueError("mod_bessel_k_half requires x > 0")
    out = np.sqrt(np.pi / (2.0 * x)) * np.exp(-x)
    return out[()] if out.ndim == 0 else out


_erf_ufunc = np.frompyfunc(math.erf, 1, 1)


def erf(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.asarray(_erf_ufunc(x), dtype=np.float64)
    return out[()] if out.ndim == 0 else out


def j01_reference(x: float) -> tuple[float, float]:
    """Miller-recurrence J0, J1 in plain Python; slower, used for self-checks."""
    return _j01_miller(float(x))


@numba.njit(cache=True)
def sph_j1_over_x_core(x):
    """j1(x)/x with value 1/3 at x = 0."""
    if abs(x) < SPH_J1_SERIES_MAX:
        z = -0.5 * x * x
        term = 1.0 / 3.0
        s = term
        for k in range(1, 10):
            term *= z / (k * (2 * k + 3))
            s += term
        return s
    return (math.sin(x) - x * math.cos(x)) / (x * x * x)


@numba.njit(cache=True)
def jinc2_dsq_core(a):
    """d(2*J1(a)/a) / d(a^2); finite at a = 0 (value -1/8)."""
    if a < SMALL_ALPHA:
        z = -0.25 * a * a
        # d/dz of sum_k z^k/(k!(k+1)!) is sum_k z^(k-1)/((k-1)!(k+1)!);
        # dz/d(a^2) = -1/4
        term = 0.5
        s = term
        for k in range(2, 12):
            term *= z / ((k - 1) * (k + 1))
            s += term
        return -0.25 * s
    return jinc2_deriv_core(a) / (2.0 * a)


sph_j1_over_x = numba.vectorize(["float64(float64)"], cache=True)(sph_j1_over_x_core)
jinc2_dsq = numba.vectorize(["float64(float64)"], cache=True)(jinc2_dsq_core)


# ---------------------------------------------------------------------------
# Self-check against independent quadrature oracles

# Relative errors use max(|reference|, REL_FLOOR) so exact zeros of the
# functions (J1(0), j1(0)) do not turn oracle rounding into huge ratios.
REL_FLOOR = 1e-6


def bessel_j_trapezoid(order: int, x, nodes: int = 512) -> np.ndarray:
    """J_n(x) = (1/2pi) * integral over a period of cos(n t - x sin t).

    The integrand is smooth and periodic, so the trapezoid rule converges
    geometrically once ``nodes`` exceeds x by a few dozen.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    t = 2.0 * np.pi * np.arange(nodes) / nodes
    return np.array([math.fsum(np.cos(order * t - xi * np.sin(t))) / nodes for xi in x])


def sph_j1_legendre(x, nodes: int = 160) -> np.ndarray:
    """j1(x) = (1/2) * integral_{-1}^{1} t sin(x t) dt by Gauss-Legendre."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    t, w = np.polynomial.legendre.leggauss(nodes)
    return np.array([0.5 * math.fsum(w * t * np.sin(xi * t)) for xi in x])


def _report(name, values, ref, lo, hi) -> FnAccuracyReport:
    ab = np.abs(values - ref)
    rel = ab / np.maximum(np.abs(ref), REL_FLOOR)
    return FnAccuracyReport(name, float(ab.max()), float(rel.max()), (lo, hi))


def accuracy_reports(n: int = 2001, x_max: float = 100.0) -> list[FnAccuracyReport]:
    """Accuracy of the shipped functions on [0, x_max] against quadrature."""
    x = np.linspace(0.0, x_max, n)
    j0_ref = bessel_j_trapezoid(0, x)
    j1_ref = bessel_j_trapezoid(1, x)
    xs = x[1:]
    return [
        _report("bessel_j0", bessel_j0(x), j0_ref, 0.0, x_max),
        _report("bessel_j1", bessel_j1(x), j1_ref, 0.0, x_max),
        _report("jinc2", jinc2(xs), 2.0 * j1_ref[1:] / xs, float(xs[0]), x_max),
        _report("sph_bessel_j1", sph_bessel_j1(x), sph_j1_legendre(x), 0.0, x_max),
    ]


def switchover_jumps() -> dict:
    """|left - right| at each series/closed-form switchover point."""
    out = {}
    for name, core, x0 in (
        ("sph_bessel_j1", sph_j1_core, SPH_J1_SERIES_MAX),
        ("sph_j1_over_x", sph_j1_over_x_core, SPH_J1_SERIES_MAX),
        ("jinc2", jinc2_core, SMALL_ALPHA),
        ("jinc2_deriv", jinc2_deriv_core, SMALL_ALPHA),
        ("jinc2_dsq", jinc2_dsq_core, SMALL_ALPHA),
    ):
        left = core(np.nextafter(x0, 0.0))
        right = core(x0)
        out[name] = abs(left - right)
    return out
