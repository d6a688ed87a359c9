"""Radial reconstruction kernels: spatial profiles, Fourier profiles and FWHM.

All profiles are peak-normalised (value 1 at the origin, or 1 in the Jinc
passband).  Frequencies are angular wavenumbers k: a profile that oscillates
like cos(k r) has wavenumber k.  With this convention the Jinc kernel
3 j1(r/sigma) / (r/sigma) has its 3D passband at k <= 1/sigma.

Transform conventions per kind (see ``frequency_dimension``):

* Gaussian, Exponential and the modulated kinds use the 1D (radial profile
  treated as an even 1D function) transform.
* StudentT uses the 3D radial transform, where nu = 1 gives the closed form
  (sigma k)^(1/2) K_(1/2)(sigma k) proportional to exp(-sigma k).
* Jinc uses the 3D transform (a spherical passband).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .special import mod_bessel_k_half, sph_j1_over_x

__all__ = [
    "KernelTag",
    "KernelKind",
    "RadialKernel",
    "UnsupportedKindError",
    "GAUSSIAN_HALF_FWHM",
    "STUDENT_HALF_FWHM",
    "eval_spatial",
    "eval_frequency",
    "frequency_dimension",
    "fwhm",
    "fwhm_bisect",
]

# Half of the closed-form FWHM at sigma = 1: sqrt(2 ln 2) and ln 2.
GAUSSIAN_HALF_FWHM = math.sqrt(2.0 * math.log(2.0))
STUDENT_HALF_FWHM = math.log(2.0)
DEFAULT_OMEGA = 0.5


class UnsupportedKindError(ValueError):
    """Raised when an operation has no meaning for a kernel kind."""


class KernelTag(enum.IntEnum):
    Delta = 0
    Gaussian = 1
    Exponential = 2
    StudentT = 3
    Jinc = 4
    ModulatedGaussian = 5
    ModulatedStudentT = 6


_MODULATED_BASE = {
    KernelTag.ModulatedGaussian: KernelTag.Gaussian,
    KernelTag.ModulatedStudentT: KernelTag.StudentT,
}


@dataclass(frozen=True)
class KernelKind:
    """Kernel family plus its shape parameters.

    ``omega`` and ``f0`` belong to the modulated kinds only and are filled
    with defaults (omega = 0.5, f0 = half the base FWHM at sigma = 1) when
    omitted.  ``nu`` is used by the Student's t family.
    """

    tag: KernelTag
    nu: float = 1.0
    omega: float | None = None
    f0: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "tag", KernelTag(self.tag))
        if not self.nu > 0:
            raise ValueError("nu must be > 0")
        if self.is_modulated:
            if self.omega is None:
                object.__setattr__(self, "omega", DEFAULT_OMEGA)
            if self.f0 is None:
                if self.tag == KernelTag.ModulatedGaussian:
                    f0 = GAUSSIAN_HALF_FWHM
                else:
                    f0 = 0.5 * fwhm(RadialKernel(KernelKind(KernelTag.StudentT, nu=self.nu), 1.0))
                object.__setattr__(self, "f0", f0)
            if not 0.0 <= self.omega <= 1.0:
                raise ValueError("omega must lie in [0, 1]")
            if not self.f0 > 0:
                raise ValueError("f0 must be > 0")
        elif self.omega is not None or self.f0 is not None:
            raise ValueError(f"{self.tag.name} takes no omega/f0")

    @property
    def is_modulated(self) -> bool:
        return self.tag in _MODULATED_BASE

    @property
    def base(self) -> KernelKind:
        """The unmodulated kind (itself for non-modulated kinds)."""
        if self.is_modulated:
            return KernelKind(_MODULATED_BASE[self.tag], nu=self.nu)
        return self

    @classmethod
    def from_name(cls, name: str, **kw) -> KernelKind:
        lookup = {t.name.lower(): t for t in KernelTag}
        key = name.replace("_", "").replace("-", "").lower()
        if key not in lookup:
            raise ValueError(f"unknown kernel kind {name!r}")
        return cls(lookup[key], **kw)


@dataclass(frozen=True)
class RadialKernel:
    kind: KernelKind
    sigma: float = 1.0

    def __post_init__(self):
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise ValueError("sigma must be finite and > 0")


def _base_spatial(tag: KernelTag, nu: float, x: np.ndarray) -> np.ndarray:
    if tag == KernelTag.Gaussian:
        return np.exp(-0.5 * x * x)
    if tag == KernelTag.Exponential:
        return np.exp(-x)
    if tag == KernelTag.StudentT:
        return (1.0 + x * x / nu) ** (-(nu + 3.0) / 2.0)
    if tag == KernelTag.Jinc:
        return 3.0 * sph_j1_over_x(x)
    if tag == KernelTag.Delta:
        return np.where(x == 0.0, 1.0, 0.0)
    raise UnsupportedKindError(tag.name)


def eval_spatial(k: RadialKernel, r):
    """Peak-normalised radial profile h(r)."""
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0):
        raise ValueError("r must be >= 0")
    x = r / k.sigma
    kind = k.kind
    out = _base_spatial(kind.base.tag, kind.nu, x)
    if kind.is_modulated:
        out = out * (kind.omega + (1.0 - kind.omega) * np.cos(kind.f0 * x))
    return out[()] if out.ndim == 0 else out


def frequency_dimension(kind: KernelKind) -> int:
    """Transform dimension that ``eval_frequency`` follows for this kind."""
    if kind.tag in (KernelTag.StudentT, KernelTag.Jinc):
        return 3
    return 1


def _base_frequency(tag: KernelTag, nu: float, s: np.ndarray, dim: int) -> np.ndarray:
    # s = sigma * k (dimensionless), profiles normalised to 1 at s = 0
    s = np.abs(s)
    if tag == KernelTag.Delta:
        return np.ones_like(s)
    if tag == KernelTag.Gaussian:
        return np.exp(-0.5 * s * s)
    if tag == KernelTag.Exponential:
        if dim != 1:
            raise UnsupportedKindError("Exponential profile is tabulated in 1D only")
        return 1.0 / (1.0 + s * s)
    if tag == KernelTag.StudentT:
        if nu != 1.0:
            raise UnsupportedKindError("StudentT frequency profile needs nu = 1")
        if dim == 1:
            # 1D transform of (1 + x^2)^-2
            return (1.0 + s) * np.exp(-s)
        out = np.ones_like(s)
        pos = s > 0
        # (s)^(1/2) K_(1/2)(s) / sqrt(pi/2) = exp(-s)
        out[pos] = np.sqrt(s[pos]) * mod_bessel_k_half(s[pos]) / math.sqrt(0.5 * math.pi)
        return out
    if tag == KernelTag.Jinc:
        return np.where(s <= 1.0, 1.0, 0.0)
    raise UnsupportedKindError(tag.name)


def eval_frequency(k: RadialKernel, f):
    """Analytic radial frequency magnitude at angular wavenumber ``f``.

    Modulated kinds return omega*B(f) + (1-omega)/2*(B(f-k0) + B(f+k0)) with
    k0 = f0/sigma and B the base profile in the 1D convention.  The result is
    left as is rather than rescaled to 1 at f = 0, so the blend stays exactly
    linear in B.
    """
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise ValueError("f must be >= 0")
    kind = k.kind
    s = np.atleast_1d(f * k.sigma)
    if kind.is_modulated:
        b = kind.base
        s0 = kind.f0
        w = kind.omega
        out = w * _base_frequency(b.tag, b.nu, s, 1) + 0.5 * (1.0 - w) * (
            _base_frequency(b.tag, b.nu, s - s0, 1) + _base_frequency(b.tag, b.nu, s + s0, 1)
        )
    else:
        out = _base_frequency(kind.tag, kind.nu, s, frequency_dimension(kind))
    return out[0] if f.ndim == 0 else out.reshape(f.shape)


def fwhm_bisect(k: RadialKernel, tol: float = 1e-10) -> float:
    """FWHM from the first crossing of h(r) = 1/2, located by bisection."""
    if k.kind.tag == KernelTag.Delta:
        raise UnsupportedKindError("Delta has no half-maximum crossing")
    step = 0.01 * k.sigma
    lo = 0.0
    hi = step
    while eval_spatial(k, hi) > 0.5:
        lo = hi
        hi += step
        if hi > 1e3 * k.sigma:
            raise UnsupportedKindError("no half-maximum crossing found")
    while hi - lo > tol * k.sigma:
        mid = 0.5 * (lo + hi)
        if eval_spatial(k, mid) > 0.5:
            lo = mid
        else:
            hi = mid
    return lo + hi


def fwhm(k: RadialKernel) -> float:
    """Full width at half maximum.

    Gaussian uses 2 sigma sqrt(2 ln 2).  StudentT with nu = 1 uses the
    published closed form 2 sigma ln 2; note that the profile
    (1 + r^2/sigma^2)^-2 actually crosses 1/2 at r = 0.6436 sigma, which
    ``fwhm_bisect`` returns.  Every other kind is bisected.
    """
    tag = k.kind.tag
    if tag == KernelTag.Gaussian:
        return 2.0 * GAUSSIAN_HALF_FWHM * k.sigma
    if tag == KernelTag.StudentT and k.kind.nu == 1.0:
        return 2.0 * STUDENT_HALF_FWHM * k.sigma
    return fwhm_bisect(k)
