"""Tile-based splatting rasterizer with an analytic backward pass.

Jinc primitives are evaluated exactly per ray (2 J1(alpha)/alpha) and binned
through the alpha = q threshold ellipse.  Gaussian and Student's t
primitives (and their modulated variants) use the usual local-affine
projection of Sigma to a 2D covariance.  Each primitive contributes to every
pixel of the tiles its footprint box touches, so truncation shows up as
tile-aligned edges, as in tile-based splatting rasterizers.
"""

from __future__ import annotations

import enum
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from . import _raster_kernels as rk
from ._threads import set_threads
from .gradients import GradientError, sigma_grad_to_params
from .kernels import KernelKind, KernelTag, UnsupportedKindError
from .projection import (
    NOT_ELLIPSE,
    Camera,
    Ellipse2D,
    PrimitivePose,
    quat_to_rotmat_batch,
)

__all__ = [
    "NegativeLobes",
    "RenderConfig",
    "Primitive",
    "PrimitiveSet",
    "PrimitiveSetGrad",
    "ImageBuffer",
    "RenderStats",
    "render",
    "render_with_grad",
    "project_gaussian_2d",
    "footprint_radius",
    "tile_artifact_metric",
    "sigmoid",
    "logit",
]

RENDERABLE = (
    KernelTag.Gaussian,
    KernelTag.StudentT,
    KernelTag.Jinc,
    KernelTag.ModulatedGaussian,
    KernelTag.ModulatedStudentT,
)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out[()] if out.ndim == 0 else out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p)


class NegativeLobes(enum.Enum):
    Clamp = "clamp"
    Signed = "signed"


@dataclass(frozen=True)
class RenderConfig:
    tile_size: int = 16
    alpha_cutoff_q: float = 30.0
    min_alpha_contrib: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    near_clip: float = 0.01
    negative_lobes: NegativeLobes = NegativeLobes.Clamp

    def __post_init__(self):
        if int(self.tile_size) < 4:
            raise ValueError("tile_size must be >= 4")
        if not self.alpha_cutoff_q > 0:
            raise ValueError("alpha_cutoff_q must be > 0")
        if not self.min_alpha_contrib >= 0:
            raise ValueError("min_alpha_contrib must be >= 0")


@dataclass(frozen=True)
class Primitive:
    pose: PrimitivePose
    opacity_logit: float
    color: np.ndarray
    kind: KernelKind

    def __post_init__(self):
        c = np.array(self.color, dtype=np.float64).reshape(3)
        if np.any(c < 0) or np.any(c > 1):
            raise ValueError("color components must lie in [0, 1]")
        object.__setattr__(self, "color", c)


@dataclass
class PrimitiveSet:
    """Structure-of-arrays storage for N primitives.

    ``omega_logit`` and ``f0`` are read only for modulated kinds; Student's t
    primitives use nu = 1.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    kind: np.ndarray
    omega_logit: np.ndarray
    f0: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.opacity_logit = np.asarray(self.opacity_logit, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        self.kind = np.asarray(self.kind, dtype=np.uint8).reshape(n)
        self.omega_logit = np.asarray(self.omega_logit, dtype=np.float64).reshape(n)
        self.f0 = np.asarray(self.f0, dtype=np.float64).reshape(n)

    def __len__(self) -> int:
        return self.mu.shape[0]

    @classmethod
    def empty(cls) -> PrimitiveSet:
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0),
                   np.zeros((0, 3)), np.zeros(0, np.uint8), np.zeros(0), np.zeros(0))

    @classmethod
    def from_primitives(cls, prims) -> PrimitiveSet:
        prims = list(prims)
        if not prims:
            return cls.empty()
        om = []
        f0 = []
        for p in prims:
            if p.kind.is_modulated:
                om.append(float(logit(p.kind.omega)))
                f0.append(p.kind.f0)
            else:
                om.append(0.0)
                f0.append(0.0)
        return cls(
            np.stack([p.pose.mu for p in prims]),
            np.stack([p.pose.quat for p in prims]),
            np.stack([p.pose.log_scales for p in prims]),
            np.array([p.opacity_logit for p in prims]),
            np.stack([p.color for p in prims]),
            np.array([int(p.kind.tag) for p in prims], dtype=np.uint8),
            np.array(om),
            np.array(f0),
        )

    def to_primitives(self) -> list[Primitive]:
        out = []
        for i in range(len(self)):
            tag = KernelTag(int(self.kind[i]))
            if tag in (KernelTag.ModulatedGaussian, KernelTag.ModulatedStudentT):
                kind = KernelKind(tag, omega=float(sigmoid(self.omega_logit[i])), f0=float(self.f0[i]))
            else:
                kind = KernelKind(tag)
            out.append(Primitive(PrimitivePose(self.mu[i], self.quat[i], self.log_scales[i]),
                                 float(self.opacity_logit[i]), self.color[i], kind))
        return out

    def copy(self) -> PrimitiveSet:
        return PrimitiveSet(*(np.array(getattr(self, f)) for f in _FIELDS))

    def with_kind(self, kind: KernelKind) -> PrimitiveSet:
        """Copy with every primitive switched to ``kind``."""
        out = self.copy()
        out.kind[:] = int(kind.tag)
        if kind.is_modulated:
            out.omega_logit[:] = float(logit(kind.omega))
            out.f0[:] = kind.f0
        return out

    def equals(self, other: PrimitiveSet) -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in _FIELDS)


_FIELDS = ("mu", "quat", "log_scales", "opacity_logit", "color", "kind", "omega_logit", "f0")


@dataclass
class PrimitiveSetGrad:
    mu: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray
    opacity_logit: np.ndarray
    color: np.ndarray
    omega_logit: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> PrimitiveSetGrad:
        return cls(np.zeros((n, 3)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n),
                   np.zeros((n, 3)), np.zeros(n))

    def add_(self, other: PrimitiveSetGrad) -> None:
        for f in ("mu", "quat", "log_scales", "opacity_logit", "color", "omega_logit"):
            getattr(self, f).__iadd__(getattr(other, f))


@dataclass
class RenderStats:
    n_visible: int = 0
    n_skipped_nonfinite: int = 0
    n_skipped_clip: int = 0
    n_fullscreen: int = 0
    n_pairs: int = 0


@dataclass
class ImageBuffer:
    """Rendered colour (H, W, 3) and final transmittance (H, W).

    Transmittance stays in [0, 1] under Clamp; Signed lobes can push it
    above 1, so the upper bound is checked only when ``signed`` is False.
    """

    rgb: np.ndarray
    transmittance: np.ndarray
    signed: bool = False
    stats: RenderStats = field(default_factory=RenderStats)

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError("rgb must have shape (H, W, 3)")
        if self.transmittance is None:
            self.transmittance = np.zeros(self.rgb.shape[:2])
        self.transmittance = np.asarray(self.transmittance, dtype=np.float64)
        if self.transmittance.shape != self.rgb.shape[:2]:
            raise ValueError("transmittance must have shape (H, W)")
        if not np.all(np.isfinite(self.rgb)):
            raise ValueError("rgb must be finite")
        if np.any(self.transmittance < 0) or (not self.signed and np.any(self.transmittance > 1)):
            raise ValueError("transmittance outside [0, 1]")

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @classmethod
    def from_rgb(cls, rgb) -> ImageBuffer:
        rgb = np.asarray(rgb, dtype=np.float64)
        return cls(rgb, np.zeros(rgb.shape[:2]))

    def downsample(self, factor: int) -> ImageBuffer:
        """Box-filter downsample by an integer factor."""
        f = int(factor)
        H, W = self.height // f, self.width // f
        rgb = self.rgb[: H * f, : W * f].reshape(H, f, W, f, 3).mean(axis=(1, 3))
        tr = self.transmittance[: H * f, : W * f].reshape(H, f, W, f).mean(axis=(1, 3))
        return ImageBuffer(rgb, tr, self.signed)


# ---------------------------------------------------------------------------
# Per-primitive preprocessing


def footprint_radius(tag: KernelTag, nu: float = 1.0) -> float:
    """Mahalanobis radius of the binned footprint for the 2D-projected kinds.

    Gaussian kinds stop at 3 sigma.  Student's t kinds stop where the base
    response falls to 1/255, since their heavy tail is still ~0.1 at 3.
    """
    if tag in (KernelTag.Gaussian, KernelTag.ModulatedGaussian):
        return 3.0
    if tag in (KernelTag.StudentT, KernelTag.ModulatedStudentT):
        return math.sqrt(nu * (255.0 ** (2.0 / (nu + 1.0)) - 1.0))
    raise UnsupportedKindError(f"no 2D footprint for {tag.name}")


def _ewa(mu, Sigma, cam: Camera):
    """Projected means (N, 2), 2D covariances (N, 2, 2), camera coords, T = J R_c."""
    Xc = mu @ cam.R.T + cam.t
    x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
    n = mu.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    T = J @ cam.R
    cov = T @ Sigma @ np.swapaxes(T, 1, 2)
    mean = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)
    return mean, cov, Xc, T


def project_gaussian_2d(pose: PrimitivePose, cam: Camera, extent: float = 3.0,
                        near_clip: float = 0.01):
    """Footprint ellipse of the local-affine projection, scaled to ``extent`` sigma.

    Returns NOT_ELLIPSE when the 2D covariance is degenerate.
    """
    mean, cov, Xc, _ = _ewa(pose.mu[None], pose.Sigma[None], cam)
    if not Xc[0, 2] > near_clip:
        raise ValueError("primitive centre is behind the near plane")
    c = cov[0]
    det = c[0, 0] * c[1, 1] - c[0, 1] * c[1, 0]
    if not (np.isfinite(det) and det > 1e-12 * (c[0, 0] + c[1, 1]) ** 2):
        return NOT_ELLIPSE
    return Ellipse2D(mean[0], np.linalg.inv(c) / extent**2)


@dataclass
class _Prepared:
    params: np.ndarray
    visible: np.ndarray  # indices into the primitive set
    depth: np.ndarray
    lo: np.ndarray  # (V, 2) tile index ranges, inclusive
    hi: np.ndarray
    # kept for the backward chain of the 2D kinds
    ewa_T: np.ndarray
    ewa_Xc: np.ndarray
    ewa_cov: np.ndarray
    stats: RenderStats


def _prepare(ps: PrimitiveSet, cam: Camera, cfg: RenderConfig) -> _Prepared:
    n = len(ps)
    stats = RenderStats()
    tags = ps.kind.astype(np.int64)
    bad_kind = ~np.isin(tags, [int(t) for t in RENDERABLE])
    if np.any(bad_kind):
        raise UnsupportedKindError(f"cannot render kind tag {int(tags[bad_kind][0])}")
    finite = (
        np.all(np.isfinite(ps.mu), axis=1)
        & np.all(np.isfinite(ps.quat), axis=1)
        & (np.linalg.norm(ps.quat, axis=1) > 0)
        & np.all(np.isfinite(ps.log_scales), axis=1)
        & np.isfinite(ps.opacity_logit)
        & np.all(np.isfinite(ps.color), axis=1)
        # +-inf is the exact logit of omega = 1 or 0
        & ~np.isnan(ps.omega_logit)
        & np.isfinite(ps.f0)
    )
    stats.n_skipped_nonfinite = int(np.sum(~finite))
    if stats.n_skipped_nonfinite:
        warnings.warn(f"skipped {stats.n_skipped_nonfinite} primitives with non-finite parameters",
                      RuntimeWarning, stacklevel=3)
    idx = np.nonzero(finite)[0]
    mu = ps.mu[idx]
    quat = np.where(np.linalg.norm(ps.quat[idx], axis=1, keepdims=True) > 0, ps.quat[idx], 1.0)
    R = quat_to_rotmat_batch(quat)
    s = np.exp(ps.log_scales[idx])
    A = R * s[:, None, :]
    Sigma = A @ np.swapaxes(A, 1, 2)
    depth = mu @ cam.R[2] + cam.t[2]
    keep = depth > cfg.near_clip
    stats.n_skipped_clip = int(np.sum(~keep))
    tag = tags[idx]

    m_cnt = idx.shape[0]
    params = np.zeros((m_cnt, rk.N_PARAMS))
    params[:, rk.P_OPACITY] = sigmoid(ps.opacity_logit[idx])
    params[:, rk.P_COLOR:rk.P_COLOR + 3] = ps.color[idx]
    params[:, rk.P_OMEGA] = sigmoid(ps.omega_logit[idx])
    params[:, rk.P_F0] = ps.f0[idx]
    params[:, rk.P_NU] = 1.0
    params[:, rk.P_TAG] = tag
    center = np.zeros((m_cnt, 2))
    half = np.zeros((m_cnt, 2))

    # Jinc: exact per-ray response, footprint from the threshold conic
    jinc = keep & (tag == int(KernelTag.Jinc))
    if np.any(jinc):
        j = np.nonzero(jinc)[0]
        M = (1.0 / s[j])[:, :, None] * np.swapaxes(R[j], 1, 2)
        m = np.einsum("nij,nj->ni", M, cam.center[None] - mu[j])
        B = M @ (cam.R.T @ cam.K_inv)
        Bm = np.einsum("nji,nj->ni", B, m)
        q = cfg.alpha_cutoff_q
        H = Bm[:, :, None] * Bm[:, None, :] - (np.sum(m * m, axis=1) - q * q)[:, None, None] * (
            np.swapaxes(B, 1, 2) @ B
        )
        H2 = H[:, :2, :2]
        det_h = np.linalg.det(H)
        det_h2 = H2[:, 0, 0] * H2[:, 1, 1] - H2[:, 0, 1] * H2[:, 1, 0]
        eps = 1e-12 * np.max(np.sum(np.abs(H), axis=2), axis=1) ** 3
        ok = (np.abs(det_h) > eps) & (det_h2 > eps)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = -det_h2 / det_h
            shape = scale[:, None, None] * H2
            ok &= (shape[:, 0, 0] > 0) & (shape[:, 0, 0] * shape[:, 1, 1] - shape[:, 0, 1] ** 2 > 0)
            # inverse of the shape matrix gives the box half widths
            inv_det = 1.0 / (shape[:, 0, 0] * shape[:, 1, 1] - shape[:, 0, 1] ** 2)
            hx = np.sqrt(shape[:, 1, 1] * inv_det)
            hy = np.sqrt(shape[:, 0, 0] * inv_det)
            p = H[:, :2, 2]
            cx = -(H2[:, 1, 1] * p[:, 0] - H2[:, 0, 1] * p[:, 1]) / det_h2
            cy = -(-H2[:, 1, 0] * p[:, 0] + H2[:, 0, 0] * p[:, 1]) / det_h2
        ok &= np.isfinite(hx) & np.isfinite(hy) & np.isfinite(cx) & np.isfinite(cy)
        # no bounded footprint (camera inside the alpha < q region, or an
        # unbounded conic): bin to every tile rather than drop the primitive
        stats.n_fullscreen = int(np.sum(~ok))
        big = float(max(cam.width, cam.height)) * 4.0
        cx = np.where(ok, cx, 0.5 * cam.width)
        cy = np.where(ok, cy, 0.5 * cam.height)
        hx = np.where(ok, hx, big)
        hy = np.where(ok, hy, big)
        params[j, rk.P_M:rk.P_M + 3] = m
        params[j, rk.P_B:rk.P_B + 9] = B.reshape(-1, 9)
        params[j, rk.P_W:rk.P_W + 9] = M.reshape(-1, 9)
        center[j] = np.stack([cx, cy], axis=1)
        half[j] = np.stack([hx, hy], axis=1)

    # 2D kinds: local-affine projection
    flat = keep & (tag != int(KernelTag.Jinc))
    ewa_T = np.zeros((m_cnt, 2, 3))
    ewa_Xc = np.zeros((m_cnt, 3))
    ewa_cov = np.zeros((m_cnt, 2, 2))
    if np.any(flat):
        f = np.nonzero(flat)[0]
        mean, cov, Xc, T = _ewa(mu[f], Sigma[f], cam)
        det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] * cov[:, 1, 0]
        ok = np.isfinite(det) & (det > 1e-12 * (cov[:, 0, 0] + cov[:, 1, 1]) ** 2)
        keep[f[~ok]] = False
        with np.errstate(divide="ignore", invalid="ignore"):
            conic = np.stack([cov[:, 1, 1] / det, -cov[:, 0, 1] / det, cov[:, 0, 0] / det], axis=1)
        ext = np.array([footprint_radius(KernelTag(int(t))) for t in tag[f]])
        params[f, rk.P_MEAN:rk.P_MEAN + 2] = mean
        params[f, rk.P_CONIC:rk.P_CONIC + 3] = conic
        center[f] = mean
        with np.errstate(invalid="ignore"):
            half[f] = ext[:, None] * np.sqrt(np.stack([cov[:, 0, 0], cov[:, 1, 1]], axis=1))
        ewa_T[f] = T
        ewa_Xc[f] = Xc
        ewa_cov[f] = cov

    ts = cfg.tile_size
    tiles_x = -(-cam.width // ts)
    tiles_y = -(-cam.height // ts)
    with np.errstate(invalid="ignore"):
        lo = np.floor((center - half) / ts)
        hi = np.floor((center + half) / ts)
    inside = keep & (hi[:, 0] >= 0) & (hi[:, 1] >= 0) & (lo[:, 0] < tiles_x) & (lo[:, 1] < tiles_y)
    lo = np.clip(np.nan_to_num(lo), 0, [tiles_x - 1, tiles_y - 1]).astype(np.int64)
    hi = np.clip(np.nan_to_num(hi), 0, [tiles_x - 1, tiles_y - 1]).astype(np.int64)
    vis = np.nonzero(inside)[0]
    stats.n_visible = int(vis.size)
    return _Prepared(params, idx[vis] if vis.size else np.zeros(0, np.int64), depth[vis],
                     lo[vis], hi[vis], ewa_T[vis], ewa_Xc[vis], ewa_cov[vis], stats), params[vis]


def _bin(prep: _Prepared, tiles_x: int, tiles_y: int):
    """Pair list sorted by (tile, depth, primitive index) and tile offsets."""
    counts = (prep.hi[:, 0] - prep.lo[:, 0] + 1) * (prep.hi[:, 1] - prep.lo[:, 1] + 1)
    v = counts.shape[0]
    prim = np.repeat(np.arange(v), counts)
    tile = np.empty(prim.shape[0], dtype=np.int64)
    pos = 0
    for i in range(v):
        xs = np.arange(prep.lo[i, 0], prep.hi[i, 0] + 1)
        ys = np.arange(prep.lo[i, 1], prep.hi[i, 1] + 1)
        tile[pos:pos + counts[i]] = (ys[:, None] * tiles_x + xs[None, :]).ravel()
        pos += counts[i]
    order = np.lexsort((prep.visible[prim] if v else prim, prep.depth[prim], tile))
    prim = prim[order]
    tile = tile[order]
    starts = np.searchsorted(tile, np.arange(tiles_x * tiles_y + 1)).astype(np.int64)
    return prim.astype(np.int64), starts


def _setup(ps: PrimitiveSet, cam: Camera, cfg: RenderConfig):
    set_threads()
    prep, params = _prepare(ps, cam, cfg)
    ts = cfg.tile_size
    tiles_x = -(-cam.width // ts)
    tiles_y = -(-cam.height // ts)
    pair_prim, starts = _bin(prep, tiles_x, tiles_y)
    prep.stats.n_pairs = int(pair_prim.shape[0])
    return prep, np.ascontiguousarray(params), pair_prim, starts, tiles_x


def _as_set(primitives) -> PrimitiveSet:
    if isinstance(primitives, PrimitiveSet):
        return primitives
    return PrimitiveSet.from_primitives(primitives)


def render(primitives, cam: Camera, cfg: RenderConfig = RenderConfig()) -> ImageBuffer:
    """Front-to-back composite of the primitives seen from ``cam``."""
    ps = _as_set(primitives)
    prep, params, pair_prim, starts, tiles_x = _setup(ps, cam, cfg)
    signed = cfg.negative_lobes == NegativeLobes.Signed
    if pair_prim.shape[0] == 0:
        rgb = np.zeros((cam.height, cam.width, 3))
        trans = np.ones((cam.height, cam.width))
    else:
        rgb, trans = rk.render_forward(
            params, pair_prim, starts, tiles_x, int(cfg.tile_size), cam.width, cam.height,
            signed, float(cfg.min_alpha_contrib), float(cfg.transmittance_floor),
        )
    return ImageBuffer(rgb, trans, signed, prep.stats)


def render_with_grad(primitives, cam: Camera, cfg: RenderConfig, d_rgb_fn):
    """Render, then back-propagate an image-space gradient.

    ``d_rgb_fn`` maps the rendered ImageBuffer to dL/drgb (H, W, 3), so the
    loss can depend on the forward result.  Returns (image, PrimitiveSetGrad)
    with gradients for the stored parameterisation (logits, log scales and
    the quaternion as stored).
    """
    ps = _as_set(primitives)
    prep, params, pair_prim, starts, tiles_x = _setup(ps, cam, cfg)
    signed = cfg.negative_lobes == NegativeLobes.Signed
    n = len(ps)
    grad = PrimitiveSetGrad.zeros(n)
    if pair_prim.shape[0] == 0:
        img = ImageBuffer(np.zeros((cam.height, cam.width, 3)), np.ones((cam.height, cam.width)),
                          signed, prep.stats)
        d_rgb_fn(img)
        return img, grad
    args = (params, pair_prim, starts, tiles_x, int(cfg.tile_size), cam.width, cam.height,
            signed, float(cfg.min_alpha_contrib), float(cfg.transmittance_floor))
    rgb, trans = rk.render_forward(*args)
    img = ImageBuffer(rgb, trans, signed, prep.stats)
    d_rgb = np.ascontiguousarray(np.asarray(d_rgb_fn(img), dtype=np.float64))
    if d_rgb.shape != rgb.shape:
        raise ValueError("gradient image has the wrong shape")
    if not np.all(np.isfinite(d_rgb)):
        raise GradientError("non-finite upstream image gradient")
    partial = rk.render_backward(*args, d_rgb)
    g = rk.reduce_partials(partial, pair_prim, params.shape[0])
    _chain(ps, cam, prep, params, g, grad)
    bad = ~(np.all(np.isfinite(grad.mu), axis=1) & np.all(np.isfinite(grad.quat), axis=1)
            & np.all(np.isfinite(grad.log_scales), axis=1) & np.isfinite(grad.opacity_logit)
            & np.all(np.isfinite(grad.color), axis=1) & np.isfinite(grad.omega_logit))
    if np.any(bad):
        raise GradientError(f"non-finite gradient for primitive {int(np.nonzero(bad)[0][0])}")
    return img, grad


def _chain(ps, cam, prep, params, g, grad):
    """Map kernel-space gradient rows to the stored parameters."""
    ids = prep.visible
    op = params[:, rk.P_OPACITY]
    om = params[:, rk.P_OMEGA]
    grad.color[ids] = g[:, rk.G_COLOR:rk.G_COLOR + 3]
    grad.opacity_logit[ids] = g[:, rk.G_OPACITY] * op * (1.0 - op)
    grad.omega_logit[ids] = g[:, rk.G_OMEGA] * om * (1.0 - om)
    tag = params[:, rk.P_TAG].astype(np.int64)
    G_Sigma = np.zeros((ids.shape[0], 3, 3))
    d_mu = np.zeros((ids.shape[0], 3))

    jinc = tag == int(KernelTag.Jinc)
    if np.any(jinc):
        s = g[jinc, rk.G_SHAPE:rk.G_SHAPE + 6]
        G_Sigma[jinc] = _sym3(s)
        d_mu[jinc] = g[jinc, rk.G_POS:rk.G_POS + 3]

    flat = ~jinc
    if np.any(flat):
        T = prep.ewa_T[flat]
        Xc = prep.ewa_Xc[flat]
        cov = prep.ewa_cov[flat]
        d_mean = g[flat, rk.G_POS:rk.G_POS + 2]
        ga, gb, gc = (g[flat, rk.G_SHAPE + i] for i in range(3))
        Gq = np.empty((ga.shape[0], 2, 2))
        Gq[:, 0, 0] = ga
        Gq[:, 0, 1] = Gq[:, 1, 0] = 0.5 * gb
        Gq[:, 1, 1] = gc
        Q = np.linalg.inv(cov)
        G_cov = -Q @ Gq @ Q
        idx = ids[flat]
        R = quat_to_rotmat_batch(ps.quat[idx])
        s = np.exp(ps.log_scales[idx])
        A = R * s[:, None, :]
        Sigma = A @ np.swapaxes(A, 1, 2)
        G_Sigma[flat] = np.swapaxes(T, 1, 2) @ G_cov @ T
        G_T = 2.0 * G_cov @ T @ Sigma
        G_J = G_T @ cam.R.T
        x, y, z = Xc[:, 0], Xc[:, 1], Xc[:, 2]
        fx, fy = cam.fx, cam.fy
        dX = np.zeros_like(Xc)
        # projected mean
        dX[:, 0] += d_mean[:, 0] * fx / z
        dX[:, 1] += d_mean[:, 1] * fy / z
        dX[:, 2] += -d_mean[:, 0] * fx * x / z**2 - d_mean[:, 1] * fy * y / z**2
        # Jacobian entries
        dX[:, 0] += -G_J[:, 0, 2] * fx / z**2
        dX[:, 1] += -G_J[:, 1, 2] * fy / z**2
        dX[:, 2] += (-G_J[:, 0, 0] * fx / z**2 + 2.0 * G_J[:, 0, 2] * fx * x / z**3
                     - G_J[:, 1, 1] * fy / z**2 + 2.0 * G_J[:, 1, 2] * fy * y / z**3)
        d_mu[flat] = dX @ cam.R

    grad.mu[ids] = d_mu
    dq, dls = sigma_grad_to_params(G_Sigma, ps.quat[ids], ps.log_scales[ids])
    grad.quat[ids] = dq
    grad.log_scales[ids] = dls


def _sym3(s):
    G = np.empty((s.shape[0], 3, 3))
    G[:, 0, 0] = s[:, 0]
    G[:, 0, 1] = G[:, 1, 0] = s[:, 1]
    G[:, 0, 2] = G[:, 2, 0] = s[:, 2]
    G[:, 1, 1] = s[:, 3]
    G[:, 1, 2] = G[:, 2, 1] = s[:, 4]
    G[:, 2, 2] = s[:, 5]
    return G


def binned_tiles(primitives, cam: Camera, cfg: RenderConfig = RenderConfig()) -> dict:
    """Map primitive index -> set of tile ids it was binned into."""
    ps = _as_set(primitives)
    prep, _, pair_prim, starts, tiles_x = _setup(ps, cam, cfg)
    out: dict = {}
    for t in range(starts.shape[0] - 1):
        for k in range(starts[t], starts[t + 1]):
            out.setdefault(int(prep.visible[pair_prim[k]]), set()).add(t)
    return out


def tile_artifact_metric(img: ImageBuffer, tile_size: int = 16) -> float:
    """Mean |colour step| across tile-boundary edges minus that across other edges."""
    rgb = img.rgb
    dx = np.abs(np.diff(rgb, axis=1)).mean(axis=2)  # edge between x and x+1
    dy = np.abs(np.diff(rgb, axis=0)).mean(axis=2)
    bx = (np.arange(1, rgb.shape[1]) % tile_size) == 0
    by = (np.arange(1, rgb.shape[0]) % tile_size) == 0
    boundary = np.concatenate([dx[:, bx].ravel(), dy[by, :].ravel()])
    interior = np.concatenate([dx[:, ~bx].ravel(), dy[~by, :].ravel()])
    if boundary.size == 0 or interior.size == 0:
        return 0.0
    return float(boundary.mean() - interior.mean())
