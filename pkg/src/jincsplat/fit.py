"""Fixed-count inverse rendering with Adam, plus the synthetic desk-scale suite."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .gradients import GradientError
from .kernels import KernelKind, KernelTag
from .projection import LOG_SCALE_MAX, LOG_SCALE_MIN, Camera
from .rasterizer import (
    ImageBuffer,
    PrimitiveSet,
    RenderConfig,
    logit,
    render,
    render_with_grad,
)

__all__ = [
    "Loss",
    "FitConfig",
    "Checkpoint",
    "FitReport",
    "fit",
    "psnr",
    "PSNR_CAP_DB",
    "KIND_SCALE",
    "make_synthetic_scene",
    "render_targets",
    "default_init",
    "perturb",
    "convert_kind",
    "windowed_monotone",
]

PSNR_CAP_DB = 99.0

# Scale factors that give each kind the Gaussian's half-maximum width, so a
# scene keeps its apparent footprint size when the kernel is swapped.
# Half-maximum radii of the rendered responses: Gaussian sqrt(2 ln 2),
# Student's t (nu = 1) 1, Jinc 2.2150894 (where 2 J1(a)/a = 1/2).
_HALF_MAX_GAUSSIAN = math.sqrt(2.0 * math.log(2.0))
_HALF_MAX_JINC = 2.215089367724233
KIND_SCALE = {
    KernelTag.Gaussian: 1.0,
    KernelTag.ModulatedGaussian: 1.0,
    KernelTag.StudentT: _HALF_MAX_GAUSSIAN,
    KernelTag.ModulatedStudentT: _HALF_MAX_GAUSSIAN,
    KernelTag.Jinc: _HALF_MAX_GAUSSIAN / _HALF_MAX_JINC,
}

_PARAMS = ("mu", "quat", "log_scales", "opacity_logit", "color", "omega_logit")


class Loss(enum.Enum):
    L2 = "l2"
    L1 = "l1"


@dataclass(frozen=True)
class FitConfig:
    iterations: int = 2000
    lr_mu: float = 2e-3
    lr_logscale: float = 5e-3
    lr_quat: float = 5e-3
    lr_opacity: float = 2e-2
    lr_color: float = 1e-2
    lr_omega: float = 1e-2
    # every rate decays exponentially to lr * lr_decay at the last iteration
    lr_decay: float = 0.1
    loss: Loss = Loss.L2
    seed: int = 0
    log_every: int = 50

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ValueError("iterations must be >= 1")
        if int(self.log_every) < 1:
            raise ValueError("log_every must be >= 1")
        for name in ("lr_mu", "lr_logscale", "lr_quat", "lr_opacity", "lr_color", "lr_omega"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must be in (0, 1]")

    def lr(self, name: str) -> float:
        return {
            "mu": self.lr_mu,
            "quat": self.lr_quat,
            "log_scales": self.lr_logscale,
            "opacity_logit": self.lr_opacity,
            "color": self.lr_color,
            "omega_logit": self.lr_omega,
        }[name]


@dataclass(frozen=True)
class Checkpoint:
    iteration: int
    loss: float
    psnr_db: float


@dataclass
class FitReport:
    checkpoints: list[Checkpoint]
    final: PrimitiveSet
    aborted: bool = False
    message: str = ""

    def __post_init__(self):
        for c in self.checkpoints:
            if not math.isfinite(c.psnr_db):
                raise ValueError("checkpoint PSNR must be finite")

    @property
    def final_psnr(self) -> float:
        return self.checkpoints[-1].psnr_db if self.checkpoints else float("nan")

    def to_csv(self) -> str:
        lines = ["iter,loss,psnr_db"]
        lines += [f"{c.iteration},{c.loss:.10g},{c.psnr_db:.6f}" for c in self.checkpoints]
        return "\n".join(lines) + "\n"


def psnr(a: ImageBuffer, b: ImageBuffer) -> float:
    """10 log10(1 / MSE) with peak 1; identical images report the 99 dB cap."""
    return _psnr_from_mse(_mse(a.rgb, b.rgb))


def _mse(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images differ in size")
    return float(np.mean((a - b) ** 2))


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, -10.0 * math.log10(mse))


def _loss_and_grad(rgb, target, loss: Loss):
    diff = rgb - target
    n = diff.size
    if loss == Loss.L2:
        return float(np.sum(diff * diff) / n), 2.0 * diff / n
    return float(np.sum(np.abs(diff)) / n), np.sign(diff) / n


def _pooled_psnr(ps, targets, rcfg) -> tuple[float, float]:
    """(mean per-view MSE, PSNR of the pooled MSE) over all views."""
    mses = [_mse(render(ps, cam, rcfg).rgb, img.rgb) for cam, img in targets]
    mse = float(np.mean(mses))
    return mse, _psnr_from_mse(mse)


def _checkpoint(it, ps, targets, rcfg, loss_kind):
    if loss_kind == Loss.L2:
        mse, p = _pooled_psnr(ps, targets, rcfg)
        return Checkpoint(it, mse, p)
    tot = 0.0
    mses = []
    for cam, img in targets:
        rgb = render(ps, cam, rcfg).rgb
        tot += float(np.mean(np.abs(rgb - img.rgb)))
        mses.append(_mse(rgb, img.rgb))
    return Checkpoint(it, tot / len(targets), _psnr_from_mse(float(np.mean(mses))))


def fit(targets, init: PrimitiveSet, cfg: FitConfig = FitConfig(),
        render_cfg: RenderConfig = RenderConfig(), callback=None) -> FitReport:
    """Optimise ``init`` against ``targets``, a list of (Camera, ImageBuffer).

    One view per iteration, visited in a seeded shuffled order.  Checkpoints
    (pooled over all views) are taken at iteration 0, every ``log_every``
    iterations and at the end.  Kind tags and f0 stay fixed.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("fit needs at least one target view")
    shape = targets[0][1].rgb.shape
    for cam, img in targets:
        if img.rgb.shape != shape or (cam.height, cam.width) != shape[:2]:
            raise ValueError("all targets must share one image size")
    rng = np.random.default_rng(cfg.seed)
    ps = init.copy()
    good = ps.copy()
    m1 = {k: np.zeros_like(getattr(ps, k)) for k in _PARAMS}
    m2 = {k: np.zeros_like(getattr(ps, k)) for k in _PARAMS}
    b1, b2, eps = 0.9, 0.999, 1e-15
    checkpoints = [_checkpoint(0, ps, targets, render_cfg, cfg.loss)]
    order = np.zeros(0, dtype=np.int64)
    pos = 0
    for it in range(1, int(cfg.iterations) + 1):
        if pos >= order.size:
            order = rng.permutation(len(targets))
            pos = 0
        cam, img = targets[int(order[pos])]
        pos += 1
        box = {}

        def upstream(buf, img=img, box=box):
            val, d = _loss_and_grad(buf.rgb, img.rgb, cfg.loss)
            box["loss"] = val
            return d

        try:
            _, grad = render_with_grad(ps, cam, render_cfg, upstream)
        except GradientError as exc:
            return FitReport(checkpoints, good, True, f"non-finite gradient at iteration {it}: {exc}")
        if not math.isfinite(box["loss"]):
            return FitReport(checkpoints, good, True, f"non-finite loss at iteration {it}")
        good = ps.copy()
        c1 = 1.0 - b1**it
        c2 = 1.0 - b2**it
        decay = cfg.lr_decay ** ((it - 1) / max(int(cfg.iterations) - 1, 1))
        for k in _PARAMS:
            g = getattr(grad, k)
            m1[k] = b1 * m1[k] + (1.0 - b1) * g
            m2[k] = b2 * m2[k] + (1.0 - b2) * g * g
            step = cfg.lr(k) * decay * (m1[k] / c1) / (np.sqrt(m2[k] / c2) + eps)
            arr = getattr(ps, k)
            arr -= step
            if k == "quat":
                moved = np.any(step != 0.0, axis=1)
                if np.any(moved):
                    arr[moved] /= np.linalg.norm(arr[moved], axis=1, keepdims=True)
        np.clip(ps.color, 0.0, 1.0, out=ps.color)
        np.clip(ps.log_scales, LOG_SCALE_MIN, LOG_SCALE_MAX, out=ps.log_scales)
        if it % int(cfg.log_every) == 0 or it == int(cfg.iterations):
            cp = _checkpoint(it, ps, targets, render_cfg, cfg.loss)
            if not math.isfinite(cp.loss):
                return FitReport(checkpoints, good, True, f"non-finite loss at iteration {it}")
            checkpoints.append(cp)
            if callback is not None:
                callback(cp)
    return FitReport(checkpoints, ps)


def windowed_monotone(psnrs, window: int = 10) -> bool:
    """True when window means of consecutive checkpoints never decrease."""
    p = np.asarray(psnrs, dtype=np.float64)
    means = [p[i:i + window].mean() for i in range(0, p.size, window)]
    return all(b >= a for a, b in zip(means, means[1:]))


# ---------------------------------------------------------------------------
# Synthetic desk-scale suite


def ring_cameras(n_views: int = 8, width: int = 64, height: int = 64, radius: float = 4.0,
                 elevation_deg: float = 20.0, focal_factor: float = 1.6) -> list[Camera]:
    el = math.radians(elevation_deg)
    cams = []
    for i in range(n_views):
        az = 2.0 * math.pi * i / n_views
        eye = radius * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
        f = focal_factor * width
        cams.append(Camera.look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), f, f, width, height))
    return cams


def _random_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def make_synthetic_scene(seed: int, n_primitives: int, kind: KernelKind,
                         width: int = 64, height: int = 64) -> tuple[PrimitiveSet, list[Camera]]:
    """Random scene in the unit cube seen by 8 ring cameras at radius 4."""
    if int(n_primitives) < 1:
        raise ValueError("n_primitives must be >= 1")
    n = int(n_primitives)
    rng = np.random.default_rng(seed)
    half = 0.05 if n == 1 else 0.5
    mu = rng.uniform(-half, half, size=(n, 3))
    quat = _random_quats(rng, n)
    scales = rng.uniform(0.03, 0.08, size=(n, 3)) * KIND_SCALE[kind.tag]
    opacity = rng.uniform(0.5, 0.95, size=n)
    color = rng.uniform(0.0, 1.0, size=(n, 3))
    ps = PrimitiveSet(mu, quat, np.log(scales), logit(opacity), color,
                      np.full(n, int(kind.tag), np.uint8),
                      np.full(n, float(logit(kind.omega)) if kind.is_modulated else 0.0),
                      np.full(n, kind.f0 if kind.is_modulated else 0.0))
    return ps, ring_cameras(8, width, height)


def render_targets(ps: PrimitiveSet, cams, cfg: RenderConfig = RenderConfig(),
                   supersample: int = 1) -> list[tuple[Camera, ImageBuffer]]:
    """Render each camera; ``supersample`` > 1 renders larger then box-filters."""
    out = []
    for cam in cams:
        if supersample > 1:
            img = render(ps, cam.scaled(supersample), cfg).downsample(supersample)
        else:
            img = render(ps, cam, cfg)
        out.append((cam, img))
    return out


def default_init(seed: int, n_primitives: int, kind: KernelKind, extent: float = 1.0) -> PrimitiveSet:
    """Conventional init: uniform centres, opacity 0.1, scale 0.05 extent, grey."""
    n = int(n_primitives)
    rng = np.random.default_rng(seed)
    mu = rng.uniform(-0.5 * extent, 0.5 * extent, size=(n, 3))
    return PrimitiveSet(
        mu,
        np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        np.full((n, 3), math.log(0.05 * extent * KIND_SCALE[kind.tag])),
        np.full(n, float(logit(0.1))),
        np.full((n, 3), 0.5),
        np.full(n, int(kind.tag), np.uint8),
        np.full(n, float(logit(kind.omega)) if kind.is_modulated else 0.0),
        np.full(n, kind.f0 if kind.is_modulated else 0.0),
    )


def perturb(ps: PrimitiveSet, seed: int, mu_std: float = 0.02, logscale_std: float = 0.15,
            quat_std: float = 0.1, opacity_std: float = 0.5, color_std: float = 0.15) -> PrimitiveSet:
    """Copy of ``ps`` with seeded Gaussian noise on every learnable field."""
    rng = np.random.default_rng(seed)
    out = ps.copy()
    n = len(ps)
    out.mu += rng.normal(0.0, mu_std, size=(n, 3))
    out.log_scales += rng.normal(0.0, logscale_std, size=(n, 3))
    out.quat += rng.normal(0.0, quat_std, size=(n, 4))
    out.quat /= np.linalg.norm(out.quat, axis=1, keepdims=True)
    out.opacity_logit += rng.normal(0.0, opacity_std, size=n)
    out.color = np.clip(out.color + rng.normal(0.0, color_std, size=(n, 3)), 0.0, 1.0)
    return out


def convert_kind(ps: PrimitiveSet, kind: KernelKind) -> PrimitiveSet:
    """Switch every primitive to ``kind``, rescaling to keep the half-maximum width."""
    out = ps.with_kind(kind)
    old = np.array([KIND_SCALE[KernelTag(int(t))] for t in ps.kind])
    out.log_scales += (np.log(KIND_SCALE[kind.tag]) - np.log(old))[:, None]
    return out
