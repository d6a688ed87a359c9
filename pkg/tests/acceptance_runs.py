"""Computations behind the acceptance criteria.

Each function takes its problem size as arguments so the determinism check
can rerun small versions in a subprocess under another JSPL_THREADS value.
Run as a script it prints the digest of those small versions.
"""

from __future__ import annotations

import hashlib
import math
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from jincsplat.fit import (  # noqa: E402
    FitConfig,
    convert_kind,
    fit,
    make_synthetic_scene,
    perturb,
    psnr,
    render_targets,
    windowed_monotone,
)
from jincsplat.gradients import run_gradcheck  # noqa: E402
from jincsplat.kernels import KernelKind, KernelTag, RadialKernel  # noqa: E402
from jincsplat.projection import (  # noqa: E402
    NOT_ELLIPSE,
    Camera,
    PrimitivePose,
    classify_conic,
    line_integral,
    pixel_ray,
    threshold_conic,
    whiten,
)
from jincsplat.rasterizer import RenderConfig, render, render_with_grad, tile_artifact_metric  # noqa: E402
from jincsplat.special import REL_FLOOR, bessel_j0, bessel_j1, switchover_jumps  # noqa: E402
from jincsplat.spectral import (  # noqa: E402
    Domain,
    Weighting,
    calibrate_convention,
    energy_radius_95,
    normalized_sigma,
)

from oracles import bessel_j, line_integral_quadrature  # noqa: E402

G = KernelKind(KernelTag.Gaussian)
J = KernelKind(KernelTag.Jinc)
MG = KernelKind(KernelTag.ModulatedGaussian)


def random_view(rng):
    """Random camera on a sphere looking at the origin and a primitive near it."""
    eye = rng.normal(size=3)
    eye *= rng.uniform(2.5, 6.0) / np.linalg.norm(eye)
    cam = Camera.look_at(eye, rng.uniform(-0.2, 0.2, 3), [0, 1, 0], rng.uniform(40, 120),
                         rng.uniform(40, 120), 64, 64)
    q = rng.normal(size=4)
    pose = PrimitivePose(rng.uniform(-0.5, 0.5, 3), q / np.linalg.norm(q),
                         np.log(rng.uniform(0.01, 0.3, 3)))
    return pose, cam


# 1 -------------------------------------------------------------------------
def c1_integrals(n: int, seed: int = 1):
    rng = np.random.default_rng(seed)
    got = np.empty(n)
    ref = np.empty(n)
    t0 = time.perf_counter()
    for i in range(n):
        pose, cam = random_view(rng)
        a, b = pixel_ray(cam, *rng.uniform(0, 64, 2))
        got[i] = line_integral(whiten(pose, a, b))
        ref[i] = line_integral_quadrature(pose.mu, pose.quat, pose.scales, a, b)
    elapsed = time.perf_counter() - t0
    err = np.abs(got - ref) / np.maximum(np.abs(ref), 1e-9)
    return got, ref, float(err.max()), elapsed


# 2 -------------------------------------------------------------------------
def c2_gradcheck(cases: int, seed: int = 0):
    return {r.op: r.max_rel_err for r in run_gradcheck(seed, cases)}


_FIELDS = ("mu", "log_scales", "quat", "opacity_logit", "color", "omega_logit")


def c2_image_gradient(kind: KernelKind, seed: int = 2, size: int = 32):
    """Worst relative error of the whole-image L2 gradient vs central differences.

    The denominator is max(|fd|, 1e-3 * max |fd|) so parameters that barely
    touch the image do not dominate through round-off.
    """
    rng = np.random.default_rng(seed)
    cam = Camera.look_at([0.4, 0.3, 3.0], [0, 0, 0], [0, 1, 0], 45.0, 45.0, size, size)
    cfg = RenderConfig(min_alpha_contrib=0.0, transmittance_floor=0.0)
    ps, _ = make_synthetic_scene(seed, 5, kind)
    ps.mu *= 0.5
    ps.log_scales += math.log(2.0)
    target = rng.uniform(0, 1, (size, size, 3))

    def loss(p):
        return 0.5 * float(np.sum((render(p, cam, cfg).rgb - target) ** 2))

    _, grad = render_with_grad(ps, cam, cfg, lambda img: img.rgb - target)
    ana, fd = [], []
    fields = _FIELDS if kind.is_modulated else _FIELDS[:-1]
    for f in fields:
        arr = getattr(ps, f)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + 1e-6
            lp = loss(ps)
            arr[idx] = old - 1e-6
            lm = loss(ps)
            arr[idx] = old
            fd.append((lp - lm) / 2e-6)
            ana.append(getattr(grad, f)[idx])
    ana, fd = np.array(ana), np.array(fd)
    den = np.maximum(np.abs(fd), 1e-3 * np.max(np.abs(fd)))
    return ana, float(np.max(np.abs(ana - fd) / den))


# 3 -------------------------------------------------------------------------
def c3_conics(n_valid: int, seed: int = 3):
    """Boundary errors over n_valid ellipses and agreement of NotEllipse with
    the directly evaluated conditions (det H != 0, det H2 > 0, camera outside
    the alpha = q surface)."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    valid = 0
    disagreements = 0
    not_ellipse = 0
    centres = []
    while valid < n_valid:
        pose, cam = random_view(rng)
        q = rng.uniform(1.0, 30.0)
        c = threshold_conic(pose, cam, q)
        H = c.H
        eps = 1e-12 * np.max(np.abs(H).sum(axis=1)) ** 3
        m = pose.whitening @ (cam.center - pose.mu)
        direct = (abs(np.linalg.det(H)) > eps and np.linalg.det(H[:2, :2]) > eps
                  and m @ m > q * q)
        e = classify_conic(c)
        disagreements += int((e is not NOT_ELLIPSE) != direct)
        if e is NOT_ELLIPSE:
            not_ellipse += 1
            continue
        valid += 1
        centres.append(e.center)
        for u, v in e.boundary(64):
            worst = max(worst, abs(whiten(pose, *pixel_ray(cam, u, v)).alpha - q) / q)
    return worst, not_ellipse, disagreements, np.array(centres)


# 4 -------------------------------------------------------------------------
def c4_bessel(n_mp: int):
    """Relative error of J0, J1 against the mpmath Bessel-integral oracle.

    Relative error uses the denominator max(|ref|, REL_FLOOR) so the zeros
    of J0 and J1 do not turn round-off into unbounded ratios.
    """
    x = np.linspace(0.0, 100.0, n_mp)
    r0 = np.array([bessel_j(0, v) for v in x])
    r1 = np.array([bessel_j(1, v) for v in x])
    e0 = np.max(np.abs(bessel_j0(x) - r0) / np.maximum(np.abs(r0), REL_FLOOR))
    e1 = np.max(np.abs(bessel_j1(x) - r1) / np.maximum(np.abs(r1), REL_FLOOR))
    jumps = switchover_jumps()
    return float(e0), float(e1), max(jumps.values()), np.concatenate([bessel_j0(x), bessel_j1(x)])


# 5 -------------------------------------------------------------------------
def c5_calibration():
    return calibrate_convention()


# 6 -------------------------------------------------------------------------
def c6_modulation(cal):
    out = {}
    for kind in (G, MG):
        sigma = normalized_sigma(kind, cal.normalization, cal.weighting)
        k = RadialKernel(kind, sigma)
        out[kind.tag] = tuple(energy_radius_95(k, d, cal.weighting) for d in Domain)
    return out


def c6_omega_one(seed: int = 6, n: int = 60):
    ps, cams = make_synthetic_scene(seed, n, G)
    mod = ps.with_kind(KernelKind(KernelTag.ModulatedGaussian, omega=1.0))
    same = True
    imgs = []
    for cam in cams:
        a, b = render(ps, cam), render(mod, cam)
        same &= bool(np.array_equal(a.rgb, b.rgb) and np.array_equal(a.transmittance, b.transmittance))
        imgs.append(a.rgb)
    return same, np.stack(imgs)


# 7 -------------------------------------------------------------------------
def c7_metrics(seed: int = 7, n: int = 300):
    ps, cams = make_synthetic_scene(seed, n, G)
    jinc = convert_kind(ps, J)
    mj, mg = [], []
    for cam in cams:
        mj.append(tile_artifact_metric(render(jinc, cam, RenderConfig(alpha_cutoff_q=5.0))))
        mg.append(tile_artifact_metric(render(ps, cam)))
    return float(np.mean(mj)), float(np.mean(mg))


# 8 -------------------------------------------------------------------------
def c8_fit(kind: KernelKind, iterations: int, n: int = 300, seed: int = 8, log_every: int = 50):
    gt, cams = make_synthetic_scene(seed, n, kind)
    targets = render_targets(gt, cams)
    t0 = time.perf_counter()
    rep = fit(targets, perturb(gt, seed + 1), FitConfig(iterations=iterations, seed=seed,
                                                      log_every=log_every))
    elapsed = time.perf_counter() - t0
    psnrs = [c.psnr_db for c in rep.checkpoints]
    return rep, elapsed, psnrs, windowed_monotone(psnrs)


# 9 -------------------------------------------------------------------------
def sphere_scene(seed: int, n: int = 12):
    """Opaque Lambertian spheres: (centres, radii, colours)."""
    rng = np.random.default_rng(seed)
    return rng.uniform(-0.5, 0.5, (n, 3)), rng.uniform(0.1, 0.3, n), rng.uniform(0.1, 1.0, (n, 3))


def trace_spheres(scene, cam: Camera) -> np.ndarray:
    """Ray-traced pixel-centre colours of ``scene`` on a black background."""
    centres, radii, colours = scene
    u, v = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    d = np.stack([u, v, np.ones_like(u)], axis=-1) @ cam.K_inv.T @ cam.R
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = cam.center
    light = np.array([0.4, 0.8, 0.45])
    light /= np.linalg.norm(light)
    best = np.full(u.shape, np.inf)
    rgb = np.zeros(u.shape + (3,))
    for c, r, col in zip(centres, radii, colours):
        oc = o - c
        b = d @ oc
        disc = b * b - (oc @ oc - r * r)
        t = -b - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc > 0) & (t > 0) & (t < best)
        normal = (o + t[..., None] * d - c) / r
        shade = 0.3 + 0.7 * np.clip(normal @ light, 0.0, None)
        rgb[hit] = (shade[..., None] * col)[hit]
        best[hit] = t[hit]
    return rgb


def c9_multires(iterations: int, n: int = 300, seed: int = 9, factor: int = 4):
    """Fit Gaussian and Jinc splats to the same ray-traced sphere scene.

    Targets are traced at 4x resolution and box-filtered to 64x64, so
    neither kernel can represent them exactly.  Both fits start from the
    same default init.  Returns mean PSNR per kernel at full resolution and
    after a factor-4 box downsample of both render and target.
    """
    from jincsplat.fit import default_init, ring_cameras
    from jincsplat.rasterizer import ImageBuffer

    scene = sphere_scene(seed)
    targets = [(cam, ImageBuffer.from_rgb(trace_spheres(scene, cam.scaled(factor))).downsample(factor))
               for cam in ring_cameras()]
    out = {}
    finals = []
    for kind in (G, J):
        rep = fit(targets, default_init(seed, n, kind),
                  FitConfig(iterations=iterations, seed=seed, log_every=max(iterations, 1)))
        renders = [render(rep.final, cam) for cam, _ in targets]
        full = float(np.mean([psnr(r, t) for r, (_, t) in zip(renders, targets)]))
        low = float(np.mean([psnr(r.downsample(factor), t.downsample(factor))
                             for r, (_, t) in zip(renders, targets)]))
        out[kind.tag] = (full, low)
        finals.append(rep.final)
    return out, finals


# 10 ------------------------------------------------------------------------
def _feed(h, *arrays):
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=np.float64)).tobytes())


def small_digest() -> str:
    """sha256 over reduced versions of criteria 1 to 9."""
    h = hashlib.sha256()
    got, ref, _, _ = c1_integrals(40)
    _feed(h, got, ref)
    _feed(h, list(c2_gradcheck(10).values()))
    for kind in (G, J):
        _feed(h, c2_image_gradient(kind, size=16)[0])
    worst, ne, dis, centres = c3_conics(10)
    _feed(h, [worst, ne, dis], centres)
    _feed(h, c4_bessel(5)[3])
    radii = [energy_radius_95(RadialKernel(KernelKind(t), 1.0), d, Weighting.Amplitude)
             for t in (KernelTag.Gaussian, KernelTag.StudentT) for d in Domain]
    _feed(h, radii)
    _feed(h, c6_omega_one(n=20)[1])
    _feed(h, c7_metrics(n=60))
    for kind in (G, J):
        rep, _, psnrs, _ = c8_fit(kind, 12, n=80, log_every=4)
        _feed(h, psnrs, rep.final.mu, rep.final.quat, rep.final.log_scales, rep.final.opacity_logit,
              rep.final.color)
    res, finals = c9_multires(6, n=60)
    _feed(h, [v for pair in res.values() for v in pair])
    for ps in finals:
        _feed(h, ps.mu, ps.log_scales)
    return h.hexdigest()


if __name__ == "__main__":
    print(small_digest())
