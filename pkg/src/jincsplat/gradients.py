"""Analytic derivatives of the Jinc ray integral and their chain rules.

The closest-approach parameter alpha depends on the primitive through the
whitened offset m = M (a - mu) and direction n = M b, with M = S^-1 R^T.
Useful identities (g = M^T (m - beta n), beta = m.n / |n|^2):

    d(alpha^2)/d mu    = -2 g
    d(alpha^2)/d Sigma = -g g^T        (as a symmetric gradient)

``dalpha_dSigma`` evaluates the published matrix expression literally, in
world-space offsets; the identities above are what the rasterizer uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .projection import (
    Camera,
    PrimitivePose,
    WhitenedRay,
    pixel_ray,
    quat_to_rotmat_batch,
    whiten,
)
from .special import bessel_j0, bessel_j1, jinc2_deriv

__all__ = [
    "PrimitiveGrad",
    "GradientError",
    "ALPHA_EPS",
    "dI_dalpha",
    "dalpha_dmu",
    "dalpha_dSigma",
    "sigma_grad_to_params",
    "rotmat_grad_to_quat",
    "chain_to_params",
    "GradcheckRow",
    "run_gradcheck",
    "alpha_from_sigma",
]

# Below this alpha the cusp of |m x n| makes the gradient undefined; 0 is used.
ALPHA_EPS = 1e-12


class GradientError(FloatingPointError):
    """A gradient came out non-finite."""


@dataclass
class PrimitiveGrad:
    d_mu: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_logscales: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_quat: np.ndarray = field(default_factory=lambda: np.zeros(4))
    d_opacity_logit: float = 0.0
    d_color: np.ndarray = field(default_factory=lambda: np.zeros(3))
    d_omega_logit: float = 0.0

    def check_finite(self, prim_id: int = -1) -> None:
        vals = [self.d_mu, self.d_logscales, self.d_quat, self.d_color,
                [self.d_opacity_logit, self.d_omega_logit]]
        if not all(np.all(np.isfinite(v)) for v in vals):
            raise GradientError(f"non-finite gradient for primitive {prim_id}")

    def as_vector(self) -> np.ndarray:
        return np.concatenate([
            self.d_mu, self.d_logscales, self.d_quat, [self.d_opacity_logit],
            self.d_color, [self.d_omega_logit],
        ])


def dI_dalpha(alpha: float, n_norm: float) -> float:
    """(1/|n|) [pi J0(a)/a - 2 pi J1(a)/a^2]; tends to -pi a/(8 |n|) as a -> 0."""
    if not n_norm > 0:
        raise ValueError("n_norm must be > 0")
    # pi/(2|n|) * d/da (2 J1(a)/a) is the same expression, series-safe near 0
    return float(0.5 * math.pi * jinc2_deriv(alpha) / n_norm)


def dI_dalpha_direct(alpha: float, n_norm: float) -> float:
    """The two-term formula evaluated as written (cancels badly for small alpha)."""
    a = float(alpha)
    return (math.pi * bessel_j0(a) / a - 2.0 * math.pi * bessel_j1(a) / (a * a)) / n_norm


def dalpha_dmu(w: WhitenedRay, pose: PrimitivePose) -> np.ndarray:
    """-(1/alpha) (RS)^-T (m - (m.n/|n|^2) n); zero at alpha = 0."""
    if w.alpha <= ALPHA_EPS:
        return np.zeros(3)
    beta = (w.m @ w.n) / (w.n @ w.n)
    return -(pose.whitening.T @ (w.m - beta * w.n)) / w.alpha


def dalpha_dSigma(w: WhitenedRay, pose: PrimitivePose) -> np.ndarray:
    """Matrix derivative of alpha with respect to Sigma, symmetrised.

    Uses the world-space offset d = a - mu = RS m and direction e = b = RS n:

        Sigma^-1 / (2 alpha N^2) (-N^2 d d^T + 2 c N e d^T - c^2 e e^T) Sigma^-1

    with N = e^T Sigma^-1 e and c = d^T Sigma^-1 e.
    """
    if w.alpha <= ALPHA_EPS:
        return np.zeros((3, 3))
    A = pose.R * pose.scales[None, :]
    d = A @ w.m
    e = A @ w.n
    P = np.linalg.inv(pose.Sigma)
    N = e @ P @ e
    c = d @ P @ e
    inner = -(N * N) * np.outer(d, d) + 2.0 * c * N * np.outer(e, d) - c * c * np.outer(e, e)
    G = P @ inner @ P / (2.0 * w.alpha * N * N)
    return 0.5 * (G + G.T)


def alpha_from_sigma(Sigma, mu, a, b) -> float:
    """alpha from Sigma directly: sqrt(d^T P d - (d^T P b)^2 / b^T P b)."""
    P = np.linalg.inv(np.asarray(Sigma, dtype=np.float64))
    d = np.asarray(a, dtype=np.float64) - np.asarray(mu, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    N = b @ P @ b
    c = d @ P @ b
    return math.sqrt(max(d @ P @ d - c * c / N, 0.0))


def rotmat_grad_to_quat(G_R, quat) -> np.ndarray:
    """Gradient with respect to a (possibly unnormalised) quaternion.

    ``G_R`` is dL/dR for R = R(q / |q|); the result is projected through
    the normalisation, so it is orthogonal to q.  Works on stacks (..., 4).
    """
    G = np.asarray(G_R, dtype=np.float64)
    q = np.asarray(quat, dtype=np.float64)
    nrm = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / nrm
    w, x, y, z = (qh[..., i] for i in range(4))
    g = lambda i, j: G[..., i, j]
    dw = 2 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1))
    dx = 2 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2 * x * g(1, 1) - w * g(1, 2)
              + z * g(2, 0) + w * g(2, 1) - 2 * x * g(2, 2))
    dy = 2 * (-2 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
              - w * g(2, 0) + z * g(2, 1) - 2 * y * g(2, 2))
    dz = 2 * (-2 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2 * z * g(1, 1)
              + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
    dqh = np.stack([dw, dx, dy, dz], axis=-1)
    return (dqh - qh * np.sum(qh * dqh, axis=-1, keepdims=True)) / nrm


def sigma_grad_to_params(G_Sigma, quat, log_scales) -> tuple[np.ndarray, np.ndarray]:
    """Chain a symmetric dL/dSigma through Sigma = (RS)(RS)^T.

    Returns (dL/dquat, dL/dlog_scales); accepts single primitives or stacks.
    """
    G = np.asarray(G_Sigma, dtype=np.float64)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    q = np.asarray(quat, dtype=np.float64)
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    R = quat_to_rotmat_batch(q)
    A = R * s[..., None, :]
    dA = 2.0 * G @ A
    d_s = np.sum(dA * R, axis=-2)
    dR = dA * s[..., None, :]
    return rotmat_grad_to_quat(dR, q), d_s * s


def chain_to_params(
    dI: float, w: WhitenedRay, pose: PrimitivePose, d_pixel: float
) -> PrimitiveGrad:
    """Geometric gradient of a pixel value that depends on one ray's alpha.

    ``dI`` is the derivative of the ray response with respect to alpha and
    ``d_pixel`` the upstream derivative of the loss with respect to that
    response.  Opacity, colour and omega enter through compositing, which the
    rasterizer handles; they are zero here.
    """
    if not (math.isfinite(dI) and math.isfinite(d_pixel)):
        raise GradientError("non-finite upstream gradient")
    scale = d_pixel * dI
    out = PrimitiveGrad()
    if scale == 0.0:
        return out
    out.d_mu = scale * dalpha_dmu(w, pose)
    dq, dls = sigma_grad_to_params(scale * dalpha_dSigma(w, pose), pose.quat, pose.log_scales)
    out.d_quat = dq
    out.d_logscales = dls
    out.check_finite()
    return out


# ---------------------------------------------------------------------------
# Finite-difference verification


@dataclass
class GradcheckRow:
    op: str
    max_rel_err: float
    worst_case: dict
    cases: int

    def passed(self, tol: float = 1e-5) -> bool:
        return self.max_rel_err <= tol


def _rel(analytic, fd) -> float:
    analytic = np.atleast_1d(np.asarray(analytic, dtype=np.float64))
    fd = np.atleast_1d(np.asarray(fd, dtype=np.float64))
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(analytic), 1e-8)))


def _fd5(f, x0: float, h: float) -> float:
    # fourth-order central difference
    return (-f(x0 + 2 * h) + 8 * f(x0 + h) - 8 * f(x0 - h) + f(x0 - 2 * h)) / (12 * h)


def random_quat(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return q / np.linalg.norm(q)


def random_case(rng: np.random.Generator, alpha_range=(0.05, 25.0)):
    """Random (pose, camera, pixel) whose ray has alpha inside ``alpha_range``."""
    while True:
        dist = rng.uniform(3.0, 6.0)
        d = rng.normal(size=3)
        eye = dist * d / np.linalg.norm(d)
        up = rng.normal(size=3)
        if np.linalg.norm(np.cross(up, eye)) < 1e-3:
            continue
        f = rng.uniform(60.0, 200.0)
        cam = Camera.look_at(eye, rng.uniform(-0.2, 0.2, 3), up, f, f * rng.uniform(0.8, 1.2), 64, 48)
        pose = PrimitivePose(
            rng.uniform(-0.5, 0.5, 3), random_quat(rng), np.log(rng.uniform(0.05, 0.5, 3))
        )
        for _ in range(50):
            u, v = rng.uniform(0, cam.width), rng.uniform(0, cam.height)
            a, b = pixel_ray(cam, u, v)
            w = whiten(pose, a, b)
            if alpha_range[0] <= w.alpha <= alpha_range[1]:
                return pose, cam, (u, v), a, b, w


def run_gradcheck(seed: int = 0, cases: int = 200) -> list[GradcheckRow]:
    """Compare every analytic derivative with central differences.

    dI/dalpha is differenced in alpha; dalpha/dmu in each coordinate of mu;
    dalpha/dSigma along random symmetric directions of Sigma, with alpha
    recomputed from Sigma^-1 so the check does not reuse the whitening.
    The chained quaternion and log-scale gradients are differenced through
    the pose parameters.
    """
    rng = np.random.default_rng(seed)
    worst = {k: (0.0, {}) for k in ("dI_dalpha", "dalpha_dmu", "dalpha_dSigma", "chain_quat_logscale")}

    def note(op, err, info):
        if err >= worst[op][0]:
            worst[op] = (err, info)

    for _ in range(cases):
        pose, cam, (u, v), a, b, w = random_case(rng)
        info = {"alpha": w.alpha, "u": u, "v": v, "mu": pose.mu.tolist(),
                "scales": pose.scales.tolist()}
        nn = w.n_norm
        # dI/dalpha
        h = 1e-3 * max(1.0, w.alpha)
        fd = _fd5(lambda al: 0.5 * math.pi * float(jinc2_ref(al)) / nn, w.alpha, h)
        note("dI_dalpha", _rel(dI_dalpha(w.alpha, nn), fd), info)
        # dalpha/dmu
        g = dalpha_dmu(w, pose)
        fdg = np.empty(3)
        for i in range(3):
            def f(x, i=i):
                mu = pose.mu.copy()
                mu[i] = x
                return whiten(PrimitivePose(mu, pose.quat, pose.log_scales), a, b).alpha
            fdg[i] = _fd5(f, pose.mu[i], 1e-4 * float(np.min(pose.scales)))
        note("dalpha_dmu", _rel(g, fdg), info)
        # dalpha/dSigma along random symmetric directions
        G = dalpha_dSigma(w, pose)
        Sigma = pose.Sigma
        errs = []
        for _ in range(3):
            D = rng.normal(size=(3, 3))
            D = 0.5 * (D + D.T) * float(np.min(pose.scales)) ** 2
            ana = float(np.sum(G * D))
            fdd = _fd5(lambda t: alpha_from_sigma(Sigma + t * D, pose.mu, a, b), 0.0, 1e-3)
            errs.append(_rel(ana, fdd))
        note("dalpha_dSigma", max(errs), info)
        # chain through quaternion and log-scales (L = alpha)
        Gq, Gs = sigma_grad_to_params(G, pose.quat, pose.log_scales)
        fdq = np.empty(4)
        for i in range(4):
            def fq(x, i=i):
                q = pose.quat.copy()
                q[i] = x
                return whiten(PrimitivePose(pose.mu, q, pose.log_scales), a, b).alpha
            fdq[i] = _fd5(fq, pose.quat[i], 1e-4)
        fds = np.empty(3)
        for i in range(3):
            def fs(x, i=i):
                ls = pose.log_scales.copy()
                ls[i] = x
                return whiten(PrimitivePose(pose.mu, pose.quat, ls), a, b).alpha
            fds[i] = _fd5(fs, pose.log_scales[i], 1e-4)
        note("chain_quat_logscale", max(_rel(Gq, fdq), _rel(Gs, fds)), info)
    return [GradcheckRow(op, err, info, cases) for op, (err, info) in worst.items()]


def jinc2_ref(alpha: float) -> float:
    """2 J1(a)/a from the shared J1 (used only as the differenced function)."""
    if alpha == 0.0:
        return 1.0
    return 2.0 * float(bessel_j1(alpha)) / alpha
