"""Camera geometry, whitened rays, the closed-form Jinc ray integral and the
threshold conic that bounds a splat's footprint.

Conventions: camera frame x right, y down, z forward; pixel (i, j) has its
centre at (i + 0.5, j + 0.5).  A world point X maps to camera coordinates
R_c X + t.  Ray directions b = R_c^T K^-1 [u, v, 1] are deliberately left
unnormalised.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .special import jinc2

__all__ = [
    "Camera",
    "PrimitivePose",
    "WhitenedRay",
    "Conic2D",
    "Ellipse2D",
    "NotEllipse",
    "NOT_ELLIPSE",
    "DegenerateRayError",
    "quat_to_rotmat",
    "quat_to_rotmat_batch",
    "pixel_ray",
    "whiten",
    "line_integral",
    "threshold_conic",
    "classify_conic",
    "conic_sign_conditions",
]

LOG_SCALE_MIN = math.log(1e-7)
LOG_SCALE_MAX = math.log(1e7)


class DegenerateRayError(ValueError):
    """The ray direction is zero."""


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of the quaternion (w, x, y, z), normalised first."""
    q = np.asarray(q, dtype=np.float64)
    nrm = np.linalg.norm(q)
    if not nrm > 0:
        raise ValueError("zero quaternion")
    w, x, y, z = q / nrm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_to_rotmat_batch(q) -> np.ndarray:
    """Rotation matrices (N, 3, 3) for quaternions (N, 4), normalised first."""
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    R: np.ndarray  # world -> camera rotation
    t: np.ndarray  # camera-frame translation
    width: int
    height: int

    def __post_init__(self):
        R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        t = np.array(self.t, dtype=np.float64).reshape(3)
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-9 or np.linalg.det(R) <= 0:
            raise ValueError("R must be a proper rotation")
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be > 0")
        if int(self.width) < 1 or int(self.height) < 1:
            raise ValueError("image size must be >= 1")
        if not np.all(np.isfinite(t)):
            raise ValueError("t must be finite")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    @property
    def K_inv(self) -> np.ndarray:
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ]
        )

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates, -R^T t."""
        return -self.R.T @ self.t

    def to_camera(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.R.T + self.t

    def project(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Pixel coordinates and depth of world points (..., 3)."""
        Xc = self.to_camera(X)
        z = Xc[..., 2]
        u = self.fx * Xc[..., 0] / z + self.cx
        v = self.fy * Xc[..., 1] / z + self.cy
        return np.stack([u, v], axis=-1), z

    def scaled(self, factor: float) -> Camera:
        """Same pose with the image resampled by ``factor`` (e.g. 4 or 0.25)."""
        return Camera(
            self.fx * factor,
            self.fy * factor,
            self.cx * factor,
            self.cy * factor,
            self.R,
            self.t,
            round(self.width * factor),
            round(self.height * factor),
        )

    @classmethod
    def look_at(cls, eye, target, up, fx, fy, width, height, cx=None, cy=None) -> Camera:
        """Camera at ``eye`` looking at ``target``; ``up`` points up in the image."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(
            fx,
            fy,
            width / 2.0 if cx is None else cx,
            height / 2.0 if cy is None else cy,
            R,
            -R @ eye,
            width,
            height,
        )


@dataclass(frozen=True)
class PrimitivePose:
    """Centre, orientation (unit quaternion w, x, y, z) and log scales."""

    mu: np.ndarray
    quat: np.ndarray
    log_scales: np.ndarray

    def __post_init__(self):
        mu = np.array(self.mu, dtype=np.float64).reshape(3)
        q = np.array(self.quat, dtype=np.float64).reshape(4)
        ls = np.array(self.log_scales, dtype=np.float64).reshape(3)
        nrm = np.linalg.norm(q)
        if not (nrm > 0 and np.isfinite(nrm)):
            raise ValueError("quaternion must be finite and non-zero")
        if np.any(ls < LOG_SCALE_MIN) or np.any(ls > LOG_SCALE_MAX):
            raise ValueError("scales must lie in [1e-7, 1e7]")
        if not np.all(np.isfinite(mu)):
            raise ValueError("mu must be finite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "quat", q / nrm)
        object.__setattr__(self, "log_scales", ls)

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.quat)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def whitening(self) -> np.ndarray:
        """M = S^-1 R^T, mapping world offsets into the kernel's unit frame."""
        return (1.0 / self.scales)[:, None] * self.R.T

    @property
    def Sigma(self) -> np.ndarray:
        A = self.R * self.scales[None, :]
        return A @ A.T


@dataclass(frozen=True)
class WhitenedRay:
    m: np.ndarray
    n: np.ndarray
    alpha: float

    @property
    def n_norm(self) -> float:
        return float(np.linalg.norm(self.n))


@dataclass(frozen=True)
class Conic2D:
    """Symmetric homogeneous conic; inside the footprint u_h^T H u_h > 0."""

    H: np.ndarray

    def __post_init__(self):
        H = np.array(self.H, dtype=np.float64).reshape(3, 3)
        H = 0.5 * (H + H.T)
        object.__setattr__(self, "H", H)

    def evaluate(self, u, v):
        uh = np.stack(np.broadcast_arrays(np.asarray(u, float), np.asarray(v, float), 1.0), axis=-1)
        return np.einsum("...i,ij,...j->...", uh, self.H, uh)


@dataclass(frozen=True)
class Ellipse2D:
    """Boundary (x - center)^T shape (x - center) = 1 in pixel coordinates."""

    center: np.ndarray
    shape: np.ndarray

    def __post_init__(self):
        c = np.array(self.center, dtype=np.float64).reshape(2)
        A = np.array(self.shape, dtype=np.float64).reshape(2, 2)
        A = 0.5 * (A + A.T)
        if not np.all(np.linalg.eigvalsh(A) > 0):
            raise ValueError("shape must be SPD")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", A)

    def half_extents(self) -> np.ndarray:
        """Half widths of the axis-aligned bounding box."""
        return np.sqrt(np.diag(np.linalg.inv(self.shape)))

    def boundary(self, n: int = 64) -> np.ndarray:
        w, V = np.linalg.eigh(self.shape)
        th = 2.0 * np.pi * np.arange(n) / n
        circ = np.stack([np.cos(th), np.sin(th)], axis=-1)
        return self.center + (circ / np.sqrt(w)) @ V.T

    def contains(self, pts) -> np.ndarray:
        d = np.asarray(pts, dtype=np.float64) - self.center
        return np.einsum("...i,ij,...j->...", d, self.shape, d) <= 1.0


class NotEllipse:
    """Sentinel value: the conic bounds no finite real footprint."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "NotEllipse"


NOT_ELLIPSE = NotEllipse()


def pixel_ray(cam: Camera, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """Origin a = -R_c^T t and direction b = R_c^T K^-1 [u, v, 1]."""
    a = cam.center
    b = cam.R.T @ (cam.K_inv @ np.array([u, v, 1.0]))
    return a, b


def whiten(pose: PrimitivePose, a, b) -> WhitenedRay:
    b = np.asarray(b, dtype=np.float64)
    if not np.any(b):
        raise DegenerateRayError("ray direction b is zero")
    M = pose.whitening
    m = M @ (np.asarray(a, dtype=np.float64) - pose.mu)
    n = M @ b
    alpha = float(np.linalg.norm(np.cross(m, n)) / np.linalg.norm(n))
    return WhitenedRay(m, n, alpha)


def line_integral(w: WhitenedRay) -> float:
    """pi J1(alpha) / (|n| alpha), with the limit pi / (2 |n|) at alpha = 0."""
    return float(0.5 * math.pi * jinc2(w.alpha) / w.n_norm)


def _conic_matrix(M, R_c, K_inv, m, q) -> np.ndarray:
    B = M @ R_c.T @ K_inv
    Bm = B.T @ m
    return np.outer(Bm, Bm) - (m @ m - q * q) * (B.T @ B)


def threshold_conic(pose: PrimitivePose, cam: Camera, q: float) -> Conic2D:
    """Pixels whose rays pass at whitened distance alpha = q from the centre.

    With n = B u_h and m the whitened camera centre, alpha < q is
    (m.B u)^2 - (|m|^2 - q^2)|B u|^2 > 0, i.e. u_h^T H u_h > 0.
    """
    if not q > 0:
        raise ValueError("q must be > 0")
    M = pose.whitening
    m = M @ (cam.center - pose.mu)
    return Conic2D(_conic_matrix(M, cam.R, cam.K_inv, m, q))


def conic_sign_conditions(c: Conic2D) -> tuple[bool, bool]:
    """(|det H| > eps, det H2 > eps) with eps = 1e-12 |H|_inf^3."""
    H = c.H
    eps = 1e-12 * np.max(np.abs(H).sum(axis=1)) ** 3
    return abs(np.linalg.det(H)) > eps, np.linalg.det(H[:2, :2]) > eps


def classify_conic(c: Conic2D) -> Ellipse2D | NotEllipse:
    """Real ellipse of the conic, or NOT_ELLIPSE.

    Centre -H2^-1 p and shape -(det H2 / det H) H2.  Passing the sign tests
    is not enough on its own: a definite H (camera inside the alpha = q
    surface) gives an imaginary ellipse whose shape is negative definite, so
    the shape is also required to be SPD.
    """
    nz, pos = conic_sign_conditions(c)
    if not (nz and pos):
        return NOT_ELLIPSE
    H = c.H
    H2 = H[:2, :2]
    p = H[:2, 2]
    shape = -(np.linalg.det(H2) / np.linalg.det(H)) * H2
    if not (shape[0, 0] > 0 and np.linalg.det(shape) > 0):
        return NOT_ELLIPSE
    center = -np.linalg.solve(H2, p)
    return Ellipse2D(center, shape)
