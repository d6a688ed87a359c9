"""Scene, image and camera persistence.

Scene files are little-endian: the magic ``JSC1`` (format version 1), a u32
record count, then one packed record per primitive::

    mu f32x3, quat f32x4, log_scales f32x3, opacity_logit f32,
    color f32x3, kind u8, omega_logit f32, f0 f32

``omega_logit`` may be +-inf (omega exactly 1 or 0); every other float must
be finite.

Images are written as binary PPM (P6, 8 bit) or as raw float32 with a
16-byte header (``JSPL``, u32 width, u32 height, u32 channels).
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

from .kernels import KernelTag
from .projection import Camera
from .rasterizer import ImageBuffer, PrimitiveSet

__all__ = [
    "SceneFormatError",
    "BadMagicError",
    "TruncatedFileError",
    "NonFiniteFieldError",
    "InvalidFieldError",
    "SCENE_MAGIC",
    "RAW_MAGIC",
    "save_scene",
    "load_scene",
    "scene_to_bytes",
    "scene_from_bytes",
    "write_ppm",
    "read_ppm",
    "write_raw",
    "read_raw",
    "write_image",
    "save_camera",
    "load_camera",
    "camera_to_dict",
    "camera_from_dict",
]

SCENE_MAGIC = b"JSC1"
RAW_MAGIC = b"JSPL"
_RECORD = struct.Struct("<3f4f3ff3fBff")
_HEADER = struct.Struct("<4sI")
_RAW_HEADER = struct.Struct("<4sIII")


class SceneFormatError(ValueError):
    """Base class for malformed scene or image files."""


class BadMagicError(SceneFormatError):
    pass


class TruncatedFileError(SceneFormatError):
    pass


class NonFiniteFieldError(SceneFormatError):
    pass


class InvalidFieldError(SceneFormatError):
    pass


def scene_to_bytes(ps: PrimitiveSet) -> bytes:
    n = len(ps)
    dt = np.dtype([
        ("mu", "<f4", 3), ("quat", "<f4", 4), ("log_scales", "<f4", 3), ("opacity_logit", "<f4"),
        ("color", "<f4", 3), ("kind", "u1"), ("omega_logit", "<f4"), ("f0", "<f4"),
    ], align=False)
    assert dt.itemsize == _RECORD.size
    rec = np.zeros(n, dtype=dt)
    for name in dt.names:
        rec[name] = getattr(ps, name)
    return _HEADER.pack(SCENE_MAGIC, n) + rec.tobytes()


def scene_from_bytes(data: bytes) -> PrimitiveSet:
    if len(data) < _HEADER.size:
        raise TruncatedFileError("file shorter than the scene header")
    magic, n = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise BadMagicError(f"bad scene magic {magic!r}")
    need = _HEADER.size + n * _RECORD.size
    if len(data) < need:
        raise TruncatedFileError(f"expected {n} records ({need} bytes), got {len(data)} bytes")
    if len(data) > need:
        raise SceneFormatError("trailing bytes after the last record")
    fields = {k: [] for k in ("mu", "quat", "log_scales", "opacity_logit", "color", "kind",
                               "omega_logit", "f0")}
    for i in range(n):
        v = _RECORD.unpack_from(data, _HEADER.size + i * _RECORD.size)
        fields["mu"].append(v[0:3])
        fields["quat"].append(v[3:7])
        fields["log_scales"].append(v[7:10])
        fields["opacity_logit"].append(v[10])
        fields["color"].append(v[11:14])
        fields["kind"].append(v[14])
        fields["omega_logit"].append(v[15])
        fields["f0"].append(v[16])
        floats = v[:14] + v[16:]
        if not all(np.isfinite(floats)) or np.isnan(v[15]):
            raise NonFiniteFieldError(f"record {i} has a non-finite field")
        if v[14] not in {int(t) for t in KernelTag}:
            raise InvalidFieldError(f"record {i} has unknown kind tag {v[14]}")
        if not all(0.0 <= c <= 1.0 for c in v[11:14]):
            raise InvalidFieldError(f"record {i} has a colour outside [0, 1]")
        if not any(v[3:7]):
            raise InvalidFieldError(f"record {i} has a zero quaternion")
    if n == 0:
        return PrimitiveSet.empty()
    return PrimitiveSet(**{k: np.array(v, dtype=np.uint8 if k == "kind" else np.float64)
                           for k, v in fields.items()})


def save_scene(path, ps: PrimitiveSet) -> None:
    with open(path, "wb") as fh:
        fh.write(scene_to_bytes(ps))


def load_scene(path) -> PrimitiveSet:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())


def _to_u8(rgb) -> np.ndarray:
    return np.round(np.clip(rgb, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_ppm(path, img: ImageBuffer) -> None:
    data = _to_u8(img.rgb)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a P6 file as float RGB in [0, 1], shape (H, W, 3)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError("incomplete PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise BadMagicError("not a binary PPM file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise SceneFormatError("only 8-bit PPM is supported")
    pos += 1
    body = data[pos:pos + w * h * 3]
    if len(body) < w * h * 3:
        raise TruncatedFileError("PPM pixel data truncated")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def write_raw(path, img: ImageBuffer) -> None:
    data = np.ascontiguousarray(img.rgb, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_RAW_HEADER.pack(RAW_MAGIC, img.width, img.height, 3))
        fh.write(data.tobytes())


def read_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < _RAW_HEADER.size:
        raise TruncatedFileError("file shorter than the raw image header")
    magic, w, h, c = _RAW_HEADER.unpack_from(data)
    if magic != RAW_MAGIC:
        raise BadMagicError(f"bad raw image magic {magic!r}")
    need = _RAW_HEADER.size + 4 * w * h * c
    if len(data) < need:
        raise TruncatedFileError("raw image data truncated")
    arr = np.frombuffer(data, dtype="<f4", count=w * h * c, offset=_RAW_HEADER.size)
    return arr.reshape(h, w, c).astype(np.float64)


def write_image(path, img: ImageBuffer) -> None:
    """PPM for ``.ppm`` paths, raw float32 otherwise."""
    if os.fspath(path).lower().endswith(".ppm"):
        write_ppm(path, img)
    else:
        write_raw(path, img)


def camera_to_dict(cam: Camera) -> dict:
    return {
        "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
        "R": cam.R.tolist(), "t": cam.t.tolist(),
        "width": cam.width, "height": cam.height,
    }


def camera_from_dict(d: dict) -> Camera:
    """Build a camera from explicit extrinsics or from eye/target/up."""
    try:
        if "eye" in d:
            return Camera.look_at(d["eye"], d.get("target", [0.0, 0.0, 0.0]), d.get("up", [0.0, 1.0, 0.0]),
                                  float(d["fx"]), float(d.get("fy", d["fx"])), int(d["width"]),
                                  int(d["height"]), d.get("cx"), d.get("cy"))
        return Camera(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                      np.asarray(d["R"], dtype=np.float64), np.asarray(d["t"], dtype=np.float64),
                      int(d["width"]), int(d["height"]))
    except KeyError as exc:
        raise InvalidFieldError(f"camera is missing field {exc.args[0]!r}") from None


def save_camera(path, cam: Camera) -> None:
    with open(path, "w") as fh:
        json.dump(camera_to_dict(cam), fh, indent=2)


def load_camera(path) -> Camera:
    with open(path) as fh:
        return camera_from_dict(json.load(fh))
