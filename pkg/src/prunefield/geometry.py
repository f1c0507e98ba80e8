"""Pinhole cameras, ray generation and point projection.

Conventions: world-to-camera extrinsics ``x_cam = R @ x_world + t``; camera
axes x right, y down, z forward; pixel (px, py) has its center at
(px + 0.5, py + 0.5).
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError, MalformedFileError, MissingFileError

_ORTHO_TOL = 1e-9
_MIN_DEPTH = 1e-9


def _frozen(a, shape):
    arr = np.array(a, dtype=np.float64).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray
    view_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rotation", _frozen(self.rotation, (3, 3)))
        object.__setattr__(self, "translation", _frozen(self.translation, (3,)))
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "view_id", int(self.view_id))
        if not (self.fx > 0 and self.fy > 0):
            raise InputError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise InputError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InputError(f"principal point ({self.cx}, {self.cy}) outside image")
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise InputError("non-finite pose")
        if np.abs(R @ R.T - np.eye(3)).max() > _ORTHO_TOL or abs(np.linalg.det(R) - 1.0) > _ORTHO_TOL:
            raise InputError("rotation must be orthonormal with determinant +1")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), *, fx, fy=None, width, height,
                cx=None, cy=None, view_id=0) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-12:
            raise InputError("up vector parallel to viewing direction")
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        R = np.stack([right, down, forward])
        # re-orthonormalize so the 1e-9 invariant holds after cross products
        u, _, vt = np.linalg.svd(R)
        R = u @ vt
        return cls(fx=fx, fy=fx if fy is None else fy,
                   cx=width / 2 if cx is None else cx, cy=height / 2 if cy is None else cy,
                   width=width, height=height, rotation=R, translation=-R @ eye, view_id=view_id)

    def to_record(self) -> dict:
        return {
            "view_id": self.view_id,
            "fx": float(self.fx), "fy": float(self.fy),
            "cx": float(self.cx), "cy": float(self.cy),
            "width": self.width, "height": self.height,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
        }

    @classmethod
    def from_record(cls, rec: dict) -> "Camera":
        return cls(fx=rec["fx"], fy=rec["fy"], cx=rec["cx"], cy=rec["cy"],
                   width=rec["width"], height=rec["height"],
                   rotation=rec["rotation"], translation=rec["translation"],
                   view_id=rec["view_id"])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int] = (0, 0)
    view_id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "origin", _frozen(self.origin, (3,)))
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        n = np.linalg.norm(d)
        if n == 0 or not np.isfinite(n):
            raise InputError("ray direction must be non-zero")
        if abs(n - 1.0) > 1e-12:
            d = d / n
        object.__setattr__(self, "direction", _frozen(d, (3,)))

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.direction


def ray_for_pixel(camera: Camera, px: int, py: int) -> Ray:
    if not (0 <= px < camera.width and 0 <= py < camera.height):
        raise InputError(f"pixel ({px}, {py}) outside {camera.width}x{camera.height} image")
    d_cam = np.array([(px + 0.5 - camera.cx) / camera.fx, (py + 0.5 - camera.cy) / camera.fy, 1.0])
    d = camera.rotation.T @ d_cam
    return Ray(camera.center, d / np.linalg.norm(d), (int(px), int(py)), camera.view_id)


def pixel_rays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major, shape (H*W, 3)."""
    py, px = np.mgrid[0:camera.height, 0:camera.width]
    d_cam = np.stack([(px.ravel() + 0.5 - camera.cx) / camera.fx,
                      (py.ravel() + 0.5 - camera.cy) / camera.fy,
                      np.ones(px.size)], axis=1)
    d = d_cam @ camera.rotation
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d.shape).copy()
    return origins, d


def project_point(camera: Camera, point) -> tuple[float, float, float] | None:
    """Project a world point; ``None`` when behind the camera or off-image."""
    x = camera.rotation @ np.asarray(point, dtype=np.float64) + camera.translation
    if x[2] <= _MIN_DEPTH:
        return None
    u = camera.fx * x[0] / x[2] + camera.cx
    v = camera.fy * x[1] / x[2] + camera.cy
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        return None
    return float(u), float(v), float(x[2])


def project_points(camera: Camera, points: np.ndarray):
    """Vectorized :func:`project_point`.

    Returns ``(u, v, depth, valid)``; entries where ``valid`` is False are
    meaningless.
    """
    x = points @ camera.rotation.T + camera.translation
    z = x[..., 2]
    valid = z > _MIN_DEPTH
    zs = np.where(valid, z, 1.0)
    u = camera.fx * x[..., 0] / zs + camera.cx
    v = camera.fy * x[..., 1] / zs + camera.cy
    valid &= (u >= 0) & (u < camera.width) & (v >= 0) & (v < camera.height)
    return u, v, z, valid


def pixel_index(u, v):
    """Integer pixel containing the continuous coordinate, i.e. round(u - 0.5) half-up."""
    return np.floor(u).astype(np.int64), np.floor(v).astype(np.int64)


def ring_cameras(n, *, radius, z, target=(0.0, 0.0, 0.0), fx, width, height,
                 phase=0.0, first_view_id=0) -> list[Camera]:
    """``n`` cameras evenly spaced on a horizontal circle at height ``z``, all looking at ``target``."""
    cams = []
    for i in range(n):
        a = phase + 2.0 * np.pi * i / n
        eye = np.array([radius * np.cos(a), radius * np.sin(a), z])
        cams.append(Camera.look_at(eye, target, fx=fx, width=width, height=height,
                                   view_id=first_view_id + i))
    return cams


def save_cameras(path, cameras) -> None:
    Path(path).write_text(json.dumps([c.to_record() for c in cameras], indent=1), encoding="utf-8")


_CAMERA_FIELDS = ("view_id", "fx", "fy", "cx", "cy", "width", "height", "rotation", "translation")


def load_cameras(path) -> list[Camera]:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(path, "camera file")
    try:
        records = json.loads(path.read_text(encoding="utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise MalformedFileError(path, f"invalid JSON ({exc})") from exc
    if not isinstance(records, list):
        raise MalformedFileError(path, "expected a JSON array of camera records")
    cams = []
    for i, rec in enumerate(records):
        if not isinstance(rec, dict):
            raise MalformedFileError(path, f"record {i} is not an object")
        for key in _CAMERA_FIELDS:
            if key not in rec:
                raise MalformedFileError(path, f"record {i} missing field '{key}'")
        if len(rec["rotation"]) != 9 or len(rec["translation"]) != 3:
            raise MalformedFileError(path, f"record {i}: rotation needs 9 and translation 3 values")
        try:
            cams.append(Camera.from_record(rec))
        except (InputError, TypeError, ValueError) as exc:
            raise MalformedFileError(path, f"record {i}: {exc}") from exc
    return cams
