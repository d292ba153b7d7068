"""Pinhole cameras: world-to-camera rigid transform plus intrinsics in pixels.

Camera space looks along +z with image x to the right and image y down.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List

import numpy as np


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    near: float = 0.01

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.width, self.height = int(self.width), int(self.height)
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not self.near > 0:
            raise ValueError(f"near plane must be positive, got {self.near}")
        if self.width < 1 or self.height < 1:
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError(f"camera rotation is not orthonormal (error {err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world space."""
        return -self.rotation.T @ self.translation

    def to_view(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        R, t = self.rotation, self.translation
        # written out so every point is transformed by the same arithmetic
        return np.stack([p[..., 0] * R[i, 0] + p[..., 1] * R[i, 1] + p[..., 2] * R[i, 2] + t[i] for i in range(3)], -1)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Pixel coordinates of world points (no near-plane test)."""
        v = self.to_view(points)
        return np.stack([self.fx * v[..., 0] / v[..., 2] + self.cx, self.fy * v[..., 1] / v[..., 2] + self.cy], -1)

    def resized(self, width: int, height: int) -> "Camera":
        sx, sy = width / self.width, height / self.height
        return Camera(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height,
                      self.rotation.copy(), self.translation.copy(), self.near)

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "rotation": self.rotation.tolist(), "translation": self.translation.tolist(),
            "near": self.near,
        }


def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 40.0, width: int = 512, height: int = 512,
            near: float = 0.01) -> Camera:
    """Camera at ``eye`` facing ``target``; ``fov_deg`` is the vertical field of view."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f /= np.linalg.norm(f)
    r = np.cross(f, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(r) < 1e-12:
        raise ValueError("up vector is parallel to the viewing direction")
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f])
    focal = 0.5 * height / np.tan(0.5 * np.radians(fov_deg))
    return Camera(focal, focal, 0.5 * width, 0.5 * height, width, height, R, -R @ eye, near)


def orbit_cameras(center, radius: float, count: int, elevation_deg: float = 0.0, start_deg: float = 0.0,
                  **kwargs) -> List[Camera]:
    """``count`` cameras evenly spaced on a circle around ``center`` (y up)."""
    center = np.asarray(center, dtype=np.float64)
    out = []
    el = np.radians(elevation_deg)
    for k in range(count):
        az = np.radians(start_deg) + 2 * np.pi * k / count
        offset = radius * np.array([np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)])
        out.append(look_at(center + offset, center, **kwargs))
    return out


def default_camera(vertices: np.ndarray, width: int = 512, height: int = 512, fov_deg: float = 40.0) -> Camera:
    """Frontal view (looking down -z from +z) framing the bounding box of ``vertices``."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * max(hi[0] - lo[0], hi[1] - lo[1]) * 1.1
    dist = half / np.tan(0.5 * np.radians(fov_deg)) + (hi[2] - center[2])
    return look_at(center + np.array([0.0, 0.0, dist]), center, fov_deg=fov_deg, width=width, height=height)


def camera_from_dict(doc: dict) -> Camera:
    if "eye" in doc:
        return look_at(doc["eye"], doc["target"], doc.get("up", (0.0, 1.0, 0.0)), doc.get("fov_deg", 40.0),
                       doc.get("width", 512), doc.get("height", 512), doc.get("near", 0.01))
    keys = ("fx", "fy", "cx", "cy", "width", "height")
    missing = [k for k in keys if k not in doc]
    if missing:
        raise ValueError(f"camera is missing {', '.join(missing)}")
    return Camera(*(doc[k] for k in keys), doc.get("rotation", np.eye(3)), doc.get("translation", np.zeros(3)),
                  doc.get("near", 0.01))


def load_cameras(path) -> List[Camera]:
    """A JSON camera object, a list of them, or ``{"cameras": [...]}``."""
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "cameras" in doc:
        doc = doc["cameras"]
    if isinstance(doc, dict):
        doc = [doc]
    return [camera_from_dict(d) for d in doc]


def save_cameras(cameras: List[Camera], path) -> None:
    Path(path).write_text(json.dumps({"cameras": [c.to_dict() for c in cameras]}, indent=1))
