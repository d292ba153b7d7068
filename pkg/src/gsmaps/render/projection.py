"""Covariance assembly and perspective EWA projection, with analytic adjoints.

Everything is written as elementwise array arithmetic (no BLAS calls) so a
Gaussian's result never depends on where it sits in the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .. import quat
from .camera import Camera

LOWPASS = 0.3
EXTENT_SIGMA = 3.0


def compose_covariance(scale, rotation) -> np.ndarray:
    """Sigma = R diag(s)^2 R^T for unit quaternions ``rotation`` (w, x, y, z)."""
    scale = np.asarray(scale, dtype=np.float64)
    M = quat.to_matrix(rotation) * scale[..., None, :]
    rows = [[sum(M[..., i, k] * M[..., j, k] for k in range(3)) for j in range(3)] for i in range(3)]
    return np.stack([np.stack(r, -1) for r in rows], -2)


@dataclass
class ProjectedGaussian:
    mean: np.ndarray  # (2,) pixels
    cov: np.ndarray  # (2, 2) pixels^2, low-pass included
    depth: float
    conic: np.ndarray  # (3,) inverse covariance entries (a, b, c)
    radius: float


@dataclass
class Projection:
    """Batch projection results plus what the backward pass needs."""

    mean2d: np.ndarray  # (P, 2)
    cov2d: np.ndarray  # (P, 3) entries (a, b, c) of [[a, b], [b, c]]
    conic: np.ndarray  # (P, 3)
    depth: np.ndarray  # (P,)
    radius: np.ndarray  # (P,)
    visible: np.ndarray  # (P,) bool
    T: np.ndarray  # (P, 2, 3) Jacobian times camera rotation
    U: np.ndarray  # (P, 2, 3) T R diag(s)
    R: np.ndarray  # (P, 3, 3)
    scale: np.ndarray  # (P, 3)
    rotation: np.ndarray  # (P, 4) as given
    rot_norm: np.ndarray  # (P,)

    def __len__(self):
        return len(self.depth)


def _conic(a, b, c):
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], -1), det


def _radius(a, b, c):
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    return EXTENT_SIGMA * np.sqrt(lam)


def pixel_bounds(mean2d, cov2d):
    """Inclusive pixel index ranges whose centers can lie inside the 3-sigma ellipse.

    The ellipse's bounding box has half-widths 3 sqrt(a) and 3 sqrt(c); one
    pixel of slack absorbs rounding.
    """
    hx = EXTENT_SIGMA * np.sqrt(cov2d[:, 0])
    hy = EXTENT_SIGMA * np.sqrt(cov2d[:, 2])
    x0 = np.floor(mean2d[:, 0] - hx - 0.5) - 1
    x1 = np.floor(mean2d[:, 0] + hx - 0.5) + 1
    y0 = np.floor(mean2d[:, 1] - hy - 0.5) - 1
    y1 = np.floor(mean2d[:, 1] + hy - 0.5) + 1
    return x0, x1, y0, y1


def _jacobian_rows(camera: Camera, view):
    """T = J W: rows of the projection Jacobian composed with the camera rotation."""
    W = camera.rotation
    x, y, z = view[:, 0], view[:, 1], view[:, 2]
    iz = 1.0 / z
    T = np.empty((len(z), 2, 3))
    for i in range(3):
        T[:, 0, i] = camera.fx * iz * W[0, i] - camera.fx * x * iz * iz * W[2, i]
        T[:, 1, i] = camera.fy * iz * W[1, i] - camera.fy * y * iz * iz * W[2, i]
    return T


def project_gaussians(camera: Camera, positions, scales, rotations, lowpass: float = LOWPASS) -> Projection:
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    scales = np.asarray(scales, dtype=np.float64).reshape(-1, 3)
    rotations = np.asarray(rotations, dtype=np.float64).reshape(-1, 4)
    P = len(positions)
    view = camera.to_view(positions)
    depth = view[:, 2]
    front = depth > camera.near
    safe_view = np.where(front[:, None], view, np.array([0.0, 0.0, 1.0]))
    rnorm = np.sqrt(sum(rotations[:, k] ** 2 for k in range(4)))
    q = rotations / np.where(rnorm > 0, rnorm, 1.0)[:, None]
    R = quat.to_matrix(q)
    T = _jacobian_rows(camera, safe_view)
    U = np.empty((P, 2, 3))
    for r in range(2):
        for k in range(3):
            U[:, r, k] = (T[:, r, 0] * R[:, 0, k] + T[:, r, 1] * R[:, 1, k] + T[:, r, 2] * R[:, 2, k]) * scales[:, k]
    a = U[:, 0, 0] ** 2 + U[:, 0, 1] ** 2 + U[:, 0, 2] ** 2 + lowpass
    b = U[:, 0, 0] * U[:, 1, 0] + U[:, 0, 1] * U[:, 1, 1] + U[:, 0, 2] * U[:, 1, 2]
    c = U[:, 1, 0] ** 2 + U[:, 1, 1] ** 2 + U[:, 1, 2] ** 2 + lowpass
    conic, det = _conic(a, b, c)
    radius = _radius(a, b, c)
    iz = 1.0 / safe_view[:, 2]
    mean2d = np.stack([camera.fx * safe_view[:, 0] * iz + camera.cx, camera.fy * safe_view[:, 1] * iz + camera.cy], -1)
    cov2d = np.stack([a, b, c], -1)
    x0, x1, y0, y1 = pixel_bounds(mean2d, cov2d)
    onscreen = (x1 >= 0) & (x0 <= camera.width - 1) & (y1 >= 0) & (y0 <= camera.height - 1)
    visible = front & onscreen & (det > 0) & np.isfinite(radius) & (rnorm > 0)
    return Projection(mean2d, cov2d, conic, depth, radius, visible, T, U, R, scales,
                      rotations, rnorm)


def project_gaussian(camera: Camera, position, cov3d, lowpass: float = LOWPASS) -> Optional[ProjectedGaussian]:
    """Single-Gaussian projection from a 3D covariance; None when culled."""
    position = np.asarray(position, dtype=np.float64).reshape(1, 3)
    view = camera.to_view(position)
    if not view[0, 2] > camera.near:
        return None
    T = _jacobian_rows(camera, view)[0]
    cov = T @ np.asarray(cov3d, dtype=np.float64) @ T.T + lowpass * np.eye(2)
    a, b, c = cov[0, 0], 0.5 * (cov[0, 1] + cov[1, 0]), cov[1, 1]
    conic, det = _conic(a, b, c)
    if not det > 0:
        return None
    radius = float(_radius(a, b, c))
    mean = camera.project(position)[0]
    x0, x1, y0, y1 = pixel_bounds(mean[None], np.array([[a, b, c]]))
    if x1[0] < 0 or x0[0] > camera.width - 1 or y1[0] < 0 or y0[0] > camera.height - 1:
        return None
    return ProjectedGaussian(mean, np.array([[a, b], [b, c]]), float(view[0, 2]), conic, radius)


def conic_backward(cov2d, d_conic):
    """Gradient w.r.t. covariance entries (a, b, c) from conic entries, b counted once."""
    a, b, c = cov2d[:, 0], cov2d[:, 1], cov2d[:, 2]
    dA, dB, dC = d_conic[:, 0], d_conic[:, 1], d_conic[:, 2]
    det = a * c - b * b
    i2 = 1.0 / (det * det)
    da = dA * (-c * c * i2) + dB * (b * c * i2) + dC * (-b * b * i2)
    db = dA * (2 * b * c * i2) + dB * (-1.0 / det - 2 * b * b * i2) + dC * (2 * a * b * i2)
    dc = dA * (-b * b * i2) + dB * (a * b * i2) + dC * (-a * a * i2)
    return da, db, dc


def rotation_matrix_backward(q, dR):
    """Gradient w.r.t. (w, x, y, z) of the quaternion matrix formula, given dL/dR."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = [[dR[:, i, j] for j in range(3)] for i in range(3)]
    dw = 2 * (-z * g[0][1] + y * g[0][2] + z * g[1][0] - x * g[1][2] - y * g[2][0] + x * g[2][1])
    dx = 2 * (y * g[0][1] + z * g[0][2] + y * g[1][0] - 2 * x * g[1][1] - w * g[1][2]
              + z * g[2][0] + w * g[2][1] - 2 * x * g[2][2])
    dy = 2 * (-2 * y * g[0][0] + x * g[0][1] + w * g[0][2] + x * g[1][0] + z * g[1][2]
              - w * g[2][0] + z * g[2][1] - 2 * y * g[2][2])
    dz = 2 * (-2 * z * g[0][0] - w * g[0][1] + x * g[0][2] + w * g[1][0] - 2 * z * g[1][1]
              + y * g[1][2] + x * g[2][0] + y * g[2][1])
    return np.stack([dw, dx, dy, dz], -1)


def projection_backward(proj: Projection, d_conic: np.ndarray):
    """Adjoint of conic(scale, rotation); positions are treated as constants.

    Returns (d_scale (P, 3), d_rotation (P, 4)); the rotation gradient is
    taken w.r.t. the quaternion as passed in, through its normalization.
    """
    da, db, dc = conic_backward(proj.cov2d, d_conic)
    U, T, R, s = proj.U, proj.T, proj.R, proj.scale
    dU0 = 2 * da[:, None] * U[:, 0] + db[:, None] * U[:, 1]
    dU1 = db[:, None] * U[:, 0] + 2 * dc[:, None] * U[:, 1]
    # U = T R diag(s)
    dM = np.empty((len(s), 3, 3))
    for i in range(3):
        for k in range(3):
            dM[:, i, k] = T[:, 0, i] * dU0[:, k] + T[:, 1, i] * dU1[:, k]
    d_scale = np.stack([dM[:, 0, k] * R[:, 0, k] + dM[:, 1, k] * R[:, 1, k] + dM[:, 2, k] * R[:, 2, k]
                        for k in range(3)], -1)
    dR = dM * s[:, None, :]
    n = np.where(proj.rot_norm > 0, proj.rot_norm, 1.0)[:, None]
    u = proj.rotation / n
    du = rotation_matrix_backward(u, dR)
    dot = du[:, 0] * u[:, 0] + du[:, 1] * u[:, 1] + du[:, 2] * u[:, 2] + du[:, 3] * u[:, 3]
    d_rot = (du - u * dot[:, None]) / n
    return d_scale, d_rot
