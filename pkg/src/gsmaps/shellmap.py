"""Texture-space Gaussian parameters: sampling, anchoring, lookup, activations, editing."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from ._npz import save_npz
from .mesh import RigBundle, ShellStack, face_areas

N_CHANNELS = 11
COLOR = slice(0, 3)
OPACITY = 3
SCALE = slice(4, 7)
ROTATION = slice(7, 11)

GSTX_MAGIC = b"GSTX"
GSTX_VERSION = 1
_GSTX_HEADER = struct.Struct("<4sIIIII")

logger = logging.getLogger(__name__)


def _frozen(a, dtype):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


class GaussianAnchors:
    """Per-Gaussian (shell, face, barycentric) anchors; immutable once built."""

    def __init__(self, shell_index, face_index, barycentric, uv):
        self.shell_index = _frozen(shell_index, np.int32)
        self.face_index = _frozen(face_index, np.int64)
        self.barycentric = _frozen(barycentric, np.float64).reshape(-1, 3)
        self.uv = _frozen(uv, np.float64).reshape(-1, 2)
        n = len(self.shell_index)
        if not (len(self.face_index) == len(self.barycentric) == len(self.uv) == n):
            raise ValueError("anchor arrays differ in length")
        if n and (self.barycentric.min() < 0 or np.abs(self.barycentric.sum(1) - 1).max() > 1e-6):
            raise ValueError("barycentric coordinates must be non-negative and sum to 1")

    def __len__(self):
        return len(self.shell_index)

    def __eq__(self, other):
        if not isinstance(other, GaussianAnchors):
            return NotImplemented
        return all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("shell_index", "face_index", "barycentric", "uv")
        )

    def positions(self, stack_vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
        """Barycentric interpolation on (N, V, 3) shell vertices."""
        tri = stack_vertices[self.shell_index[:, None], faces[self.face_index]]
        return np.einsum("nk,nki->ni", self.barycentric, tri)

    def save(self, path) -> None:
        save_npz(path, shell_index=self.shell_index, face_index=self.face_index,
                 barycentric=self.barycentric, uv=self.uv)

    @classmethod
    def load(cls, path) -> "GaussianAnchors":
        with np.load(path) as z:
            return cls(z["shell_index"], z["face_index"], z["barycentric"], z["uv"])


def largest_remainder(weights: np.ndarray, count: int) -> np.ndarray:
    """Integer allocation of ``count`` proportional to ``weights``.

    Floors the exact quotas, then hands the leftover units to the largest
    fractional parts (ties go to the lower index).
    """
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if not total > 0:
        raise ValueError("cannot allocate over zero total area")
    quota = count * weights / total
    base = np.floor(quota).astype(np.int64)
    left = count - int(base.sum())
    frac = quota - base
    order = np.lexsort((np.arange(len(weights)), -frac))
    base[order[:left]] += 1
    return base


def sample_gaussians(stack: ShellStack, total_count: int, seed: int = 0) -> GaussianAnchors:
    """Distribute Gaussians over the shells by triangle area.

    Each shell gets ``total_count // N`` samples (the remainder goes to the
    innermost shells). Within a shell, triangle counts follow
    ``largest_remainder`` on the triangle areas, and points inside a triangle
    are equal-area stratified along the square-root warp.
    """
    n_shells = stack.n_shells
    if total_count < n_shells:
        raise ValueError(f"need at least one Gaussian per shell ({n_shells}), got {total_count}")
    if stack.uvs is None:
        raise ValueError("shell stack has no UVs")
    rng = np.random.default_rng(seed)
    per_shell = np.full(n_shells, total_count // n_shells)
    per_shell[: total_count % n_shells] += 1
    n_faces = len(stack.faces)
    if per_shell.min() < n_faces:
        # every quota floors to zero and the remainder lands on the largest faces
        logger.warning("%d Gaussians per shell for %d faces: allocation will favor large triangles",
                       per_shell.min(), n_faces)

    shells, faces_out, barys = [], [], []
    for k, shell in enumerate(stack.shells):
        areas = face_areas(shell.vertices, shell.faces)
        if not areas.sum() > 0:
            raise ValueError(f"shell {k} has zero total area")
        counts = largest_remainder(areas, int(per_shell[k]))
        face_ids = np.repeat(np.arange(len(counts)), counts)
        starts = np.cumsum(counts) - counts
        stratum = np.arange(len(face_ids)) - np.repeat(starts, counts)
        r1 = (stratum + rng.random(len(face_ids))) / np.repeat(counts, counts)
        r2 = rng.random(len(face_ids))
        s = np.sqrt(r1)
        b = np.stack([1.0 - s, s * (1.0 - r2), s * r2], axis=1)
        shells.append(np.full(len(face_ids), k))
        faces_out.append(face_ids)
        barys.append(b)

    shell_index = np.concatenate(shells)
    face_index = np.concatenate(faces_out)
    bary = np.concatenate(barys)
    uv = anchor_uvs(face_index, bary, stack.uvs, stack.uv_faces)
    return GaussianAnchors(shell_index, face_index, bary, uv)


def anchor_uvs(face_index, barycentric, uvs, uv_faces) -> np.ndarray:
    """Texture coordinates of anchors by barycentric interpolation of UV corners."""
    face_index = np.asarray(face_index)
    tri = uvs[uv_faces[face_index]]
    e1, e2 = tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]
    area2 = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
    if np.any(area2 == 0):
        bad = int(face_index[np.flatnonzero(area2 == 0)[0]])
        raise ValueError(f"degenerate UV triangle for face {bad}")
    uv = np.einsum("nk,nki->ni", np.asarray(barycentric, dtype=np.float64), tri)
    return np.clip(uv, 0.0, 1.0)


def anchor_to_uv(shell_index: int, face_index: int, barycentric, stack: ShellStack) -> np.ndarray:
    if not 0 <= shell_index < stack.n_shells:
        raise IndexError(f"shell index {shell_index} out of range")
    return anchor_uvs([face_index], np.asarray(barycentric, dtype=np.float64)[None], stack.uvs, stack.uv_faces)[0]


def rasterize_uv(uvs: np.ndarray, uv_faces: np.ndarray, H: int, W: int) -> np.ndarray:
    """Boolean (H, W) map of texel centers covered by the UV triangles.

    Texel (row j, column i) has center ((i + 0.5) / W, (j + 0.5) / H).
    Points on an edge count only for top and left edges.
    """
    out = np.zeros((H, W), dtype=bool)
    if len(uv_faces) == 0:
        return out
    tri = uvs[uv_faces].copy()
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    area2 = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
    flip = area2 < 0
    tri[flip, 1], tri[flip, 2] = c[flip], b[flip]
    i0 = np.maximum(np.ceil(tri[:, :, 0].min(1) * W - 0.5), 0).astype(np.int64)
    i1 = np.minimum(np.floor(tri[:, :, 0].max(1) * W - 0.5), W - 1).astype(np.int64)
    j0 = np.maximum(np.ceil(tri[:, :, 1].min(1) * H - 0.5), 0).astype(np.int64)
    j1 = np.minimum(np.floor(tri[:, :, 1].max(1) * H - 0.5), H - 1).astype(np.int64)
    nw, nh = i1 - i0 + 1, j1 - j0 + 1
    keep = np.flatnonzero((area2 != 0) & (nw > 0) & (nh > 0))
    counts = nw[keep] * nh[keep]
    # one row per (triangle, texel in its bounding box)
    f = np.repeat(keep, counts)
    k = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    ii = i0[f] + k % nw[f]
    jj = j0[f] + k // nw[f]
    x = (ii + 0.5) / W
    y = (jj + 0.5) / H
    inside = np.ones(len(f), dtype=bool)
    for e0, e1 in ((0, 1), (1, 2), (2, 0)):
        p, q = tri[:, e0], tri[:, e1]
        dx, dy = q[:, 0] - p[:, 0], q[:, 1] - p[:, 1]
        top_left = ((dy == 0) & (dx > 0)) | (dy < 0)
        e = dx[f] * (y - p[f, 1]) - dy[f] * (x - p[f, 0])
        inside &= (e > 0) | ((e == 0) & top_left[f])
    out[jj[inside], ii[inside]] = True
    return out


def texel_mask(rig_or_stack, H: int, W: int) -> np.ndarray:
    return rasterize_uv(rig_or_stack.uvs, rig_or_stack.uv_faces, H, W)


def dominant_joint(weights: np.ndarray) -> np.ndarray:
    return np.argmax(weights, axis=1)


def region_from_parts(rig: RigBundle, part_names: Iterable[str], H: int, W: int) -> np.ndarray:
    """Texels covered by UV triangles whose vertices all belong to the parts.

    A vertex belongs to the parts when its dominant skinning joint is listed
    in any of them.
    """
    joints = set()
    for name in part_names:
        if name not in rig.parts:
            raise KeyError(f"unknown part {name!r}")
        joints.update(rig.parts[name])
    if not joints:
        return np.zeros((H, W), dtype=bool)
    in_part = np.isin(dominant_joint(rig.weights), sorted(joints))
    faces = np.flatnonzero(in_part[rig.faces].all(axis=1))
    return rasterize_uv(rig.uvs, rig.uv_faces[faces], H, W)


@dataclass
class ShellTextureStack:
    """Raw (pre-activation) parameter maps, shape (N, H, W, 11), plus UV coverage."""

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 4 or self.data.shape[3] != N_CHANNELS:
            raise ValueError(f"texture data must be (N, H, W, {N_CHANNELS}), got {self.data.shape}")
        if self.mask.shape != self.data.shape[:3]:
            raise ValueError(f"mask shape {self.mask.shape} does not match data {self.data.shape[:3]}")

    @property
    def shape(self):
        return self.data.shape[:3]

    def copy(self) -> "ShellTextureStack":
        return ShellTextureStack(self.data.copy(), self.mask.copy())

    @classmethod
    def initialized(cls, mask: np.ndarray, s_ref: float, color: float = 0.0, opacity: float = 0.0):
        """Fitting start point: scales at ``s_ref``, identity rotation."""
        mask = np.asarray(mask, dtype=bool)
        data = np.zeros(mask.shape + (N_CHANNELS,))
        data[..., COLOR] = color
        data[..., OPACITY] = opacity
        data[..., SCALE] = s_ref
        data[..., 7] = 1.0
        return cls(data, mask)

    def save(self, path) -> None:
        N, H, W = self.shape
        with open(path, "wb") as fh:
            fh.write(_GSTX_HEADER.pack(GSTX_MAGIC, GSTX_VERSION, N, H, W, N_CHANNELS))
            fh.write(self.data.astype("<f4").tobytes())
            fh.write(self.mask.astype(np.uint8).tobytes())

    @classmethod
    def load(cls, path) -> "ShellTextureStack":
        raw = Path(path).read_bytes()
        if len(raw) < _GSTX_HEADER.size:
            raise ValueError(f"{path}: truncated GSTX header")
        magic, version, N, H, W, C = _GSTX_HEADER.unpack_from(raw)
        if magic != GSTX_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != GSTX_VERSION:
            raise ValueError(f"{path}: unsupported GSTX version {version}")
        if C != N_CHANNELS:
            raise ValueError(f"{path}: expected {N_CHANNELS} channels, got {C}")
        n_data = N * H * W * C
        off = _GSTX_HEADER.size
        if len(raw) != off + 4 * n_data + N * H * W:
            raise ValueError(f"{path}: size does not match header")
        data = np.frombuffer(raw, dtype="<f4", count=n_data, offset=off).reshape(N, H, W, C)
        mask = np.frombuffer(raw, dtype=np.uint8, count=N * H * W, offset=off + 4 * n_data).reshape(N, H, W)
        return cls(data.astype(np.float64), mask.astype(bool))


class BilinearLookup:
    """Precomputed bilinear taps of anchors into an (N, H, W, C) texture stack.

    Texel centers sit at ((i + 0.5) / W, (j + 0.5) / H); addressing clamps at
    the borders.
    """

    def __init__(self, anchors: GaussianAnchors, shape):
        N, H, W = shape
        if len(anchors) and anchors.shell_index.max() >= N:
            bad = int(np.flatnonzero(anchors.shell_index >= N)[0])
            raise IndexError(f"anchor {bad} references shell {anchors.shell_index[bad]} of {N}")
        self.shape = (N, H, W)
        x = anchors.uv[:, 0] * W - 0.5
        y = anchors.uv[:, 1] * H - 0.5
        x0 = np.floor(x)
        y0 = np.floor(y)
        fx, fy = x - x0, y - y0
        x0 = x0.astype(np.int64)
        y0 = y0.astype(np.int64)
        xs = np.clip(np.stack([x0, x0 + 1, x0, x0 + 1], 1), 0, W - 1)
        ys = np.clip(np.stack([y0, y0, y0 + 1, y0 + 1], 1), 0, H - 1)
        shell = anchors.shell_index.astype(np.int64)[:, None]
        self.index = (shell * H + ys) * W + xs
        self.weight = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], 1)

    def __call__(self, data: np.ndarray) -> np.ndarray:
        flat = data.reshape(-1, data.shape[-1])
        return np.einsum("nk,nkc->nc", self.weight, flat[self.index])

    def adjoint(self, grad: np.ndarray) -> np.ndarray:
        """Scatter per-Gaussian gradients back onto the texels (fixed order)."""
        N, H, W = self.shape
        C = grad.shape[1]
        idx = self.index.ravel()
        w = self.weight.ravel()
        out = np.empty((N * H * W, C))
        for c in range(C):
            out[:, c] = np.bincount(idx, weights=w * np.repeat(grad[:, c], 4), minlength=N * H * W)
        return out.reshape(N, H, W, C)


def lookup_features(textures: ShellTextureStack, anchors: GaussianAnchors) -> np.ndarray:
    """Raw 11-vectors per Gaussian, bilinearly interpolated on its shell layer."""
    return BilinearLookup(anchors, textures.shape)(textures.data)


@dataclass(frozen=True)
class ActivationConfig:
    eps_color: float = 1e-3
    s_min: float = 1e-4
    s_max: float = 1.0

    def __post_init__(self):
        if not self.s_min > 0 or not self.s_min < self.s_max:
            raise ValueError(f"need 0 < s_min < s_max, got s_min={self.s_min}, s_max={self.s_max}")
        if self.eps_color < 0:
            raise ValueError("eps_color must be non-negative")

    @classmethod
    def from_s_ref(cls, s_ref: float, eps_color: float = 1e-3, s_min: float = 1e-4):
        """Scale cap at ten times the reference scale exp(s_ref)."""
        return cls(eps_color, s_min, max(10.0 * float(np.exp(s_ref)), 2 * s_min))


@dataclass
class GaussianParams:
    color: np.ndarray
    opacity: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray

    def __len__(self):
        return len(self.opacity)


# logits beyond this saturate sigmoid to exactly 0 or 1 in float64
_OPACITY_LOGIT_CLIP = 30.0
_ROT_EPS = 1e-8


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def apply_activations(raw: np.ndarray, config: ActivationConfig) -> GaussianParams:
    raw = np.asarray(raw, dtype=np.float64)
    eps = config.eps_color
    color = (1 + 2 * eps) * _sigmoid(raw[:, COLOR]) - eps
    opacity = _sigmoid(np.clip(raw[:, OPACITY], -_OPACITY_LOGIT_CLIP, _OPACITY_LOGIT_CLIP))
    scale = np.exp(np.clip(raw[:, SCALE], np.log(config.s_min), np.log(config.s_max)))
    q = raw[:, ROTATION]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    small = n[:, 0] < _ROT_EPS
    rotation = q / np.where(small[:, None], 1.0, n)
    rotation[small] = (1.0, 0.0, 0.0, 0.0)
    return GaussianParams(color, opacity, scale, rotation)


def activations_backward(raw: np.ndarray, config: ActivationConfig, d_color, d_opacity, d_scale,
                         d_rotation) -> np.ndarray:
    """Vector-Jacobian product of ``apply_activations`` w.r.t. the raw 11-vectors."""
    raw = np.asarray(raw, dtype=np.float64)
    out = np.zeros_like(raw)
    s = _sigmoid(raw[:, COLOR])
    out[:, COLOR] = (1 + 2 * config.eps_color) * s * (1 - s) * d_color
    xo = raw[:, OPACITY]
    so = _sigmoid(xo)
    inside = np.abs(xo) <= _OPACITY_LOGIT_CLIP
    out[:, OPACITY] = np.where(inside, so * (1 - so) * d_opacity, 0.0)
    xs = raw[:, SCALE]
    lo, hi = np.log(config.s_min), np.log(config.s_max)
    out[:, SCALE] = np.where((xs >= lo) & (xs <= hi), np.exp(xs) * d_scale, 0.0)
    q = raw[:, ROTATION]
    n = np.linalg.norm(q, axis=1, keepdims=True)
    ok = n[:, 0] >= _ROT_EPS
    safe = np.where(ok[:, None], n, 1.0)
    u = q / safe
    dq = (d_rotation - u * np.sum(u * d_rotation, axis=1, keepdims=True)) / safe
    out[:, ROTATION] = np.where(ok[:, None], dq, 0.0)
    return out


def swap_region(tex_a: ShellTextureStack, tex_b: ShellTextureStack, region: np.ndarray):
    """Exchange all shells' channels inside ``region``; values elsewhere are untouched."""
    if tex_a.data.shape != tex_b.data.shape:
        raise ValueError(f"texture shapes differ: {tex_a.data.shape} vs {tex_b.data.shape}")
    region = np.asarray(region, dtype=bool)
    if region.shape != tex_a.shape[1:]:
        raise ValueError(f"region shape {region.shape} does not match texture {tex_a.shape[1:]}")
    outside = region & ~(tex_a.mask.all(axis=0) & tex_b.mask.all(axis=0))
    if outside.any():
        j, i = np.argwhere(outside)[0]
        raise ValueError(f"region texel ({j}, {i}) lies outside the UV mask")
    a, b = tex_a.data.copy(), tex_b.data.copy()
    a[:, region] = tex_b.data[:, region]
    b[:, region] = tex_a.data[:, region]
    return ShellTextureStack(a, tex_a.mask.copy()), ShellTextureStack(b, tex_b.mask.copy())


def stack_mask(rig_or_stack, n_shells: int, H: int, W: int) -> np.ndarray:
    m = texel_mask(rig_or_stack, H, W)
    return np.broadcast_to(m, (n_shells, H, W)).copy()


def params_subset(params: GaussianParams, keep: Optional[np.ndarray]) -> GaussianParams:
    if keep is None:
        return params
    return GaussianParams(params.color[keep], params.opacity[keep], params.scale[keep], params.rotation[keep])
