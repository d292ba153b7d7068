"""Tile-based alpha compositing of projected Gaussians and its adjoint."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .. import _backend
from .camera import Camera
from .projection import LOWPASS, Projection, pixel_bounds, project_gaussians, projection_backward

ALPHA_MAX = 0.99
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4
# 3-sigma Mahalanobis cut: 0.5 * 3^2
POWER_CUT = 4.5
TILE = 16


@dataclass
class SplatScene:
    """Activated per-Gaussian parameters; ``ids`` default to 0..P-1."""

    positions: np.ndarray
    rotations: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    ids: Optional[np.ndarray] = None
    shell_index: Optional[np.ndarray] = None

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        P = len(self.positions)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(P, 4)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(P, 3)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(P)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(P, 3)
        self.ids = np.arange(P, dtype=np.int64) if self.ids is None else np.asarray(self.ids, dtype=np.int64)
        if self.ids.shape != (P,) or len(np.unique(self.ids)) != P:
            raise ValueError("scene ids must be unique, one per Gaussian")
        if self.shell_index is not None:
            self.shell_index = np.asarray(self.shell_index, dtype=np.int64).reshape(P)
        if np.any((self.opacities < 0) | (self.opacities > 1)):
            raise ValueError("opacities must lie in [0, 1]")
        if np.any(self.scales <= 0):
            raise ValueError("scales must be positive")

    def __len__(self):
        return len(self.positions)

    @classmethod
    def empty(cls) -> "SplatScene":
        return cls(np.zeros((0, 3)), np.zeros((0, 4)), np.zeros((0, 3)), np.zeros(0), np.zeros((0, 3)))

    def fingerprint(self) -> str:
        h = hashlib.blake2b(digest_size=16)
        for a in (self.positions, self.rotations, self.scales, self.opacities, self.colors, self.ids):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class RenderOptions:
    alpha_only: bool = False
    shell_filter: Optional[frozenset] = None
    gaussian_mask: Optional[frozenset] = None  # ids to keep
    tile: int = TILE
    alpha_max: float = ALPHA_MAX
    alpha_min: float = ALPHA_MIN
    t_min: float = T_MIN
    power_cut: float = POWER_CUT
    lowpass: float = LOWPASS
    threads: Optional[int] = None
    backend: Optional[str] = None

    def __post_init__(self):
        if self.shell_filter is not None:
            object.__setattr__(self, "shell_filter", frozenset(int(s) for s in self.shell_filter))
        if self.gaussian_mask is not None:
            object.__setattr__(self, "gaussian_mask", frozenset(int(s) for s in self.gaussian_mask))
        if self.tile < 1:
            raise ValueError("tile size must be positive")


@dataclass
class RenderOutput:
    color: np.ndarray  # (H, W, 3)
    alpha: np.ndarray  # (H, W)
    transmittance: np.ndarray  # (H, W)
    # intermediates for the backward pass
    scene_key: str = ""
    order: np.ndarray = field(default=None, repr=False)  # scene indices in depth order
    projection: Optional[Projection] = field(default=None, repr=False)
    ranges: np.ndarray = field(default=None, repr=False)
    gids: np.ndarray = field(default=None, repr=False)
    n_used: np.ndarray = field(default=None, repr=False)
    background: np.ndarray = field(default=None, repr=False)
    camera: Optional[Camera] = field(default=None, repr=False)
    options: Optional[RenderOptions] = field(default=None, repr=False)


@dataclass
class RenderGradients:
    color: np.ndarray  # (P, 3)
    opacity: np.ndarray  # (P,)
    scale: np.ndarray  # (P, 3)
    rotation: np.ndarray  # (P, 4)


def _selected(scene: SplatScene, options: RenderOptions) -> np.ndarray:
    keep = np.ones(len(scene), dtype=bool)
    if options.shell_filter is not None:
        if scene.shell_index is None:
            raise ValueError("shell_filter needs per-Gaussian shell indices on the scene")
        keep &= np.isin(scene.shell_index, np.fromiter(options.shell_filter, np.int64))
    if options.gaussian_mask is not None:
        keep &= np.isin(scene.ids, np.fromiter(options.gaussian_mask, np.int64))
    return np.flatnonzero(keep)


def _prepare(camera, scene, background, options):
    """Filter, project, cull and depth-sort; returns sorted scene indices and per-Gaussian inputs."""
    sel = _selected(scene, options)
    proj = project_gaussians(camera, scene.positions[sel], scene.scales[sel], scene.rotations[sel], options.lowpass)
    vis = np.flatnonzero(proj.visible)
    # ascending depth, ties by ascending id
    vis = vis[np.lexsort((scene.ids[sel][vis], proj.depth[vis]))]
    order = sel[vis]
    proj = _subset(proj, vis)
    bg = np.zeros(3) if options.alpha_only else np.asarray(background, dtype=np.float64).reshape(3)
    colors = np.ones((len(order), 3)) if options.alpha_only else np.ascontiguousarray(scene.colors[order])
    return order, proj, colors, bg


def _subset(proj: Projection, idx) -> Projection:
    return Projection(*(getattr(proj, f)[idx] for f in
                        ("mean2d", "cov2d", "conic", "depth", "radius", "visible", "T", "U", "R", "scale",
                         "rotation", "rot_norm")))


def bin_tiles(mean2d, cov2d, width, height, tile):
    """Tile ranges and per-tile Gaussian lists (in input order, which is depth order)."""
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    x0, x1, y0, y1 = pixel_bounds(mean2d, cov2d)
    tx0 = (np.clip(x0, 0, width - 1) // tile).astype(np.int64)
    tx1 = (np.clip(x1, 0, width - 1) // tile).astype(np.int64)
    ty0 = (np.clip(y0, 0, height - 1) // tile).astype(np.int64)
    ty1 = (np.clip(y1, 0, height - 1) // tile).astype(np.int64)
    nx = tx1 - tx0 + 1
    counts = nx * (ty1 - ty0 + 1)
    total = int(counts.sum())
    g = np.repeat(np.arange(len(counts), dtype=np.int64), counts)
    local = np.arange(total, dtype=np.int64) - np.repeat(np.cumsum(counts) - counts, counts)
    tiles = (ty0[g] + local // nx[g]) * ntx + tx0[g] + local % nx[g]
    perm = np.argsort(tiles, kind="stable")
    gids = np.ascontiguousarray(g[perm])
    ranges = np.zeros(ntx * nty + 1, dtype=np.int64)
    np.cumsum(np.bincount(tiles, minlength=ntx * nty), out=ranges[1:])
    return ranges, gids


def _kernel_args(proj, opac, colors, ranges, gids, bg, camera, options):
    return (np.ascontiguousarray(proj.mean2d), np.ascontiguousarray(proj.conic), np.ascontiguousarray(opac),
            colors, ranges, gids, bg, camera.width, camera.height, options.tile, options.alpha_max,
            options.alpha_min, options.t_min, options.power_cut,
            options.threads or _backend.default_threads())


def render(camera: Camera, scene: SplatScene, background=(0.0, 0.0, 0.0),
           options: Optional[RenderOptions] = None) -> RenderOutput:
    """Composite the scene front to back over ``background``."""
    options = options or RenderOptions()
    order, proj, colors, bg = _prepare(camera, scene, background, options)
    ranges, gids = bin_tiles(proj.mean2d, proj.cov2d, camera.width, camera.height, options.tile)
    kern = _backend.get(options.backend)
    args = _kernel_args(proj, scene.opacities[order], colors, ranges, gids, bg, camera, options)
    color, trans, n_used = kern.rasterize_forward(*args)
    return RenderOutput(color, 1.0 - trans, trans, scene.fingerprint(), order, proj, ranges, gids, n_used,
                        np.asarray(background, dtype=np.float64).reshape(3), camera, options)


def render_backward(output: RenderOutput, scene: SplatScene, d_color, d_alpha=None) -> RenderGradients:
    """Exact adjoint of ``render`` w.r.t. colors, opacities, scales and rotations."""
    if output.order is None or output.scene_key != scene.fingerprint():
        raise ValueError("render output was not produced from this scene")
    camera, options = output.camera, output.options
    H, W = camera.height, camera.width
    d_color = np.ascontiguousarray(np.broadcast_to(np.asarray(d_color, dtype=np.float64), (H, W, 3)))
    d_alpha = np.zeros((H, W)) if d_alpha is None else np.asarray(d_alpha, dtype=np.float64)
    d_alpha = np.ascontiguousarray(np.broadcast_to(d_alpha, (H, W)))
    P = len(scene)
    grads = RenderGradients(np.zeros((P, 3)), np.zeros(P), np.zeros((P, 3)), np.zeros((P, 4)))
    order, proj = output.order, output.projection
    n = len(order)
    if n == 0:
        return grads
    bg = np.zeros(3) if options.alpha_only else output.background
    colors = np.ones((n, 3)) if options.alpha_only else np.ascontiguousarray(scene.colors[order])
    kern = _backend.get(options.backend)
    args = _kernel_args(proj, scene.opacities[order], colors, output.ranges, output.gids, bg, camera, options)
    gpair = kern.rasterize_backward(*args, output.transmittance, output.n_used, d_color, d_alpha)
    # fixed-order reduction of per-(tile, Gaussian) partials
    g = np.stack([np.bincount(output.gids, weights=gpair[:, c], minlength=n) for c in range(7)], -1)
    d_scale, d_rot = projection_backward(proj, g[:, 1:4])
    grads.opacity[order] = g[:, 0]
    if not options.alpha_only:
        grads.color[order] = g[:, 4:7]
    grads.scale[order] = d_scale
    grads.rotation[order] = d_rot
    return grads


def render_reference(camera: Camera, scene: SplatScene, background=(0.0, 0.0, 0.0),
                     options: Optional[RenderOptions] = None) -> RenderOutput:
    """Tile-free oracle: every pixel visits every Gaussian in depth order.

    Uses the same per-pixel rules as ``render`` (alpha clamp, skip threshold,
    3-sigma cut, transmittance cutoff) but no binning and no compiled code.
    """
    options = options or RenderOptions()
    order, proj, colors, bg = _prepare(camera, scene, background, options)
    H, W = camera.height, camera.width
    px, py = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    T = np.ones((H, W))
    C = np.zeros((H, W, 3))
    live = np.ones((H, W), dtype=bool)
    opac = scene.opacities[order]
    for i in range(len(order)):
        dx = px - proj.mean2d[i, 0]
        dy = py - proj.mean2d[i, 1]
        A, B, Cc = proj.conic[i]
        power = 0.5 * (A * dx * dx + Cc * dy * dy) + B * dx * dy
        with np.errstate(over="ignore"):
            a = np.minimum(opac[i] * np.exp(-power), options.alpha_max)
        hit = live & (power <= options.power_cut) & (power >= 0.0) & (a >= options.alpha_min)
        test_T = T * (1.0 - a)
        stop = hit & (test_T < options.t_min)
        live &= ~stop
        hit &= ~stop
        C[hit] += colors[i] * (a[hit] * T[hit])[:, None]
        T[hit] = test_T[hit]
    color = C + T[..., None] * bg
    return RenderOutput(color, 1.0 - T, T)
