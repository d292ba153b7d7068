"""Losses, reference scale, adaptive-moment steps and the inverse-rendering fitter."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import _backend
from .articulation import Pose
from .avatar import GaussianAvatar
from .mesh import RigBundle, ShellStack
from .render import Camera, RenderOptions, RenderOutput, render, render_backward
from .shellmap import SCALE, GaussianAnchors, ShellTextureStack, stack_mask


class DuplicatePointError(ValueError):
    pass


def _grid(positions: np.ndarray):
    """Uniform grid sized for roughly one point per occupied cell along each axis."""
    lo = positions.min(axis=0)
    extent = positions.max(axis=0) - lo
    n = len(positions)
    span = float(extent.max())
    cell_size = span / max(1.0, np.ceil(n ** (1.0 / 3.0))) if span > 0 else 1.0
    dims = (np.floor(extent / cell_size).astype(np.int64) + 1)
    cell = np.minimum(np.floor((positions - lo) / cell_size).astype(np.int64), dims - 1)
    key = (cell[:, 0] * dims[1] + cell[:, 1]) * dims[2] + cell[:, 2]
    order = np.argsort(key, kind="stable").astype(np.int64)
    keys, starts = np.unique(key[order], return_index=True)
    starts = np.append(starts, n).astype(np.int64)
    return np.ascontiguousarray(cell), keys.astype(np.int64), starts, order, dims, cell_size


def nearest_neighbors(positions, method: str = "grid", threads: Optional[int] = None,
                      backend: Optional[str] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Distance to and index of the nearest other point (ties go to the lower index).

    ``method="brute"`` is the O(n^2) oracle; both evaluate the same distance
    arithmetic, so they agree exactly.
    """
    pts = np.ascontiguousarray(positions, dtype=np.float64).reshape(-1, 3)
    if len(pts) < 2:
        raise ValueError("need at least two points")
    if method == "brute":
        dist = np.empty(len(pts))
        idx = np.empty(len(pts), dtype=np.int64)
        for i in range(len(pts)):
            d = pts[i] - pts
            d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
            d2[i] = np.inf
            idx[i] = int(np.argmin(d2))
            dist[i] = np.sqrt(d2[idx[i]])
        return dist, idx
    if method != "grid":
        raise ValueError(f"unknown method {method!r}")
    cell, keys, starts, order, dims, cell_size = _grid(pts)
    kern = _backend.get(backend)
    return kern.grid_nearest(pts, cell, keys, starts, order, dims, cell_size, threads or _backend.default_threads())


def compute_s_ref(positions, threads: Optional[int] = None, backend: Optional[str] = None) -> float:
    """Mean log nearest-neighbour distance among the points."""
    dist, idx = nearest_neighbors(positions, "grid", threads, backend)
    zero = np.flatnonzero(dist == 0)
    if len(zero):
        i = int(zero[0])
        raise DuplicatePointError(f"points {i} and {int(idx[i])} coincide")
    # exactly rounded sum: the result does not depend on point order
    return math.fsum(np.log(dist).tolist()) / len(dist)


def scaling_reg(raw_scale: np.ndarray, mask: np.ndarray, s_ref: float):
    """Mean over masked texels and the 3 scale channels of (raw - s_ref)^2, with its gradient."""
    raw_scale = np.asarray(raw_scale, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if raw_scale.shape[:-1] != mask.shape or raw_scale.shape[-1] != 3:
        raise ValueError(f"scale texture {raw_scale.shape} does not match mask {mask.shape}")
    count = int(mask.sum()) * 3
    grad = np.zeros_like(raw_scale)
    if count == 0:
        return 0.0, grad
    diff = raw_scale[mask] - s_ref
    grad[mask] = 2.0 * diff / count
    return float(np.sum(diff * diff) / count), grad


def photometric_loss(rendered: RenderOutput, target_color: np.ndarray, target_alpha: np.ndarray,
                     lambda_m: float = 1.0):
    """MSE over color channels plus ``lambda_m`` times the alpha MSE, with exact adjoints."""
    if rendered.color.shape != np.shape(target_color) or rendered.alpha.shape != np.shape(target_alpha):
        raise ValueError(f"image size {rendered.color.shape[:2]} does not match target "
                         f"{np.shape(target_color)[:2]}")
    dc = rendered.color - target_color
    da = rendered.alpha - target_alpha
    loss = float(np.mean(dc * dc) + lambda_m * np.mean(da * da))
    return loss, 2.0 * dc / dc.size, 2.0 * lambda_m * da / da.size


@dataclass
class OptimizerState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros_like(cls, params: np.ndarray) -> "OptimizerState":
        return cls(np.zeros_like(params, dtype=np.float64), np.zeros_like(params, dtype=np.float64), 0)


def optimizer_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState, lr: float = 0.002,
                   betas: Tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected adaptive-moment step; returns new params and a new state."""
    if params.shape != grads.shape or state.m.shape != params.shape:
        raise ValueError(f"shape mismatch: params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise FloatingPointError(f"non-finite gradient at texel {loc}")
    b1, b2 = betas
    t = state.step + 1
    m = b1 * state.m + (1 - b1) * grads
    v = b2 * state.v + (1 - b2) * grads * grads
    m_hat = m / (1 - b1**t)
    v_hat = v / (1 - b2**t)
    return params - lr * m_hat / (np.sqrt(v_hat) + eps), OptimizerState(m, v, t)


@dataclass
class FitConfig:
    cameras: Sequence[Camera] = ()
    targets: Sequence[Tuple[np.ndarray, np.ndarray]] = ()  # (color (H, W, 3), alpha (H, W)) per camera
    poses: Optional[Sequence[Optional[Pose]]] = None  # per camera; None means canonical
    iterations: int = 2000
    lr: float = 0.002
    betas: Tuple[float, float] = (0.9, 0.999)
    lambda_s: float = 0.1
    lambda_m: float = 1.0
    background: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    batch_size: Optional[int] = None  # views per iteration; None = all
    seed: int = 0
    log_interval: int = 100
    threads: Optional[int] = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("moment decays must lie in (0, 1)")
        if len(self.cameras) != len(self.targets):
            raise ValueError(f"{len(self.cameras)} cameras but {len(self.targets)} targets")
        if self.poses is not None and len(self.poses) != len(self.cameras):
            raise ValueError("need one pose per camera")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")


@dataclass
class FitResult:
    textures: ShellTextureStack
    trace: List[Tuple[int, float, float, float]] = field(default_factory=list)  # it, photometric, reg, total


def initial_textures(stack: ShellStack, H: int, W: int, s_ref: float, rig_or_stack=None) -> ShellTextureStack:
    mask = stack_mask(rig_or_stack if rig_or_stack is not None else stack, stack.n_shells, H, W)
    return ShellTextureStack.initialized(mask, s_ref)


def loss_and_grad(avatar: GaussianAvatar, data: np.ndarray, config: FitConfig, views: Sequence[int]):
    """Total loss (photometric averaged over ``views`` + lambda_s * scaling_reg) and its texture gradient."""
    opts = RenderOptions(threads=config.threads)
    grad = np.zeros_like(data)
    photo = 0.0
    for k in views:
        pose = config.poses[k] if config.poses is not None else None
        scene, ctx = avatar.scene(pose, data)
        out = render(config.cameras[k], scene, config.background, opts)
        color, alpha = config.targets[k]
        loss, dC, dA = photometric_loss(out, color, alpha, config.lambda_m)
        photo += loss / len(views)
        g = render_backward(out, scene, dC / len(views), dA / len(views))
        grad += avatar.backward(ctx, g)
    reg, dreg = scaling_reg(data[..., SCALE], avatar.textures.mask, avatar.s_ref)
    grad[..., SCALE] += config.lambda_s * dreg
    return photo, reg, photo + config.lambda_s * reg, grad


def fit(rig: Optional[RigBundle], stack: ShellStack, anchors: GaussianAnchors, config: FitConfig,
        textures: Optional[ShellTextureStack] = None, texture_size: Tuple[int, int] = (512, 512),
        s_ref: Optional[float] = None,
        callback: Optional[Callable[[int, ShellTextureStack, Tuple], None]] = None) -> FitResult:
    """Optimize the raw texture stack so renders match the targets.

    Without ``textures`` the stack starts at scale s_ref, opacity and color
    raw 0 and identity rotation. ``callback(iteration, textures, trace_row)``
    runs every ``log_interval`` iterations and after the last one; a true
    return value stops the fit there.
    """
    if s_ref is None:
        s_ref = compute_s_ref(anchors.positions(stack.vertex_array(), stack.faces), config.threads)
    if textures is None:
        textures = initial_textures(stack, *texture_size, s_ref, rig if rig is not None else stack)
    avatar = GaussianAvatar(rig, stack, anchors, textures, s_ref)
    data = textures.data.copy()
    state = OptimizerState.zeros_like(data)
    rng = np.random.default_rng(config.seed)
    n_views = len(config.cameras)
    trace = []
    for it in range(config.iterations):
        if config.batch_size is None or config.batch_size >= n_views:
            views = range(n_views)
        else:
            views = np.sort(rng.choice(n_views, config.batch_size, replace=False))
        photo, reg, total, grad = loss_and_grad(avatar, data, config, views)
        row = (it, photo, reg, total)
        trace.append(row)
        data, state = optimizer_step(data, grad, state, config.lr, config.betas)
        done = it + 1 == config.iterations
        if callback is not None and (done or (config.log_interval and (it + 1) % config.log_interval == 0)):
            if callback(it + 1, ShellTextureStack(data.copy(), textures.mask), row):
                break
    return FitResult(ShellTextureStack(data, textures.mask.copy()), trace)


def write_trace_csv(trace, path) -> None:
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["iteration", "photometric", "scaling_reg", "total"])
        for it, photo, reg, total in trace:
            w.writerow([it, repr(float(photo)), repr(float(reg)), repr(float(total))])
