"""Procedural texture stacks for benchmarks, golden images and examples."""

from __future__ import annotations

from typing import Optional

import numpy as np

from .avatar import GaussianAvatar
from .mesh import RigBundle, ShellStack
from .optimize import compute_s_ref
from .shellmap import COLOR, OPACITY, SCALE, GaussianAnchors, ShellTextureStack, stack_mask


def striped_textures(mask: np.ndarray, s_ref: float, opacity_raw: float = 1.5, scale_boost: float = 0.0,
                     seed: int = 0) -> ShellTextureStack:
    """Smooth color bands in UV plus a little seeded noise; scales at s_ref + boost."""
    N, H, W = mask.shape
    tex = ShellTextureStack.initialized(mask, s_ref + scale_boost, opacity=opacity_raw)
    v, u = np.meshgrid((np.arange(H) + 0.5) / H, (np.arange(W) + 0.5) / W, indexing="ij")
    noise = np.random.default_rng(seed).normal(scale=0.2, size=(N, H, W, 3))
    for n in range(N):
        tex.data[n, ..., 0] = 2.0 * np.sin(2 * np.pi * 2 * u + n)
        tex.data[n, ..., 1] = 2.0 * np.cos(2 * np.pi * 3 * v)
        tex.data[n, ..., 2] = 1.5 * np.sin(2 * np.pi * (u + v))
    tex.data[..., COLOR] += noise
    tex.data[..., OPACITY] = opacity_raw
    tex.data[..., SCALE] = s_ref + scale_boost
    return tex


def demo_avatar(rig: Optional[RigBundle], stack: ShellStack, anchors: GaussianAnchors, H: int, W: int,
                seed: int = 0, **kwargs) -> GaussianAvatar:
    s_ref = compute_s_ref(anchors.positions(stack.vertex_array(), stack.faces))
    mask = stack_mask(rig if rig is not None else stack, stack.n_shells, H, W)
    return GaussianAvatar(rig, stack, anchors, striped_textures(mask, s_ref, seed=seed, **kwargs), s_ref)
